//! Labelled datasets and their CSV export.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inputs as rows of `x` (`n×d`), one label per row, and optionally the
/// latent coordinates each input was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    pub latents: Option<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if x.rank() != 2 || x.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                detail: format!("{} rows for {} labels", x.rows(), labels.len()),
            });
        }
        Ok(Dataset {
            x,
            labels,
            latents: None,
        })
    }

    pub fn with_latents(mut self, latents: Tensor<T>) -> Result<Self> {
        if latents.rows() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset latents",
                detail: format!("{} rows", latents.rows()),
            });
        }
        self.latents = Some(latents);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn point(&self, i: usize) -> &[T] {
        self.x.row_slice(i)
    }

    pub fn latent(&self, i: usize) -> Option<&[T]> {
        self.latents.as_ref().map(|l| l.row_slice(i))
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let gather = |t: &Tensor<T>| {
            let c = t.cols();
            let data = idx
                .iter()
                .flat_map(|&i| t.row_slice(i).iter().copied())
                .collect();
            Tensor::matrix(idx.len(), c, data).expect("gathered rows")
        };
        Dataset {
            x: gather(&self.x),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            latents: self.latents.as_ref().map(gather),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        let conv = |t: &Tensor<T>| t.cast::<U>();
        Dataset {
            x: conv(&self.x),
            labels: self.labels.clone(),
            latents: self.latents.as_ref().map(conv),
        }
    }

    /// Writes `x_0,…,x_{d-1},label` rows with shortest round-trip formatting.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let mut line = String::new();
            for v in self.point(i) {
                line.push_str(&format!("{v},"));
            }
            line.push_str(&self.labels[i].to_string());
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}
