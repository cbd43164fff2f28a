//! Feed-forward classifiers with logits, probabilities and input gradients.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, NodeId, Unary};
use crate::error::{Error, Result};
use crate::io::{read_section, write_section, Reader, SectionTag, Writer};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Softplus,
    Tanh,
    Relu,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Softplus => 1,
            Activation::Tanh => 2,
            Activation::Relu => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Activation::Identity,
            1 => Activation::Softplus,
            2 => Activation::Tanh,
            3 => Activation::Relu,
            other => return Err(Error::Format(format!("unknown activation tag {other}"))),
        })
    }

    fn unary(self) -> Option<Unary> {
        match self {
            Activation::Identity => None,
            Activation::Softplus => Some(Unary::Softplus),
            Activation::Tanh => Some(Unary::Tanh),
            Activation::Relu => Some(Unary::Relu),
        }
    }
}

/// Which output an input gradient is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSelector {
    Class(usize),
    /// The argmax class at the evaluation point, held fixed.
    Predicted,
    /// Sum over all classes.
    Sum,
}

/// Whether gradients are taken of logits (default), of softmax outputs, or
/// of log-softmax outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputSpace {
    #[default]
    Logits,
    Probabilities,
    LogProbabilities,
}

/// `weight` is `out×in`, `bias` is `1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    /// Gaussian weights scaled by `1/√fan_in`, zero biases. Hidden layers use
    /// `activation`, the output layer is affine.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "architecture needs at least one layer".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer sizes must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * scale))
                .collect();
            let last = i == sizes.len() - 2;
            layers.push(Layer {
                weight: Arc::new(Tensor::matrix(fan_out, fan_in, data)?),
                bias: Arc::new(Tensor::zeros(&[1, fan_out])),
                activation: if last {
                    Activation::Identity
                } else {
                    activation
                },
            });
        }
        Ok(Model { layers })
    }

    /// Single affine layer `z = W x + b`.
    pub fn linear(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        Self::from_layers(vec![Layer {
            weight: Arc::new(weight),
            bias: Arc::new(Tensor::row(bias)),
            activation: Activation::Identity,
        }])
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "architecture needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rank() != 2 || l.bias.shape() != [1, l.weight.rows()] {
                return Err(Error::ShapeMismatch {
                    op: "model",
                    detail: format!(
                        "layer {i}: weight {:?}, bias {:?}",
                        l.weight.shape(),
                        l.bias.shape()
                    ),
                });
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(Error::NonFinite {
                    op: "model parameters",
                });
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::ShapeMismatch {
                    op: "model",
                    detail: format!("layer {i} does not chain"),
                });
            }
        }
        Ok(Model { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.rows()));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Parameter tensors in the order weight₀, bias₀, weight₁, …
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&*l.weight, &*l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [Arc::make_mut(&mut l.weight), Arc::make_mut(&mut l.bias)])
            .collect()
    }

    /// Adds the parameters to `g` as input leaves, in [`Model::params`] order.
    pub fn param_nodes(&self, g: &mut Graph<T>) -> Result<Vec<NodeId>> {
        let mut ids = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            ids.push(g.input_shared(Arc::clone(&l.weight))?);
            ids.push(g.input_shared(Arc::clone(&l.bias))?);
        }
        Ok(ids)
    }

    /// Records the forward pass for an `n×d` input node; returns `n×C` logits.
    pub fn build(&self, g: &mut Graph<T>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::InvalidArgument("parameter node count".into()));
        }
        self.check_dim(g.value(x).cols())?;
        let mut h = x;
        for (l, p) in self.layers.iter().zip(params.chunks(2)) {
            let wt = g.transpose(p[0])?;
            let z = g.matmul(h, wt)?;
            h = g.add_row(z, p[1])?;
            if let Some(f) = l.activation.unary() {
                h = g.unary(f, h)?;
            }
        }
        Ok(h)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "model input",
                detail: format!("expected dimension {}, got {d}", self.input_dim()),
            });
        }
        Ok(())
    }

    /// Logits for each row of an `n×d` batch, without recording a graph.
    pub fn logits_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_dim(x.cols())?;
        let mut h = x.matmul_t(false, &self.layers[0].weight, true)?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.matmul_t(false, &l.weight, true)?;
            }
            let m = h.cols();
            let b = l.bias.data();
            for (j, v) in h.data_mut().iter_mut().enumerate() {
                *v += b[j % m];
            }
            if let Some(f) = l.activation.unary() {
                h = h.map(|v| crate::autodiff::apply_unary(f, v));
            }
        }
        if !h.all_finite() {
            return Err(Error::NonFinite { op: "logits" });
        }
        Ok(h)
    }

    pub fn probs_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.logits_batch(x)?;
        let c = z.cols();
        let data = (0..z.rows())
            .flat_map(|r| softmax(z.row_slice(r)))
            .collect();
        Tensor::matrix(z.rows(), c, data)
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.logits_batch(&Tensor::row(x.to_vec()))?.into_data())
    }

    pub fn probs(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn predict(&self, x: &[T]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn accuracy(&self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let pred = self.logits_batch(x)?.argmax_rows();
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// `n×C` 0/1 mask choosing, per row, the output(s) named by `sel`.
    pub fn selection_mask(&self, logits: &Tensor<T>, sel: ClassSelector) -> Result<Tensor<T>> {
        let c = self.num_classes();
        let n = logits.rows();
        let mut mask = Tensor::zeros(&[n, c]);
        for r in 0..n {
            let row = mask.row_slice_mut(r);
            match sel {
                ClassSelector::Class(i) => {
                    if i >= c {
                        return Err(Error::InvalidClass {
                            index: i,
                            classes: c,
                        });
                    }
                    row[i] = T::one();
                }
                ClassSelector::Predicted => row[argmax(logits.row_slice(r))] = T::one(),
                ClassSelector::Sum => row.iter_mut().for_each(|v| *v = T::one()),
            }
        }
        Ok(mask)
    }

    /// Per-row input gradients of the selected output, as an `n×d` tensor.
    pub fn input_gradient_batch(
        &self,
        x: &Tensor<T>,
        sel: ClassSelector,
        space: OutputSpace,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.param_nodes(&mut g)?;
        let xn = g.input(x.clone())?;
        let z = self.build(&mut g, &params, xn)?;
        let mask = self.selection_mask(g.value(z), sel)?;
        let out = match space {
            OutputSpace::Logits => z,
            OutputSpace::Probabilities => g.softmax_rows(z)?,
            OutputSpace::LogProbabilities => {
                let lse = g.logsumexp_rows(z)?;
                let lse = g.broadcast_cols(lse, self.num_classes())?;
                g.sub(z, lse)?
            }
        };
        let m = g.constant(mask)?;
        let picked = g.mul(out, m)?;
        let total = g.sum(picked)?;
        let gx = g.grad_or_zeros(total, &[xn])?[0];
        Ok(g.value(gx).clone())
    }

    /// Gradient of the selected pre-softmax logit at a single point.
    pub fn input_gradient(&self, x: &[T], sel: ClassSelector) -> Result<Vec<T>> {
        self.input_gradient_in(x, sel, OutputSpace::Logits)
    }

    pub fn input_gradient_in(
        &self,
        x: &[T],
        sel: ClassSelector,
        space: OutputSpace,
    ) -> Result<Vec<T>> {
        Ok(self
            .input_gradient_batch(&Tensor::row(x.to_vec()), sel, space)?
            .into_data())
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        let mut body = Writer::new();
        self.write_body(&mut body);
        write_section::<T>(w, SectionTag::Model, &body.finish())
    }

    pub fn load(r: impl Read) -> Result<Self> {
        let body = read_section::<T>(r, SectionTag::Model)?;
        let mut rd = Reader::new(&body);
        let m = Self::read_body(&mut rd)?;
        rd.finish()?;
        Ok(m)
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(f)
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub(crate) fn write_body(&self, w: &mut Writer) {
        w.u32(self.layers.len());
        for l in &self.layers {
            w.u32(l.weight.cols());
            w.u32(l.weight.rows());
            w.u8(l.activation.tag());
        }
        for l in &self.layers {
            w.scalars(l.weight.data());
            w.scalars(l.bias.data());
        }
    }

    pub(crate) fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.u32()?;
        if n == 0 {
            return Err(Error::Format("model without layers".into()));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            let fan_in = r.u32()?;
            let fan_out = r.u32()?;
            dims.push((fan_in, fan_out, Activation::from_tag(r.u8()?)?));
        }
        let mut layers = Vec::with_capacity(n);
        for (fan_in, fan_out, activation) in dims {
            let w = r.scalars::<T>(fan_in * fan_out)?;
            let b = r.scalars::<T>(fan_out)?;
            layers.push(Layer {
                weight: Arc::new(Tensor::matrix(fan_out, fan_in, w)?),
                bias: Arc::new(Tensor::row(b)),
                activation,
            });
        }
        Self::from_layers(layers)
    }
}
