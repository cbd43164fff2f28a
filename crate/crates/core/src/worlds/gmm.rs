//! Gaussian mixtures with closed-form Gaussian smoothing.
//!
//! Smoothing a component `N(m, S)` by `N(0, s²I)` gives `N(m, S + s²I)`, so
//! densities, scores and the optimal denoiser at any noise level stay exact.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;

#[derive(Clone, Debug)]
pub struct Component {
    pub class: usize,
    /// Joint weight; all weights of a mixture sum to one.
    pub weight: f64,
    pub mean: DVector<f64>,
    /// Positive semi-definite.
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct GaussianMixture {
    dim: usize,
    classes: usize,
    components: Vec<Component>,
    roots: Vec<DMatrix<f64>>,
}

/// Per-class log joint densities `log p(x, y)` and their gradients.
///
/// Gradients may be expressed in reduced coordinates; `lift` then maps them
/// into the input space. Combining before lifting keeps components outside
/// the lifted span at exactly zero.
#[derive(Clone, Debug)]
pub struct ClassTerms {
    pub log_joint: Vec<f64>,
    pub grad_log_joint: Vec<DVector<f64>>,
    pub lift: Option<DMatrix<f64>>,
}

impl ClassTerms {
    pub fn to_input_space(&self, g: DVector<f64>) -> Vec<f64> {
        match &self.lift {
            Some(l) => (l * g).iter().copied().collect(),
            None => g.iter().copied().collect(),
        }
    }
}

struct Evaluated {
    log_joint: f64,
    // −(S + s²I)⁻¹ (x − m)
    grad: DVector<f64>,
}

impl GaussianMixture {
    pub fn new(classes: usize, components: Vec<Component>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidArgument("mixture without components".into()));
        };
        let dim = first.mean.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}"
            )));
        }
        let mut roots = Vec::with_capacity(components.len());
        for c in &components {
            if c.mean.len() != dim || c.cov.shape() != (dim, dim) {
                return Err(Error::ShapeMismatch {
                    op: "mixture",
                    detail: "component dimensions".into(),
                });
            }
            if c.class >= classes || c.weight < 0.0 {
                return Err(Error::InvalidArgument("component class or weight".into()));
            }
            let (vals, vecs) = sym_eigen_desc(&c.cov);
            if vals.iter().any(|&v| v < -1e-10) {
                return Err(Error::InvalidArgument(
                    "covariance is not positive semi-definite".into(),
                ));
            }
            let scale = DMatrix::from_diagonal(&DVector::from_iterator(
                dim,
                vals.iter().map(|v| v.max(0.0).sqrt()),
            ));
            roots.push(&vecs * scale);
        }
        Ok(GaussianMixture {
            dim,
            classes,
            components,
            roots,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn priors(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.classes];
        for c in &self.components {
            p[c.class] += c.weight;
        }
        p
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (usize, DVector<f64>) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = &self.components[pick];
        (c.class, &c.mean + &self.roots[pick] * z)
    }

    fn smoothed_cholesky(&self, i: usize, s: f64) -> Result<Cholesky<f64, Dyn>> {
        let c = &self.components[i];
        let cov = &c.cov + DMatrix::identity(self.dim, self.dim) * (s * s);
        Cholesky::new(cov).ok_or(Error::VanishingDensity)
    }

    fn evaluate(&self, x: &DVector<f64>, s: f64) -> Result<Vec<Option<Evaluated>>> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "mixture",
                detail: format!("{} vs {}", x.len(), self.dim),
            });
        }
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut out = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            if c.weight == 0.0 {
                out.push(None);
                continue;
            }
            let chol = self.smoothed_cholesky(i, s)?;
            let diff = x - &c.mean;
            let sol = chol.solve(&diff);
            let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            let log_joint = c.weight.ln()
                - 0.5 * diff.dot(&sol)
                - 0.5 * logdet
                - self.dim as f64 * half_log_2pi;
            out.push(Some(Evaluated {
                log_joint,
                grad: -sol,
            }));
        }
        Ok(out)
    }

    /// `log p_s(x, y)` and `∇ₓ log p_s(x, y)` for every class, where `p_s` is
    /// the mixture convolved with `N(0, s²I)`. Classes without mass get
    /// `-inf` and a zero gradient.
    pub fn class_terms(&self, x: &DVector<f64>, s: f64) -> Result<ClassTerms> {
        let ev = self.evaluate(x, s)?;
        let mut log_joint = vec![f64::NEG_INFINITY; self.classes];
        let mut grad_log_joint = vec![DVector::zeros(self.dim); self.classes];
        for y in 0..self.classes {
            let members: Vec<&Evaluated> = self
                .components
                .iter()
                .zip(&ev)
                .filter(|(c, _)| c.class == y)
                .filter_map(|(_, e)| e.as_ref())
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members
                .iter()
                .map(|e| e.log_joint)
                .fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                continue;
            }
            let weights: Vec<f64> = members.iter().map(|e| (e.log_joint - m).exp()).collect();
            let z: f64 = weights.iter().sum();
            log_joint[y] = m + z.ln();
            let mut g = DVector::zeros(self.dim);
            for (w, e) in weights.iter().zip(&members) {
                g.axpy(w / z, &e.grad, 1.0);
            }
            grad_log_joint[y] = g;
        }
        Ok(ClassTerms {
            log_joint,
            grad_log_joint,
            lift: None,
        })
    }

    /// `∇ₓ log p_σ(x | y)` for a class, or of the marginal when `class` is `None`.
    pub fn score(
        &self,
        x: &DVector<f64>,
        class: Option<usize>,
        sigma: f64,
    ) -> Result<DVector<f64>> {
        check_sigma(sigma)?;
        let t = self.class_terms(x, sigma)?;
        match class {
            Some(y) => {
                self.check_class(y)?;
                if t.log_joint[y] == f64::NEG_INFINITY {
                    return Err(Error::VanishingDensity);
                }
                Ok(t.grad_log_joint[y].clone())
            }
            None => {
                let post = posterior_from_log_joint(&t.log_joint)?;
                let mut g = DVector::zeros(self.dim);
                for (p, gy) in post.iter().zip(&t.grad_log_joint) {
                    g.axpy(*p, gy, 1.0);
                }
                Ok(g)
            }
        }
    }

    /// `E[x₀ | x₀ + σn = x]` for `x₀` drawn from the mixture (or one class).
    pub fn denoiser(
        &self,
        x: &DVector<f64>,
        class: Option<usize>,
        sigma: f64,
    ) -> Result<DVector<f64>> {
        check_sigma(sigma)?;
        if let Some(y) = class {
            self.check_class(y)?;
        }
        let ev = self.evaluate(x, sigma)?;
        let mut logs = Vec::new();
        let mut means = Vec::new();
        for (c, e) in self.components.iter().zip(&ev) {
            let Some(e) = e else { continue };
            if class.is_some_and(|y| y != c.class) {
                continue;
            }
            // m + S (S + σ²I)⁻¹ (x − m) = m − S ∇
            means.push(&c.mean - &c.cov * &e.grad);
            logs.push(e.log_joint);
        }
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::VanishingDensity);
        }
        let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut d = DVector::zeros(self.dim);
        for (wi, mi) in w.iter().zip(&means) {
            d.axpy(wi / z, mi, 1.0);
        }
        Ok(d)
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.classes {
            return Err(Error::InvalidClass {
                index: y,
                classes: self.classes,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise level must be positive, got {sigma}"
        )));
    }
    Ok(())
}

/// Normalises log joint densities into a posterior.
pub fn posterior_from_log_joint(log_joint: &[f64]) -> Result<Vec<f64>> {
    let m = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::VanishingDensity);
    }
    let e: Vec<f64> = log_joint.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `∇ p(y|x) = p(y|x) (∇log p(x,y) − Σ_j p(j|x) ∇log p(x,j))`
pub fn posterior_gradient(post: &[f64], grads: &[DVector<f64>], y: usize) -> DVector<f64> {
    log_posterior_gradient(post, grads, y) * post[y]
}

/// `∇ log p(y|x)`; finite even where the posterior underflows.
pub fn log_posterior_gradient(post: &[f64], grads: &[DVector<f64>], y: usize) -> DVector<f64> {
    let mut g = grads[y].clone();
    for (p, gj) in post.iter().zip(grads) {
        if *p > 0.0 {
            g.axpy(-p, gj, 1.0);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_gaussians(mu: &[f64]) -> GaussianMixture {
        let d = mu.len();
        let m = DVector::from_column_slice(mu);
        GaussianMixture::new(
            2,
            vec![
                Component {
                    class: 0,
                    weight: 0.5,
                    mean: -m.clone(),
                    cov: DMatrix::identity(d, d),
                },
                Component {
                    class: 1,
                    weight: 0.5,
                    mean: m,
                    cov: DMatrix::identity(d, d),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn symmetric_posterior_and_sigmoid_closed_form() {
        let g = two_gaussians(&[1.0, 0.0]);
        let t = g.class_terms(&DVector::zeros(2), 0.0).unwrap();
        assert_eq!(
            posterior_from_log_joint(&t.log_joint).unwrap(),
            vec![0.5, 0.5]
        );
        let t = g
            .class_terms(&DVector::from_column_slice(&[1.0, 0.0]), 0.0)
            .unwrap();
        let p = posterior_from_log_joint(&t.log_joint).unwrap();
        let sigmoid2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p[1] - sigmoid2).abs() < 1e-15);
        assert!((sigmoid2 - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn denoiser_and_score_of_standard_normal() {
        let g = GaussianMixture::new(
            1,
            vec![Component {
                class: 0,
                weight: 1.0,
                mean: DVector::zeros(2),
                cov: DMatrix::identity(2, 2),
            }],
        )
        .unwrap();
        let x = DVector::from_column_slice(&[2.0, 0.0]);
        let d = g.denoiser(&x, None, 1.0).unwrap();
        let s = g.score(&x, None, 1.0).unwrap();
        assert!((d - DVector::from_column_slice(&[1.0, 0.0])).norm() < 1e-15);
        assert!((s - DVector::from_column_slice(&[-1.0, 0.0])).norm() < 1e-15);
        assert!(g.score(&x, None, 0.0).is_err());
    }

    #[test]
    fn degenerate_prior() {
        let m = DVector::from_column_slice(&[1.0]);
        let g = GaussianMixture::new(
            2,
            vec![
                Component {
                    class: 0,
                    weight: 1.0,
                    mean: m.clone(),
                    cov: DMatrix::identity(1, 1),
                },
                Component {
                    class: 1,
                    weight: 0.0,
                    mean: -m,
                    cov: DMatrix::identity(1, 1),
                },
            ],
        )
        .unwrap();
        for x in [-5.0, 0.0, 3.0] {
            let t = g
                .class_terms(&DVector::from_column_slice(&[x]), 0.0)
                .unwrap();
            assert_eq!(
                posterior_from_log_joint(&t.log_joint).unwrap(),
                vec![1.0, 0.0]
            );
        }
    }
}
