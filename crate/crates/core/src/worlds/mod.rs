//! Synthetic data-generating processes with exact manifold structure.
//!
//! Every world exposes ground-truth oracles: tangent projectors, the Bayes
//! posterior and its input gradient, class-conditional scores and the optimal
//! denoiser. Oracles are evaluated in `f64`; datasets can be cast to other
//! scalar types afterwards.
//!
//! Bayes quantities are computed for the data distribution convolved with
//! `N(0, σ_w² I)` (`sigma_world`), which keeps densities positive off the
//! manifold. The score and denoiser take their own noise level.

mod curved;
pub mod gmm;
mod projector;
mod signal;
mod subspace;

use nalgebra::DVector;

pub use curved::{Curve, CurvedWorld, VonMises};
pub use gmm::{ClassTerms, Component, GaussianMixture};
pub use projector::{projector_error, Projector};
pub use signal::SignalDistractorWorld;
pub use subspace::LinearSubspaceWorld;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_WORLD: f64 = 0.05;

pub const PRESETS: &[&str] = &[
    "subspace-2of8",
    "subspace-linear-2of8",
    "signal-distractor-4+4",
    "circle-in-3d",
    "circle-in-2d",
];

pub trait World: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Dimension of the data manifold (or of the signal block).
    fn manifold_dim(&self) -> usize;
    fn classes(&self) -> usize;
    fn priors(&self) -> Vec<f64>;

    /// `n` labelled points, deterministic in `seed`.
    fn sample(&self, n: usize, seed: u64) -> Result<Dataset<f64>>;

    /// Projector onto the tangent space at `x`. `latent` is the generating
    /// latent when known; worlds with a constant tangent space ignore both.
    fn tangent_projector(&self, x: &[f64], latent: Option<&[f64]>) -> Result<Projector<f64>>;

    /// `log p(x, y)` and `∇ₓ log p(x, y)` of the `σ_w`-smoothed distribution.
    fn bayes_terms(&self, x: &[f64]) -> Result<ClassTerms>;

    fn score(&self, x: &[f64], class: Option<usize>, sigma: f64) -> Result<Vec<f64>>;

    fn optimal_denoiser(&self, x: &[f64], class: Option<usize>, sigma: f64) -> Result<Vec<f64>>;

    /// The signal coordinates, for worlds with a signal/distractor split.
    fn signal_mask(&self) -> Option<Vec<bool>> {
        None
    }

    fn bayes_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        gmm::posterior_from_log_joint(&self.bayes_terms(x)?.log_joint)
    }

    /// `∇ₓ p(y = class | x)`
    fn bayes_input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let t = self.bayes_terms(x)?;
        let post = gmm::posterior_from_log_joint(&t.log_joint)?;
        Ok(t.to_input_space(gmm::posterior_gradient(&post, &t.grad_log_joint, class)))
    }

    /// `∇ₓ log p(y = class | x)`, the same direction as
    /// [`World::bayes_input_gradient`] but immune to posterior saturation.
    fn bayes_log_posterior_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let t = self.bayes_terms(x)?;
        let post = gmm::posterior_from_log_joint(&t.log_joint)?;
        Ok(t.to_input_space(gmm::log_posterior_gradient(&post, &t.grad_log_joint, class)))
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::InvalidClass {
                index: class,
                classes: self.classes(),
            });
        }
        Ok(())
    }
}

pub fn preset(name: &str) -> Result<Box<dyn World>> {
    Ok(match name {
        "subspace-2of8" => Box::new(LinearSubspaceWorld::xor_2of8()?),
        "subspace-linear-2of8" => Box::new(LinearSubspaceWorld::linear_2of8()?),
        "signal-distractor-4+4" => Box::new(SignalDistractorWorld::preset_4_4()?),
        "circle-in-3d" => Box::new(CurvedWorld::circle_in_3d()?),
        "circle-in-2d" => Box::new(CurvedWorld::circle_in_2d()?),
        other => {
            return Err(Error::Config(format!(
                "unknown world preset {other:?}; known: {}",
                PRESETS.join(", ")
            )))
        }
    })
}

pub(crate) fn vec_of(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

pub(crate) fn check_dim(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::ShapeMismatch {
            op: "world",
            detail: format!("point of dimension {} in R^{d}", x.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(d: usize, n: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn every_preset_builds_and_satisfies_projector_invariants() {
        for &name in PRESETS {
            let w = preset(name).unwrap();
            let ds = w.sample(20, 1).unwrap();
            assert_eq!(ds.dim(), w.dim());
            for i in 0..ds.len() {
                let p = w.tangent_projector(ds.point(i), ds.latent(i)).unwrap();
                p.check(1e-10).unwrap();
                assert!((p.trace() - w.manifold_dim() as f64).abs() < 1e-9, "{name}");
            }
        }
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn posterior_gradients_sum_to_zero_and_match_finite_differences() {
        for &name in PRESETS {
            let w = preset(name).unwrap();
            let ds = w.sample(10, 3).unwrap();
            for i in 0..ds.len() {
                let x = ds.point(i);
                let mut total = vec![0.0; w.dim()];
                for y in 0..w.classes() {
                    let g = w.bayes_input_gradient(x, y).unwrap();
                    let fd = central_difference(|p| Ok(w.bayes_posterior(p)?[y]), x, 1e-6).unwrap();
                    let scale = fd.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
                    for (a, b) in g.iter().zip(&fd) {
                        assert!((a - b).abs() < 1e-5 * scale, "{name}: {a} vs {b}");
                    }
                    total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
                }
                assert!(total.iter().all(|v| v.abs() < 1e-10), "{name}");
            }
        }
    }

    #[test]
    fn denoiser_score_identity_on_gaussian_worlds() {
        let worlds = [
            preset("subspace-2of8").unwrap(),
            preset("signal-distractor-4+4").unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for w in &worlds {
            for x in random_points(w.dim(), 100, 1.5, 5) {
                let sigma = rng.gen_range(0.05..3.0);
                let class = if rng.gen_bool(0.5) {
                    Some(rng.gen_range(0..w.classes()))
                } else {
                    None
                };
                let d = w.optimal_denoiser(&x, class, sigma).unwrap();
                let s = w.score(&x, class, sigma).unwrap();
                for j in 0..x.len() {
                    assert!(((d[j] - x[j]) / (sigma * sigma) - s[j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn curved_world_identity_holds_by_construction() {
        let w = preset("circle-in-3d").unwrap();
        for x in random_points(3, 20, 1.0, 8) {
            let d = w.optimal_denoiser(&x, None, 0.3).unwrap();
            let s = w.score(&x, None, 0.3).unwrap();
            for j in 0..3 {
                assert!(((d[j] - x[j]) / 0.09 - s[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn denoiser_tends_to_the_prior_mean() {
        let w = preset("signal-distractor-4+4").unwrap();
        let x = vec![0.3; 8];
        let d = w.optimal_denoiser(&x, None, 1e6).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn invalid_noise_and_class_are_rejected() {
        let w = preset("subspace-2of8").unwrap();
        let x = vec![0.0; 8];
        assert!(w.score(&x, None, 0.0).is_err());
        assert!(w.optimal_denoiser(&x, None, -1.0).is_err());
        assert!(matches!(
            w.bayes_input_gradient(&x, 5),
            Err(Error::InvalidClass { .. })
        ));
    }
}
