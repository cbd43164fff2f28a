use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gmm::{ClassTerms, Component, GaussianMixture};
use super::{check_dim, Projector, World, DEFAULT_SIGMA_WORLD};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs split by a fixed coordinate mask into a signal block, drawn from a
/// class-conditional mixture, and a distractor block, drawn independently of
/// the label.
#[derive(Clone, Debug)]
pub struct SignalDistractorWorld {
    name: String,
    mask: Vec<bool>,
    signal: GaussianMixture,
    distractor: GaussianMixture,
    sigma_world: f64,
}

impl SignalDistractorWorld {
    /// `distractor` must have a single class; its samples are drawn from a
    /// random stream that never sees the label.
    pub fn new(
        name: &str,
        mask: Vec<bool>,
        signal: GaussianMixture,
        distractor: GaussianMixture,
        sigma_world: f64,
    ) -> Result<Self> {
        let ns = mask.iter().filter(|&&b| b).count();
        if ns != signal.dim() || mask.len() - ns != distractor.dim() {
            return Err(Error::ShapeMismatch {
                op: "signal world",
                detail: "mask does not match block sizes".into(),
            });
        }
        if distractor.classes() != 1 {
            return Err(Error::InvalidArgument(
                "the distractor distribution must not depend on the class".into(),
            ));
        }
        Ok(SignalDistractorWorld {
            name: name.into(),
            mask,
            signal,
            distractor,
            sigma_world,
        })
    }

    /// Four signal coordinates followed by four distractor coordinates. The
    /// distractor has larger variance than the signal.
    pub fn preset_4_4() -> Result<Self> {
        let mu = DVector::from_column_slice(&[0.8, 0.6, 0.0, 0.0]);
        let cov = DMatrix::identity(4, 4) * 0.5;
        let signal = GaussianMixture::new(
            2,
            vec![
                Component {
                    class: 0,
                    weight: 0.5,
                    mean: -mu.clone(),
                    cov: cov.clone(),
                },
                Component {
                    class: 1,
                    weight: 0.5,
                    mean: mu,
                    cov,
                },
            ],
        )?;
        let distractor = GaussianMixture::new(
            1,
            vec![Component {
                class: 0,
                weight: 1.0,
                mean: DVector::zeros(4),
                cov: DMatrix::identity(4, 4),
            }],
        )?;
        let mask = (0..8).map(|i| i < 4).collect();
        Self::new(
            "signal-distractor-4+4",
            mask,
            signal,
            distractor,
            DEFAULT_SIGMA_WORLD,
        )
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn split(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let s: Vec<f64> = x
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect();
        let d: Vec<f64> = x
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| !m)
            .map(|(v, _)| *v)
            .collect();
        (DVector::from_vec(s), DVector::from_vec(d))
    }

    // d×d_s selection matrix placing the signal block into the input.
    fn scatter(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.signal.dim());
        for (col, row) in self
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .enumerate()
        {
            m[(row, col)] = 1.0;
        }
        m
    }

    fn join(&self, s: &DVector<f64>, d: &DVector<f64>) -> Vec<f64> {
        let (mut si, mut di) = (s.iter(), d.iter());
        self.mask
            .iter()
            .map(|&m| {
                if m {
                    *si.next().expect("signal block")
                } else {
                    *di.next().expect("distractor block")
                }
            })
            .collect()
    }
}

impl World for SignalDistractorWorld {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.mask.len()
    }

    fn manifold_dim(&self) -> usize {
        self.signal.dim()
    }

    fn classes(&self) -> usize {
        self.signal.classes()
    }

    fn priors(&self) -> Vec<f64> {
        self.signal.priors()
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "sample size must be positive".into(),
            ));
        }
        let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut distractor_rng = ChaCha8Rng::seed_from_u64(seed);
        distractor_rng.set_stream(2);
        let mut x = Vec::with_capacity(n * self.dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (y, s) = self.signal.sample(&mut label_rng);
            let (_, d) = self.distractor.sample(&mut distractor_rng);
            x.extend(self.join(&s, &d));
            labels.push(y);
        }
        Dataset::new(Tensor::matrix(n, self.dim(), x)?, labels)
    }

    /// The signal subspace (a coordinate mask).
    fn tangent_projector(&self, x: &[f64], _latent: Option<&[f64]>) -> Result<Projector<f64>> {
        check_dim(x, self.dim())?;
        Ok(Projector::from_mask(self.mask.clone()))
    }

    // The smoothed distractor density is class-independent and cancels from
    // the posterior, so the distractor block of every gradient is exactly 0.
    fn bayes_terms(&self, x: &[f64]) -> Result<ClassTerms> {
        check_dim(x, self.dim())?;
        let (s, _) = self.split(x);
        let t = self.signal.class_terms(&s, self.sigma_world)?;
        Ok(ClassTerms {
            lift: Some(self.scatter()),
            ..t
        })
    }

    fn score(&self, x: &[f64], class: Option<usize>, sigma: f64) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        let (s, d) = self.split(x);
        let gs = self.signal.score(&s, class, sigma)?;
        let gd = self.distractor.score(&d, None, sigma)?;
        Ok(self.join(&gs, &gd))
    }

    fn optimal_denoiser(&self, x: &[f64], class: Option<usize>, sigma: f64) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        let (s, d) = self.split(x);
        let ds = self.signal.denoiser(&s, class, sigma)?;
        let dd = self.distractor.denoiser(&d, None, sigma)?;
        Ok(self.join(&ds, &dd))
    }

    fn signal_mask(&self) -> Option<Vec<bool>> {
        Some(self.mask.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference;
    use rand::{seq::SliceRandom, Rng};

    fn unit_gaussians() -> SignalDistractorWorld {
        let mu = DVector::from_column_slice(&[1.0, 0.0]);
        let signal = GaussianMixture::new(
            2,
            vec![
                Component {
                    class: 0,
                    weight: 0.5,
                    mean: -mu.clone(),
                    cov: DMatrix::identity(2, 2),
                },
                Component {
                    class: 1,
                    weight: 0.5,
                    mean: mu,
                    cov: DMatrix::identity(2, 2),
                },
            ],
        )
        .unwrap();
        let distractor = GaussianMixture::new(
            1,
            vec![Component {
                class: 0,
                weight: 1.0,
                mean: DVector::zeros(2),
                cov: DMatrix::identity(2, 2),
            }],
        )
        .unwrap();
        SignalDistractorWorld::new("t", vec![true, true, false, false], signal, distractor, 0.0)
            .unwrap()
    }

    #[test]
    fn bayes_gradient_at_the_origin() {
        let w = unit_gaussians();
        let g = w.bayes_input_gradient(&[0.0; 4], 1).unwrap();
        assert_eq!(g, vec![0.5, 0.0, 0.0, 0.0]);
        let fd = central_difference(|p| Ok(w.bayes_posterior(p)?[1]), &[0.0; 4], 1e-5).unwrap();
        assert!((fd[0] - 0.5).abs() < 1e-9 && fd[2].abs() < 1e-12);
    }

    #[test]
    fn distractor_block_of_gradient_is_exactly_zero() {
        let w = SignalDistractorWorld::preset_4_4().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for y in 0..2 {
                let g = w.bayes_input_gradient(&x, y).unwrap();
                assert!(g[4..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn permuting_distractors_leaves_posteriors_unchanged() {
        let w = SignalDistractorWorld::preset_4_4().unwrap();
        let ds = w.sample(200, 5).unwrap();
        let mut order: Vec<usize> = (0..200).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
        for i in 0..200 {
            let mut x = ds.point(i).to_vec();
            x[4..].copy_from_slice(&ds.point(order[i])[4..]);
            assert_eq!(
                w.bayes_posterior(&x).unwrap(),
                w.bayes_posterior(ds.point(i)).unwrap()
            );
        }
    }

    #[test]
    fn distractor_stream_ignores_the_label() {
        let w = SignalDistractorWorld::preset_4_4().unwrap();
        let a = w.sample(50, 7).unwrap();
        // Resampling with a different signal mixture keeps the distractor block.
        let other = SignalDistractorWorld::new(
            "t",
            w.mask.clone(),
            GaussianMixture::new(
                2,
                vec![
                    Component {
                        class: 0,
                        weight: 0.9,
                        mean: DVector::zeros(4),
                        cov: DMatrix::identity(4, 4),
                    },
                    Component {
                        class: 1,
                        weight: 0.1,
                        mean: DVector::zeros(4),
                        cov: DMatrix::identity(4, 4),
                    },
                ],
            )
            .unwrap(),
            w.distractor.clone(),
            0.05,
        )
        .unwrap();
        let b = other.sample(50, 7).unwrap();
        for i in 0..50 {
            assert_eq!(a.point(i)[4..], b.point(i)[4..]);
        }
    }

    #[test]
    fn blockwise_oracles_match_a_full_mixture() {
        let w = SignalDistractorWorld::preset_4_4().unwrap();
        let full = GaussianMixture::new(
            2,
            w.signal
                .components()
                .iter()
                .map(|c| {
                    let mut mean = DVector::zeros(8);
                    mean.rows_mut(0, 4).copy_from(&c.mean);
                    let mut cov = DMatrix::identity(8, 8);
                    cov.view_mut((0, 0), (4, 4)).copy_from(&c.cov);
                    Component {
                        class: c.class,
                        weight: c.weight,
                        mean,
                        cov,
                    }
                })
                .collect(),
        )
        .unwrap();
        let ds = w.sample(20, 3).unwrap();
        for i in 0..20 {
            let x = DVector::from_column_slice(ds.point(i));
            let a = w.score(ds.point(i), Some(1), 0.4).unwrap();
            let b = full.score(&x, Some(1), 0.4).unwrap();
            let d1 = w.optimal_denoiser(ds.point(i), None, 0.4).unwrap();
            let d2 = full.denoiser(&x, None, 0.4).unwrap();
            for j in 0..8 {
                assert!((a[j] - b[j]).abs() < 1e-12);
                assert!((d1[j] - d2[j]).abs() < 1e-12);
            }
        }
    }
}
