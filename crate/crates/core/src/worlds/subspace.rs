use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::gmm::{ClassTerms, Component, GaussianMixture};
use super::{check_dim, vec_of, Projector, World, DEFAULT_SIGMA_WORLD};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::random_orthonormal;
use crate::tensor::Tensor;

/// Data `x = B z` with `z` drawn from a latent Gaussian mixture in `R^k` and
/// `B` a `d×k` matrix with orthonormal columns.
#[derive(Clone, Debug)]
pub struct LinearSubspaceWorld {
    name: String,
    basis: DMatrix<f64>,
    latent: GaussianMixture,
    ambient: GaussianMixture,
    noise: f64,
    sigma_world: f64,
}

impl LinearSubspaceWorld {
    pub fn new(
        name: &str,
        basis: DMatrix<f64>,
        latent: GaussianMixture,
        sigma_world: f64,
    ) -> Result<Self> {
        let k = basis.ncols();
        if latent.dim() != k {
            return Err(Error::ShapeMismatch {
                op: "subspace world",
                detail: "latent dimension".into(),
            });
        }
        let gram_err = (basis.transpose() * &basis - DMatrix::identity(k, k))
            .abs()
            .max();
        if gram_err > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "basis is not orthonormal (residual {gram_err:e})"
            )));
        }
        if !(sigma_world >= 0.0) {
            return Err(Error::InvalidArgument(
                "sigma_world must be non-negative".into(),
            ));
        }
        let ambient = GaussianMixture::new(
            latent.classes(),
            latent
                .components()
                .iter()
                .map(|c| Component {
                    class: c.class,
                    weight: c.weight,
                    mean: &basis * &c.mean,
                    cov: &basis * &c.cov * basis.transpose(),
                })
                .collect(),
        )?;
        Ok(LinearSubspaceWorld {
            name: name.into(),
            basis,
            latent,
            ambient,
            noise: 0.0,
            sigma_world,
        })
    }

    /// Isotropic ambient noise added when sampling (default 0).
    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    /// Two classes in a 2-plane of `R^8` arranged as an XOR of four latent
    /// clusters at `(±3, ±3)` with standard deviation 1.2, so the Bayes
    /// boundary is curved.
    pub fn xor_2of8() -> Result<Self> {
        let (a, spread) = (3.0, 1.2f64);
        let cov = DMatrix::identity(2, 2) * spread.powi(2);
        let comps = [(a, a, 1), (-a, -a, 1), (a, -a, 0), (-a, a, 0)]
            .into_iter()
            .map(|(u, v, class)| Component {
                class,
                weight: 0.25,
                mean: DVector::from_column_slice(&[u, v]),
                cov: cov.clone(),
            })
            .collect();
        let basis = random_orthonormal(8, 2, &mut ChaCha8Rng::seed_from_u64(0x5eed_2008));
        Self::new(
            "subspace-2of8",
            basis,
            GaussianMixture::new(2, comps)?,
            DEFAULT_SIGMA_WORLD,
        )
    }

    /// Two latent Gaussians `N(±μ, s²I)` in a 2-plane of `R^8`; linearly separable.
    pub fn linear_2of8() -> Result<Self> {
        let mu = DVector::from_column_slice(&[1.0, 0.5]);
        let cov = DMatrix::identity(2, 2) * 0.3f64.powi(2);
        let latent = GaussianMixture::new(
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
        let basis = random_orthonormal(8, 2, &mut ChaCha8Rng::seed_from_u64(0x5eed_2008));
        Self::new("subspace-linear-2of8", basis, latent, DEFAULT_SIGMA_WORLD)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn projector(&self) -> Projector<f64> {
        let p = &self.basis * self.basis.transpose();
        Projector::from_matrix(crate::linalg::from_dmatrix(&p))
            .expect("orthonormal basis gives a projector")
    }
}

impl World for LinearSubspaceWorld {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.basis.nrows()
    }

    fn manifold_dim(&self) -> usize {
        self.basis.ncols()
    }

    fn classes(&self) -> usize {
        self.latent.classes()
    }

    fn priors(&self) -> Vec<f64> {
        self.latent.priors()
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "sample size must be positive".into(),
            ));
        }
        let (d, k) = (self.dim(), self.manifold_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(1);
        let mut x = Vec::with_capacity(n * d);
        let mut z = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (y, lat) = self.latent.sample(&mut rng);
            let mut p = &self.basis * &lat;
            if self.noise > 0.0 {
                p.iter_mut()
                    .for_each(|v| *v += self.noise * noise_rng.sample::<f64, _>(StandardNormal));
            }
            x.extend(p.iter());
            z.extend(lat.iter());
            labels.push(y);
        }
        Dataset::new(Tensor::matrix(n, d, x)?, labels)?.with_latents(Tensor::matrix(n, k, z)?)
    }

    fn tangent_projector(&self, x: &[f64], _latent: Option<&[f64]>) -> Result<Projector<f64>> {
        check_dim(x, self.dim())?;
        Ok(self.projector())
    }

    // Evaluated in latent coordinates: the smoothed density factorises into
    // a class-dependent part in Bᵀx and a class-independent off-span part.
    fn bayes_terms(&self, x: &[f64]) -> Result<ClassTerms> {
        check_dim(x, self.dim())?;
        let xv = vec_of(x);
        let z = self.basis.transpose() * &xv;
        if self.sigma_world == 0.0 && (&xv - &self.basis * &z).norm() > 1e-8 {
            return Err(Error::VanishingDensity);
        }
        let t = self.latent.class_terms(&z, self.sigma_world)?;
        Ok(ClassTerms {
            lift: Some(self.basis.clone()),
            ..t
        })
    }

    fn score(&self, x: &[f64], class: Option<usize>, sigma: f64) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        Ok(self
            .ambient
            .score(&vec_of(x), class, sigma)?
            .iter()
            .copied()
            .collect())
    }

    fn optimal_denoiser(&self, x: &[f64], class: Option<usize>, sigma: f64) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        Ok(self
            .ambient
            .denoiser(&vec_of(x), class, sigma)?
            .iter()
            .copied()
            .collect())
    }
}
