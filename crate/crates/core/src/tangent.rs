//! Tangent spaces estimated from samples: a PCA (linear) autoencoder with a
//! constant tangent, and a small MLP autoencoder whose tangent at `x` is the
//! column space of the decoder Jacobian at the encoding of `x`.
//!
//! Estimators work in `f64`, like the worlds whose projectors they estimate.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::io::{read_section, write_section, Reader, SectionTag, Writer};
use crate::linalg::{
    from_dmatrix, principal_angles, projector_onto_columns, sym_eigen_desc, to_dmatrix,
};
use crate::models::{Activation, Model};
use crate::tensor::Tensor;
use crate::worlds::Projector;

/// Relative eigenvalue below which a principal direction counts as absent.
const RANK_TOL: f64 = 1e-12;

/// `x ↦ D E (x − μ) + μ` with `E = Dᵀ` the top-`k` principal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAutoencoder {
    /// `k×d`
    pub encoder: DMatrix<f64>,
    /// `d×k`
    pub decoder: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Covariance eigenvalues in descending order (all `d` of them when fitted).
    pub spectrum: Vec<f64>,
}

impl LinearAutoencoder {
    /// Top-`k` principal components of the rows of `data`. A covariance of
    /// rank below `k` is accepted; see [`LinearAutoencoder::is_degenerate`].
    pub fn fit(data: &Tensor<f64>, k: usize) -> Result<Self> {
        let (n, d) = (data.rows(), data.cols());
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!(
                "latent dimension {k} must lie in 1..={d}"
            )));
        }
        if n <= k {
            return Err(Error::InvalidArgument(format!(
                "{n} samples cannot determine {k} components"
            )));
        }
        let x = to_dmatrix(data);
        let mean = x.row_mean().transpose();
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        let (spectrum, vecs) = sym_eigen_desc(&cov);
        let decoder = vecs.columns(0, k).into_owned();
        Ok(LinearAutoencoder {
            encoder: decoder.transpose(),
            decoder,
            mean,
            spectrum,
        })
    }

    pub fn dim(&self) -> usize {
        self.decoder.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.ncols()
    }

    /// True when the covariance has fewer than `k` non-negligible eigenvalues,
    /// so some decoder columns span noise-free directions chosen arbitrarily.
    pub fn is_degenerate(&self) -> bool {
        let top = self
            .spectrum
            .first()
            .copied()
            .unwrap_or(0.0)
            .max(f64::MIN_POSITIVE);
        self.spectrum
            .get(self.latent_dim() - 1)
            .map_or(true, |&v| v <= RANK_TOL * top)
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        (&self.encoder * (DVector::from_column_slice(x) - &self.mean))
            .iter()
            .copied()
            .collect()
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        (&self.decoder * DVector::from_column_slice(z) + &self.mean)
            .iter()
            .copied()
            .collect()
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        self.decode(&self.encode(x))
    }

    /// Mean squared reconstruction error per row.
    pub fn reconstruction_error(&self, data: &Tensor<f64>) -> f64 {
        let total: f64 = (0..data.rows())
            .map(|r| {
                let x = data.row_slice(r);
                self.reconstruct(x)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        total / data.rows() as f64
    }

    /// `D(DᵀD)⁻¹Dᵀ`. The decoder of a linear autoencoder has a constant
    /// Jacobian, so the point is unused.
    pub fn estimated_projector(&self, _x: &[f64]) -> Result<Projector<f64>> {
        Projector::from_matrix(from_dmatrix(&projector_onto_columns(&self.decoder)?))
    }

    /// Principal angles (ascending, radians) between the decoder span and
    /// the span of `basis`.
    pub fn principal_angles_to(&self, basis: &DMatrix<f64>) -> Vec<f64> {
        principal_angles(
            &crate::linalg::orthonormalize(&self.decoder),
            &crate::linalg::orthonormalize(basis),
        )
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        let mut b = Writer::new();
        b.u32(self.dim());
        b.u32(self.latent_dim());
        b.u32(self.spectrum.len());
        b.scalars(self.encoder.transpose().as_slice());
        b.scalars(self.decoder.transpose().as_slice());
        b.scalars(self.mean.as_slice());
        b.scalars(&self.spectrum);
        write_section::<f64>(w, SectionTag::LinearAutoencoder, &b.finish())
    }

    pub fn load(r: impl Read) -> Result<Self> {
        let body = read_section::<f64>(r, SectionTag::LinearAutoencoder)?;
        let mut rd = Reader::new(&body);
        let (d, k, s) = (rd.u32()?, rd.u32()?, rd.u32()?);
        if k == 0 || k > d || s > d {
            return Err(Error::Format(format!(
                "autoencoder dimensions d={d}, k={k}, spectrum {s}"
            )));
        }
        // Matrices are stored row-major.
        let encoder = DMatrix::from_row_slice(k, d, &rd.scalars::<f64>(k * d)?);
        let decoder = DMatrix::from_row_slice(d, k, &rd.scalars::<f64>(d * k)?);
        let mean = DVector::from_vec(rd.scalars::<f64>(d)?);
        let spectrum = rd.scalars::<f64>(s)?;
        rd.finish()?;
        Ok(LinearAutoencoder {
            encoder,
            decoder,
            mean,
            spectrum,
        })
    }
}

/// Settings for [`MlpAutoencoder::fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpAutoencoderConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for MlpAutoencoderConfig {
    fn default() -> Self {
        MlpAutoencoderConfig {
            hidden: 32,
            epochs: 200,
            batch_size: 32,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Encoder `[d, h, k]` and decoder `[k, h, d]`, both tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpAutoencoder {
    pub encoder: Model<f64>,
    pub decoder: Model<f64>,
}

impl MlpAutoencoder {
    /// Minimises the mean squared reconstruction error by minibatch SGD.
    /// Returns the autoencoder and the per-epoch mean loss.
    pub fn fit(
        data: &Tensor<f64>,
        k: usize,
        cfg: &MlpAutoencoderConfig,
    ) -> Result<(Self, Vec<f64>)> {
        let (n, d) = (data.rows(), data.cols());
        if k == 0 || k > d || n == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
            return Err(Error::InvalidArgument(
                "autoencoder needs 1 ≤ k ≤ d, data and a positive step".into(),
            ));
        }
        let mut ae = MlpAutoencoder {
            encoder: Model::init(&[d, cfg.hidden, k], Activation::Tanh, cfg.seed)?,
            decoder: Model::init(
                &[k, cfg.hidden, d],
                Activation::Tanh,
                cfg.seed.wrapping_add(1),
            )?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut velocity: Vec<Tensor<f64>> = ae
            .encoder
            .params()
            .into_iter()
            .chain(ae.decoder.params())
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data.row_slice(i).to_vec()).collect();
                let x = Tensor::from_rows(&rows)?;
                let mut g = Graph::new();
                let pe = ae.encoder.param_nodes(&mut g)?;
                let pd = ae.decoder.param_nodes(&mut g)?;
                let xn = g.constant(x)?;
                let z = ae.encoder.build(&mut g, &pe, xn)?;
                let y = ae.decoder.build(&mut g, &pd, z)?;
                let r = g.sub(y, xn)?;
                let sse = g.norm_sq(r)?;
                let loss = g.scale(sse, 1.0 / idx.len() as f64)?;
                total += g.value(loss).item()? * idx.len() as f64;
                let all: Vec<_> = pe.iter().chain(&pd).copied().collect();
                let grads = g.grad_or_zeros(loss, &all)?;
                let grads: Vec<Tensor<f64>> = grads.iter().map(|&id| g.value(id).clone()).collect();
                let params = ae
                    .encoder
                    .params_mut()
                    .into_iter()
                    .chain(ae.decoder.params_mut());
                for ((p, v), gr) in params.zip(&mut velocity).zip(&grads) {
                    for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                        *vi = cfg.momentum * *vi + gi;
                        *pi -= cfg.lr * *vi;
                    }
                }
            }
            let mean = total / n as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged {
                    epoch: losses.len(),
                    step: 0,
                    loss: mean,
                });
            }
            losses.push(mean);
        }
        Ok((ae, losses))
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.num_classes()
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decoder.logits(&self.encoder.logits(x)?)
    }

    /// `d×k` Jacobian of the decoder at `z`.
    pub fn decoder_jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let (k, d) = (z.len(), self.decoder.num_classes());
        // Row i of a d-fold replicated batch carries the gradient of output i.
        let rows: Vec<Vec<f64>> = (0..d).map(|_| z.to_vec()).collect();
        let mut g = Graph::new();
        let params = self.decoder.param_nodes(&mut g)?;
        let zn = g.input(Tensor::from_rows(&rows)?)?;
        let y = self.decoder.build(&mut g, &params, zn)?;
        let mut eye = Tensor::zeros(&[d, d]);
        (0..d).for_each(|i| eye.data_mut()[i * d + i] = 1.0);
        let m = g.constant(eye)?;
        let picked = g.mul(y, m)?;
        let s = g.sum(picked)?;
        let gz = g.grad_or_zeros(s, &[zn])?[0];
        Ok(DMatrix::from_row_slice(d, k, g.value(gz).data()))
    }

    /// Projector onto the decoder Jacobian's columns at the encoding of the
    /// clean input `x`.
    pub fn estimated_projector(&self, x: &[f64]) -> Result<Projector<f64>> {
        let j = self.decoder_jacobian(&self.encoder.logits(x)?)?;
        Projector::from_matrix(from_dmatrix(&projector_onto_columns(&j)?))
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        let mut b = Writer::new();
        self.encoder.write_body(&mut b);
        self.decoder.write_body(&mut b);
        write_section::<f64>(w, SectionTag::MlpAutoencoder, &b.finish())
    }

    pub fn load(r: impl Read) -> Result<Self> {
        let body = read_section::<f64>(r, SectionTag::MlpAutoencoder)?;
        let mut rd = Reader::new(&body);
        let encoder = Model::read_body(&mut rd)?;
        let decoder = Model::read_body(&mut rd)?;
        rd.finish()?;
        if encoder.num_classes() != decoder.input_dim()
            || decoder.num_classes() != encoder.input_dim()
        {
            return Err(Error::Format(
                "encoder and decoder dimensions disagree".into(),
            ));
        }
        Ok(MlpAutoencoder { encoder, decoder })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthonormal;
    use crate::worlds::{projector_error, CurvedWorld, LinearSubspaceWorld, World};

    #[test]
    fn pca_recovers_a_noiseless_subspace() {
        let w = LinearSubspaceWorld::xor_2of8().unwrap();
        let ds = w.sample(500, 1).unwrap();
        let ae = LinearAutoencoder::fit(&ds.x, 2).unwrap();
        assert!(ae.reconstruction_error(&ds.x) < 1e-10);
        let p = ae.estimated_projector(ds.point(0)).unwrap();
        assert!(projector_error(&p, &w.projector()).unwrap() < 1e-6);
        assert!(!ae.is_degenerate());
    }

    #[test]
    fn pca_with_small_noise_has_small_principal_angles() {
        let w = LinearSubspaceWorld::xor_2of8().unwrap().with_noise(0.01);
        let ds = w.sample(1000, 2).unwrap();
        let ae = LinearAutoencoder::fit(&ds.x, 2).unwrap();
        let angles = ae.principal_angles_to(w.basis());
        assert!(angles.iter().all(|&a| a < 0.05), "{angles:?}");
    }

    #[test]
    fn full_latent_dimension_gives_the_identity() {
        let w = LinearSubspaceWorld::xor_2of8().unwrap();
        let ds = w.sample(100, 3).unwrap();
        let ae = LinearAutoencoder::fit(&ds.x, 8).unwrap();
        assert!(ae.is_degenerate());
        let p = ae.estimated_projector(ds.point(0)).unwrap();
        assert!(projector_error(&p, &Projector::identity(8)).unwrap() < 1e-10);
    }

    #[test]
    fn invalid_fits_are_rejected() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0]).unwrap();
        assert!(LinearAutoencoder::fit(&x, 3).is_err());
        assert!(LinearAutoencoder::fit(&x, 0).is_err());
        assert!(LinearAutoencoder::fit(
            &Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            2
        )
        .is_err());
    }

    #[test]
    fn random_orthonormal_decoder_gives_an_idempotent_projector() {
        let d = random_orthonormal(6, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let ae = LinearAutoencoder {
            encoder: d.transpose(),
            decoder: d,
            mean: DVector::zeros(6),
            spectrum: vec![1.0; 6],
        };
        let (idem, sym) = ae
            .estimated_projector(&[0.0; 6])
            .unwrap()
            .invariant_residuals();
        assert!(idem < 1e-10 && sym < 1e-12);
    }

    #[test]
    fn linear_autoencoder_round_trips() {
        let w = LinearSubspaceWorld::xor_2of8().unwrap().with_noise(0.1);
        let ae = LinearAutoencoder::fit(&w.sample(50, 1).unwrap().x, 3).unwrap();
        let mut buf = Vec::new();
        ae.save(&mut buf).unwrap();
        assert_eq!(LinearAutoencoder::load(buf.as_slice()).unwrap(), ae);
        assert!(MlpAutoencoder::load(buf.as_slice()).is_err());
        buf.truncate(buf.len() - 3);
        assert!(LinearAutoencoder::load(buf.as_slice()).is_err());
    }

    #[test]
    fn decoder_jacobian_matches_finite_differences() {
        let ae = MlpAutoencoder {
            encoder: Model::init(&[3, 5, 1], Activation::Tanh, 1).unwrap(),
            decoder: Model::init(&[1, 5, 3], Activation::Tanh, 2).unwrap(),
        };
        let z = [0.4];
        let j = ae.decoder_jacobian(&z).unwrap();
        let h = 1e-6;
        let up = ae.decoder.logits(&[z[0] + h]).unwrap();
        let dn = ae.decoder.logits(&[z[0] - h]).unwrap();
        for i in 0..3 {
            assert!((j[(i, 0)] - (up[i] - dn[i]) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn mlp_autoencoder_learns_the_circle_tangent() {
        let w = CurvedWorld::circle_in_2d().unwrap();
        let ds = w.sample(400, 1).unwrap();
        let cfg = MlpAutoencoderConfig {
            epochs: 150,
            ..Default::default()
        };
        let (ae, losses) = MlpAutoencoder::fit(&ds.x, 1, &cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let mut errs: Vec<f64> = (0..50)
            .map(|i| {
                let truth = w.tangent_projector(ds.point(i), ds.latent(i)).unwrap();
                projector_error(&ae.estimated_projector(ds.point(i)).unwrap(), &truth).unwrap()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[25] < 0.3, "median projector error {}", errs[25]);
        let mut buf = Vec::new();
        ae.save(&mut buf).unwrap();
        assert_eq!(MlpAutoencoder::load(buf.as_slice()).unwrap(), ae);
    }
}
