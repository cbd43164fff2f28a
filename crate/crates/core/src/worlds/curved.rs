use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::gmm::{check_sigma, ClassTerms};
use super::{check_dim, Projector, World, DEFAULT_SIGMA_WORLD};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const QUADRATURE_POINTS: usize = 2048;

/// Closed curves `φ: [0, 2π) → R^d` with analytic derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Curve {
    /// `(cos t, sin t)` in `R²`.
    Circle,
    /// `(cos t, sin t, a·sin 2t)` in `R³`.
    WarpedCircle { amplitude: f64 },
}

impl Curve {
    pub fn dim(self) -> usize {
        match self {
            Curve::Circle => 2,
            Curve::WarpedCircle { .. } => 3,
        }
    }

    pub fn point(self, t: f64) -> Vec<f64> {
        match self {
            Curve::Circle => vec![t.cos(), t.sin()],
            Curve::WarpedCircle { amplitude } => {
                vec![t.cos(), t.sin(), amplitude * (2.0 * t).sin()]
            }
        }
    }

    /// `φ'(t)`, the single column of the Jacobian.
    pub fn tangent(self, t: f64) -> Vec<f64> {
        match self {
            Curve::Circle => vec![-t.sin(), t.cos()],
            Curve::WarpedCircle { amplitude } => {
                vec![-t.sin(), t.cos(), 2.0 * amplitude * (2.0 * t).cos()]
            }
        }
    }
}

/// Von Mises density on the circle, `∝ exp(κ cos(t − μ))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VonMises {
    pub mean: f64,
    pub concentration: f64,
}

impl VonMises {
    fn log_unnormalised(self, t: f64) -> f64 {
        self.concentration * (t - self.mean).cos()
    }

    fn sample(self, rng: &mut impl Rng) -> f64 {
        loop {
            let t = rng.gen_range(-PI..PI);
            let accept = (self.concentration * ((t - self.mean).cos() - 1.0)).exp();
            if rng.gen::<f64>() < accept {
                return t.rem_euclid(2.0 * PI);
            }
        }
    }
}

/// A one-dimensional manifold: points `φ(t)` with a class-conditional von
/// Mises latent. Densities, scores and the denoiser use periodic trapezoid
/// quadrature over `t`, which converges spectrally for these integrands.
#[derive(Clone, Debug)]
pub struct CurvedWorld {
    name: String,
    curve: Curve,
    classes: Vec<(f64, VonMises)>,
    noise: f64,
    sigma_world: f64,
    nodes: Vec<f64>,
    points: Vec<Vec<f64>>,
    // Per class, log quadrature weights normalised to sum to one.
    log_weights: Vec<Vec<f64>>,
}

impl CurvedWorld {
    pub fn new(
        name: &str,
        curve: Curve,
        classes: Vec<(f64, VonMises)>,
        sigma_world: f64,
    ) -> Result<Self> {
        let total: f64 = classes.iter().map(|c| c.0).sum();
        if classes.is_empty() || (total - 1.0).abs() > 1e-12 || classes.iter().any(|c| c.0 < 0.0) {
            return Err(Error::InvalidArgument(
                "class priors must be non-negative and sum to one".into(),
            ));
        }
        if !(sigma_world > 0.0) {
            return Err(Error::Unsupported(
                "curved worlds need a positive sigma_world",
            ));
        }
        let nodes: Vec<f64> = (0..QUADRATURE_POINTS)
            .map(|i| 2.0 * PI * i as f64 / QUADRATURE_POINTS as f64)
            .collect();
        let points = nodes.iter().map(|&t| curve.point(t)).collect();
        let log_weights = classes
            .iter()
            .map(|(_, vm)| {
                let raw: Vec<f64> = nodes.iter().map(|&t| vm.log_unnormalised(t)).collect();
                let lse = logsumexp(&raw);
                raw.into_iter().map(|v| v - lse).collect()
            })
            .collect();
        Ok(CurvedWorld {
            name: name.into(),
            curve,
            classes,
            noise: 0.0,
            sigma_world,
            nodes,
            points,
            log_weights,
        })
    }

    pub fn circle_in_3d() -> Result<Self> {
        Self::new(
            "circle-in-3d",
            Curve::WarpedCircle { amplitude: 0.3 },
            Self::two_arcs(),
            DEFAULT_SIGMA_WORLD,
        )
    }

    pub fn circle_in_2d() -> Result<Self> {
        Self::new(
            "circle-in-2d",
            Curve::Circle,
            Self::two_arcs(),
            DEFAULT_SIGMA_WORLD,
        )
    }

    fn two_arcs() -> Vec<(f64, VonMises)> {
        vec![
            (
                0.5,
                VonMises {
                    mean: 0.0,
                    concentration: 2.0,
                },
            ),
            (
                0.5,
                VonMises {
                    mean: PI,
                    concentration: 2.0,
                },
            ),
        ]
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn curve(&self) -> Curve {
        self.curve
    }

    /// Latent `t` minimising `‖φ(t) − x‖` by damped Gauss–Newton, started
    /// from `start` or from the nearest quadrature node.
    pub fn preimage(&self, x: &[f64], start: Option<f64>) -> Result<f64> {
        check_dim(x, self.dim())?;
        let objective = |t: f64| dist2(&self.curve.point(t), x);
        let mut t = match start {
            Some(t) => t,
            None => {
                let best = (0..self.nodes.len())
                    .min_by(|&a, &b| {
                        dist2(&self.points[a], x).total_cmp(&dist2(&self.points[b], x))
                    })
                    .expect("nodes");
                self.nodes[best]
            }
        };
        for _ in 0..100 {
            let p = self.curve.point(t);
            let j = self.curve.tangent(t);
            let jj: f64 = j.iter().map(|v| v * v).sum();
            if jj < 1e-24 {
                return Err(Error::RankDeficient("curve Jacobian"));
            }
            let jr: f64 = j.iter().zip(&p).zip(x).map(|((a, b), c)| a * (b - c)).sum();
            let step = -jr / jj;
            let f0 = objective(t);
            let mut alpha = 1.0;
            while objective(t + alpha * step) > f0 && alpha > 1e-12 {
                alpha *= 0.5;
            }
            t += alpha * step;
            if (alpha * step).abs() < 1e-10 {
                break;
            }
        }
        Ok(t.rem_euclid(2.0 * PI))
    }

    pub fn projector_at_latent(&self, t: f64) -> Result<Projector<f64>> {
        let j = DMatrix::from_column_slice(self.dim(), 1, &self.curve.tangent(t));
        Projector::from_dmatrix_basis(&j)
    }

    // Per class: log p(x, y) and responsibilities over quadrature nodes.
    fn class_weights(&self, x: &[f64], s: f64) -> Vec<(f64, Vec<f64>)> {
        let d = self.dim() as f64;
        let norm = -0.5 * d * (2.0 * PI * s * s).ln();
        let quad: Vec<f64> = self
            .points
            .iter()
            .map(|p| -dist2(p, x) / (2.0 * s * s))
            .collect();
        self.classes
            .iter()
            .zip(&self.log_weights)
            .map(|((prior, _), lw)| {
                let a: Vec<f64> = quad.iter().zip(lw).map(|(q, w)| q + w).collect();
                let lse = logsumexp(&a);
                let r = a.iter().map(|v| (v - lse).exp()).collect();
                (prior.ln() + lse + norm, r)
            })
            .collect()
    }

    fn weighted_point(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, p) in r.iter().zip(&self.points) {
            out.iter_mut().zip(p).for_each(|(o, v)| *o += w * v);
        }
        out
    }

    fn mixed_denoiser(
        &self,
        x: &[f64],
        class: Option<usize>,
        sigma: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_sigma(sigma)?;
        check_dim(x, self.dim())?;
        let cw = self.class_weights(x, sigma);
        let logs: Vec<f64> = cw.iter().map(|c| c.0).collect();
        let weights: Vec<f64> = match class {
            Some(y) => {
                self.check_class(y)?;
                (0..cw.len())
                    .map(|i| if i == y { 1.0 } else { 0.0 })
                    .collect()
            }
            None => super::gmm::posterior_from_log_joint(&logs)?,
        };
        let mut d = vec![0.0; self.dim()];
        for (w, (_, r)) in weights.iter().zip(&cw) {
            if *w > 0.0 {
                let p = self.weighted_point(r);
                d.iter_mut().zip(&p).for_each(|(o, v)| *o += w * v);
            }
        }
        let score = d
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) / (sigma * sigma))
            .collect();
        Ok((d, score))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl World for CurvedWorld {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.curve.dim()
    }

    fn manifold_dim(&self) -> usize {
        1
    }

    fn classes(&self) -> usize {
        self.classes.len()
    }

    fn priors(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.0).collect()
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "sample size must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(1);
        let d = self.dim();
        let mut x = Vec::with_capacity(n * d);
        let mut lat = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut y = self.classes.len() - 1;
            for (i, c) in self.classes.iter().enumerate() {
                acc += c.0;
                if u < acc {
                    y = i;
                    break;
                }
            }
            let t = self.classes[y].1.sample(&mut rng);
            let mut p = self.curve.point(t);
            if self.noise > 0.0 {
                p.iter_mut()
                    .for_each(|v| *v += self.noise * noise_rng.sample::<f64, _>(StandardNormal));
            }
            x.extend(p);
            lat.push(t);
            labels.push(y);
        }
        Dataset::new(Tensor::matrix(n, d, x)?, labels)?.with_latents(Tensor::matrix(n, 1, lat)?)
    }

    fn tangent_projector(&self, x: &[f64], latent: Option<&[f64]>) -> Result<Projector<f64>> {
        let t = self.preimage(x, latent.map(|l| l[0]))?;
        self.projector_at_latent(t)
    }

    fn bayes_terms(&self, x: &[f64]) -> Result<ClassTerms> {
        check_dim(x, self.dim())?;
        let s = self.sigma_world;
        let cw = self.class_weights(x, s);
        let mut log_joint = Vec::with_capacity(cw.len());
        let mut grads = Vec::with_capacity(cw.len());
        for (lj, r) in &cw {
            let p = self.weighted_point(r);
            log_joint.push(*lj);
            grads.push(DVector::from_iterator(
                p.len(),
                p.iter().zip(x).map(|(a, b)| (a - b) / (s * s)),
            ));
        }
        Ok(ClassTerms {
            log_joint,
            grad_log_joint: grads,
            lift: None,
        })
    }

    fn score(&self, x: &[f64], class: Option<usize>, sigma: f64) -> Result<Vec<f64>> {
        Ok(self.mixed_denoiser(x, class, sigma)?.1)
    }

    fn optimal_denoiser(&self, x: &[f64], class: Option<usize>, sigma: f64) -> Result<Vec<f64>> {
        Ok(self.mixed_denoiser(x, class, sigma)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference;

    #[test]
    fn circle_projector_at_zero_is_vertical() {
        let w = CurvedWorld::circle_in_2d().unwrap();
        let p = w.tangent_projector(&[1.0, 0.0], Some(&[0.0])).unwrap();
        let m = p.matrix();
        assert!((m.get(0, 0)).abs() < 1e-15 && (m.get(1, 1) - 1.0).abs() < 1e-15);
        assert_eq!(p.apply(&[3.0, 2.0])[1], 2.0);
    }

    #[test]
    fn analytic_tangents_match_finite_differences() {
        for curve in [Curve::Circle, Curve::WarpedCircle { amplitude: 0.3 }] {
            for &t in &[0.0, 0.7, 2.5, 5.9] {
                let j = curve.tangent(t);
                for (k, jk) in j.iter().enumerate() {
                    let fd =
                        central_difference(|s| Ok(curve.point(s[0])[k]), &[t], 1e-6).unwrap()[0];
                    assert!((fd - jk).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn preimage_recovers_the_generating_latent() {
        let w = CurvedWorld::circle_in_3d().unwrap();
        let ds = w.sample(50, 1).unwrap();
        for i in 0..50 {
            let t0 = ds.latent(i).unwrap()[0];
            let from_grid = w.preimage(ds.point(i), None).unwrap();
            let from_latent = w.preimage(ds.point(i), Some(t0 + 0.05)).unwrap();
            let wrap = |a: f64| (a - t0 + PI).rem_euclid(2.0 * PI) - PI;
            assert!(wrap(from_grid).abs() < 1e-9 && wrap(from_latent).abs() < 1e-9);
        }
    }

    #[test]
    fn posterior_follows_the_arcs() {
        let w = CurvedWorld::circle_in_3d().unwrap();
        let p = w.bayes_posterior(&w.curve.point(0.1)).unwrap();
        assert!(p[0] > 0.9);
        let p = w.bayes_posterior(&w.curve.point(PI - 0.1)).unwrap();
        assert!(p[1] > 0.9);
    }
}
