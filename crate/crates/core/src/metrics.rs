//! Sensitivity and alignment measurements: output changes under on- and
//! off-manifold noise, the robustness ratio `ρ1`, the gradient misalignment
//! fraction `ρ2`, their small-noise equivalence, signal/distractor relative
//! robustness, and cosine alignment with oracle gradients.
//!
//! Monte Carlo loops draw point `i` from stream `i` of a ChaCha generator
//! seeded with the caller's seed, so results do not depend on how points are
//! spread over worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ClassSelector, Model, OutputSpace};
use crate::scalar::Scalar;
use crate::stats::{mean_and_se, ratio_of_means, NeumaierSum, RatioEstimate};
use crate::tensor::{argmax, dot, Tensor};
use crate::worlds::{Projector, World};

/// Value reported for distractor/signal ratios whose signal sensitivity
/// vanishes while the distractor sensitivity does not.
pub const RATIO_SENTINEL: f64 = 1e12;

const CHUNK: usize = 2048;

/// Anything with probability outputs and input gradients: trained models or
/// the Bayes oracle of a world.
pub trait Predictor: Sync {
    fn input_dim(&self) -> usize;

    /// Outputs for every row of `x` in the requested space.
    fn outputs(&self, x: &Tensor<f64>, space: OutputSpace) -> Result<Tensor<f64>>;

    fn input_gradient(&self, x: &[f64], sel: ClassSelector, space: OutputSpace)
        -> Result<Vec<f64>>;
}

fn log_softmax_rows(z: &mut Tensor<f64>) {
    for r in 0..z.rows() {
        let row = z.row_slice_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
}

impl<T: Scalar> Predictor for Model<T> {
    fn input_dim(&self) -> usize {
        Model::input_dim(self)
    }

    fn outputs(&self, x: &Tensor<f64>, space: OutputSpace) -> Result<Tensor<f64>> {
        let xt = x.cast::<T>();
        Ok(match space {
            OutputSpace::Logits => self.logits_batch(&xt)?.cast(),
            OutputSpace::Probabilities => self.probs_batch(&xt)?.cast(),
            OutputSpace::LogProbabilities => {
                let mut z = self.logits_batch(&xt)?.cast();
                log_softmax_rows(&mut z);
                z
            }
        })
    }

    fn input_gradient(
        &self,
        x: &[f64],
        sel: ClassSelector,
        space: OutputSpace,
    ) -> Result<Vec<f64>> {
        let xt: Vec<T> = x.iter().map(|&v| T::lit(v)).collect();
        Ok(self
            .input_gradient_in(&xt, sel, space)?
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

/// The Bayes posterior of a world. Its logits are log-posteriors.
pub struct BayesPredictor<'a>(pub &'a dyn World);

impl Predictor for BayesPredictor<'_> {
    fn input_dim(&self) -> usize {
        self.0.dim()
    }

    fn outputs(&self, x: &Tensor<f64>, space: OutputSpace) -> Result<Tensor<f64>> {
        let c = self.0.classes();
        let mut out = Vec::with_capacity(x.rows() * c);
        for r in 0..x.rows() {
            let p = self.0.bayes_posterior(x.row_slice(r))?;
            match space {
                OutputSpace::Probabilities => out.extend(p),
                OutputSpace::Logits | OutputSpace::LogProbabilities => {
                    out.extend(p.iter().map(|v| v.ln()))
                }
            }
        }
        Tensor::matrix(x.rows(), c, out)
    }

    fn input_gradient(
        &self,
        x: &[f64],
        sel: ClassSelector,
        space: OutputSpace,
    ) -> Result<Vec<f64>> {
        let classes: Vec<usize> = match sel {
            ClassSelector::Class(c) => vec![c],
            ClassSelector::Predicted => vec![argmax(&self.0.bayes_posterior(x)?)],
            ClassSelector::Sum => (0..self.0.classes()).collect(),
        };
        let mut total = vec![0.0; x.len()];
        for c in classes {
            let g = match space {
                OutputSpace::Probabilities => self.0.bayes_input_gradient(x, c)?,
                OutputSpace::Logits | OutputSpace::LogProbabilities => {
                    self.0.bayes_log_posterior_gradient(x, c)?
                }
            };
            total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
        }
        Ok(total)
    }
}

/// What is compared between `f(x)` and `f(x + u)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Readout {
    /// The full output vector, compared in l2.
    Vector { space: OutputSpace },
    /// One output; `Predicted` is resolved at the clean point.
    Scalar {
        class: ClassSelector,
        space: OutputSpace,
    },
}

impl Readout {
    /// The predicted-class pre-softmax logit.
    pub const PREDICTED_LOGIT: Readout = Readout::Scalar {
        class: ClassSelector::Predicted,
        space: OutputSpace::Logits,
    };
    pub const PROBABILITIES: Readout = Readout::Vector {
        space: OutputSpace::Probabilities,
    };

    fn space(&self) -> OutputSpace {
        match *self {
            Readout::Vector { space } | Readout::Scalar { space, .. } => space,
        }
    }
}

/// Squared output changes `‖f(x + u_r) − f(x)‖²` for every row `u_r` of `u`.
fn squared_changes(
    p: &impl Predictor,
    x: &[f64],
    fx: &[f64],
    u: &Tensor<f64>,
    readout: Readout,
) -> Result<Vec<f64>> {
    let mut shifted = u.clone();
    for r in 0..shifted.rows() {
        shifted
            .row_slice_mut(r)
            .iter_mut()
            .zip(x)
            .for_each(|(v, xi)| *v += xi);
    }
    let out = p.outputs(&shifted, readout.space())?;
    let c = fx.len();
    let sum_sq = |row: &[f64]| {
        row.iter()
            .zip(fx)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    Ok((0..out.rows())
        .map(|r| {
            let row = out.row_slice(r);
            match readout {
                Readout::Vector { .. } => sum_sq(row),
                Readout::Scalar {
                    class: ClassSelector::Sum,
                    ..
                } => {
                    let d = row.iter().sum::<f64>() - fx.iter().sum::<f64>();
                    d * d
                }
                Readout::Scalar { class, .. } => {
                    let k = match class {
                        ClassSelector::Class(k) => k,
                        _ => argmax(fx),
                    };
                    debug_assert!(k < c);
                    (row[k] - fx[k]).powi(2)
                }
            }
        })
        .collect())
}

fn clean_output(p: &impl Predictor, x: &[f64], readout: Readout) -> Result<Vec<f64>> {
    if x.len() != p.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            detail: format!(
                "point of dimension {} for input dimension {}",
                x.len(),
                p.input_dim()
            ),
        });
    }
    if let Readout::Scalar {
        class: ClassSelector::Class(k),
        ..
    } = readout
    {
        let fx = p
            .outputs(&Tensor::row(x.to_vec()), readout.space())?
            .into_data();
        if k >= fx.len() {
            return Err(Error::InvalidClass {
                index: k,
                classes: fx.len(),
            });
        }
        return Ok(fx);
    }
    // The predicted class is the argmax of the logits in every space.
    Ok(p.outputs(&Tensor::row(x.to_vec()), readout.space())?
        .into_data())
}

/// `‖f(x + u) − f(x)‖₂` for a vector readout, `(f(x + u) − f(x))²` for a
/// scalar one.
pub fn output_change(p: &impl Predictor, x: &[f64], u: &[f64], readout: Readout) -> Result<f64> {
    if u.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "output change",
            detail: "perturbation dimension".into(),
        });
    }
    let fx = clean_output(p, x, readout)?;
    let sq = squared_changes(p, x, &fx, &Tensor::row(u.to_vec()), readout)?[0];
    Ok(match readout {
        Readout::Vector { .. } => sq.sqrt(),
        Readout::Scalar { .. } => sq,
    })
}

/// How on- and off-manifold perturbations are drawn from `u ~ N(0, σ²I)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// `P u` and `P^⊥ u` as drawn; their expected squared norms scale with
    /// the subspace dimensions.
    RawProjection,
    /// `P u` and `P^⊥ u` rescaled to a common l2 norm.
    NormMatched,
}

/// Mean squared output change over Monte Carlo draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    pub mean: f64,
    pub se: f64,
    pub n_samples: usize,
    pub mode: NoiseMode,
    /// `σ` for raw projections, the common l2 norm for matched ones.
    pub scale: f64,
}

impl SensitivityEstimate {
    fn from_samples(xs: &[f64], mode: NoiseMode, scale: f64) -> Self {
        let (mean, se) = mean_and_se(xs);
        SensitivityEstimate {
            mean,
            se,
            n_samples: xs.len(),
            mode,
            scale,
        }
    }
}

/// Tangent projectors for a list of points.
#[derive(Clone, Copy, Debug)]
pub enum Tangents<'a> {
    Shared(&'a Projector<f64>),
    PerPoint(&'a [Projector<f64>]),
}

impl<'a> Tangents<'a> {
    fn get(&self, i: usize) -> &'a Projector<f64> {
        match *self {
            Tangents::Shared(p) => p,
            Tangents::PerPoint(ps) => &ps[i],
        }
    }

    fn check(&self, n: usize, d: usize) -> Result<()> {
        let ok = match *self {
            Tangents::Shared(p) => p.dim() == d,
            Tangents::PerPoint(ps) => ps.len() == n && ps.iter().all(|p| p.dim() == d),
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "tangents",
                detail: "one projector of the input dimension per point".into(),
            });
        }
        Ok(())
    }
}

fn project_rows(p: &Projector<f64>, u: &Tensor<f64>) -> Result<Tensor<f64>> {
    match p.mask() {
        Some(mask) => {
            let mut out = u.clone();
            for r in 0..out.rows() {
                out.row_slice_mut(r)
                    .iter_mut()
                    .zip(mask)
                    .filter(|(_, &m)| !m)
                    .for_each(|(v, _)| *v = 0.0);
            }
            Ok(out)
        }
        // P is symmetric, so U·P projects every row.
        None => u.matmul(&p.matrix()),
    }
}

fn gaussian_rows(rows: usize, d: usize, sigma: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let data = (0..rows * d)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, d, data).expect("shape")
}

fn rescale_rows(u: &mut Tensor<f64>, target: &[f64]) {
    for (r, &t) in target.iter().enumerate() {
        let row = u.row_slice_mut(r);
        let n = dot(row, row).sqrt();
        // A zero row cannot be rescaled and stays a zero perturbation.
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v *= t / n);
        }
    }
}

fn row_norms(u: &Tensor<f64>) -> Vec<f64> {
    (0..u.rows())
        .map(|r| dot(u.row_slice(r), u.row_slice(r)).sqrt())
        .collect()
}

fn point_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn points_of(x: &Tensor<f64>) -> Vec<&[f64]> {
    (0..x.rows()).map(|r| x.row_slice(r)).collect()
}

/// The off-manifold robustness ratio in both noise conventions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rho1 {
    /// `E(f(x + P^⊥u) − f(x))² / E(f(x + u) − f(x))²`
    pub raw: RatioEstimate<f64>,
    /// As `raw` with `P^⊥u` rescaled to `‖u‖`.
    pub norm_matched: RatioEstimate<f64>,
    pub sigma: f64,
    pub n_samples: usize,
}

/// Per-draw `(off, isotropic, matched-off)` squared changes at one point.
fn rho1_samples(
    p: &impl Predictor,
    x: &[f64],
    proj: &Projector<f64>,
    sigma: f64,
    n: usize,
    rng: &mut impl Rng,
    readout: Readout,
) -> Result<[Vec<f64>; 3]> {
    let fx = clean_output(p, x, readout)?;
    let d = x.len();
    let mut out = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    let mut left = n;
    while left > 0 {
        let m = left.min(CHUNK);
        left -= m;
        let u = gaussian_rows(m, d, sigma, rng);
        let on = project_rows(proj, &u)?;
        let off = u.zip_map(&on, "perp", |a, b| a - b)?;
        let mut matched = off.clone();
        rescale_rows(&mut matched, &row_norms(&u));
        out[0].extend(squared_changes(p, x, &fx, &off, readout)?);
        out[1].extend(squared_changes(p, x, &fx, &u, readout)?);
        out[2].extend(squared_changes(p, x, &fx, &matched, readout)?);
    }
    Ok(out)
}

fn rho1_from(off: &[f64], iso: &[f64], matched: &[f64], sigma: f64) -> Result<Rho1> {
    let raw = ratio_of_means(off, iso);
    if !(raw.denominator > 10.0 * raw.denominator_se) {
        return Err(Error::IllConditionedRatio {
            mean: raw.denominator,
            se: raw.denominator_se,
        });
    }
    Ok(Rho1 {
        raw,
        norm_matched: ratio_of_means(matched, iso),
        sigma,
        n_samples: off.len(),
    })
}

fn check_mc(sigma: f64, n: usize) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise level must be positive, got {sigma}"
        )));
    }
    if n < 100 {
        return Err(Error::InvalidArgument(format!(
            "at least 100 Monte Carlo samples required, got {n}"
        )));
    }
    Ok(())
}

/// Monte Carlo estimate of `ρ1` at one point with `n` draws.
pub fn rho1(
    p: &impl Predictor,
    x: &[f64],
    proj: &Projector<f64>,
    sigma: f64,
    n: usize,
    seed: u64,
    readout: Readout,
) -> Result<Rho1> {
    check_mc(sigma, n)?;
    Tangents::Shared(proj).check(1, x.len())?;
    let [off, iso, matched] = rho1_samples(p, x, proj, sigma, n, &mut point_rng(seed, 0), readout)?;
    rho1_from(&off, &iso, &matched, sigma)
}

/// `ρ1` pooled over the rows of `x`: the ratio of mean squared changes over
/// all `(point, draw)` pairs, with `n` draws per point.
pub fn rho1_pooled(
    p: &impl Predictor,
    x: &Tensor<f64>,
    tangents: Tangents,
    sigma: f64,
    n: usize,
    seed: u64,
    readout: Readout,
) -> Result<Rho1> {
    check_mc(sigma, n)?;
    tangents.check(x.rows(), x.cols())?;
    let per_point: Vec<[Vec<f64>; 3]> = points_of(x)
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            rho1_samples(
                p,
                xi,
                tangents.get(i),
                sigma,
                n,
                &mut point_rng(seed, i),
                readout,
            )
        })
        .collect::<Result<_>>()?;
    let cat = |k: usize| {
        per_point
            .iter()
            .flat_map(|s| s[k].iter().copied())
            .collect::<Vec<_>>()
    };
    rho1_from(&cat(0), &cat(1), &cat(2), sigma)
}

/// `‖P^⊥∇f‖² / ‖∇f‖²` for the selected pre-softmax logit.
pub fn rho2(
    p: &impl Predictor,
    x: &[f64],
    proj: &Projector<f64>,
    sel: ClassSelector,
) -> Result<f64> {
    rho2_in(p, x, proj, sel, OutputSpace::Logits)
}

pub fn rho2_in(
    p: &impl Predictor,
    x: &[f64],
    proj: &Projector<f64>,
    sel: ClassSelector,
    space: OutputSpace,
) -> Result<f64> {
    Tangents::Shared(proj).check(1, x.len())?;
    let g = p.input_gradient(x, sel, space)?;
    misalignment(&g, proj)
}

/// Fraction of the squared norm of `g` orthogonal to the range of `proj`.
pub fn misalignment(g: &[f64], proj: &Projector<f64>) -> Result<f64> {
    let total = dot(g, g);
    if !(total > 0.0) {
        return Err(Error::UndefinedAlignment);
    }
    let off = proj.perp(g);
    Ok((dot(&off, &off) / total).clamp(0.0, 1.0))
}

/// Mean of `ρ2` over the rows of `x`.
pub fn rho2_mean(
    p: &impl Predictor,
    x: &Tensor<f64>,
    tangents: Tangents,
    sel: ClassSelector,
) -> Result<f64> {
    tangents.check(x.rows(), x.cols())?;
    let vals: Vec<f64> = points_of(x)
        .par_iter()
        .enumerate()
        .map(|(i, xi)| rho2(p, xi, tangents.get(i), sel))
        .collect::<Result<_>>()?;
    let mut s = NeumaierSum::new();
    vals.iter().for_each(|v| s += *v);
    Ok(s.total() / vals.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Row {
    pub sigma: f64,
    pub rho1: f64,
    pub rho1_se: f64,
    pub rho2: f64,
    /// `|ρ1 − ρ2|`
    pub gap: f64,
}

/// `ρ1(σ)` against `ρ2` for the selected logit over a decreasing list of
/// noise levels. Every level reuses the same standard-normal draws.
pub fn verify_prop1(
    p: &impl Predictor,
    x: &[f64],
    proj: &Projector<f64>,
    sigmas: &[f64],
    n: usize,
    seed: u64,
    sel: ClassSelector,
) -> Result<Vec<Prop1Row>> {
    if sigmas.is_empty() || sigmas.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArgument(
            "noise levels must be non-empty and strictly decreasing".into(),
        ));
    }
    // Resolve the class once so every level measures the same scalar function.
    let class = match sel {
        ClassSelector::Predicted => ClassSelector::Class(argmax(
            &p.outputs(&Tensor::row(x.to_vec()), OutputSpace::Logits)?
                .into_data(),
        )),
        other => other,
    };
    let r2 = rho2(p, x, proj, class)?;
    let readout = Readout::Scalar {
        class,
        space: OutputSpace::Logits,
    };
    sigmas
        .iter()
        .map(|&s| {
            let r = rho1(p, x, proj, s, n, seed, readout)?;
            Ok(Prop1Row {
                sigma: s,
                rho1: r.raw.ratio,
                rho1_se: r.raw.se,
                rho2: r2,
                gap: (r.raw.ratio - r2).abs(),
            })
        })
        .collect()
}

/// Checks a [`verify_prop1`] table: the gap may grow from one level to the
/// next smaller one by at most twice the larger of the two standard errors,
/// and at the smallest level it is below `rel_tol · max(ρ2, 0.01)`.
pub fn check_prop1(rows: &[Prop1Row], rel_tol: f64) -> std::result::Result<(), String> {
    for w in rows.windows(2) {
        let slack = 2.0 * w[0].rho1_se.max(w[1].rho1_se);
        if w[1].gap > w[0].gap + slack {
            return Err(format!(
                "gap grew from {:.3e} at σ={} to {:.3e} at σ={} (allowed slack {:.3e})",
                w[0].gap, w[0].sigma, w[1].gap, w[1].sigma, slack
            ));
        }
    }
    let last = rows.last().ok_or("empty table")?;
    let tol = rel_tol * last.rho2.max(0.01);
    if last.gap >= tol {
        return Err(format!(
            "gap {:.3e} at σ={} exceeds {:.3e}",
            last.gap, last.sigma, tol
        ));
    }
    Ok(())
}

/// Mean squared output changes under tangent and normal perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivities {
    /// Perturbations `P u` and `P^⊥ u` rescaled to norm `radius`.
    pub on: SensitivityEstimate,
    pub off: SensitivityEstimate,
    /// `P u` and `P^⊥ u` for `u ~ N(0, σ²I)`, `σ = radius/√d`.
    pub on_raw: SensitivityEstimate,
    pub off_raw: SensitivityEstimate,
}

/// On- and off-manifold sensitivities averaged over the rows of `x`, with `n`
/// draws per point.
pub fn sensitivities(
    p: &impl Predictor,
    x: &Tensor<f64>,
    tangents: Tangents,
    radius: f64,
    n: usize,
    seed: u64,
    readout: Readout,
) -> Result<Sensitivities> {
    if !(radius > 0.0) || n == 0 || x.rows() == 0 {
        return Err(Error::InvalidArgument(
            "positive radius, draws and points required".into(),
        ));
    }
    tangents.check(x.rows(), x.cols())?;
    let d = x.cols();
    let sigma = radius / (d as f64).sqrt();
    let per_point: Vec<[Vec<f64>; 4]> = points_of(x)
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            let proj = tangents.get(i);
            let k = proj.trace();
            if k < 0.5 || k > d as f64 - 0.5 {
                return Err(Error::InvalidArgument(
                    "tangent space must be a proper non-zero subspace".into(),
                ));
            }
            let fx = clean_output(p, xi, readout)?;
            let mut rng = point_rng(seed, i);
            let u = gaussian_rows(n, d, sigma, &mut rng);
            let on_raw = project_rows(proj, &u)?;
            let off_raw = u.zip_map(&on_raw, "perp", |a, b| a - b)?;
            let mut on = on_raw.clone();
            let mut off = off_raw.clone();
            rescale_rows(&mut on, &vec![radius; n]);
            rescale_rows(&mut off, &vec![radius; n]);
            Ok([
                squared_changes(p, xi, &fx, &on, readout)?,
                squared_changes(p, xi, &fx, &off, readout)?,
                squared_changes(p, xi, &fx, &on_raw, readout)?,
                squared_changes(p, xi, &fx, &off_raw, readout)?,
            ])
        })
        .collect::<Result<_>>()?;
    let est = |k: usize, mode, scale| {
        let xs: Vec<f64> = per_point
            .iter()
            .flat_map(|s| s[k].iter().copied())
            .collect();
        SensitivityEstimate::from_samples(&xs, mode, scale)
    };
    Ok(Sensitivities {
        on: est(0, NoiseMode::NormMatched, radius),
        off: est(1, NoiseMode::NormMatched, radius),
        on_raw: est(2, NoiseMode::RawProjection, sigma),
        off_raw: est(3, NoiseMode::RawProjection, sigma),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeRobustness {
    /// Mean distractor-noise change over mean signal-noise change, capped at
    /// [`RATIO_SENTINEL`].
    pub ratio: f64,
    pub capped: bool,
    /// Mean `‖f(x + u) − f(x)‖₂` with noise on the distractor only.
    pub distractor: SensitivityEstimate,
    pub signal: SensitivityEstimate,
}

/// Relative noise robustness: `u ~ N(0, σ²)` is added to either the signal
/// coordinates or the distractor coordinates of each row of `x`, `n` times
/// per region, and the mean l2 output changes are compared. `signal_masks`
/// holds one mask shared by all points or one per point.
pub fn relative_noise_robustness(
    p: &impl Predictor,
    x: &Tensor<f64>,
    signal_masks: &[Vec<bool>],
    sigma: f64,
    n: usize,
    seed: u64,
    space: OutputSpace,
) -> Result<RelativeRobustness> {
    if !(sigma > 0.0) || n == 0 || x.rows() == 0 {
        return Err(Error::InvalidArgument(
            "positive noise level, draws and points required".into(),
        ));
    }
    let shared = signal_masks.len() == 1;
    if !(shared || signal_masks.len() == x.rows())
        || signal_masks.iter().any(|m| m.len() != x.cols())
    {
        return Err(Error::ShapeMismatch {
            op: "relative robustness",
            detail: "one mask per point or a shared mask".into(),
        });
    }
    let readout = Readout::Vector { space };
    let per_point: Vec<[Vec<f64>; 2]> = points_of(x)
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            let sig = Projector::from_mask(signal_masks[if shared { 0 } else { i }].clone());
            let dis = sig.complement();
            let fx = clean_output(p, xi, readout)?;
            let mut rng = point_rng(seed, i);
            let us = project_rows(&sig, &gaussian_rows(n, xi.len(), sigma, &mut rng))?;
            let ud = project_rows(&dis, &gaussian_rows(n, xi.len(), sigma, &mut rng))?;
            let sq = |u| -> Result<Vec<f64>> {
                Ok(squared_changes(p, xi, &fx, u, readout)?
                    .into_iter()
                    .map(f64::sqrt)
                    .collect())
            };
            Ok([sq(&ud)?, sq(&us)?])
        })
        .collect::<Result<_>>()?;
    let est = |k: usize| {
        let xs: Vec<f64> = per_point
            .iter()
            .flat_map(|s| s[k].iter().copied())
            .collect();
        SensitivityEstimate::from_samples(&xs, NoiseMode::RawProjection, sigma)
    };
    let (distractor, signal) = (est(0), est(1));
    let (ratio, capped) = if signal.mean > 0.0 {
        let r = distractor.mean / signal.mean;
        (r.min(RATIO_SENTINEL), r > RATIO_SENTINEL)
    } else if distractor.mean > 0.0 {
        (RATIO_SENTINEL, true)
    } else {
        return Err(Error::DegenerateModel);
    };
    Ok(RelativeRobustness {
        ratio,
        capped,
        distractor,
        signal,
    })
}

/// Cosine of the angle between two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::UndefinedCosine);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the predictor's input gradient and `oracle(x)`.
pub fn gradient_score_alignment(
    p: &impl Predictor,
    oracle: impl Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    sel: ClassSelector,
    space: OutputSpace,
) -> Result<f64> {
    cosine(&p.input_gradient(x, sel, space)?, &oracle(x)?)
}

/// Mean cosine over the rows of `x` between the predictor's gradient (in
/// `space`) for its predicted class and the Bayes log-posterior gradient of
/// the same class. Points where either gradient vanishes are skipped.
pub fn mean_bayes_cosine(
    p: &impl Predictor,
    world: &dyn World,
    x: &Tensor<f64>,
    space: OutputSpace,
) -> Result<f64> {
    let vals: Vec<Option<f64>> = points_of(x)
        .par_iter()
        .map(|xi| {
            let out = p.outputs(&Tensor::row(xi.to_vec()), OutputSpace::Logits)?;
            let class = argmax(out.data());
            let g = p.input_gradient(xi, ClassSelector::Class(class), space)?;
            match cosine(&g, &world.bayes_log_posterior_gradient(xi, class)?) {
                Ok(c) => Ok(Some(c)),
                Err(Error::UndefinedCosine) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = vals.into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedCosine);
    }
    let mut s = NeumaierSum::new();
    defined.iter().for_each(|v| s += *v);
    Ok(s.total() / defined.len() as f64)
}
