//! Self-checks of the theory against closed forms and finite differences.
//! Each suite returns named measurements with their tolerances.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{central_difference, Graph};
use crate::error::{Error, Result};
use crate::linalg::{solve, to_dmatrix};
use crate::metrics::{check_prop1, misalignment, rho1, rho2, verify_prop1, Readout};
use crate::models::{Activation, ClassSelector, Model};
use crate::tensor::{norm, Tensor};
use crate::train::{loss_and_grads, train, Objective, Schedule};
use crate::worlds::{preset, LinearSubspaceWorld, World};

pub const SUITES: &[&str] = &["prop1", "prop2", "denoiser", "linear", "gradcheck"];

/// `measured < tolerance` passes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn below(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            tolerance,
            passed: measured < tolerance,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {}: measured {:.3e}, tolerance {:.3e}",
            self.name, self.measured, self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub fn verify(suite: &str, seed: u64) -> Result<Vec<Check>> {
    match suite {
        "prop1" => prop1(seed),
        "prop2" => prop2(seed),
        "denoiser" => denoiser(seed),
        "linear" => linear(seed),
        "gradcheck" => gradcheck(seed),
        other => Err(Error::Config(format!(
            "unknown suite {other:?}; known: {}",
            SUITES.join(", ")
        ))),
    }
}

fn gaussian_vec(d: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `‖a − b‖∞ / ‖b‖∞`
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Noise levels of the σ → 0 check.
pub const PROP1_SIGMAS: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

/// A softplus MLP trained with cross-entropy on `subspace-2of8`.
pub fn prop1_model(seed: u64) -> Result<(Box<dyn World>, Model<f64>)> {
    let world = preset("subspace-2of8")?;
    let data = world.sample(1000, seed)?;
    let init = Model::init(&[8, 32, 32, 2], Activation::Softplus, seed)?;
    let sched = Schedule {
        decay_epochs: vec![15],
        seed,
        ..Schedule::new(20, 64, 0.05)
    };
    let (model, _) = train(&init, &data, None, &Objective::Ce, &sched)?;
    Ok((world, model))
}

/// ρ1 → ρ2 as σ → 0 at 20 test points with `10⁵` draws each, and ρ1 = ρ2
/// within three standard errors for a linear model at every σ.
pub fn prop1(seed: u64) -> Result<Vec<Check>> {
    let n = 100_000;
    let (world, model) = prop1_model(seed)?;
    let test = world.sample(20, seed.wrapping_add(1000))?;
    let mut worst_final = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..test.len() {
        let x = test.point(i);
        let proj = world.tangent_projector(x, test.latent(i))?;
        let rows = verify_prop1(
            &model,
            x,
            &proj,
            &PROP1_SIGMAS,
            n,
            seed,
            ClassSelector::Predicted,
        )?;
        let last = rows.last().expect("four levels");
        worst_final = worst_final.max(last.gap / last.rho2.max(0.01));
        if let Err(e) = check_prop1(&rows, 0.05) {
            failures.push(format!("point {i}: {e}"));
        }
    }
    let mut checks = vec![
        Check::below(
            "prop1: max |ρ1(1e-3) − ρ2| / max(ρ2, 0.01) over 20 points",
            worst_final,
            0.05,
        ),
        Check::below(
            "prop1: points whose gap grows as σ shrinks (beyond 2 SE)",
            failures.len() as f64,
            0.5,
        )
        .with_detail(failures.join("; ")),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::matrix(1, 8, gaussian_vec(8, 1.0, &mut rng))?;
    let lin = Model::linear(w, vec![0.2])?;
    let mut worst = 0.0f64;
    for i in 0..5 {
        let x = test.point(i);
        let proj = world.tangent_projector(x, None)?;
        let r2 = rho2(&lin, x, &proj, ClassSelector::Class(0))?;
        for &s in &PROP1_SIGMAS {
            let r = rho1(
                &lin,
                x,
                &proj,
                s,
                n,
                seed + i as u64,
                Readout::Scalar {
                    class: ClassSelector::Class(0),
                    space: crate::models::OutputSpace::Logits,
                },
            )?;
            worst = worst.max((r.raw.ratio - r2).abs() / r.raw.se);
        }
    }
    checks.push(Check::below(
        "prop1: linear model max |ρ1 − ρ2| in standard errors, all σ",
        worst,
        3.0,
    ));
    Ok(checks)
}

/// Bayes gradients vanish on the distractor block and lie in the span of a
/// linear subspace world.
pub fn prop2(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = preset("signal-distractor-4+4")?;
    let mask = sd.signal_mask().ok_or(Error::Unsupported("signal mask"))?;
    let mut worst_block = 0.0f64;
    for _ in 0..100 {
        let x = gaussian_vec(sd.dim(), 1.5, &mut rng);
        for y in 0..sd.classes() {
            let g = sd.bayes_input_gradient(&x, y)?;
            for (v, &m) in g.iter().zip(&mask) {
                if !m {
                    worst_block = worst_block.max(v.abs());
                }
            }
        }
    }
    let mut worst_frac = 0.0f64;
    for name in ["subspace-2of8", "subspace-linear-2of8"] {
        let w = preset(name)?;
        let proj = w.tangent_projector(&vec![0.0; w.dim()], None)?;
        for _ in 0..100 {
            let x = gaussian_vec(w.dim(), 1.5, &mut rng);
            for y in 0..w.classes() {
                let g = w.bayes_input_gradient(&x, y)?;
                if norm(&g) > 0.0 {
                    worst_frac = worst_frac.max(misalignment(&g, &proj)?);
                }
            }
        }
    }
    Ok(vec![
        Check::below(
            "prop2: distractor-block max |∂p(y|x)/∂x|",
            worst_block,
            1e-10,
        ),
        Check::below(
            "prop2: off-span fraction of Bayes gradients",
            worst_frac,
            1e-10,
        ),
    ])
}

/// `(D(x, σ) − x)/σ² = score(x, σ)` at 200 random `(x, σ)` on Gaussian worlds.
pub fn denoiser(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worlds = [
        preset("subspace-2of8")?,
        preset("subspace-linear-2of8")?,
        preset("signal-distractor-4+4")?,
    ];
    let mut worst = 0.0f64;
    for k in 0..200 {
        let w = &worlds[k % worlds.len()];
        let x = gaussian_vec(w.dim(), 2.0, &mut rng);
        let sigma = rng.gen_range(0.05..3.0);
        let class = if rng.gen_bool(0.5) {
            Some(rng.gen_range(0..w.classes()))
        } else {
            None
        };
        let d = w.optimal_denoiser(&x, class, sigma)?;
        let s = w.score(&x, class, sigma)?;
        for j in 0..x.len() {
            worst = worst.max(((d[j] - x[j]) / (sigma * sigma) - s[j]).abs());
        }
    }
    Ok(vec![Check::below(
        "denoiser: max |(D(x,σ) − x)/σ² − score(x,σ)|",
        worst,
        1e-8,
    )])
}

/// Minimiser of `mean (wᵀx + b − t)² + λ‖w‖²`.
pub fn ridge_closed_form(x: &Tensor<f64>, t: &[f64], lambda: f64) -> Result<(DVector<f64>, f64)> {
    let (n, d) = (x.rows() as f64, x.cols());
    let xm = to_dmatrix(x);
    let mean = xm.row_mean().transpose();
    let tm = t.iter().sum::<f64>() / n;
    let xc = DMatrix::from_fn(xm.nrows(), d, |i, j| xm[(i, j)] - mean[j]);
    let tc = DVector::from_iterator(t.len(), t.iter().map(|v| v - tm));
    let a = xc.transpose() * &xc / n + DMatrix::identity(d, d) * lambda;
    let w = solve(&a, &(xc.transpose() * tc / n))?;
    let b = tm - w.dot(&mean);
    Ok((w, b))
}

/// The ridge-trained linear model used by [`linear`]: full-batch momentum
/// gradient descent on `subspace-linear-2of8`.
pub fn ridge_trained(
    seed: u64,
    lambda: f64,
) -> Result<(LinearSubspaceWorld, Model<f64>, crate::data::Dataset<f64>)> {
    let world = LinearSubspaceWorld::linear_2of8()?;
    let data = world.sample(500, seed)?;
    let init = Model::init(&[8, 1], Activation::Identity, seed)?;
    let sched = Schedule {
        seed,
        ..Schedule::new(4000, data.len(), 0.1)
    };
    let (model, _) = train(&init, &data, None, &Objective::Ridge { lambda }, &sched)?;
    Ok((world, model, data))
}

/// Weight decay drives a linear model's weights into the data span and onto
/// the closed-form ridge solution.
pub fn linear(seed: u64) -> Result<Vec<Check>> {
    let lambda = 1e-2;
    let (world, model, data) = ridge_trained(seed, lambda)?;
    let w = model.layers()[0].weight.data().to_vec();
    let b = model.layers()[0].bias.data()[0];
    let off = world.projector().perp(&w);
    let off_frac = norm(&off) / norm(&w);
    let t: Vec<f64> = data
        .labels
        .iter()
        .map(|&y| if y == 1 { 1.0 } else { -1.0 })
        .collect();
    let (w_star, b_star) = ridge_closed_form(&data.x, &t, lambda)?;
    let dist = w
        .iter()
        .zip(w_star.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        + (b - b_star).powi(2);
    Ok(vec![
        Check::below("linear: ‖P⊥w‖/‖w‖ after weight decay", off_frac, 1e-3),
        Check::below("linear: ‖(w, b) − ridge closed form‖₂", dist.sqrt(), 1e-6),
    ])
}

fn random_mlp(rng: &mut ChaCha8Rng) -> Result<Model<f64>> {
    let d = rng.gen_range(2..7);
    let depth = rng.gen_range(1..3);
    let mut sizes = vec![d];
    sizes.extend((0..depth).map(|_| rng.gen_range(3..9)));
    sizes.push(rng.gen_range(1..5));
    let act = [Activation::Softplus, Activation::Tanh][rng.gen_range(0..2)];
    Model::init(&sizes, act, rng.gen())
}

/// Input and parameter gradients against central differences on 100 random
/// `(model, point)` pairs, and the double-backward GradNorm gradient against
/// closed forms on quadratics.
pub fn gradcheck(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let (mut worst_in, mut worst_par) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let m = random_mlp(&mut rng)?;
        let x = gaussian_vec(m.input_dim(), 1.0, &mut rng);
        let c = rng.gen_range(0..m.num_classes());
        let ad = m.input_gradient(&x, ClassSelector::Class(c))?;
        let fd = central_difference(|p| Ok(m.logits(p)?[c]), &x, h)?;
        worst_in = worst_in.max(rel_err(&ad, &fd));

        let xb = Tensor::row(x.clone());
        let label = vec![rng.gen_range(0..m.num_classes().max(2))];
        let mut noise = ChaCha8Rng::seed_from_u64(0);
        let (_, grads) = loss_and_grads(&Objective::Ce, &m, &xb, &label, &mut noise)?;
        let flat: Vec<f64> = m
            .params()
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        let loss_at = |theta: &[f64]| -> Result<f64> {
            let mut mm = m.clone();
            let mut k = 0;
            for p in mm.params_mut() {
                for v in p.data_mut() {
                    *v = theta[k];
                    k += 1;
                }
            }
            Ok(loss_and_grads(
                &Objective::Ce,
                &mm,
                &xb,
                &label,
                &mut ChaCha8Rng::seed_from_u64(0),
            )?
            .0)
        };
        let fd = central_difference(loss_at, &flat, h)?;
        let ad: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect();
        worst_par = worst_par.max(rel_err(&ad, &fd));
    }
    let mut worst_q = 0.0f64;
    for _ in 0..20 {
        let d = rng.gen_range(2..6);
        let wm = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xv = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut g = Graph::new();
        let w = g.input(crate::linalg::from_dmatrix(&wm))?;
        let x = g.input(Tensor::row(xv.iter().copied().collect()))?;
        // f(x) = x W xᵀ, so ∇ₓf = (W + Wᵀ)x and ∂‖∇ₓf‖²/∂W = 2(v xᵀ + x vᵀ).
        let xw = g.matmul(x, w)?;
        let prod = g.mul(xw, x)?;
        let f = g.sum(prod)?;
        let gx = g.grad(f, &[x])?[0];
        let pen = g.norm_sq(gx)?;
        let gw = g.grad(pen, &[w])?[0];
        let v = (&wm + wm.transpose()) * &xv;
        let expected = (&v * xv.transpose() + &xv * v.transpose()) * 2.0;
        let got = to_dmatrix(g.value(gw));
        worst_q = worst_q.max((got - expected).amax());
    }
    // For a linear model the penalty is λ‖w_y‖², whose gradient is 2λ w_y.
    let lin = Model::<f64>::linear(Tensor::matrix(1, 3, vec![0.7, -1.2, 0.4])?, vec![0.1])?;
    let xb = Tensor::matrix(2, 3, vec![0.3, -0.1, 0.8, -0.5, 0.2, 0.1])?;
    let labels = [0, 0];
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let ce = loss_and_grads(&Objective::Ce, &lin, &xb, &labels, &mut r)?.1;
    let gn = loss_and_grads(
        &Objective::GradNorm {
            lambda: 0.3,
            sum_classes: false,
        },
        &lin,
        &xb,
        &labels,
        &mut r,
    )?
    .1;
    for k in 0..3 {
        let extra = gn[0].data()[k] - ce[0].data()[k];
        worst_q = worst_q.max((extra - 2.0 * 0.3 * lin.layers()[0].weight.data()[k]).abs());
    }
    Ok(vec![
        Check::below(
            "gradcheck: input gradients, max relative error over 100 pairs",
            worst_in,
            1e-5,
        ),
        Check::below(
            "gradcheck: parameter gradients, max relative error over 100 pairs",
            worst_par,
            1e-5,
        ),
        Check::below(
            "gradcheck: GradNorm second-order gradient on quadratics, max abs error",
            worst_q,
            1e-8,
        ),
    ])
}
