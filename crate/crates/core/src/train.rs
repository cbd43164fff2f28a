//! Robust training objectives, the l2 PGD attack, SGD with step-decay
//! schedules, and parallel hyperparameter sweeps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Unary};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::stats::NeumaierSum;
use crate::tensor::{norm, Tensor};

fn one() -> usize {
    1
}

/// Training objective. Every variant includes the mean cross-entropy except
/// `Ridge`, a squared loss on a single logit used for linear models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    Ce,
    /// Adds `λ · mean ‖∇ₓ z_y‖²` for the true-class logit `z_y`, or for the
    /// sum of logits when `sum_classes` is set.
    GradNorm {
        lambda: f64,
        #[serde(default)]
        sum_classes: bool,
    },
    /// Adds `λ · mean ‖f(x + ε) − f(x)‖²`, `f` the softmax output, `ε ~ N(0, σ²I)`.
    Smoothness {
        lambda: f64,
        sigma: f64,
        #[serde(default = "one")]
        n_noise: usize,
    },
    /// Cross-entropy at `x + ε`, `ε ~ N(0, σ²I)`.
    RandSmooth {
        sigma: f64,
        #[serde(default = "one")]
        n_noise: usize,
    },
    /// Cross-entropy at an l2 PGD adversary within radius `epsilon`.
    Pgd {
        epsilon: f64,
        steps: usize,
        step_size: f64,
        #[serde(default)]
        random_start: bool,
    },
    /// `mean (z − t)² + λ ‖W‖²` with targets `t = ±1` on a single logit.
    Ridge {
        lambda: f64,
    },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::GradNorm { .. } => "grad-norm",
            Objective::Smoothness { .. } => "smoothness",
            Objective::RandSmooth { .. } => "rand-smooth",
            Objective::Pgd { .. } => "pgd",
            Objective::Ridge { .. } => "ridge",
        }
    }

    /// The swept hyperparameter: `λ`, or `σ` for randomized smoothing, or
    /// `ε` for PGD.
    pub fn param(&self) -> f64 {
        match *self {
            Objective::Ce => 0.0,
            Objective::GradNorm { lambda, .. }
            | Objective::Smoothness { lambda, .. }
            | Objective::Ridge { lambda } => lambda,
            Objective::RandSmooth { sigma, .. } => sigma,
            Objective::Pgd { epsilon, .. } => epsilon,
        }
    }

    /// Copy with the swept hyperparameter replaced. PGD keeps its step size
    /// proportional to the radius.
    pub fn with_param(&self, v: f64) -> Objective {
        let mut o = self.clone();
        match &mut o {
            Objective::Ce => {}
            Objective::GradNorm { lambda, .. }
            | Objective::Smoothness { lambda, .. }
            | Objective::Ridge { lambda } => *lambda = v,
            Objective::RandSmooth { sigma, .. } => *sigma = v,
            Objective::Pgd {
                epsilon, step_size, ..
            } => {
                if *epsilon > 0.0 {
                    *step_size *= v / *epsilon;
                }
                *epsilon = v;
            }
        }
        o
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("{}: {m}", self.name())));
        match *self {
            Objective::GradNorm { lambda, .. } | Objective::Ridge { lambda }
                if !(lambda >= 0.0) =>
            {
                bad("λ must be ≥ 0")
            }
            Objective::Smoothness {
                lambda,
                sigma,
                n_noise,
            } => {
                if !(lambda >= 0.0) {
                    bad("λ must be ≥ 0")
                } else if !(sigma > 0.0) {
                    bad("σ must be > 0")
                } else if n_noise == 0 {
                    bad("n_noise must be ≥ 1")
                } else {
                    Ok(())
                }
            }
            Objective::RandSmooth { sigma, n_noise } if !(sigma > 0.0) || n_noise == 0 => {
                bad("σ must be > 0, n_noise ≥ 1")
            }
            Objective::Pgd {
                epsilon,
                steps,
                step_size,
                ..
            } if !(epsilon >= 0.0) || steps == 0 || !(step_size >= 0.0) => {
                bad("ε ≥ 0, steps ≥ 1 and step size ≥ 0 required")
            }
            _ => Ok(()),
        }
    }

    /// MNIST recipe: 10 steps of size `2.5ε/10`.
    pub fn mnist_pgd(epsilon: f64) -> Objective {
        Objective::Pgd {
            epsilon,
            steps: 10,
            step_size: 2.5 * epsilon / 10.0,
            random_start: false,
        }
    }

    /// Large-scale recipe: 3 steps of size `2ε/3`.
    pub fn imagenet_pgd(epsilon: f64) -> Objective {
        Objective::Pgd {
            epsilon,
            steps: 3,
            step_size: 2.0 * epsilon / 3.0,
            random_start: false,
        }
    }
}

/// SGD with momentum and step decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Penalty weight above which the learning rate is scaled by
    /// `reference / λ`. `None` disables the scaling.
    #[serde(default)]
    pub lr_reference_lambda: Option<f64>,
}

fn default_decay() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

impl Schedule {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Schedule {
            epochs,
            batch_size,
            lr,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            seed: 0,
            momentum: 0.9,
            lr_reference_lambda: None,
        }
    }

    /// 200 epochs from 0.025, decayed tenfold at 150 and 175.
    pub fn cifar() -> Self {
        Schedule {
            decay_epochs: vec![150, 175],
            ..Schedule::new(200, 128, 0.025)
        }
    }

    /// 9 epochs from 0.1, decayed tenfold at 3 and 6.
    pub fn mnist() -> Self {
        Schedule {
            decay_epochs: vec![3, 6],
            ..Schedule::new(9, 128, 0.1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(
                "epochs, batch size and learning rate must be positive".into(),
            ));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1])
            || self.decay_epochs.iter().any(|&e| e >= self.epochs)
        {
            return Err(Error::InvalidArgument(
                "decay epochs must be strictly increasing and below the epoch count".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based) for `objective`.
    pub fn lr_at(&self, epoch: usize, objective: &Objective) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
        let mut lr = self.lr * self.decay_factor.powi(decays);
        if let (
            Some(r),
            Objective::GradNorm { lambda, .. } | Objective::Smoothness { lambda, .. },
        ) = (self.lr_reference_lambda, objective)
        {
            if *lambda > r {
                lr *= r / lambda;
            }
        }
        lr
    }
}

fn onehot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if classes == 1 {
            t.data_mut()[i] = T::one();
        } else if y >= classes {
            return Err(Error::InvalidClass { index: y, classes });
        } else {
            t.data_mut()[i * classes + y] = T::one();
        }
    }
    Ok(t)
}

// ±1 targets for single-logit models: label 1 is positive.
fn signs<T: Scalar>(labels: &[usize]) -> Tensor<T> {
    Tensor::column(
        labels
            .iter()
            .map(|&y| if y == 1 { T::one() } else { -T::one() })
            .collect(),
    )
}

/// Sum over the batch of the cross-entropy of logits `z`. Single-logit
/// models use the logistic loss `softplus(−t·z)`.
fn ce_sum<T: Scalar>(g: &mut Graph<T>, z: NodeId, labels: &[usize]) -> Result<NodeId> {
    let c = g.value(z).cols();
    if c == 1 {
        let t = g.constant(signs::<T>(labels).map(|v| -v))?;
        let m = g.mul(z, t)?;
        let sp = g.unary(Unary::Softplus, m)?;
        return g.sum(sp);
    }
    let lse = g.logsumexp_rows(z)?;
    let oh = g.constant(onehot(labels, c)?)?;
    let picked = g.mul(z, oh)?;
    let picked = g.sum_cols(picked)?;
    let per = g.sub(lse, picked)?;
    g.sum(per)
}

fn output_probs<T: Scalar>(g: &mut Graph<T>, z: NodeId) -> Result<NodeId> {
    if g.value(z).cols() == 1 {
        g.unary(Unary::Sigmoid, z)
    } else {
        g.softmax_rows(z)
    }
}

fn gaussian_like<T: Scalar>(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| T::lit(sigma * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    )
    .expect("shape")
}

/// Mean loss over the batch and its gradient for every parameter tensor, in
/// [`Model::params`] order.
pub fn loss_and_grads<T: Scalar>(
    objective: &Objective,
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<(T, Vec<Tensor<T>>)> {
    objective.validate()?;
    let n = labels.len();
    if n == 0 || x.rows() != n {
        return Err(Error::InvalidArgument(
            "batch must be non-empty with one label per row".into(),
        ));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut g = Graph::new();
    let params = model.param_nodes(&mut g)?;
    let total = match objective {
        Objective::Ce => {
            let xn = g.constant(x.clone())?;
            let z = model.build(&mut g, &params, xn)?;
            ce_sum(&mut g, z, labels)?
        }
        Objective::GradNorm {
            lambda,
            sum_classes,
        } => {
            let xn = g.input(x.clone())?;
            let z = model.build(&mut g, &params, xn)?;
            let ce = ce_sum(&mut g, z, labels)?;
            let pen = grad_norm_sum(&mut g, z, xn, labels, *sum_classes)?;
            let pen = g.scale(pen, T::lit(*lambda))?;
            g.add(ce, pen)?
        }
        Objective::Smoothness {
            lambda,
            sigma,
            n_noise,
        } => {
            let xn = g.constant(x.clone())?;
            let z = model.build(&mut g, &params, xn)?;
            let ce = ce_sum(&mut g, z, labels)?;
            let p = output_probs(&mut g, z)?;
            let mut acc: Option<NodeId> = None;
            for _ in 0..*n_noise {
                let noisy =
                    x.zip_map(&gaussian_like(x.shape(), *sigma, rng), "noise", |a, b| {
                        a + b
                    })?;
                let xe = g.constant(noisy)?;
                let ze = model.build(&mut g, &params, xe)?;
                let pe = output_probs(&mut g, ze)?;
                let diff = g.sub(pe, p)?;
                let sq = g.norm_sq(diff)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, sq)?,
                    None => sq,
                });
            }
            let pen = g.scale(acc.expect("n_noise ≥ 1"), T::lit(lambda / *n_noise as f64))?;
            g.add(ce, pen)?
        }
        Objective::RandSmooth { sigma, n_noise } => {
            let mut acc: Option<NodeId> = None;
            for _ in 0..*n_noise {
                let noisy =
                    x.zip_map(&gaussian_like(x.shape(), *sigma, rng), "noise", |a, b| {
                        a + b
                    })?;
                let xe = g.constant(noisy)?;
                let z = model.build(&mut g, &params, xe)?;
                let ce = ce_sum(&mut g, z, labels)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, ce)?,
                    None => ce,
                });
            }
            g.scale(
                acc.expect("n_noise ≥ 1"),
                T::one() / T::lit(*n_noise as f64),
            )?
        }
        Objective::Pgd {
            epsilon,
            steps,
            step_size,
            random_start,
        } => {
            let adv = pgd_attack(
                model,
                x,
                labels,
                *epsilon,
                *steps,
                *step_size,
                *random_start,
                rng,
            )?;
            let xn = g.constant(adv)?;
            let z = model.build(&mut g, &params, xn)?;
            ce_sum(&mut g, z, labels)?
        }
        Objective::Ridge { lambda } => {
            if model.num_classes() != 1 {
                return Err(Error::Unsupported(
                    "ridge objective needs a single-logit model",
                ));
            }
            let xn = g.constant(x.clone())?;
            let z = model.build(&mut g, &params, xn)?;
            let t = g.constant(signs::<T>(labels))?;
            let r = g.sub(z, t)?;
            let sse = g.norm_sq(r)?;
            let mut reg: Option<NodeId> = None;
            for w in params.iter().step_by(2) {
                let s = g.norm_sq(*w)?;
                reg = Some(match reg {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
            // Scaled by n so that the final division yields mean + λ‖W‖².
            let reg = g.scale(reg.expect("one layer"), T::lit(*lambda * n as f64))?;
            g.add(sse, reg)?
        }
    };
    let loss = g.scale(total, inv_n)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = g.grad_or_zeros(loss, &params)?;
    Ok((
        value,
        grads.into_iter().map(|id| g.value(id).clone()).collect(),
    ))
}

/// `Σ_i ‖∇ₓ z_{i,y_i}‖²` (or of `Σ_c z_{i,c}`) as a differentiable node.
fn grad_norm_sum<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    x: NodeId,
    labels: &[usize],
    sum_classes: bool,
) -> Result<NodeId> {
    let c = g.value(z).cols();
    let selected = if sum_classes {
        g.sum(z)?
    } else {
        let oh = g.constant(onehot(labels, c)?)?;
        let picked = g.mul(z, oh)?;
        g.sum(picked)?
    };
    // Rows are independent, so row i of the gradient is ∇ₓ of sample i alone.
    let gx = g.grad(selected, &[x])?[0];
    g.norm_sq(gx)
}

/// The GradNorm penalty `λ · mean ‖∇ₓ z_y‖²` evaluated without training.
pub fn grad_norm_penalty<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<T> {
    let mut g = Graph::new();
    let params = model.param_nodes(&mut g)?;
    let xn = g.input(x.clone())?;
    let z = model.build(&mut g, &params, xn)?;
    let s = grad_norm_sum(&mut g, z, xn, labels, false)?;
    Ok(g.value(s).item()? * T::lit(lambda / labels.len() as f64))
}

/// l2 projected gradient ascent on the cross-entropy. Each step moves every
/// row by `step_size` along its normalised loss gradient, then projects the
/// total perturbation onto the ball of radius `epsilon`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
    steps: usize,
    step_size: f64,
    random_start: bool,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument("PGD radius must be ≥ 0".into()));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (n, d) = (x.rows(), x.cols());
    let eps = T::lit(epsilon);
    let mut delta = Tensor::<T>::zeros(&[n, d]);
    if random_start {
        for r in 0..n {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = epsilon * rng.gen::<f64>().powf(1.0 / d as f64);
            for (o, v) in delta.row_slice_mut(r).iter_mut().zip(&dir) {
                *o = T::lit(v / len * radius);
            }
        }
    }
    let mut g = Graph::new();
    let params = model.param_nodes(&mut g)?;
    let xn = g.input(x.clone())?;
    let z = model.build(&mut g, &params, xn)?;
    let loss = ce_sum(&mut g, z, labels)?;
    let gx = g.grad(loss, &[xn])?[0];
    for _ in 0..steps {
        let point = x.zip_map(&delta, "pgd", |a, b| a + b)?;
        let grad = g.forward_node(gx, &[(xn, point)])?;
        for r in 0..n {
            let gr = grad.row_slice(r);
            let gn = norm(gr);
            let row = delta.row_slice_mut(r);
            if gn > T::zero() {
                let s = T::lit(step_size) / gn;
                row.iter_mut().zip(gr).for_each(|(o, v)| *o += s * *v);
            }
            let dn = norm(row);
            if dn > eps {
                let s = eps / dn;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    x.zip_map(&delta, "pgd", |a, b| a + b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN when no test set was given.
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_accuracy)
    }
}

/// Trains a copy of `model`; deterministic in `schedule.seed`.
pub fn train<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    test: Option<&Dataset<T>>,
    objective: &Objective,
    schedule: &Schedule,
) -> Result<(Model<T>, History)> {
    train_with(model, data, test, objective, schedule, |_, _| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    test: Option<&Dataset<T>>,
    objective: &Objective,
    schedule: &Schedule,
    mut on_epoch: impl FnMut(usize, &Model<T>),
) -> Result<(Model<T>, History)> {
    objective.validate()?;
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "train",
            detail: format!(
                "data dimension {} for model input {}",
                data.dim(),
                model.input_dim()
            ),
        });
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut velocity: Vec<Tensor<T>> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let momentum = T::lit(schedule.momentum);
    let mut history = History::default();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch, objective);
        let step = T::lit(lr);
        order.shuffle(&mut rng);
        let mut total = NeumaierSum::<f64>::new();
        for (b, idx) in order.chunks(schedule.batch_size).enumerate() {
            let batch = data.select(idx);
            let (loss, grads) =
                match loss_and_grads(objective, &model, &batch.x, &batch.labels, &mut rng) {
                    Ok(v) => v,
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Diverged {
                            epoch,
                            step: b,
                            loss: f64::NAN,
                        })
                    }
                    Err(e) => return Err(e),
                };
            total += loss.as_f64() * idx.len() as f64;
            for ((p, v), gr) in model
                .params_mut()
                .into_iter()
                .zip(&mut velocity)
                .zip(&grads)
            {
                for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                    *vi = momentum * *vi + *gi;
                    *pi -= step * *vi;
                }
            }
            if model.params().iter().any(|p| !p.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: b,
                    loss: loss.as_f64(),
                });
            }
        }
        let test_accuracy = match test {
            Some(t) => model.accuracy(&t.x, &t.labels)?,
            None => f64::NAN,
        };
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: total.total() / data.len() as f64,
            test_accuracy,
        });
        on_epoch(epoch, &model);
    }
    Ok((model, history))
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub index: usize,
    pub objective: Objective,
    pub seed: u64,
}

impl RunSpec {
    pub fn param(&self) -> f64 {
        self.objective.param()
    }
}

/// Cartesian product of `values × seeds` for a base objective, indexed in
/// row-major order starting at `first_index`.
pub fn grid(base: &Objective, values: &[f64], seeds: &[u64], first_index: usize) -> Vec<RunSpec> {
    let mut out = Vec::with_capacity(values.len() * seeds.len());
    for &v in values {
        for &s in seeds {
            out.push(RunSpec {
                index: first_index + out.len(),
                objective: base.with_param(v),
                seed: s,
            });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunOutcome<T> {
    pub spec: RunSpec,
    pub result: std::result::Result<(Model<T>, History), String>,
}

/// Trains every run on up to `jobs` worker threads. Each run initialises its
/// model with `init(seed)` and trains with `schedule.seed = seed`. Failures
/// are recorded per run; outcomes are returned in grid order.
pub fn sweep<T, F>(
    runs: &[RunSpec],
    init: F,
    data: &Dataset<T>,
    test: Option<&Dataset<T>>,
    schedule: &Schedule,
    jobs: usize,
) -> Result<Vec<RunOutcome<T>>>
where
    T: Scalar,
    F: Fn(u64) -> Result<Model<T>> + Sync,
{
    if runs.is_empty() {
        return Err(Error::EmptySweep);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let one_run = |spec: &RunSpec| {
        let sched = Schedule {
            seed: spec.seed,
            ..schedule.clone()
        };
        let result = init(spec.seed)
            .and_then(|m| train(&m, data, test, &spec.objective, &sched))
            .map_err(|e| e.to_string());
        RunOutcome {
            spec: spec.clone(),
            result,
        }
    };
    Ok(pool.install(|| runs.par_iter().map(one_run).collect()))
}
