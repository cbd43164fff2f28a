use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mrlab::lab::verify::{self, Check, PROP1_SIGMAS};
use mrlab::lab::{run_experiment, Config, Report};
use mrlab::metrics::verify_prop1;
use mrlab::mnist::{parse_idx, read_idx, IMAGE_MAGIC, LABEL_MAGIC};
use mrlab::tangent::LinearAutoencoder;
use mrlab::worlds::LinearSubspaceWorld;
use mrlab::{Activation, ClassSelector, Error, Model, Model32, Tensor, World};
use mrlab_validation::{
    central_difference, frobenius_distance, projector_from_columns, ridge_reference, spearman,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            passed: true,
            lines: Vec::new(),
        }
    }

    fn require(&mut self, ok: bool, line: String) {
        self.passed &= ok;
        self.lines
            .push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }

    fn checks(&mut self, checks: &[Check]) {
        for c in checks {
            self.require(
                c.passed,
                format!(
                    "{}: {:.3e} (tolerance {:.1e})",
                    c.name, c.measured, c.tolerance
                ),
            );
        }
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(
    id: usize,
    title: &str,
    budget: Duration,
    f: impl FnOnce() -> mrlab::Result<Outcome>,
) -> bool {
    let t = Instant::now();
    let result = f();
    let elapsed = t.elapsed();
    let (mut passed, lines) = match result {
        Ok(o) => (o.passed, o.lines),
        Err(e) => (false, vec![format!("FAIL error: {e}")]),
    };
    let in_time = elapsed < budget;
    passed &= in_time;
    println!(
        "{} criterion {id:>2} {title} ({:.1} s, budget {} s{})",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
    for l in lines {
        println!("      {l}");
    }
    passed
}

fn gradients() -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    // Logit input gradients against finite differences computed here.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(2..9);
        let sizes = [
            d,
            rng.gen_range(3..12),
            rng.gen_range(3..12),
            rng.gen_range(2..5),
        ];
        let act = [Activation::Softplus, Activation::Tanh][rng.gen_range(0..2)];
        let m = Model::<f64>::init(&sizes, act, rng.gen())?;
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c = rng.gen_range(0..sizes[3]);
        let ad = m.input_gradient(&x, ClassSelector::Class(c))?;
        let fd = central_difference(|p| m.logits(p).expect("logits")[c], &x, 1e-6);
        let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-3);
        worst = worst.max(
            ad.iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
                / scale,
        );
    }
    o.require(
        worst < 1e-5,
        format!("independent input-gradient check, 100 pairs: {worst:.3e} (tolerance 1e-5)"),
    );
    o.checks(&verify::gradcheck(1)?);
    Ok(o)
}

fn prop1() -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    o.checks(&verify::prop1(1)?);
    Ok(o)
}

fn prop2() -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    o.checks(&verify::prop2(1)?);
    Ok(o)
}

fn denoiser() -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    o.checks(&verify::denoiser(1)?);
    Ok(o)
}

fn ridge() -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    let lambda = 1e-2;
    let (world, model, data) = verify::ridge_trained(1, lambda)?;
    let w = model.layers()[0].weight.data().to_vec();
    let b = model.layers()[0].bias.data()[0];
    let basis = world.basis();
    let flat: Vec<f64> = (0..basis.nrows())
        .flat_map(|i| (0..basis.ncols()).map(move |j| basis[(i, j)]))
        .collect();
    let p = projector_from_columns(&flat, basis.nrows(), basis.ncols());
    let d = w.len();
    let off: Vec<f64> = (0..d)
        .map(|i| w[i] - (0..d).map(|j| p[i * d + j] * w[j]).sum::<f64>())
        .collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let frac = norm(&off) / norm(&w);
    o.require(
        frac < 1e-3,
        format!("‖P⊥w‖/‖w‖ = {frac:.3e} (tolerance 1e-3)"),
    );

    let rows: Vec<Vec<f64>> = (0..data.len()).map(|i| data.point(i).to_vec()).collect();
    let t: Vec<f64> = data
        .labels
        .iter()
        .map(|&y| if y == 1 { 1.0 } else { -1.0 })
        .collect();
    let (w_ref, b_ref) = ridge_reference(&rows, &t, lambda);
    let dist = (w
        .iter()
        .zip(&w_ref)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        + (b - b_ref).powi(2))
    .sqrt();
    o.require(
        dist < 1e-6,
        format!("distance to closed-form ridge solution {dist:.3e} (tolerance 1e-6)"),
    );
    Ok(o)
}

/// `(param, value)` for every row of one objective.
fn column(
    report: &Report,
    objective: &str,
    f: impl Fn(&mrlab::lab::ReportRow) -> Option<f64>,
) -> Vec<(f64, f64)> {
    report
        .rows
        .iter()
        .filter(|r| r.objective == objective)
        .map(|r| (r.param, f(r).unwrap_or(f64::NAN)))
        .collect()
}

fn fig2_trends(report: &Report) -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    for name in ["grad-norm", "smoothness", "rand-smooth"] {
        let mut params: Vec<f64> = column(report, name, |_| None).iter().map(|p| p.0).collect();
        params.dedup();
        o.require(
            params.len() == 6,
            format!("{name}: {} grid points", params.len()),
        );
        let (lo, hi) = (params[2], params[3]);
        let rho = |pairs: Vec<(f64, f64)>| {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            spearman(&x, &y)
        };
        let s_off = rho(column(report, name, |r| r.s_off));
        let s_on = column(report, name, |r| r.s_on);
        let lower = rho(s_on.iter().copied().filter(|p| p.0 <= lo).collect());
        let upper = rho(s_on.iter().copied().filter(|p| p.0 >= hi).collect());
        o.require(
            s_off <= -0.8,
            format!("{name}: Spearman(s_off, param) = {s_off:.3} (≤ −0.8)"),
        );
        o.require(
            lower.abs() <= 0.3,
            format!("{name}: lower-half Spearman(s_on, param) = {lower:.3} (|·| ≤ 0.3)"),
        );
        o.require(
            upper <= -0.5,
            format!("{name}: upper-half Spearman(s_on, param) = {upper:.3} (≤ −0.5)"),
        );
        let acc = column(report, name, |r| r.test_acc);
        let mean_at = |p: f64| {
            let v: Vec<f64> = acc.iter().filter(|a| a.0 == p).map(|a| a.1).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let best = params.iter().map(|&p| mean_at(p)).fold(f64::MIN, f64::max);
        let last = mean_at(params[5]);
        o.require(
            last <= best - 0.1,
            format!("{name}: accuracy at the largest value {last:.3} vs sweep maximum {best:.3} (drop ≥ 0.1)"),
        );
    }
    Ok(o)
}

fn alignment(report: &Report) -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    let cos = column(report, "grad-norm", |r| r.oracle_cos);
    let mut params: Vec<f64> = cos.iter().map(|c| c.0).collect();
    params.dedup();
    let means: Vec<f64> = params
        .iter()
        .map(|&p| {
            let v: Vec<f64> = cos.iter().filter(|c| c.0 == p).map(|c| c.1).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let (k, &peak) = means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty sweep");
    let last = *means.last().expect("non-empty sweep");
    let means_txt: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
    o.require(true, format!("mean cosine per λ: {}", means_txt.join(", ")));
    o.require(
        k > 0 && k + 1 < means.len(),
        format!("maximum at interior λ = {}", params[k]),
    );
    o.require(
        peak - means[0] >= 0.1,
        format!("gain over λ = 0: {:.3} (≥ 0.1)", peak - means[0]),
    );
    o.require(
        last < peak,
        format!("cosine at the largest λ {last:.3} < maximum {peak:.3}"),
    );
    Ok(o)
}

fn mnist_distractor() -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    let mut cfg = Config::preset("mnist-distractor")?;
    cfg.world.path = Some(repo_root().join("data/mnist-5k"));
    let dir = tempfile::tempdir()?;
    let report = run_experiment(&cfg, dir.path(), 1, Some("mnist-distractor"))?;
    let find = |name: &str| {
        report
            .runs
            .iter()
            .find(|r| r.objective.name() == name && r.status == "ok")
    };
    let (Some(ce), Some(pgd)) = (find("ce"), find("pgd")) else {
        o.require(false, "standard or PGD run missing".into());
        return Ok(o);
    };
    if ce.relative_robustness.is_empty()
        || ce.relative_robustness.len() != pgd.relative_robustness.len()
    {
        o.require(false, "relative robustness missing".into());
        return Ok(o);
    }
    for (a, b) in ce.relative_robustness.iter().zip(&pgd.relative_robustness) {
        let (s, p) = (a.result.ratio, b.result.ratio);
        o.require(
            p < s,
            format!("σ = {}: PGD ratio {p:.4} < standard ratio {s:.4}", a.sigma),
        );
        o.require(
            s <= 1.0,
            format!("σ = {}: standard ratio {s:.4} ≤ 1", a.sigma),
        );
    }
    let (a, b) = (
        ce.relative_robustness.last().unwrap(),
        pgd.relative_robustness.last().unwrap(),
    );
    let factor = a.result.ratio / b.result.ratio;
    o.require(
        factor >= 1.5,
        format!("σ = {}: improvement factor {factor:.3} (≥ 1.5)", a.sigma),
    );
    Ok(o)
}

fn tangent_fidelity() -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    let world = LinearSubspaceWorld::xor_2of8()?;
    let basis = world.basis();
    let flat: Vec<f64> = (0..basis.nrows())
        .flat_map(|i| (0..basis.ncols()).map(move |j| basis[(i, j)]))
        .collect();
    let truth = projector_from_columns(&flat, basis.nrows(), basis.ncols());

    let clean = world.sample(1000, 21)?;
    let est = LinearAutoencoder::fit(&clean.x, 2)?.estimated_projector(&[])?;
    let err = frobenius_distance(est.matrix().data(), &truth);
    o.require(
        err < 1e-6,
        format!("noiseless PCA projector Frobenius error {err:.3e} (tolerance 1e-6)"),
    );

    let noisy = LinearSubspaceWorld::xor_2of8()?
        .with_noise(0.01)
        .sample(1000, 22)?;
    let est = LinearAutoencoder::fit(&noisy.x, 2)?.estimated_projector(&[])?;
    let err = frobenius_distance(est.matrix().data(), &truth);
    o.require(
        true,
        format!("noisy PCA projector Frobenius error {err:.3e}"),
    );

    // The trained model and test points of criterion 2, measured with both projectors.
    let seed = 1;
    let (w, model) = verify::prop1_model(seed)?;
    let test = w.sample(20, seed + 1000)?;
    let (mut d1, mut d2) = (0.0f64, 0.0f64);
    for i in 0..test.len() {
        let x = test.point(i);
        let oracle = w.tangent_projector(x, test.latent(i))?;
        let a = verify_prop1(
            &model,
            x,
            &oracle,
            &PROP1_SIGMAS,
            100_000,
            seed,
            ClassSelector::Predicted,
        )?;
        let b = verify_prop1(
            &model,
            x,
            &est,
            &PROP1_SIGMAS,
            100_000,
            seed,
            ClassSelector::Predicted,
        )?;
        d2 = d2.max((a[0].rho2 - b[0].rho2).abs());
        for (ra, rb) in a.iter().zip(&b) {
            d1 = d1.max((ra.rho1 - rb.rho1).abs());
        }
    }
    o.require(
        d1 < 0.02,
        format!("noise 0.01: max |Δρ1| over 20 points and 4 levels {d1:.3e} (tolerance 0.02)"),
    );
    o.require(
        d2 < 0.02,
        format!("noise 0.01: max |Δρ2| over 20 points {d2:.3e} (tolerance 0.02)"),
    );
    Ok(o)
}

fn determinism(fig2: &Config, first: &Path) -> mrlab::Result<Outcome> {
    let mut o = Outcome::new();
    let dir = tempfile::tempdir()?;
    run_experiment(fig2, dir.path(), 3, Some("fig2-desk"))?;
    let a = fs::read(first.join("report.csv"))?;
    let b = fs::read(dir.path().join("report.csv"))?;
    o.require(
        a == b,
        format!(
            "fig2-desk report.csv identical with 1 and 3 workers ({} bytes)",
            a.len()
        ),
    );

    let m = Model::<f64>::init(&[8, 16, 3], Activation::Softplus, 5)?;
    let mut bytes = Vec::new();
    m.save(&mut bytes)?;
    let back = Model::<f64>::load(bytes.as_slice())?;
    let same_bits = m.params().iter().zip(back.params()).all(|(p, q)| {
        p.data()
            .iter()
            .zip(q.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let mut again = Vec::new();
    back.save(&mut again)?;
    o.require(
        bytes.starts_with(b"MRL1"),
        "model files start with the MRL1 magic".into(),
    );
    o.require(
        same_bits && again == bytes,
        "f64 model round-trip is bit-exact".into(),
    );
    let m32 = Model32::init(&[4, 5, 2], Activation::Tanh, 6)?;
    let mut b32 = Vec::new();
    m32.save(&mut b32)?;
    let back32 = Model32::load(b32.as_slice())?;
    let x = Tensor::row(vec![0.1f32, -0.7, 0.3, 2.0]);
    o.require(
        back32 == m32 && back32.logits_batch(&x)?.data() == m32.logits_batch(&x)?.data(),
        "f32 model round-trip is bit-exact".into(),
    );

    let root = repo_root().join("data/mnist-5k");
    let images = read_idx(root.join("images-idx3-ubyte.gz"))?;
    let labels = read_idx(root.join("labels-idx1-ubyte.gz"))?;
    o.require(
        images.magic == IMAGE_MAGIC
            && images.dims == [5000, 28, 28]
            && labels.magic == LABEL_MAGIC
            && labels.dims == [5000],
        format!(
            "IDX files parsed: images {:?}, labels {:?}",
            images.dims, labels.dims
        ),
    );
    let mut header = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
    header.extend([0u8, 64, 128, 255]);
    o.require(
        parse_idx(&header).is_ok(),
        "official-layout image header accepted".into(),
    );
    for corrupt in [[0u8, 0, 8, 4], [1, 0, 8, 3], [0x1f, 0x8b, 8, 0]] {
        let mut bad = header.clone();
        bad[..4].copy_from_slice(&corrupt);
        let rejected = matches!(parse_idx(&bad), Err(Error::BadMagic { .. }));
        o.require(rejected, format!("corrupted magic {corrupt:02x?} rejected"));
    }
    Ok(o)
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut results = Vec::new();
    results.push(run(1, "gradient correctness", secs(60), gradients));
    results.push(run(2, "ρ1 → ρ2 as σ → 0", secs(300), prop1));
    results.push(run(
        3,
        "Bayes gradients on the signal manifold",
        secs(60),
        prop2,
    ));
    results.push(run(4, "denoiser-score identity", secs(10), denoiser));
    results.push(run(5, "weight-decayed linear model", secs(60), ridge));

    let fig2 = Config::preset("fig2-desk").expect("preset");
    let fig2_dir = tempfile::tempdir().expect("temp dir");
    let mut sweep: Option<Report> = None;
    results.push(run(6, "regularisation trends", secs(1800), || {
        let report = run_experiment(&fig2, fig2_dir.path(), 1, Some("fig2-desk"))?;
        let o = fig2_trends(&report);
        sweep = Some(report);
        o
    }));
    results.push(run(
        7,
        "distractor robustness under PGD training",
        secs(1200),
        mnist_distractor,
    ));
    results.push(match &sweep {
        Some(report) => run(
            8,
            "gradient alignment along the GradNorm sweep",
            secs(1800),
            || alignment(report),
        ),
        None => {
            println!(
                "FAIL criterion  8 gradient alignment along the GradNorm sweep: sweep unavailable"
            );
            false
        }
    });
    results.push(run(
        9,
        "tangent estimation fidelity",
        secs(120),
        tangent_fidelity,
    ));
    results.push(run(10, "determinism and formats", secs(120), || {
        determinism(&fig2, fig2_dir.path())
    }));

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
