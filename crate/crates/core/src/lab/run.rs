use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{Config, TangentSource};
use super::report::{
    classify_regime, GradientDump, Metadata, Report, ReportRow, RobustnessAtLevel, RunRecord,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    mean_bayes_cosine, relative_noise_robustness, rho1_pooled, rho2_mean, sensitivities, Readout,
    Tangents,
};
use crate::mnist::{compose_distractor, letter_a, load_mnist};
use crate::models::{ClassSelector, Model, OutputSpace};
use crate::tangent::{LinearAutoencoder, MlpAutoencoder, MlpAutoencoderConfig};
use crate::tensor::{argmax, Tensor};
use crate::train::{train, History, RunOutcome, RunSpec, Schedule};
use crate::worlds::{preset, Projector, World};

/// Data, oracles and metric points for one config.
pub struct Experiment {
    pub config: Config,
    /// `None` for digit worlds, which have no Bayes oracle.
    pub world: Option<Box<dyn World>>,
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    /// The leading test points on which metrics are evaluated.
    pub points: Tensor<f64>,
    /// Tangent projector per metric point.
    pub tangents: Vec<Projector<f64>>,
    /// Signal mask per metric point, for worlds with a signal/distractor split.
    pub signal_masks: Option<Vec<Vec<bool>>>,
    classes: usize,
}

fn digit_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (
        dir.join("images-idx3-ubyte.gz"),
        dir.join("labels-idx1-ubyte.gz"),
    )
}

impl Experiment {
    pub fn prepare(config: &Config) -> Result<Self> {
        config.validate()?;
        let w = &config.world;
        let (world, train, test, classes, masks) = if config.is_digit_world() {
            let dir = w
                .path
                .clone()
                .ok_or_else(|| Error::Config("digit worlds need world.path".into()))?;
            let (images, labels) = digit_paths(&dir);
            let digits = load_mnist(images, labels)?;
            let glyph: Vec<f64> = letter_a()
                .into_iter()
                .map(|v| v * w.glyph_intensity)
                .collect();
            let set = compose_distractor(&digits, &glyph, w.compose_seed)?;
            let mut order: Vec<usize> = (0..set.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(w.train_seed));
            if w.n_test >= order.len() {
                return Err(Error::Config(format!(
                    "n_test {} leaves no training digits",
                    w.n_test
                )));
            }
            let (te, tr) = order.split_at(w.n_test);
            let tr = &tr[..tr.len().min(w.n_train)];
            let masks: Vec<Vec<bool>> = te
                .iter()
                .map(|&i| set.placements[i].signal_mask())
                .collect();
            (
                None,
                set.data.select(tr),
                set.data.select(te),
                10,
                Some(masks),
            )
        } else {
            let world = preset(&w.preset)?;
            let train = world.sample(w.n_train, w.train_seed)?;
            let test = world.sample(w.n_test, w.test_seed)?;
            let classes = world.classes();
            let masks = world.signal_mask().map(|m| vec![m; test.len()]);
            (Some(world), train, test, classes, masks)
        };
        let n = config.metrics.n_points.min(test.len());
        let idx: Vec<usize> = (0..n).collect();
        let sub = test.select(&idx);
        let tangents = tangents_for(config, world.as_deref(), &train, &sub, masks.as_deref())?;
        Ok(Experiment {
            config: config.clone(),
            world,
            train,
            test,
            points: sub.x,
            tangents,
            signal_masks: masks.map(|m| m[..n].to_vec()),
            classes,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.train.dim()];
        s.extend(&self.config.model.hidden);
        s.push(self.classes);
        s
    }

    pub fn init_model(&self, seed: u64) -> Result<Model<f64>> {
        Model::init(&self.sizes(), self.config.model.activation, seed)
    }

    /// Runs in grid order with the schedule of each.
    pub fn runs(&self) -> Vec<(RunSpec, Schedule)> {
        let mut out = Vec::new();
        for entry in &self.config.objectives {
            let sched = self.config.schedule_for(entry);
            for &v in &entry.values {
                for &seed in &self.config.grid.seeds {
                    let spec = RunSpec {
                        index: out.len(),
                        objective: entry.objective.with_param(v),
                        seed,
                    };
                    out.push((
                        spec,
                        Schedule {
                            seed,
                            ..sched.clone()
                        },
                    ));
                }
            }
        }
        out
    }
}

fn tangents_for(
    config: &Config,
    world: Option<&dyn World>,
    train: &Dataset<f64>,
    points: &Dataset<f64>,
    masks: Option<&[Vec<bool>]>,
) -> Result<Vec<Projector<f64>>> {
    let n = points.len();
    match (config.metrics.tangent, world) {
        (TangentSource::Oracle, Some(w)) => (0..n)
            .map(|i| w.tangent_projector(points.point(i), points.latent(i)))
            .collect(),
        (TangentSource::Oracle, None) => {
            let masks =
                masks.ok_or_else(|| Error::Config("no tangent oracle for this world".into()))?;
            Ok(masks[..n]
                .iter()
                .map(|m| Projector::from_mask(m.clone()))
                .collect())
        }
        (TangentSource::Pca, Some(w)) => {
            let p = LinearAutoencoder::fit(&train.x, w.manifold_dim())?.estimated_projector(&[])?;
            Ok(vec![p; n])
        }
        (TangentSource::MlpAutoencoder, Some(w)) => {
            let cfg = MlpAutoencoderConfig {
                seed: config.metrics.seed,
                ..Default::default()
            };
            let (ae, _) = MlpAutoencoder::fit(&train.x, w.manifold_dim(), &cfg)?;
            (0..n)
                .map(|i| ae.estimated_projector(points.point(i)))
                .collect()
        }
        (_, None) => Err(Error::Config(
            "estimated tangents need a world with a manifold dimension".into(),
        )),
    }
}

fn cache_dir(out: &Path, config: &Config) -> PathBuf {
    out.join("models").join(&config.hash()[..16])
}

fn cache_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("run-{index:04}.mrl")),
        dir.join(format!("run-{index:04}.history.json")),
    )
}

fn load_cached(dir: &Path, index: usize) -> Option<(Model<f64>, History)> {
    let (m, h) = cache_paths(dir, index);
    let model = Model::load_path(m).ok()?;
    let history = serde_json::from_str(&fs::read_to_string(h).ok()?).ok()?;
    Some((model, history))
}

/// Trains every run of the sweep on `jobs` workers, reusing models cached
/// under `out/models/<config hash>/` and caching new ones. With
/// `require_cached` nothing is trained and missing models are an error.
pub fn train_runs(
    exp: &Experiment,
    out: &Path,
    jobs: usize,
    require_cached: bool,
) -> Result<Vec<RunOutcome<f64>>> {
    let runs = exp.runs();
    if runs.is_empty() {
        return Err(Error::EmptySweep);
    }
    let dir = cache_dir(out, &exp.config);
    let cached: Vec<Option<(Model<f64>, History)>> = runs
        .iter()
        .map(|(s, _)| load_cached(&dir, s.index))
        .collect();
    if require_cached {
        if let Some(((s, _), _)) = runs.iter().zip(&cached).find(|(_, c)| c.is_none()) {
            return Err(Error::Config(format!(
                "no trained model for run {} in {}",
                s.index,
                dir.display()
            )));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let fresh: Vec<Option<std::result::Result<(Model<f64>, History), String>>> =
        pool.install(|| {
            runs.par_iter()
                .zip(&cached)
                .map(|((spec, sched), c)| {
                    if c.is_some() {
                        return None;
                    }
                    let r = exp.init_model(spec.seed).and_then(|m| {
                        train(&m, &exp.train, Some(&exp.test), &spec.objective, sched)
                    });
                    Some(r.map_err(|e| e.to_string()))
                })
                .collect()
        });
    // Single writer: cache files are written here, in grid order.
    let mut outcomes = Vec::with_capacity(runs.len());
    for (((spec, _), c), f) in runs.into_iter().zip(cached).zip(fresh) {
        let result = match (c, f) {
            (Some(v), _) => Ok(v),
            (None, Some(Ok((m, h)))) => {
                fs::create_dir_all(&dir)?;
                let (mp, hp) = cache_paths(&dir, spec.index);
                m.save_path(mp)?;
                fs::write(
                    hp,
                    serde_json::to_string(&h).map_err(|e| Error::Format(e.to_string()))?,
                )?;
                Ok((m, h))
            }
            (None, Some(Err(e))) => Err(e),
            (None, None) => unreachable!("uncached runs are trained"),
        };
        outcomes.push(RunOutcome { spec, result });
    }
    Ok(outcomes)
}

fn metadata(config: &Config) -> Metadata {
    let m = &config.metrics;
    Metadata {
        momentum: config.schedule.momentum,
        glyph_intensity: config.is_digit_world().then_some(config.world.glyph_intensity),
        s_on_s_off: format!(
            "mean squared l2 change of the {:?} vector under tangent/normal perturbations rescaled to norm {} \
             ({} draws per point; raw projections of N(0, (r²/d)I) recorded in report.json)",
            m.readout, m.radius, m.n_samples
        ),
        rho1: format!(
            "raw-projection ratio for the predicted-class logit, σ = {}, {} draws per point, pooled over points",
            m.rho1_sigma, m.rho1_samples
        ),
        rho2: "mean over points of ‖P⊥∇z‖²/‖∇z‖² for the predicted-class logit".into(),
        oracle_cos: format!(
            "mean cosine between the model's {:?} gradient and the Bayes log-posterior gradient of the predicted class",
            m.cosine_space
        ),
        tangent: format!("{:?}", m.tangent),
        max_accuracy_scope: "all runs of the sweep".into(),
    }
}

fn keep<T>(errors: &mut Vec<String>, name: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{name}: {e}"));
            None
        }
    }
}

struct Measured {
    row: ReportRow,
    record: RunRecord,
}

fn measure_one(exp: &Experiment, outcome: &RunOutcome<f64>) -> Measured {
    let spec = &outcome.spec;
    let mut row = ReportRow {
        objective: spec.objective.name().into(),
        param: spec.param(),
        seed: spec.seed,
        test_acc: None,
        s_on: None,
        s_off: None,
        rho1: None,
        rho2: None,
        oracle_cos: None,
        regime: None,
    };
    let mut record = RunRecord {
        index: spec.index,
        objective: spec.objective.clone(),
        seed: spec.seed,
        status: "ok".into(),
        history: None,
        sensitivities: None,
        rho1: None,
        relative_robustness: Vec::new(),
        gradients: Vec::new(),
        metric_errors: Vec::new(),
    };
    let (model, history) = match &outcome.result {
        Ok(v) => v,
        Err(e) => {
            record.status = e.clone();
            return Measured { row, record };
        }
    };
    record.history = Some(history.clone());
    let m = &exp.config.metrics;
    let tangents = Tangents::PerPoint(&exp.tangents);
    let mut errors = Vec::new();
    row.test_acc = keep(
        &mut errors,
        "test_acc",
        model.accuracy(&exp.test.x, &exp.test.labels),
    );
    let readout = Readout::Vector { space: m.readout };
    record.sensitivities = keep(
        &mut errors,
        "sensitivities",
        sensitivities(
            model,
            &exp.points,
            tangents,
            m.radius,
            m.n_samples,
            m.seed,
            readout,
        ),
    );
    if let Some(s) = &record.sensitivities {
        row.s_on = Some(s.on.mean);
        row.s_off = Some(s.off.mean);
    }
    record.rho1 = keep(
        &mut errors,
        "rho1",
        rho1_pooled(
            model,
            &exp.points,
            tangents,
            m.rho1_sigma,
            m.rho1_samples,
            m.seed,
            Readout::PREDICTED_LOGIT,
        ),
    );
    row.rho1 = record.rho1.map(|r| r.raw.ratio);
    row.rho2 = keep(
        &mut errors,
        "rho2",
        rho2_mean(model, &exp.points, tangents, ClassSelector::Predicted),
    );
    if let Some(w) = &exp.world {
        row.oracle_cos = keep(
            &mut errors,
            "oracle_cos",
            mean_bayes_cosine(model, w.as_ref(), &exp.points, m.cosine_space),
        );
    }
    if let Some(masks) = &exp.signal_masks {
        for &sigma in &m.noise_levels {
            let r = relative_noise_robustness(
                model,
                &exp.points,
                masks,
                sigma,
                m.robustness_samples,
                m.seed,
                m.robustness_space,
            );
            if let Some(result) = keep(&mut errors, "relative_robustness", r) {
                record
                    .relative_robustness
                    .push(RobustnessAtLevel { sigma, result });
            }
        }
    }
    for i in 0..m.gradient_points.min(exp.points.rows()) {
        let x = exp.points.row_slice(i);
        let dump = model.logits(x).and_then(|z| {
            let class = argmax(&z);
            let values =
                model.input_gradient_in(x, ClassSelector::Class(class), OutputSpace::Logits)?;
            Ok(GradientDump {
                point: i,
                class,
                values,
            })
        });
        if let Some(d) = keep(&mut errors, "gradients", dump) {
            record.gradients.push(d);
        }
    }
    record.metric_errors = errors;
    Measured { row, record }
}

/// Computes every metric for trained runs and assembles the report.
pub fn measure(
    exp: &Experiment,
    outcomes: &[RunOutcome<f64>],
    preset: Option<&str>,
) -> Result<Report> {
    if outcomes.is_empty() {
        return Err(Error::EmptySweep);
    }
    let measured: Vec<Measured> = outcomes.iter().map(|o| measure_one(exp, o)).collect();
    let max_accuracy = measured
        .iter()
        .filter_map(|m| m.row.test_acc)
        .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
    let (mut rows, runs): (Vec<_>, Vec<_>) =
        measured.into_iter().map(|m| (m.row, m.record)).unzip();
    if let Some(max) = max_accuracy {
        for r in &mut rows {
            r.regime = classify_regime(r, max, &exp.config.regimes).ok();
        }
    }
    Ok(Report {
        software_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: exp.config.hash(),
        preset: preset.map(str::to_owned),
        seeds: exp.config.grid.seeds.clone(),
        metadata: metadata(&exp.config),
        config: exp.config.clone(),
        max_accuracy,
        rows,
        runs,
    })
}

/// Trains (or reloads) the sweep, measures it and writes `report.csv`,
/// `report.json` and `gradients.csv` into `out`. Output bytes depend only on
/// the config, not on `jobs`.
pub fn run_experiment(
    config: &Config,
    out: impl AsRef<Path>,
    jobs: usize,
    preset: Option<&str>,
) -> Result<Report> {
    let out = out.as_ref();
    let exp = Experiment::prepare(config)?;
    let outcomes = train_runs(&exp, out, jobs, false)?;
    let report = measure(&exp, &outcomes, preset)?;
    report.write(out)?;
    Ok(report)
}

/// Writes `train.csv` and `test.csv` of the config's world into `out`.
pub fn gen_data(config: &Config, out: impl AsRef<Path>) -> Result<(usize, usize)> {
    let out = out.as_ref();
    let exp = Experiment::prepare(config)?;
    fs::create_dir_all(out)?;
    exp.train
        .write_csv(std::io::BufWriter::new(fs::File::create(
            out.join("train.csv"),
        )?))?;
    exp.test
        .write_csv(std::io::BufWriter::new(fs::File::create(
            out.join("test.csv"),
        )?))?;
    Ok((exp.train.len(), exp.test.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::config::preset_source;

    fn tiny_config() -> Config {
        let src = preset_source("fig2-desk")
            .unwrap()
            .replace("n_train = 1000", "n_train = 120")
            .replace("n_test = 500", "n_test = 40")
            .replace("epochs = 30", "epochs = 3")
            .replace("decay_epochs = [22]", "decay_epochs = [2]")
            .replace("hidden = [64, 64]", "hidden = [8]")
            .replace("n_points = 200", "n_points = 10")
            .replace("seeds = [1, 2, 3]", "seeds = [1, 2]")
            .replace(
                "values = [0, 0.003, 0.03, 10, 100, 1000]",
                "values = [0, 1]",
            )
            .replace("values = [0, 0.001, 0.003, 1, 100, 1000]", "values = [0.5]")
            .replace("values = [0.01, 0.03, 0.1, 1, 3, 8]", "values = [0.1]");
        Config::from_toml_str(&src).unwrap()
    }

    #[test]
    fn runs_follow_grid_order() {
        let exp = Experiment::prepare(&tiny_config()).unwrap();
        let runs = exp.runs();
        assert_eq!(runs.len(), 8);
        assert!(runs.iter().enumerate().all(|(i, (s, _))| s.index == i));
        assert_eq!((runs[1].0.seed, runs[2].0.param()), (2, 1.0));
        assert_eq!(runs[4].1.lr_reference_lambda, Some(100.0));
        assert_eq!(exp.sizes(), vec![8, 8, 2]);
        assert_eq!(exp.tangents.len(), 10);
    }

    #[test]
    fn experiment_is_idempotent_and_independent_of_jobs() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&cfg, a.path(), 1, None).unwrap();
        run_experiment(&cfg, b.path(), 3, None).unwrap();
        ra.check_consistency().unwrap();
        for f in ["report.csv", "report.json", "gradients.csv"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        // A second run reloads the cached models and reproduces the bytes.
        let csv = fs::read(a.path().join("report.csv")).unwrap();
        run_experiment(&cfg, a.path(), 2, None).unwrap();
        assert_eq!(fs::read(a.path().join("report.csv")).unwrap(), csv);
        assert_eq!(Report::read(a.path()).unwrap(), ra);
        assert_eq!(ra.rows.len(), 8);
        assert!(ra
            .rows
            .iter()
            .all(|r| r.test_acc.is_some() && r.oracle_cos.is_some()));
        assert_eq!(ra.runs[0].gradients.len(), 4);
        assert!(ra
            .csv()
            .starts_with("objective,param,seed,test_acc,s_on,s_off,rho1,rho2,oracle_cos,regime\n"));
    }

    #[test]
    fn measuring_without_trained_models_fails() {
        let exp = Experiment::prepare(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(train_runs(&exp, dir.path(), 1, true).is_err());
    }

    #[test]
    fn estimated_tangents_are_close_to_the_oracle() {
        let mut cfg = tiny_config();
        cfg.metrics.tangent = TangentSource::Pca;
        let pca = Experiment::prepare(&cfg).unwrap();
        let oracle = Experiment::prepare(&tiny_config()).unwrap();
        let err = crate::worlds::projector_error(&pca.tangents[0], &oracle.tangents[0]).unwrap();
        assert!(err < 0.05, "{err}");
    }
}
