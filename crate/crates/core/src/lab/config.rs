use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Activation, OutputSpace};
use crate::train::{Objective, Schedule};

/// World name for the composed digit/letter images.
pub const MNIST_DISTRACTOR: &str = "mnist-distractor";

pub const PRESET_NAMES: &[&str] = &["fig2-desk", "mnist-distractor"];

const FIG2_DESK: &str = r#"
[world]
preset = "subspace-2of8"
n_train = 1000
n_test = 500
train_seed = 1
test_seed = 2

[model]
hidden = [64, 64]
activation = "softplus"

[[objective]]
kind = "grad-norm"
values = [0, 0.003, 0.03, 10, 100, 1000]
lr_reference_lambda = 10

[[objective]]
kind = "smoothness"
sigma = 1.0
values = [0, 0.001, 0.003, 1, 100, 1000]
lr_reference_lambda = 100

[[objective]]
kind = "rand-smooth"
values = [0.01, 0.03, 0.1, 1, 3, 8]

[schedule]
epochs = 30
batch_size = 64
lr = 0.05
decay_epochs = [22]

[grid]
seeds = [1, 2, 3]

[metrics]
n_points = 200
n_samples = 50
radius = 1.5
seed = 9

[regimes]
delta_acc = 0.05
"#;

const MNIST_DISTRACTOR_PRESET: &str = r#"
[world]
preset = "mnist-distractor"
path = "data/mnist-5k"
n_train = 4500
n_test = 500
train_seed = 3
glyph_intensity = 1.0

[model]
hidden = [256]
activation = "relu"

[[objective]]
kind = "ce"

# ε in units of the normalisation std 0.3081 of [0, 1] pixel intensities.
[[objective]]
kind = "pgd"
recipe = "mnist"
values = [1, 4, 8]
scale = 0.3081

[schedule]
epochs = 9
batch_size = 128
lr = 0.1
decay_epochs = [3, 6]

[grid]
seeds = [1]

[metrics]
n_points = 200
n_samples = 20
radius = 1.5
noise_levels = [0.1, 0.2, 0.4, 0.8]
robustness_samples = 20
seed = 5

[regimes]
delta_acc = 0.05
"#;

/// The TOML text of a named preset.
pub fn preset_source(name: &str) -> Result<&'static str> {
    match name {
        "fig2-desk" => Ok(FIG2_DESK),
        "mnist-distractor" => Ok(MNIST_DISTRACTOR_PRESET),
        other => Err(Error::Config(format!(
            "unknown experiment preset {other:?}; known: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// A world preset name or `mnist-distractor`.
    pub preset: String,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Sampling seed of the training set; the shuffle seed for digit worlds.
    #[serde(default = "default_one")]
    pub train_seed: u64,
    #[serde(default = "default_two")]
    pub test_seed: u64,
    /// Directory with `images-idx3-ubyte.gz` and `labels-idx1-ubyte.gz`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Ink value of the distractor glyph on the `[0, 1]` pixel scale.
    #[serde(default = "default_intensity")]
    pub glyph_intensity: f64,
    /// Seed of the glyph placements.
    #[serde(default = "default_compose_seed")]
    pub compose_seed: u64,
}

fn default_n_train() -> usize {
    1000
}
fn default_n_test() -> usize {
    500
}
fn default_one() -> u64 {
    1
}
fn default_two() -> u64 {
    2
}
fn default_intensity() -> f64 {
    1.0
}
fn default_compose_seed() -> u64 {
    7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            seeds: vec![1, 2, 3],
        }
    }
}

/// Where tangent spaces for the metrics come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TangentSource {
    /// The world's exact projector (the signal block for digit worlds).
    #[default]
    Oracle,
    /// PCA on the training inputs with the world's manifold dimension.
    Pca,
    /// MLP autoencoder on the training inputs, tangent at each point.
    MlpAutoencoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Leading test points on which metrics are evaluated.
    pub n_points: usize,
    /// Draws per point for s_on and s_off.
    pub n_samples: usize,
    /// l2 norm of the matched tangent and normal perturbations.
    pub radius: f64,
    /// Output vector whose squared change defines s_on and s_off.
    pub readout: OutputSpace,
    pub rho1_sigma: f64,
    /// Draws per point for ρ1 (at least 100).
    pub rho1_samples: usize,
    pub cosine_space: OutputSpace,
    /// Noise levels for relative robustness; worlds with a signal mask only.
    pub noise_levels: Vec<f64>,
    pub robustness_samples: usize,
    pub robustness_space: OutputSpace,
    /// Points whose input gradients are dumped per run.
    pub gradient_points: usize,
    pub tangent: TangentSource,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            n_points: 200,
            n_samples: 50,
            radius: 1.5,
            readout: OutputSpace::Logits,
            rho1_sigma: 0.1,
            rho1_samples: 100,
            cosine_space: OutputSpace::LogProbabilities,
            noise_levels: Vec::new(),
            robustness_samples: 20,
            robustness_space: OutputSpace::Probabilities,
            gradient_points: 4,
            tangent: TangentSource::Oracle,
            seed: 9,
        }
    }
}

/// Regime thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Bayes-aligned models reach `(1 − δ_acc)` of the sweep's best accuracy.
    pub delta_acc: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { delta_acc: 0.05 }
    }
}

/// One objective swept over `values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEntry {
    pub objective: Objective,
    pub values: Vec<f64>,
    /// Overrides the schedule's learning-rate reference for this objective.
    pub lr_reference_lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub objectives: Vec<ObjectiveEntry>,
    pub schedule: Schedule,
    pub grid: GridConfig,
    pub metrics: MetricsConfig,
    pub regimes: Thresholds,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    world: WorldConfig,
    model: ModelConfig,
    objective: toml::Value,
    schedule: Schedule,
    #[serde(default)]
    grid: GridConfig,
    #[serde(default)]
    metrics: MetricsConfig,
    #[serde(default)]
    regimes: Thresholds,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn take<T: serde::de::DeserializeOwned>(t: &mut toml::Table, key: &str) -> Result<Option<T>> {
    t.remove(key)
        .map(|v| {
            v.try_into()
                .map_err(|e| config_err(format!("objective.{key}: {e}")))
        })
        .transpose()
}

/// Parses one `[objective]` table. Besides the objective's own fields it
/// accepts `values` (the swept grid), `scale` (multiplies every value),
/// `lr_reference_lambda` and, for PGD, `recipe = "mnist" | "imagenet"`.
/// The swept field may be omitted when `values` is given.
fn parse_objective(mut t: toml::Table) -> Result<ObjectiveEntry> {
    let values: Option<Vec<f64>> = take(&mut t, "values")?;
    let scale: f64 = take(&mut t, "scale")?.unwrap_or(1.0);
    let lr_reference_lambda: Option<f64> = take(&mut t, "lr_reference_lambda")?;
    let recipe: Option<String> = take(&mut t, "recipe")?;
    let kind = t
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| config_err("objective without a kind"))?
        .to_owned();
    if values.as_ref().is_some_and(Vec::is_empty) {
        return Err(Error::EmptySweep);
    }
    let values: Option<Vec<f64>> = values.map(|v| v.into_iter().map(|x| x * scale).collect());
    let key = match kind.as_str() {
        "grad-norm" | "smoothness" | "ridge" => Some("lambda"),
        "rand-smooth" => Some("sigma"),
        "pgd" => Some("epsilon"),
        _ => None,
    };
    if let (Some(key), Some(first)) = (key, values.as_ref().and_then(|v| v.first())) {
        t.entry(key).or_insert(toml::Value::Float(*first));
    }
    if let Some(r) = recipe {
        if kind != "pgd" {
            return Err(config_err("recipe applies to pgd objectives only"));
        }
        let eps = t
            .get("epsilon")
            .and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64)));
        let eps = eps.ok_or_else(|| config_err("pgd recipe needs epsilon or values"))?;
        let recipe = match r.as_str() {
            "mnist" => Objective::mnist_pgd(eps),
            "imagenet" => Objective::imagenet_pgd(eps),
            other => return Err(config_err(format!("unknown pgd recipe {other:?}"))),
        };
        if let Objective::Pgd {
            steps, step_size, ..
        } = recipe
        {
            t.entry("steps")
                .or_insert(toml::Value::Integer(steps as i64));
            t.entry("step_size")
                .or_insert(toml::Value::Float(step_size));
        }
    }
    let objective: Objective = toml::Value::Table(t)
        .try_into()
        .map_err(|e| config_err(format!("objective: {e}")))?;
    let values = values.unwrap_or_else(|| vec![objective.param()]);
    Ok(ObjectiveEntry {
        objective,
        values,
        lr_reference_lambda,
    })
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(s).map_err(config_err)?;
        let tables = match raw.objective {
            toml::Value::Table(t) => vec![t],
            toml::Value::Array(a) => a
                .into_iter()
                .map(|v| match v {
                    toml::Value::Table(t) => Ok(t),
                    _ => Err(config_err("objective entries must be tables")),
                })
                .collect::<Result<_>>()?,
            _ => {
                return Err(config_err(
                    "objective must be a table or an array of tables",
                ))
            }
        };
        let objectives = tables
            .into_iter()
            .map(parse_objective)
            .collect::<Result<_>>()?;
        let cfg = Config {
            world: raw.world,
            model: raw.model,
            objectives,
            schedule: raw.schedule,
            grid: raw.grid,
            metrics: raw.metrics,
            regimes: raw.regimes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `world.path` is taken relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        if let (Some(p), Some(dir)) = (cfg.world.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(preset_source(name)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.seeds.is_empty()
            || self.objectives.is_empty()
            || self.objectives.iter().any(|o| o.values.is_empty())
        {
            return Err(Error::EmptySweep);
        }
        for e in &self.objectives {
            for &v in &e.values {
                e.objective.with_param(v).validate()?;
            }
        }
        self.schedule.validate()?;
        let m = &self.metrics;
        if m.n_points == 0 || m.n_samples == 0 || !(m.radius > 0.0) || !(m.rho1_sigma > 0.0) {
            return Err(config_err(
                "metrics need points, draws, a positive radius and a positive ρ1 noise level",
            ));
        }
        if m.rho1_samples < 100 {
            return Err(config_err("metrics.rho1_samples must be at least 100"));
        }
        if m.noise_levels.iter().any(|&s| !(s > 0.0))
            || (!m.noise_levels.is_empty() && m.robustness_samples == 0)
        {
            return Err(config_err(
                "noise levels must be positive with at least one draw",
            ));
        }
        if !(0.0..1.0).contains(&self.regimes.delta_acc) {
            return Err(config_err("regimes.delta_acc must lie in [0, 1)"));
        }
        if self.world.n_train == 0 || self.world.n_test == 0 {
            return Err(config_err("world needs training and test points"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    /// The schedule used for runs of `entry`.
    pub fn schedule_for(&self, entry: &ObjectiveEntry) -> Schedule {
        let mut s = self.schedule.clone();
        if entry.lr_reference_lambda.is_some() {
            s.lr_reference_lambda = entry.lr_reference_lambda;
        }
        s
    }

    /// Replaces the grid seeds with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.grid.seeds = vec![seed];
        self
    }

    pub fn is_digit_world(&self) -> bool {
        self.world.preset == MNIST_DISTRACTOR
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for &name in PRESET_NAMES {
            let c = Config::preset(name).unwrap();
            assert_eq!(c.hash().len(), 64);
        }
        let c = Config::preset("fig2-desk").unwrap();
        assert_eq!(c.objectives.len(), 3);
        assert!(c.objectives.iter().all(|o| o.values.len() == 6));
        assert_eq!(
            c.objectives[0].objective,
            Objective::GradNorm {
                lambda: 0.0,
                sum_classes: false
            }
        );
        assert_eq!(
            c.schedule_for(&c.objectives[1]).lr_reference_lambda,
            Some(100.0)
        );
        assert_eq!(c.schedule_for(&c.objectives[2]).lr_reference_lambda, None);
    }

    #[test]
    fn pgd_recipe_scales_values_and_step() {
        let c = Config::preset("mnist-distractor").unwrap();
        let pgd = &c.objectives[1];
        assert!((pgd.values[1] - 4.0 * 0.3081).abs() < 1e-12);
        let Objective::Pgd {
            epsilon,
            steps,
            step_size,
            random_start,
        } = pgd.objective.with_param(pgd.values[1])
        else {
            panic!("not pgd")
        };
        assert_eq!((epsilon, steps, random_start), (pgd.values[1], 10, false));
        assert!((step_size - 0.25 * epsilon).abs() < 1e-12);
        assert_eq!(c.objectives[0].values, vec![0.0]);
    }

    #[test]
    fn empty_grid_and_bad_fields_are_rejected() {
        let base = preset_source("fig2-desk").unwrap();
        let empty = base.replace("seeds = [1, 2, 3]", "seeds = []");
        assert!(matches!(
            Config::from_toml_str(&empty),
            Err(Error::EmptySweep)
        ));
        let no_values = base.replace("values = [0.01, 0.03, 0.1, 1, 3, 8]", "values = []");
        assert!(matches!(
            Config::from_toml_str(&no_values),
            Err(Error::EmptySweep)
        ));
        let unknown = base.replace("[regimes]", "[regimes]\nbogus = 1");
        assert!(matches!(
            Config::from_toml_str(&unknown),
            Err(Error::Config(_))
        ));
        let negative = base.replace("values = [0.01, 0.03", "values = [-0.01, 0.03");
        assert!(Config::from_toml_str(&negative).is_err());
        assert!(matches!(Config::preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn single_objective_table_and_hash_sensitivity() {
        let base = preset_source("fig2-desk").unwrap();
        let start = base.find("[[objective]]").unwrap();
        let end = base.find("[schedule]").unwrap();
        let single = format!(
            "{}[objective]\nkind = \"ce\"\n\n{}",
            &base[..start],
            &base[end..]
        );
        let c = Config::from_toml_str(&single).unwrap();
        assert_eq!(c.objectives.len(), 1);
        let other = Config::from_toml_str(&single.replace("epochs = 30", "epochs = 31")).unwrap();
        assert_ne!(c.hash(), other.hash());
        assert_eq!(c.hash(), Config::from_toml_str(&single).unwrap().hash());
    }
}
