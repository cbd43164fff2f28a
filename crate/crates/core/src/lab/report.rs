use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Config, Thresholds};
use crate::error::{Error, Result};
use crate::metrics::{RelativeRobustness, Rho1, Sensitivities};
use crate::train::{History, Objective};

pub const CSV_HEADER: &str = "objective,param,seed,test_acc,s_on,s_off,rho1,rho2,oracle_cos,regime";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Weak,
    BayesAligned,
    Excessive,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Weak => "weak",
            Regime::BayesAligned => "bayes-aligned",
            Regime::Excessive => "excessive",
        })
    }
}

/// One CSV row. Metrics that could not be computed are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub objective: String,
    pub param: f64,
    pub seed: u64,
    pub test_acc: Option<f64>,
    /// Norm-matched on-manifold sensitivity.
    pub s_on: Option<f64>,
    pub s_off: Option<f64>,
    pub rho1: Option<f64>,
    pub rho2: Option<f64>,
    pub oracle_cos: Option<f64>,
    pub regime: Option<Regime>,
}

/// Labels a row given the best accuracy of its sweep. Ties `s_off = s_on`
/// count as weak.
pub fn classify_regime(
    row: &ReportRow,
    max_accuracy: f64,
    thresholds: &Thresholds,
) -> Result<Regime> {
    let missing = |f: &str| Error::InvalidArgument(format!("row lacks {f}"));
    let s_on = row.s_on.ok_or_else(|| missing("s_on"))?;
    let s_off = row.s_off.ok_or_else(|| missing("s_off"))?;
    let acc = row.test_acc.ok_or_else(|| missing("test_acc"))?;
    Ok(if s_off >= s_on {
        Regime::Weak
    } else if acc >= (1.0 - thresholds.delta_acc) * max_accuracy {
        Regime::BayesAligned
    } else {
        Regime::Excessive
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessAtLevel {
    pub sigma: f64,
    pub result: RelativeRobustness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientDump {
    pub point: usize,
    /// The predicted class whose logit is differentiated.
    pub class: usize,
    pub values: Vec<f64>,
}

/// Everything measured for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub objective: Objective,
    pub seed: u64,
    /// `ok`, or the training error.
    pub status: String,
    pub history: Option<History>,
    pub sensitivities: Option<Sensitivities>,
    pub rho1: Option<Rho1>,
    pub relative_robustness: Vec<RobustnessAtLevel>,
    pub gradients: Vec<GradientDump>,
    /// Metrics that failed, with their errors.
    pub metric_errors: Vec<String>,
}

/// Fixed descriptions of the measurement conventions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub momentum: f64,
    pub glyph_intensity: Option<f64>,
    pub s_on_s_off: String,
    pub rho1: String,
    pub rho2: String,
    pub oracle_cos: String,
    pub tangent: String,
    pub max_accuracy_scope: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub software_version: String,
    pub config_hash: String,
    pub preset: Option<String>,
    pub seeds: Vec<u64>,
    pub metadata: Metadata,
    pub config: Config,
    pub max_accuracy: Option<f64>,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl Report {
    /// Every row's regime must equal [`classify_regime`] of its own fields.
    pub fn check_consistency(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            let expected = match self.max_accuracy {
                Some(m) => classify_regime(r, m, &self.config.regimes).ok(),
                None => None,
            };
            if expected != r.regime {
                return Err(Error::Format(format!(
                    "row {i}: regime {:?} but fields give {expected:?}",
                    r.regime
                )));
            }
        }
        Ok(())
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let regime = r.regime.map_or_else(String::new, |g| g.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.objective,
                r.param,
                r.seed,
                cell(r.test_acc),
                cell(r.s_on),
                cell(r.s_off),
                cell(r.rho1),
                cell(r.rho2),
                cell(r.oracle_cos),
                regime
            ));
        }
        out
    }

    /// `run,objective,param,seed,point,class,g_0,…` with one line per dump.
    pub fn gradients_csv(&self) -> String {
        let d = self
            .runs
            .iter()
            .flat_map(|r| r.gradients.iter())
            .map(|g| g.values.len())
            .max()
            .unwrap_or(0);
        let mut out = String::from("run,objective,param,seed,point,class");
        for j in 0..d {
            out.push_str(&format!(",g_{j}"));
        }
        out.push('\n');
        for r in &self.runs {
            for g in &r.gradients {
                out.push_str(&format!(
                    "{},{},{},{},{},{}",
                    r.index,
                    r.objective.name(),
                    r.objective.param(),
                    r.seed,
                    g.point,
                    g.class
                ));
                for v in &g.values {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Writes `report.csv`, `report.json` and `gradients.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.csv())?;
        let mut json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        json.push('\n');
        fs::File::create(dir.join("report.json"))?.write_all(json.as_bytes())?;
        fs::write(dir.join("gradients.csv"), self.gradients_csv())?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join("report.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("report.json: {e}")))
    }

    /// The row with the largest oracle cosine, if any row has one.
    pub fn best_cosine(&self) -> Option<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.oracle_cos.is_some())
            .max_by(|a, b| {
                a.oracle_cos
                    .partial_cmp(&b.oracle_cos)
                    .expect("finite cosines")
            })
    }
}
