//! Experiment orchestration: TOML configs and presets, cached sweeps,
//! metric collection, regime labels, report files and verification suites.

mod config;
mod report;
mod run;
pub mod verify;

pub use config::{
    preset_source, Config, GridConfig, MetricsConfig, ModelConfig, ObjectiveEntry, TangentSource,
    Thresholds, WorldConfig, MNIST_DISTRACTOR, PRESET_NAMES,
};
pub use report::{
    classify_regime, GradientDump, Metadata, Regime, Report, ReportRow, RobustnessAtLevel,
    RunRecord, CSV_HEADER,
};
pub use run::{gen_data, measure, run_experiment, train_runs, Experiment};
