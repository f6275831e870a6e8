//! Experiment orchestration: configuration, artifact layout and the
//! stages behind each CLI subcommand.

mod config;
mod stages;
mod store;

pub use config::{
    CalibrationConfig, CorpusSizes, DistillMode, EnsembleConfig, ExperimentConfig, PolicySection,
    TrackerChoice, CONFIG_SCHEMA,
};
pub use stages::{
    distill, eval_calibration, eval_policy, gen_corpus, gen_world, load_corpus, load_distilled,
    load_ensemble, load_policy, load_tracker, load_world, report, train_ensemble, train_policy,
    CalibrationReport, LoadedTracker, PolicyTrainSummary, Report, ReportRow,
};
pub use store::{append_timing, read_timing, Run, TimingRow};
