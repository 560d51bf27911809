//! Experiment orchestration for the lidkit toolkit: configuration, the
//! S0-S8 system matrix, pipeline stages, fusion reports, and benchmarking.

pub mod bench;
pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{
    load_config, parse_config_text, resolve_config, serialize_config, system_matrix,
    ClassifierSel, ConfigFile, ExperimentConfig, FeatureSel, Profile, SystemCombo, SystemId,
};
pub use pipeline::{run_experiment, PipelineError, RunArtifacts};
pub use report::{evaluate_scores, run_fusion_report, RunReport, SystemMetrics};
