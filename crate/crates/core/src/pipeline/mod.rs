//! Configuration, feature ingestion, multi-chain runs, decoding and reports.

pub mod config;
pub mod ingest;
pub mod report;
pub mod run;

pub use config::{
    diarization_config, preset_config, DataConfig, DecodeConfig, EmissionSettings, FeatureFormat,
    Preprocess, RunConfig, SamplerKind,
};
pub use ingest::{ingest_features, tie_min_duration, write_observations, FeatureMatrix, Features};
pub use report::{emit_report, report_run};
pub use run::{decode_run, run_experiment, ChainStatus, Metrics, RunSummary, TraceRecord};
