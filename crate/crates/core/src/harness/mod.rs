//! Run configuration, stage orchestration, profiling and reports.

pub mod config;
pub mod pipeline;
pub mod profile;
pub mod report;

pub use config::{apply_override, output_root, DataConfig, GridConfig, ProfileConfig, RunConfig, SynthDataConfig, OUTPUT_ROOT_ENV};
pub use pipeline::{run_pipeline, sparsify_file, RunPaths, Stage};
pub use profile::{profile_inference, profile_prediction, summarize_timing, ProfileRequest, TimingKind, TimingRecord, TimingSummary};
