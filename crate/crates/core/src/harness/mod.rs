//! Simulation designs, the end-to-end pipeline, the Monte Carlo study
//! runner, CSV input/output and run configuration.

pub mod config;
pub mod csvio;
pub mod designs;
pub mod pipeline;
pub mod plot;
pub mod study;

pub use config::RunConfig;
pub use csvio::{analyze_csv, read_dataset, write_dataset, AnalyzeConfig, ColumnSpec};
pub use designs::{gen_example1, gen_example2, DesignKind, SimDesign};
pub use pipeline::{fit_model, run_test, FittedModel, ModelKind, PipelineConfig, Smoothness, TestResult};
pub use study::{run_study, StudyConfig, StudyReport};
