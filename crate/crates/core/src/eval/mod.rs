//! Detector-based scoring of generated toy images.

pub mod benchmark;
pub mod detect;
pub mod metrics;

pub use benchmark::{default_grid, default_suite, run_benchmark, AblationRow, BenchmarkReport, Suite};
pub use detect::{detect_objects, Detection};
pub use metrics::{score_run, AggregateMetrics, RunMetrics};
