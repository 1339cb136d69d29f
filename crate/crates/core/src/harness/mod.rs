//! Experiment orchestration: configuration, the staged pipeline, the
//! ablation suite, evaluation and charts.

pub mod ablation;
pub mod config;
pub mod evaluate;
pub mod pipeline;
pub mod plots;

pub use ablation::{run_ablation_suite, AblationReport, AblationRow, Arm};
pub use config::{DatasetSource, ExperimentConfig, FusionConfig, PeerEval, SplitProtocol};
pub use evaluate::{evaluate, evaluate_scores, AccuracyMetrics};
pub use pipeline::{check_test_purity, run_pipeline, RunReport};
pub use plots::emit_plots;
