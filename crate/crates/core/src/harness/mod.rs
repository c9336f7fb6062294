//! Metrics, the ablation protocol, saliency export, experiment configs and
//! dataset files.

mod ablation;
mod config;
mod dataset;
mod metrics;
mod saliency;

pub use ablation::{
    ablate, config_diff, evaluate, gradient_mass_fraction, write_ablation, AblationReport, ArmReport, BatchMetrics,
    Evaluation,
};
pub use config::{AblationConfig, DataConfig, ExperimentConfig};
pub use dataset::{manifest_for, read_dataset, read_manifest, write_dataset, Manifest, SubjectRecord};
pub use metrics::{confusion, per_class_metrics, ClassMetrics, ConfusionMatrix, Histogram, MetricsReport};
pub use saliency::{average_ranks, export_saliency, saliency_volumes, spearman, ModalitySaliency, SaliencySummary};
