//! Desk-scale laboratory for source-free, adversarially robust domain
//! adaptation: train standard and adversarially robust source models, adapt
//! them to an unlabeled target domain with an information-maximization plus
//! pseudo-label plus contrastive objective, then harden the adapted model
//! with adversarial training driven by pseudo-labels from the standard
//! lineage.
//!
//! Everything is f64 and single-threaded; given the same config and seed,
//! every run produces byte-identical metrics.

pub mod adapt;
pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod pseudo;
pub mod rng;
pub mod tensor;

pub use adapt::{
    adapt_target_robust, adapt_target_standard, run_case, train_source_robust,
    train_source_standard, AdaptOptions, AdaptOutcome, AvailabilityCase, CaseConfig, CaseOutcome,
    EpochRecord, PhaseKind, RobustAdaptOptions, RobustLabelSource, RobustPseudoSource,
    SourceModels, TrainHistory, TrainSchedule,
};
pub use attack::{adv_accuracy, clean_accuracy, per_class_accuracy, pgd_attack, AttackConfig};
pub use data::{
    class_subset, gaussian_blobs, load_csv, make_domain_pair, split, two_arcs, write_csv,
    CsvSchema, DatasetFamily, DatasetSplits, DomainDataset, ShiftSpec, SplitFractions,
};
pub use error::{Error, Result};
pub use experiment::{
    config_hash, export_features, load_config, run_ablation_grid, run_class_sweep, run_experiment,
    spearman, write_ablation_table, write_run, write_sweep, AblationRow, AblationToggles,
    AttackSpec, DatasetConfig, ExperimentConfig, Method, MetricRecord, ModelConfig, PhaseReport,
    PseudoSummary, RunOutput, RunReport, SweepReport, SweepRow, REPORT_SCHEMA_VERSION,
};
pub use graph::{Tape, Var};
pub use loss::{
    contrastive_loss, cross_entropy, diversity_loss, entropy_loss, pseudo_ce, robust_target_loss,
    target_loss, LossBreakdown, LossWeights, TermFlags,
};
pub use nn::{Activation, Classifier, Encoder, Linear, Model, ModelGrads, ParamRole, TapeParams};
pub use optim::{Adam, OptimConfig};
pub use pseudo::{
    kmeans_from_model, kmeans_pseudo_labels, model_pseudo_labels, pseudo_label_accuracy,
    CentroidSet, DistanceMetric, KmeansOutcome, PseudoLabelSet, PseudoSource,
};
pub use rng::{streams, RngSeed};
pub use tensor::{argmax_rows, log_softmax_rows, softmax_rows, Tensor};
