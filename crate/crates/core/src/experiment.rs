//! Experiment orchestration: declarative run configs, the method-comparison
//! pipeline, the ablation grid, the class-count sweep, artifact persistence,
//! and feature export for external plotting.
//!
//! A run is a pure function of its config and seed: the same
//! [`ExperimentConfig`] always yields byte-identical metric values. Wall
//! clock is recorded for information only and is excluded from that
//! guarantee.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{
    adapt_target_standard, run_case, train_source_robust, train_source_standard, AdaptOptions,
    AvailabilityCase, CaseConfig, RobustAdaptOptions, RobustPseudoSource, SourceModels,
    TrainHistory, TrainSchedule,
};
use crate::attack::{pgd_attack, AttackConfig};
use crate::data::{
    class_subset, load_csv, make_domain_pair, split, CsvSchema, DomainDataset, ShiftSpec,
    SplitFractions,
};
use crate::error::{Error, Result};
use crate::loss::{LossWeights, TermFlags};
use crate::nn::{Activation, Model};
use crate::optim::OptimConfig;
use crate::pseudo::{
    forward_batched, kmeans_from_model, pseudo_label_accuracy, DistanceMetric, PseudoLabelSet,
    PseudoSource,
};
use crate::rng::{streams, RngSeed};
use crate::tensor::{argmax_rows, Tensor};

/// Stamped into every report and manifest; bump on any layout change.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// What the comparison pipelines call a method: the three model-availability
/// cases plus the two single-phase baselines that stop after standard
/// adaptation (no contrastive term, no robust phase).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Both,
    StandardSource,
    RobustSource,
    ShotStandard,
    ShotRobust,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Both,
        Method::StandardSource,
        Method::RobustSource,
        Method::ShotStandard,
        Method::ShotRobust,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Both => "both",
            Method::StandardSource => "standard_source",
            Method::RobustSource => "robust_source",
            Method::ShotStandard => "shot_standard",
            Method::ShotRobust => "shot_robust",
        }
    }

    /// Availability case the method runs under; `None` for the baselines,
    /// which never enter the robust phase.
    pub fn case(&self) -> Option<AvailabilityCase> {
        match self {
            Method::Both => Some(AvailabilityCase::Both),
            Method::StandardSource => Some(AvailabilityCase::StandardSourceOnly),
            Method::RobustSource => Some(AvailabilityCase::RobustSourceOnly),
            Method::ShotStandard | Method::ShotRobust => None,
        }
    }

    pub fn needs_standard_source(&self) -> bool {
        matches!(
            self,
            Method::Both | Method::StandardSource | Method::ShotStandard
        )
    }

    pub fn needs_robust_source(&self) -> bool {
        matches!(self, Method::Both | Method::RobustSource | Method::ShotRobust)
    }

    /// Name of the model the method is judged by in comparisons.
    pub fn final_model(&self) -> &'static str {
        match self {
            Method::Both | Method::StandardSource | Method::RobustSource => "target_robust",
            Method::ShotStandard | Method::ShotRobust => "target_standard",
        }
    }
}

/// Where the domain pair comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Procedural pair drawn deterministically from the run seed.
    Synthetic { source: ShiftSpec, target: ShiftSpec },
    /// On-disk CSV pair; both files must agree on width and class count.
    Csv {
        source_path: PathBuf,
        target_path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

/// Network shape; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            feature_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.feature_dim == 0 {
            bad.push("model.feature_dim must be positive".into());
        }
        if self.hidden.iter().any(|&w| w == 0) {
            bad.push("model.hidden widths must all be positive".into());
        }
        bad
    }
}

/// Config-level attack description. The clamp box defaults to the dataset's
/// input range and the step to a fraction of epsilon, so one spec works
/// across datasets of different scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f64,
    #[serde(default = "default_attack_steps")]
    pub steps: usize,
    /// Step size as a fraction of epsilon; ignored when `step_size` is set.
    #[serde(default = "default_rel_step")]
    pub rel_step: f64,
    /// Absolute step size override.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    /// Overrides the dataset-derived clamp box.
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
}

fn default_attack_steps() -> usize {
    20
}

fn default_rel_step() -> f64 {
    0.1
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            epsilon: 0.5,
            steps: default_attack_steps(),
            rel_step: default_rel_step(),
            step_size: None,
            random_start: false,
            clamp: None,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self, prefix: &str) -> Vec<String> {
        let mut bad = Vec::new();
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            bad.push(format!(
                "{prefix}.epsilon must be finite and >= 0, got {}",
                self.epsilon
            ));
        }
        if self.steps < 1 {
            bad.push(format!("{prefix}.steps must be at least 1"));
        }
        if !self.rel_step.is_finite() || self.rel_step <= 0.0 {
            bad.push(format!(
                "{prefix}.rel_step must be finite and positive, got {}",
                self.rel_step
            ));
        }
        if let Some(s) = self.step_size {
            if !s.is_finite() || s <= 0.0 {
                bad.push(format!(
                    "{prefix}.step_size must be finite and positive, got {s}"
                ));
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if !lo.is_finite() || !hi.is_finite() || !(lo < hi) {
                bad.push(format!("{prefix}.clamp must satisfy lo < hi, got ({lo}, {hi})"));
            }
        }
        bad
    }

    /// Concrete attack for a dataset with the given value range. A zero
    /// epsilon gets an inert positive step so the result still validates.
    pub fn resolve(&self, input_range: (f64, f64)) -> AttackConfig {
        let (clamp_lo, clamp_hi) = self.clamp.unwrap_or(input_range);
        let step_size = self.step_size.unwrap_or(if self.epsilon > 0.0 {
            self.rel_step * self.epsilon
        } else {
            1.0
        });
        AttackConfig {
            epsilon: self.epsilon,
            steps: self.steps,
            step_size,
            random_start: self.random_start,
            clamp_lo,
            clamp_hi,
        }
    }
}

/// Loss-term and input switches. `true` keeps the component; the ablation
/// grid flips one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationToggles {
    /// Contrastive term, both adaptation phases.
    pub contrastive: bool,
    /// Pseudo-label cross-entropy, robust phase only; the standard phase
    /// always keeps its label term.
    pub pseudo_ce: bool,
    pub entropy: bool,
    pub diversity: bool,
    /// With this off the robust phase trains on clean inputs.
    pub adv_images: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            contrastive: true,
            pseudo_ce: true,
            entropy: true,
            diversity: true,
            adv_images: true,
        }
    }
}

fn default_metric() -> DistanceMetric {
    DistanceMetric::Cosine
}

/// Everything a run needs. Serializable both ways so the resolved config can
/// be echoed into the report and re-run verbatim.
///
/// Plain values come before the table-valued fields so the TOML encoding
/// stays valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    /// Keep only the first k classes of both domains before splitting.
    #[serde(default)]
    pub subset_classes: Option<usize>,
    /// Distance used by cluster pseudo-labeling.
    #[serde(default = "default_metric")]
    pub metric: DistanceMetric,
    /// Robust-phase label provider; defaults per availability case
    /// (standard lineage when one exists, robust lineage otherwise).
    #[serde(default)]
    pub robust_pseudo_labels: Option<RobustPseudoSource>,
    /// Average clean and adversarial objectives in the robust phase instead
    /// of training on adversarial inputs alone.
    #[serde(default)]
    pub include_clean_in_robust: bool,
    /// Artifact destination; CLI flag and environment override this.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub source_schedule: TrainSchedule,
    #[serde(default)]
    pub adapt_schedule: TrainSchedule,
    pub train_attack: AttackSpec,
    pub eval_attack: AttackSpec,
    #[serde(default)]
    pub ablation: AblationToggles,
}

impl ExperimentConfig {
    /// Collects every violated field instead of stopping at the first.
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        match &self.dataset {
            DatasetConfig::Synthetic { source, target } => {
                bad.extend(source.validate().into_iter().map(|m| format!("source {m}")));
                bad.extend(target.validate().into_iter().map(|m| format!("target {m}")));
                if source.classes != target.classes {
                    bad.push(format!(
                        "dataset class counts differ: {} vs {}",
                        source.classes, target.classes
                    ));
                }
                if source.input_dim != target.input_dim {
                    bad.push(format!(
                        "dataset input dims differ: {} vs {}",
                        source.input_dim, target.input_dim
                    ));
                }
                if let Some(k) = self.subset_classes {
                    if k > source.classes {
                        bad.push(format!(
                            "subset_classes {k} exceeds dataset classes {}",
                            source.classes
                        ));
                    }
                }
            }
            DatasetConfig::Csv {
                source_path,
                target_path,
                schema,
            } => {
                if source_path.as_os_str().is_empty() {
                    bad.push("dataset.source_path must not be empty".into());
                }
                if target_path.as_os_str().is_empty() {
                    bad.push("dataset.target_path must not be empty".into());
                }
                if let Some(c) = schema.classes {
                    if c == 0 {
                        bad.push("dataset.schema.classes must be positive".into());
                    }
                }
                if let Some((lo, hi)) = schema.input_range {
                    if !lo.is_finite() || !hi.is_finite() || !(lo < hi) {
                        bad.push(format!(
                            "dataset.schema.input_range must satisfy lo < hi, got ({lo}, {hi})"
                        ));
                    }
                }
            }
        }
        if self.subset_classes == Some(0) {
            bad.push("subset_classes must be at least 1".into());
        }
        bad.extend(self.model.validate());
        bad.extend(self.split.validate());
        bad.extend(self.optim.validate());
        bad.extend(self.weights.validate());
        bad.extend(
            self.source_schedule
                .validate()
                .into_iter()
                .map(|m| m.replacen("schedule.", "source_schedule.", 1)),
        );
        bad.extend(
            self.adapt_schedule
                .validate()
                .into_iter()
                .map(|m| m.replacen("schedule.", "adapt_schedule.", 1)),
        );
        bad.extend(self.train_attack.validate("train_attack"));
        bad.extend(self.eval_attack.validate("eval_attack"));
        if let Some(mode) = self.robust_pseudo_labels {
            match self.method.case() {
                None => bad.push(format!(
                    "robust_pseudo_labels is set but method {} has no robust phase",
                    self.method.as_str()
                )),
                Some(AvailabilityCase::StandardSourceOnly)
                    if mode == RobustPseudoSource::Robust =>
                {
                    bad.push(
                        "robust_pseudo_labels = robust needs a robust source model, \
                         unavailable under standard_source"
                            .into(),
                    );
                }
                Some(AvailabilityCase::RobustSourceOnly)
                    if mode == RobustPseudoSource::Standard =>
                {
                    bad.push(
                        "robust_pseudo_labels = standard needs a standard source model, \
                         unavailable under robust_source"
                            .into(),
                    );
                }
                _ => {}
            }
        }
        bad
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let bad = self.validate();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Robust-phase label provider after per-case defaulting; `None` when
    /// the method has no robust phase.
    pub fn resolved_robust_labels(&self) -> Option<RobustPseudoSource> {
        let case = self.method.case()?;
        Some(self.robust_pseudo_labels.unwrap_or(match case {
            AvailabilityCase::RobustSourceOnly => RobustPseudoSource::Robust,
            _ => RobustPseudoSource::Standard,
        }))
    }
}

/// Reads a config file, applying field defaults for anything omitted.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

/// SHA-256 over the canonical JSON encoding; identifies a config exactly.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    format!("{:x}", h.finalize())
}

/// One accuracy measurement. Every number in a report names the model it
/// came from, the split it used, and the attack it faced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub split: String,
    /// `"clean"` or `"pgd"`.
    pub attack: String,
    pub accuracy: f64,
    /// Mean accuracy over the classes present in the split.
    pub macro_accuracy: f64,
    /// Indexed by class; `None` where the split has no samples.
    pub per_class: Vec<Option<f64>>,
}

/// Loss curves of one training phase, keyed by the model it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub track: String,
    pub history: TrainHistory,
}

/// Provenance and accuracy of one final pseudo-label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub track: String,
    pub source: PseudoSource,
    /// Epoch the set was produced at.
    pub epoch: usize,
    pub accuracy: f64,
}

/// Serializable result of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: Method,
    pub case: Option<AvailabilityCase>,
    pub seed: u64,
    pub config_hash: String,
    /// Model name the method is judged by.
    pub final_model: String,
    pub metrics: Vec<MetricRecord>,
    pub phases: Vec<PhaseReport>,
    pub pseudo: Vec<PseudoSummary>,
    /// Informational; excluded from determinism guarantees.
    pub wall_clock_secs: f64,
    /// Fully resolved config the run executed.
    pub config: ExperimentConfig,
}

impl RunReport {
    /// Micro accuracy for a (model, split, attack) triple.
    pub fn accuracy(&self, model: &str, split: &str, attack: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.model == model && r.split == split && r.attack == attack)
            .map(|r| r.accuracy)
    }

    /// Adversarial target-test accuracy of the judged model.
    pub fn final_adv_accuracy(&self) -> Result<f64> {
        self.accuracy(&self.final_model, "target_test", "pgd")
            .ok_or_else(|| {
                Error::State(format!(
                    "report has no target_test pgd metric for {}",
                    self.final_model
                ))
            })
    }

    /// Clean target-test accuracy of the judged model.
    pub fn final_clean_accuracy(&self) -> Result<f64> {
        self.accuracy(&self.final_model, "target_test", "clean")
            .ok_or_else(|| {
                Error::State(format!(
                    "report has no target_test clean metric for {}",
                    self.final_model
                ))
            })
    }

    /// Hash over everything the determinism guarantee covers: metrics,
    /// curves, and pseudo-label summaries, but not wall clock.
    pub fn metrics_digest(&self) -> String {
        let json = serde_json::to_string(&(&self.metrics, &self.phases, &self.pseudo))
            .expect("report serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Report plus the artifacts backing the non-JSON outputs.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Named checkpoints in execution order.
    pub models: Vec<(String, Model)>,
    /// Final pseudo-label set per adaptation track.
    pub pseudo_labels: Vec<(String, PseudoLabelSet)>,
    /// True target-train labels the pseudo sets align with.
    pub target_train_y: Vec<usize>,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(DomainDataset, DomainDataset)> {
    let (mut source, mut target) = match &cfg.dataset {
        DatasetConfig::Synthetic { source, target } => {
            make_domain_pair(source, target, cfg.seed)?
        }
        DatasetConfig::Csv {
            source_path,
            target_path,
            schema,
        } => {
            let source = load_csv(source_path, schema)?;
            let target = load_csv(target_path, schema)?;
            if source.class_count != target.class_count {
                return Err(Error::config(format!(
                    "CSV class counts differ: {} vs {}",
                    source.class_count, target.class_count
                )));
            }
            if source.dim() != target.dim() {
                return Err(Error::config(format!(
                    "CSV widths differ: {} vs {}",
                    source.dim(),
                    target.dim()
                )));
            }
            (source, target)
        }
    };
    // Attacks need one shared clamp box across the pair.
    let range = (
        source.input_range.0.min(target.input_range.0),
        source.input_range.1.max(target.input_range.1),
    );
    source.input_range = range;
    target.input_range = range;
    if let Some(k) = cfg.subset_classes {
        source = class_subset(&source, k)?;
        target = class_subset(&target, k)?;
    }
    Ok((source, target))
}

fn build_model(cfg: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<Model> {
    let mut rng = RngSeed::new(cfg.seed, streams::MODEL_INIT).rng();
    Model::new(
        input_dim,
        &cfg.model.hidden,
        cfg.model.feature_dim,
        classes,
        cfg.model.activation,
        &mut rng,
    )
}

/// Argmax predictions for a whole split.
fn predict(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    let (_, logits) = forward_batched(model, x)?;
    argmax_rows(&logits)
}

/// Micro accuracy, macro accuracy, and the per-class breakdown behind them.
fn accuracy_stats(
    preds: &[usize],
    y: &[usize],
    classes: usize,
) -> Result<(f64, f64, Vec<Option<f64>>)> {
    if preds.is_empty() {
        return Err(Error::EmptyData {
            context: "accuracy_stats".into(),
        });
    }
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &t) in preds.iter().zip(y) {
        if t >= classes {
            return Err(Error::LabelRange { label: t, classes });
        }
        counts[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let micro = hits.iter().sum::<usize>() as f64 / preds.len() as f64;
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| (counts[c] > 0).then(|| hits[c] as f64 / counts[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_acc = present.iter().sum::<f64>() / present.len() as f64;
    Ok((micro, macro_acc, per_class))
}

/// PGD over row chunks so tape memory stays bounded on large splits.
fn attack_split(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    atk: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    const BATCH: usize = 256;
    let n = x.rows();
    let mut out = Vec::with_capacity(x.len());
    let mut i = 0;
    while i < n {
        let hi = (i + BATCH).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let adv = pgd_attack(model, &x.gather_rows(&idx), &y[i..hi], atk, rng)?;
        out.extend_from_slice(adv.data());
        i = hi;
    }
    Tensor::new(vec![n, x.cols()], out)
}

/// Appends the clean and adversarial records for one (model, split) pair.
fn eval_records(
    name: &str,
    model: &Model,
    split_name: &str,
    data: &DomainDataset,
    atk: &AttackConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<MetricRecord>,
) -> Result<()> {
    let classes = model.class_count();
    let record = |attack: &str, preds: &[usize]| -> Result<MetricRecord> {
        let (micro, macro_acc, per_class) = accuracy_stats(preds, &data.y, classes)?;
        Ok(MetricRecord {
            model: name.into(),
            split: split_name.into(),
            attack: attack.into(),
            accuracy: micro,
            macro_accuracy: macro_acc,
            per_class,
        })
    };
    out.push(record("clean", &predict(model, &data.x)?)?);
    let x_adv = attack_split(model, &data.x, &data.y, atk, rng)?;
    out.push(record("pgd", &predict(model, &x_adv)?)?);
    Ok(())
}

/// Runs one experiment end to end: data, source training, adaptation per
/// the method, and evaluation of every produced model on the target test
/// split (source models also on the source test split).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.ensure_valid()?;
    let started = Instant::now();

    let (source, target) = load_dataset(cfg)?;
    let init = build_model(cfg, source.dim(), source.class_count)?;
    let source_splits = split(&source, &cfg.split, cfg.seed)?;
    let target_splits = split(&target, &cfg.split, cfg.seed)?;
    let train_atk = cfg.train_attack.resolve(source.input_range);
    let eval_atk = cfg.eval_attack.resolve(source.input_range);

    let mut phases: Vec<PhaseReport> = Vec::new();
    let mut models: Vec<(String, Model)> = Vec::new();
    let mut pseudo_sets: Vec<(String, PseudoLabelSet)> = Vec::new();

    let mut standard_source: Option<Model> = None;
    let mut robust_source: Option<Model> = None;
    if cfg.method.needs_standard_source() {
        let mut m = init.clone();
        let history = train_source_standard(
            &mut m,
            &source_splits,
            &cfg.source_schedule,
            &cfg.optim,
            cfg.seed,
        )?;
        phases.push(PhaseReport {
            track: "source_standard".into(),
            history,
        });
        models.push(("source_standard".into(), m.clone()));
        standard_source = Some(m);
    }
    if cfg.method.needs_robust_source() {
        let mut m = init.clone();
        let history = train_source_robust(
            &mut m,
            &source_splits,
            &cfg.source_schedule,
            &cfg.optim,
            &train_atk,
            cfg.seed,
        )?;
        phases.push(PhaseReport {
            track: "source_robust".into(),
            history,
        });
        models.push(("source_robust".into(), m.clone()));
        robust_source = Some(m);
    }

    let flags = TermFlags {
        ent: cfg.ablation.entropy,
        div: cfg.ablation.diversity,
        pseudo: true,
        con: cfg.ablation.contrastive,
    };
    match cfg.method.case() {
        Some(case) => {
            let case_cfg = CaseConfig {
                adapt_schedule: cfg.adapt_schedule,
                optim: cfg.optim,
                options: AdaptOptions {
                    weights: cfg.weights,
                    flags,
                    metric: cfg.metric,
                },
                robust_options: RobustAdaptOptions {
                    weights: cfg.weights,
                    flags: TermFlags {
                        pseudo: cfg.ablation.pseudo_ce,
                        ..flags
                    },
                    include_clean: cfg.include_clean_in_robust,
                },
                attack: cfg.ablation.adv_images.then_some(train_atk),
                robust_labels: cfg
                    .resolved_robust_labels()
                    .expect("method with a case has a robust phase"),
                seed: cfg.seed,
            };
            let sources = SourceModels {
                standard: standard_source,
                robust: robust_source,
            };
            let outcome = run_case(case, &sources, &target_splits.train, &case_cfg)?;
            phases.push(PhaseReport {
                track: "target_standard".into(),
                history: outcome.standard_track.history,
            });
            models.push(("target_standard".into(), outcome.standard_track.model));
            pseudo_sets.push(("target_standard".into(), outcome.standard_track.pseudo));
            if let Some(aux) = outcome.aux_robust_lineage {
                phases.push(PhaseReport {
                    track: "aux_robust_lineage".into(),
                    history: aux.history,
                });
                models.push(("aux_robust_lineage".into(), aux.model));
                pseudo_sets.push(("aux_robust_lineage".into(), aux.pseudo));
            }
            phases.push(PhaseReport {
                track: "target_robust".into(),
                history: outcome.robust_track.history,
            });
            models.push(("target_robust".into(), outcome.robust_track.model));
            pseudo_sets.push(("target_robust".into(), outcome.robust_track.pseudo));
        }
        None => {
            // Single-phase baseline: standard adaptation from whichever
            // source the method trains, contrastive term off by definition.
            let from = standard_source
                .as_ref()
                .or(robust_source.as_ref())
                .expect("baseline methods train one source");
            let opts = AdaptOptions {
                weights: cfg.weights,
                flags: TermFlags { con: false, ..flags },
                metric: cfg.metric,
            };
            let outcome = adapt_target_standard(
                from,
                &target_splits.train,
                &cfg.adapt_schedule,
                &cfg.optim,
                &opts,
                cfg.seed,
            )?;
            phases.push(PhaseReport {
                track: "target_standard".into(),
                history: outcome.history,
            });
            models.push(("target_standard".into(), outcome.model));
            pseudo_sets.push(("target_standard".into(), outcome.pseudo));
        }
    }

    let target_train_y = target_splits.train.y.clone();
    let pseudo = pseudo_sets
        .iter()
        .map(|(track, set)| {
            Ok(PseudoSummary {
                track: track.clone(),
                source: set.source,
                epoch: set.epoch,
                accuracy: pseudo_label_accuracy(set, &target_train_y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut eval_rng = RngSeed::new(cfg.seed, streams::EVAL_ATTACK).rng();
    let mut metrics = Vec::new();
    for (name, model) in &models {
        if name.starts_with("source_") {
            eval_records(
                name,
                model,
                "source_test",
                &source_splits.test,
                &eval_atk,
                &mut eval_rng,
                &mut metrics,
            )?;
        }
        eval_records(
            name,
            model,
            "target_test",
            &target_splits.test,
            &eval_atk,
            &mut eval_rng,
            &mut metrics,
        )?;
    }

    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: cfg.method,
        case: cfg.method.case(),
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        final_model: cfg.method.final_model().into(),
        metrics,
        phases,
        pseudo,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok(RunOutput {
        report,
        models,
        pseudo_labels: pseudo_sets,
        target_train_y,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::State(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn csv_error(context: &str, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(context, io),
        other => Error::io(
            context,
            std::io::Error::new(std::io::ErrorKind::Other, format!("{other:?}")),
        ),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Persists one run: `report.json`, tidy `metrics.csv` and `curves.csv`,
/// `pseudo_labels.csv`, `manifest.json`, the resolved config, and one JSON
/// checkpoint per model under `checkpoints/`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    write_json(&dir.join("report.json"), &out.report)?;

    let metrics_path = dir.join("metrics.csv");
    let ctx = format!("write {}", metrics_path.display());
    let file = File::create(&metrics_path).map_err(|e| Error::io(&ctx, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["model", "split", "attack", "scope", "accuracy"])
        .map_err(|e| csv_error(&ctx, e))?;
    for r in &out.report.metrics {
        let mut rows = vec![
            ("micro".to_string(), r.accuracy),
            ("macro".to_string(), r.macro_accuracy),
        ];
        for (c, acc) in r.per_class.iter().enumerate() {
            if let Some(acc) = acc {
                rows.push((format!("class_{c}"), *acc));
            }
        }
        for (scope, acc) in rows {
            w.write_record([&r.model, &r.split, &r.attack, &scope, &acc.to_string()])
                .map_err(|e| csv_error(&ctx, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&ctx, e))?;

    let curves_path = dir.join("curves.csv");
    let ctx = format!("write {}", curves_path.display());
    let file = File::create(&curves_path).map_err(|e| Error::io(&ctx, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "track",
        "phase",
        "epoch",
        "train_loss",
        "ent",
        "div",
        "pseudo",
        "con",
        "total",
        "val_accuracy",
        "pseudo_accuracy",
    ])
    .map_err(|e| csv_error(&ctx, e))?;
    for p in &out.report.phases {
        for e in &p.history.epochs {
            let bd = e.components;
            w.write_record([
                p.track.clone(),
                p.history.phase.as_str().into(),
                e.epoch.to_string(),
                fmt_opt(e.train_loss),
                fmt_opt(bd.map(|b| b.ent)),
                fmt_opt(bd.map(|b| b.div)),
                fmt_opt(bd.map(|b| b.pseudo)),
                fmt_opt(bd.map(|b| b.con)),
                fmt_opt(bd.map(|b| b.total)),
                fmt_opt(e.val_accuracy),
                fmt_opt(e.pseudo_accuracy),
            ])
            .map_err(|e| csv_error(&ctx, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&ctx, e))?;

    let pseudo_path = dir.join("pseudo_labels.csv");
    let ctx = format!("write {}", pseudo_path.display());
    let file = File::create(&pseudo_path).map_err(|e| Error::io(&ctx, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "track",
        "index",
        "pseudo_label",
        "true_label",
        "correct",
        "source",
        "epoch",
    ])
    .map_err(|e| csv_error(&ctx, e))?;
    for (track, set) in &out.pseudo_labels {
        for (i, &p) in set.labels.iter().enumerate() {
            let t = out.target_train_y[i];
            w.write_record([
                track.clone(),
                i.to_string(),
                p.to_string(),
                t.to_string(),
                u8::from(p == t).to_string(),
                set.source.as_str().into(),
                set.epoch.to_string(),
            ])
            .map_err(|e| csv_error(&ctx, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&ctx, e))?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        schema_version: u32,
        config_hash: &'a str,
        method: Method,
        seed: u64,
        crate_version: &'a str,
        wall_clock_secs: f64,
        files: Vec<String>,
    }
    let mut files = vec![
        "report.json".to_string(),
        "metrics.csv".to_string(),
        "curves.csv".to_string(),
        "pseudo_labels.csv".to_string(),
        "resolved_config.toml".to_string(),
    ];
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)
        .map_err(|e| Error::io(format!("create {}", ckpt_dir.display()), e))?;
    for (name, model) in &out.models {
        let rel = format!("checkpoints/{name}.json");
        write_json(&ckpt_dir.join(format!("{name}.json")), model)?;
        files.push(rel);
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: &out.report.config_hash,
            method: out.report.method,
            seed: out.report.seed,
            crate_version: env!("CARGO_PKG_VERSION"),
            wall_clock_secs: out.report.wall_clock_secs,
            files,
        },
    )?;
    let toml_text = toml::to_string_pretty(&out.report.config)
        .map_err(|e| Error::State(format!("serialize resolved config: {e}")))?;
    fs::write(dir.join("resolved_config.toml"), toml_text)
        .map_err(|e| Error::io(format!("write {}", dir.join("resolved_config.toml").display()), e))?;
    Ok(())
}

/// Grid row order: the untouched base first, then one toggle off at a time.
pub const ABLATION_ROWS: [&str; 6] = [
    "full",
    "no_contrastive",
    "no_pseudo_ce",
    "no_entropy",
    "no_diversity",
    "no_adv_images",
];

/// Base config with one grid row's toggle applied.
pub fn ablation_config(base: &ExperimentConfig, row: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match row {
        "full" => {}
        "no_contrastive" => cfg.ablation.contrastive = false,
        "no_pseudo_ce" => cfg.ablation.pseudo_ce = false,
        "no_entropy" => cfg.ablation.entropy = false,
        "no_diversity" => cfg.ablation.diversity = false,
        "no_adv_images" => cfg.ablation.adv_images = false,
        other => {
            return Err(Error::config(format!(
                "unknown ablation row {other:?}; expected one of {ABLATION_ROWS:?}"
            )))
        }
    }
    Ok(cfg)
}

/// One labeled grid row.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub output: RunOutput,
}

/// Runs the six-row ablation grid around a base config.
pub fn run_ablation_grid(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    base.ensure_valid()?;
    ABLATION_ROWS
        .iter()
        .map(|&label| {
            let cfg = ablation_config(base, label)?;
            Ok(AblationRow {
                label: label.into(),
                output: run_experiment(&cfg)?,
            })
        })
        .collect()
}

/// Consolidated comparison table: one line per row with the judged model's
/// clean and adversarial target-test accuracy.
pub fn write_ablation_table(rows: &[AblationRow], path: &Path) -> Result<()> {
    let ctx = format!("write {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(&ctx, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["row", "model", "clean_accuracy", "adv_accuracy"])
        .map_err(|e| csv_error(&ctx, e))?;
    for row in rows {
        let report = &row.output.report;
        w.write_record([
            row.label.clone(),
            report.final_model.clone(),
            report.final_clean_accuracy()?.to_string(),
            report.final_adv_accuracy()?.to_string(),
        ])
        .map_err(|e| csv_error(&ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(&ctx, e))
}

/// One class-count sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub both_adv: f64,
    pub standard_source_adv: f64,
    /// `both_adv - standard_source_adv`; the series the sweep plots.
    pub advantage: f64,
}

/// Relative-performance series across class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Spearman correlation between k and the advantage column.
    pub rank_correlation: f64,
}

/// Compares the both-sources method against standard-source-only on the
/// first-k-classes subsets. The base config's own method field is ignored;
/// both methods run per k.
pub fn run_class_sweep(base: &ExperimentConfig, ks: &[usize]) -> Result<SweepReport> {
    base.ensure_valid()?;
    if ks.is_empty() {
        return Err(Error::config("class sweep needs at least one k"));
    }
    if let DatasetConfig::Synthetic { source, .. } = &base.dataset {
        let bad: Vec<String> = ks
            .iter()
            .filter(|&&k| k == 0 || k > source.classes)
            .map(|k| format!("sweep k {k} outside [1, {}]", source.classes))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
    }
    let run_at = |k: usize, method: Method| -> Result<f64> {
        let mut cfg = base.clone();
        cfg.subset_classes = Some(k);
        cfg.method = method;
        cfg.robust_pseudo_labels = None;
        run_experiment(&cfg)?.report.final_adv_accuracy()
    };
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let both_adv = run_at(k, Method::Both)?;
        let standard_source_adv = run_at(k, Method::StandardSource)?;
        rows.push(SweepRow {
            k,
            both_adv,
            standard_source_adv,
            advantage: both_adv - standard_source_adv,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.advantage).collect();
    Ok(SweepReport {
        rank_correlation: spearman(&xs, &ys),
        rows,
    })
}

/// Persists a sweep as `sweep.csv` (tidy rows) plus `sweep.json`.
pub fn write_sweep(report: &SweepReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let path = dir.join("sweep.csv");
    let ctx = format!("write {}", path.display());
    let file = File::create(&path).map_err(|e| Error::io(&ctx, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["k", "both_adv", "standard_source_adv", "advantage"])
        .map_err(|e| csv_error(&ctx, e))?;
    for r in &report.rows {
        w.write_record([
            r.k.to_string(),
            r.both_adv.to_string(),
            r.standard_source_adv.to_string(),
            r.advantage.to_string(),
        ])
        .map_err(|e| csv_error(&ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(&ctx, e))?;
    write_json(&dir.join("sweep.json"), report)
}

/// Average 1-based ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks on ties; 0.0 when either
/// side has no rank variance or fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return 0.0;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    num / (vx * vy).sqrt()
}

/// Writes one row per sample: encoder features, true label, the model's
/// cluster pseudo-label, and an agreement flag. With an attack the features
/// are taken at the attacked inputs; labels stay the true ones.
pub fn export_features(
    model: &Model,
    data: &DomainDataset,
    attack: Option<&AttackConfig>,
    metric: DistanceMetric,
    seed: u64,
    path: &Path,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData {
            context: "export_features".into(),
        });
    }
    if data.dim() != model.input_dim() || data.class_count != model.class_count() {
        return Err(Error::config(format!(
            "model expects {}-dim inputs over {} classes, dataset has {} and {}",
            model.input_dim(),
            model.class_count(),
            data.dim(),
            data.class_count
        )));
    }
    let x = match attack {
        Some(atk) => {
            let mut rng = RngSeed::new(seed, streams::EVAL_ATTACK).rng();
            attack_split(model, &data.x, &data.y, atk, &mut rng)?
        }
        None => data.x.clone(),
    };
    let pseudo = kmeans_from_model(model, &x, metric, 0)?.labels;
    let (features, _) = forward_batched(model, &x)?;

    let ctx = format!("write {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(&ctx, e))?;
    let mut w = csv::Writer::from_writer(file);
    let d = features.cols();
    let mut header: Vec<String> = (0..d).map(|i| format!("z{i}")).collect();
    header.extend(["label".into(), "pseudo_label".into(), "correct".into()]);
    w.write_record(&header).map_err(|e| csv_error(&ctx, e))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = features.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        let p = pseudo.labels[i];
        rec.push(data.y[i].to_string());
        rec.push(p.to_string());
        rec.push(u8::from(p == data.y[i]).to_string());
        w.write_record(&rec).map_err(|e| csv_error(&ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(&ctx, e))
}

/// Committed fixture configurations backing the regression and acceptance
/// suites.
pub mod presets {
    use super::*;
    use crate::data::DatasetFamily;

    /// Seeds the fixture assertions run over; orderings are asserted on the
    /// per-seed majority to absorb stochastic flips.
    pub const FIXTURE_SEEDS: [u64; 5] = [101, 211, 307, 401, 503];

    /// Class counts for the sweep fixture.
    pub const SWEEP_KS: [usize; 5] = [2, 4, 6, 8, 10];

    /// Four gaussian clusters, target rotated and shifted against the
    /// source; trains in seconds per seed.
    pub fn rotated_blobs(seed: u64) -> ExperimentConfig {
        let source = ShiftSpec {
            family: DatasetFamily::GaussianBlobs,
            classes: 4,
            samples_per_class: 50,
            input_dim: 2,
            noise_sigma: 0.35,
            rotation: 0.0,
            translation: vec![],
            scale: 1.0,
        };
        let target = ShiftSpec {
            rotation: 0.55,
            translation: vec![0.45, -0.35],
            ..source.clone()
        };
        ExperimentConfig {
            seed,
            method: Method::Both,
            subset_classes: None,
            metric: DistanceMetric::Cosine,
            robust_pseudo_labels: None,
            include_clean_in_robust: false,
            output_dir: None,
            dataset: DatasetConfig::Synthetic { source, target },
            model: ModelConfig {
                hidden: vec![32, 32],
                feature_dim: 8,
                activation: Activation::Tanh,
            },
            split: SplitFractions::default(),
            optim: OptimConfig {
                backbone_lr: 1e-2,
                head_lr: 1e-2,
                ..OptimConfig::default()
            },
            weights: LossWeights::default(),
            source_schedule: TrainSchedule {
                max_epochs: 30,
                pseudo_refresh_interval: 1,
                batch_size: 32,
                early_stop_patience: 8,
            },
            adapt_schedule: TrainSchedule {
                max_epochs: 12,
                pseudo_refresh_interval: 3,
                batch_size: 32,
                early_stop_patience: 5,
            },
            train_attack: AttackSpec {
                epsilon: 0.45,
                steps: 7,
                rel_step: 0.25,
                ..AttackSpec::default()
            },
            eval_attack: AttackSpec {
                epsilon: 0.45,
                steps: 20,
                rel_step: 0.1,
                ..AttackSpec::default()
            },
            ablation: AblationToggles::default(),
        }
    }

    /// Ten-cluster family for the class-count sweep; tighter clusters so
    /// subsets stay separable as k grows.
    pub fn class_sweep_base(seed: u64) -> ExperimentConfig {
        let source = ShiftSpec {
            family: DatasetFamily::GaussianBlobs,
            classes: 10,
            samples_per_class: 30,
            input_dim: 2,
            noise_sigma: 0.22,
            rotation: 0.0,
            translation: vec![],
            scale: 1.0,
        };
        let target = ShiftSpec {
            rotation: 0.35,
            translation: vec![0.3, -0.25],
            scale: 1.1,
            ..source.clone()
        };
        let mut cfg = rotated_blobs(seed);
        cfg.dataset = DatasetConfig::Synthetic { source, target };
        cfg.source_schedule.max_epochs = 25;
        cfg.adapt_schedule.max_epochs = 10;
        cfg.adapt_schedule.pseudo_refresh_interval = 2;
        cfg.train_attack.epsilon = 0.35;
        cfg.eval_attack.epsilon = 0.35;
        cfg
    }
}
