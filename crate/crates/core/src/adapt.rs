//! The four training pipelines and the three model-availability cases.
//!
//! Source training fits a model on labeled source data, optionally on
//! adversarial examples, with early stopping and best-epoch selection on
//! the validation split. Target adaptation never sees source data or target
//! labels: it clones a source model, freezes the classifier, and trains the
//! encoder on pseudo-labeled objectives. The standard phase refreshes
//! cluster pseudo-labels on a configured interval; the robust phase fixes
//! model-argmax pseudo-labels once up front and trains on adversarial
//! inputs. Target truth labels are read only to report pseudo-label
//! accuracy, never by any training step.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{adv_accuracy, clean_accuracy, pgd_attack, AttackConfig};
use crate::data::{DatasetSplits, DomainDataset};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::loss::{
    cross_entropy, robust_target_loss, target_loss, LossBreakdown, LossWeights, TermFlags,
};
use crate::nn::Model;
use crate::optim::{Adam, OptimConfig};
use crate::pseudo::{
    kmeans_from_model, model_pseudo_labels, pseudo_label_accuracy, DistanceMetric, PseudoLabelSet,
    PseudoSource,
};
use crate::rng::{streams, RngSeed};

/// Which source models exist when adaptation starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilityCase {
    RobustSourceOnly,
    StandardSourceOnly,
    Both,
}

impl AvailabilityCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            AvailabilityCase::RobustSourceOnly => "robust_source_only",
            AvailabilityCase::StandardSourceOnly => "standard_source_only",
            AvailabilityCase::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Zero is allowed and returns the initialized model unchanged.
    pub max_epochs: usize,
    /// Epochs between cluster pseudo-label refreshes in standard target
    /// adaptation; 1 refreshes every epoch. Ignored by the other phases.
    pub pseudo_refresh_interval: usize,
    pub batch_size: usize,
    /// Consecutive non-improving validation epochs before source training
    /// stops. Adaptation phases run their full budget.
    pub early_stop_patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            max_epochs: 20,
            pseudo_refresh_interval: 1,
            batch_size: 64,
            early_stop_patience: 5,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("schedule.batch_size must be positive".into());
        }
        if self.pseudo_refresh_interval == 0 {
            bad.push("schedule.pseudo_refresh_interval must be positive".into());
        }
        if self.early_stop_patience == 0 {
            bad.push("schedule.early_stop_patience must be positive".into());
        }
        if self.max_epochs > 0 && self.pseudo_refresh_interval > self.max_epochs {
            bad.push(format!(
                "schedule.pseudo_refresh_interval {} exceeds max_epochs {}",
                self.pseudo_refresh_interval, self.max_epochs
            ));
        }
        bad
    }

    fn ensure_valid(&self) -> Result<()> {
        let bad = self.validate();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Which pipeline produced a history, for curve labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    SourceStandard,
    SourceRobust,
    AdaptStandard,
    AdaptRobust,
}

impl PhaseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseKind::SourceStandard => "source_standard",
            PhaseKind::SourceRobust => "source_robust",
            PhaseKind::AdaptStandard => "adapt_standard",
            PhaseKind::AdaptRobust => "adapt_robust",
        }
    }
}

/// One epoch of curve data. Epoch 0 is the pre-training snapshot; fields
/// are `None` where a phase has nothing to report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub components: Option<LossBreakdown>,
    pub val_accuracy: Option<f64>,
    pub pseudo_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub phase: PhaseKind,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot was selected; `None` when the phase keeps its
    /// final parameters.
    pub selected_epoch: Option<usize>,
}

/// Adapted model plus its training curves and the pseudo-labels that
/// supervised it (the last refresh for the standard phase).
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub pseudo: PseudoLabelSet,
}

/// Options for standard target adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptOptions {
    pub weights: LossWeights,
    pub flags: TermFlags,
    pub metric: DistanceMetric,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            weights: LossWeights::default(),
            flags: TermFlags::default(),
            metric: DistanceMetric::Cosine,
        }
    }
}

/// Options for robust target adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustAdaptOptions {
    pub weights: LossWeights,
    pub flags: TermFlags,
    /// Average the objective over the clean batch as well as the
    /// adversarial one instead of training on adversarial inputs only.
    pub include_clean: bool,
}

impl Default for RobustAdaptOptions {
    fn default() -> Self {
        RobustAdaptOptions {
            weights: LossWeights::default(),
            flags: TermFlags::default(),
            include_clean: false,
        }
    }
}

/// Where the robust phase's fixed pseudo-labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustPseudoSource {
    /// Argmax of the standard-lineage adapted model.
    Standard,
    /// Argmax of the robust-lineage adapted model.
    Robust,
    /// The initialization model labels the data itself and the
    /// label-dependent loss terms are dropped.
    #[serde(rename = "none")]
    SelfArgmax,
}

impl RobustPseudoSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            RobustPseudoSource::Standard => "standard",
            RobustPseudoSource::Robust => "robust",
            RobustPseudoSource::SelfArgmax => "none",
        }
    }
}

/// Label provider handed to [`adapt_target_robust`].
#[derive(Debug, Clone, Copy)]
pub enum RobustLabelSource<'a> {
    Standard(&'a Model),
    Robust(&'a Model),
    SelfArgmax,
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn check_dataset_fits(model: &Model, data: &DomainDataset, context: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(vec![format!("{context} split is empty")]));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Config(vec![format!(
            "{context} width {} does not match model input width {}",
            data.dim(),
            model.input_dim()
        )]));
    }
    if data.class_count != model.class_count() {
        return Err(Error::Config(vec![format!(
            "{context} has {} classes but the model outputs {}",
            data.class_count,
            model.class_count()
        )]));
    }
    Ok(())
}

/// Weighted running mean of loss breakdowns.
#[derive(Default)]
struct BreakdownMean {
    sum: LossBreakdown,
    weight: f64,
}

impl BreakdownMean {
    fn add(&mut self, bd: &LossBreakdown, w: f64) {
        self.sum.ent += bd.ent * w;
        self.sum.div += bd.div * w;
        self.sum.pseudo += bd.pseudo * w;
        self.sum.con += bd.con * w;
        self.sum.total += bd.total * w;
        self.weight += w;
    }

    fn mean(&self) -> LossBreakdown {
        LossBreakdown {
            ent: self.sum.ent / self.weight,
            div: self.sum.div / self.weight,
            pseudo: self.sum.pseudo / self.weight,
            con: self.sum.con / self.weight,
            total: self.sum.total / self.weight,
        }
    }
}

/// Shared source-training loop. `attack` switches between clean training
/// and adversarial training plus adversarial validation selection. With a
/// zero budget the schedule degenerates to the epoch-0 snapshot.
fn train_source(
    model: &mut Model,
    data: &DatasetSplits,
    schedule: &TrainSchedule,
    optim: &OptimConfig,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<TrainHistory> {
    schedule.ensure_valid()?;
    check_dataset_fits(model, &data.train, "source train")?;
    check_dataset_fits(model, &data.val, "source val")?;
    let phase = if attack.is_some() {
        PhaseKind::SourceRobust
    } else {
        PhaseKind::SourceStandard
    };

    let mut shuffle_rng = RngSeed::new(seed, streams::SOURCE_SHUFFLE).rng();
    let mut attack_rng = RngSeed::new(seed, streams::SOURCE_ATTACK).rng();
    let mut val_rng = RngSeed::new(seed, streams::VAL_ATTACK).rng();
    let mut adam = Adam::new(model, *optim);

    let validate = |m: &Model, rng: &mut ChaCha8Rng| -> Result<f64> {
        match attack {
            Some(atk) => adv_accuracy(m, &data.val.x, &data.val.y, atk, rng),
            None => clean_accuracy(m, &data.val.x, &data.val.y),
        }
    };

    let acc0 = validate(model, &mut val_rng)?;
    let mut best_epoch = 0usize;
    let mut best_acc = acc0;
    let mut best_params = model.clone();
    let mut stale = 0usize;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        components: None,
        val_accuracy: Some(acc0),
        pseudo_accuracy: None,
    }];

    let n = data.train.len();
    for epoch in 1..=schedule.max_epochs {
        let mut loss_sum = 0.0;
        for idx in shuffled_batches(n, schedule.batch_size, &mut shuffle_rng) {
            let xb = data.train.x.gather_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.train.y[i]).collect();
            let x_in = match attack {
                Some(atk) => pgd_attack(model, &xb, &yb, atk, &mut attack_rng)?,
                None => xb,
            };
            let mut tape = Tape::new();
            let params = model.insert_params(&mut tape);
            let xv = tape.leaf(&x_in);
            let (_, logits) = model.forward_on(&mut tape, &params, xv);
            let loss = cross_entropy(&mut tape, logits, &yb)?;
            tape.backward(loss)?;
            let grads = model.read_grads(&tape, &params);
            adam.step(model, &grads)?;
            loss_sum += tape.scalar(loss) * idx.len() as f64;
        }
        let acc = validate(model, &mut val_rng)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(loss_sum / n as f64),
            components: None,
            val_accuracy: Some(acc),
            pseudo_accuracy: None,
        });
        if acc > best_acc {
            best_epoch = epoch;
            best_acc = acc;
            best_params = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.early_stop_patience {
                break;
            }
        }
    }
    *model = best_params;
    Ok(TrainHistory {
        phase,
        epochs,
        selected_epoch: Some(best_epoch),
    })
}

/// Fits `model` to the labeled source splits by mini-batch cross-entropy,
/// selecting the epoch with the best validation clean accuracy.
pub fn train_source_standard(
    model: &mut Model,
    data: &DatasetSplits,
    schedule: &TrainSchedule,
    optim: &OptimConfig,
    seed: u64,
) -> Result<TrainHistory> {
    train_source(model, data, schedule, optim, None, seed)
}

/// Adversarial training: every batch is replaced by its attack under the
/// current model before the gradient step, and selection uses validation
/// adversarial accuracy. A zero-budget attack makes this identical to
/// [`train_source_standard`], consuming the same rng streams.
pub fn train_source_robust(
    model: &mut Model,
    data: &DatasetSplits,
    schedule: &TrainSchedule,
    optim: &OptimConfig,
    attack: &AttackConfig,
    seed: u64,
) -> Result<TrainHistory> {
    train_source(model, data, schedule, optim, Some(attack), seed)
}

/// Adapts a source model to unlabeled target data: clone, freeze the
/// classifier, and train the encoder on the combined objective with
/// cluster pseudo-labels refreshed on the schedule's interval. Returns the
/// adapted model, curves, and the final pseudo-label set.
pub fn adapt_target_standard(
    source_model: &Model,
    target_train: &DomainDataset,
    schedule: &TrainSchedule,
    optim: &OptimConfig,
    opts: &AdaptOptions,
    seed: u64,
) -> Result<AdaptOutcome> {
    schedule.ensure_valid()?;
    check_dataset_fits(source_model, target_train, "target train")?;

    let mut model = source_model.clone();
    model.classifier.frozen = true;
    let mut adam = Adam::new(&model, *optim);
    let mut shuffle_rng = RngSeed::new(seed, streams::ADAPT_STANDARD_SHUFFLE).rng();

    let n = target_train.len();
    let mut pseudo: Option<PseudoLabelSet> = None;
    let mut epochs = Vec::new();
    for epoch in 1..=schedule.max_epochs {
        let mut refreshed_acc = None;
        if (epoch - 1) % schedule.pseudo_refresh_interval == 0 {
            let outcome = kmeans_from_model(&model, &target_train.x, opts.metric, epoch)?;
            refreshed_acc = Some(pseudo_label_accuracy(&outcome.labels, &target_train.y)?);
            pseudo = Some(outcome.labels);
        }
        let labels = pseudo.as_ref().expect("refreshed on the first epoch");

        let mut mean = BreakdownMean::default();
        for idx in shuffled_batches(n, schedule.batch_size, &mut shuffle_rng) {
            let xb = target_train.x.gather_rows(&idx);
            let yb = labels.gather(&idx)?;
            let mut tape = Tape::new();
            let params = model.insert_params(&mut tape);
            let xv = tape.leaf(&xb);
            let (features, logits) = model.forward_on(&mut tape, &params, xv);
            let (loss, bd) = target_loss(
                &mut tape,
                logits,
                features,
                Some(&yb),
                &opts.weights,
                &opts.flags,
            )?;
            tape.backward(loss)?;
            let grads = model.read_grads(&tape, &params);
            adam.step(&mut model, &grads)?;
            mean.add(&bd, idx.len() as f64);
        }
        let bd = mean.mean();
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(bd.total),
            components: Some(bd),
            val_accuracy: None,
            pseudo_accuracy: refreshed_acc,
        });
    }
    let pseudo = match pseudo {
        Some(p) => p,
        // Zero-epoch budget: still label the data so downstream phases and
        // exports have something to read.
        None => kmeans_from_model(&model, &target_train.x, opts.metric, 0)?.labels,
    };
    debug_assert_eq!(model.classifier_hash(), source_model.classifier_hash());
    Ok(AdaptOutcome {
        model,
        history: TrainHistory {
            phase: PhaseKind::AdaptStandard,
            epochs,
            selected_epoch: None,
        },
        pseudo,
    })
}

/// Robust target adaptation: pseudo-labels are computed exactly once from
/// the given provider before the epoch loop, then every batch is attacked
/// under the current model (when an attack is configured) and the combined
/// objective is stepped on the adversarial inputs. The classifier stays
/// frozen throughout.
pub fn adapt_target_robust(
    init_model: &Model,
    labels_from: RobustLabelSource,
    target_train: &DomainDataset,
    schedule: &TrainSchedule,
    optim: &OptimConfig,
    opts: &RobustAdaptOptions,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<AdaptOutcome> {
    schedule.ensure_valid()?;
    check_dataset_fits(init_model, target_train, "target train")?;

    let mut flags = opts.flags;
    let pseudo = match labels_from {
        RobustLabelSource::Standard(m) => {
            check_dataset_fits(m, target_train, "pseudo-label provider")?;
            model_pseudo_labels(m, &target_train.x, PseudoSource::StandardModel, 0)?
        }
        RobustLabelSource::Robust(m) => {
            check_dataset_fits(m, target_train, "pseudo-label provider")?;
            model_pseudo_labels(m, &target_train.x, PseudoSource::RobustModel, 0)?
        }
        RobustLabelSource::SelfArgmax => {
            // Self-labels carry no outside information; the label-dependent
            // terms would only reinforce the model's own argmax.
            flags.pseudo = false;
            flags.con = false;
            model_pseudo_labels(init_model, &target_train.x, PseudoSource::RobustModel, 0)?
        }
    };
    let pseudo_acc = pseudo_label_accuracy(&pseudo, &target_train.y)?;

    let mut model = init_model.clone();
    model.classifier.frozen = true;
    let mut adam = Adam::new(&model, *optim);
    let mut shuffle_rng = RngSeed::new(seed, streams::ADAPT_ROBUST_SHUFFLE).rng();
    let mut attack_rng = RngSeed::new(seed, streams::ADAPT_ROBUST_ATTACK).rng();

    let n = target_train.len();
    let mut epochs = Vec::new();
    for epoch in 1..=schedule.max_epochs {
        let mut mean = BreakdownMean::default();
        for idx in shuffled_batches(n, schedule.batch_size, &mut shuffle_rng) {
            let xb = target_train.x.gather_rows(&idx);
            let yb = pseudo.gather(&idx)?;
            let x_adv = match attack {
                Some(atk) => pgd_attack(&model, &xb, &yb, atk, &mut attack_rng)?,
                None => xb.clone(),
            };
            let mut tape = Tape::new();
            let params = model.insert_params(&mut tape);
            let adv_v = tape.leaf(&x_adv);
            let (adv_feat, adv_logits) = model.forward_on(&mut tape, &params, adv_v);
            let (adv_loss, adv_bd) = robust_target_loss(
                &mut tape,
                adv_logits,
                adv_feat,
                Some(&yb),
                &opts.weights,
                &flags,
            )?;
            let (loss, bd): (Var, LossBreakdown) = if opts.include_clean {
                let clean_v = tape.leaf(&xb);
                let (clean_feat, clean_logits) = model.forward_on(&mut tape, &params, clean_v);
                let (clean_loss, clean_bd) = robust_target_loss(
                    &mut tape,
                    clean_logits,
                    clean_feat,
                    Some(&yb),
                    &opts.weights,
                    &flags,
                )?;
                let sum = tape.add(adv_loss, clean_loss);
                let half = tape.scale(sum, 0.5);
                let avg = LossBreakdown {
                    ent: 0.5 * (adv_bd.ent + clean_bd.ent),
                    div: 0.5 * (adv_bd.div + clean_bd.div),
                    pseudo: 0.5 * (adv_bd.pseudo + clean_bd.pseudo),
                    con: 0.5 * (adv_bd.con + clean_bd.con),
                    total: 0.5 * (adv_bd.total + clean_bd.total),
                };
                (half, avg)
            } else {
                (adv_loss, adv_bd)
            };
            tape.backward(loss)?;
            let grads = model.read_grads(&tape, &params);
            adam.step(&mut model, &grads)?;
            mean.add(&bd, idx.len() as f64);
        }
        let bd = mean.mean();
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(bd.total),
            components: Some(bd),
            val_accuracy: None,
            pseudo_accuracy: if epoch == 1 { Some(pseudo_acc) } else { None },
        });
    }
    debug_assert_eq!(model.classifier_hash(), init_model.classifier_hash());
    Ok(AdaptOutcome {
        model,
        history: TrainHistory {
            phase: PhaseKind::AdaptRobust,
            epochs,
            selected_epoch: None,
        },
        pseudo,
    })
}

/// Source models available to [`run_case`].
#[derive(Debug, Clone, Default)]
pub struct SourceModels {
    pub standard: Option<Model>,
    pub robust: Option<Model>,
}

/// Everything [`run_case`] needs beyond the models and data.
#[derive(Debug, Clone)]
pub struct CaseConfig {
    pub adapt_schedule: TrainSchedule,
    pub optim: OptimConfig,
    pub options: AdaptOptions,
    pub robust_options: RobustAdaptOptions,
    /// Attack used to build adversarial training inputs; `None` trains the
    /// robust phase on clean inputs.
    pub attack: Option<AttackConfig>,
    pub robust_labels: RobustPseudoSource,
    pub seed: u64,
}

/// Both adapted tracks plus, when robust pseudo-labels were requested in
/// the both case, the auxiliary robust-lineage standard adaptation that
/// produced them.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub standard_track: AdaptOutcome,
    pub robust_track: AdaptOutcome,
    pub aux_robust_lineage: Option<AdaptOutcome>,
}

fn require<'a>(m: &'a Option<Model>, what: &str, case: AvailabilityCase) -> Result<&'a Model> {
    m.as_ref().ok_or_else(|| {
        Error::Config(vec![format!(
            "case '{}' needs the {what} source model",
            case.as_str()
        )])
    })
}

/// Runs the two-stage protocol for one availability case. The standard
/// track always runs first and shares its rng streams across cases, so the
/// both case reproduces a standalone standard adaptation bit for bit.
pub fn run_case(
    case: AvailabilityCase,
    sources: &SourceModels,
    target_train: &DomainDataset,
    cfg: &CaseConfig,
) -> Result<CaseOutcome> {
    let adapt1 = |init: &Model| {
        adapt_target_standard(
            init,
            target_train,
            &cfg.adapt_schedule,
            &cfg.optim,
            &cfg.options,
            cfg.seed,
        )
    };
    let adapt2 = |init: &Model, labels: RobustLabelSource| {
        adapt_target_robust(
            init,
            labels,
            target_train,
            &cfg.adapt_schedule,
            &cfg.optim,
            &cfg.robust_options,
            cfg.attack.as_ref(),
            cfg.seed,
        )
    };
    let unsupported = |why: &str| Error::Config(vec![why.to_string()]);

    match case {
        AvailabilityCase::Both => {
            let f_s = require(&sources.standard, "standard", case)?;
            let f_sr = require(&sources.robust, "robust", case)?;
            let stage1 = adapt1(f_s)?;
            let mut aux = None;
            let stage2 = match cfg.robust_labels {
                RobustPseudoSource::Standard => {
                    adapt2(f_sr, RobustLabelSource::Standard(&stage1.model))?
                }
                RobustPseudoSource::Robust => {
                    let a = adapt1(f_sr)?;
                    let s2 = adapt2(f_sr, RobustLabelSource::Robust(&a.model))?;
                    aux = Some(a);
                    s2
                }
                RobustPseudoSource::SelfArgmax => adapt2(f_sr, RobustLabelSource::SelfArgmax)?,
            };
            Ok(CaseOutcome {
                standard_track: stage1,
                robust_track: stage2,
                aux_robust_lineage: aux,
            })
        }
        AvailabilityCase::StandardSourceOnly => {
            let f_s = require(&sources.standard, "standard", case)?;
            let stage1 = adapt1(f_s)?;
            // No robust source exists; the robust track starts from the
            // adapted standard model instead of a robust initialization.
            let stage2 = match cfg.robust_labels {
                RobustPseudoSource::Standard => {
                    adapt2(&stage1.model, RobustLabelSource::Standard(&stage1.model))?
                }
                RobustPseudoSource::Robust => {
                    return Err(unsupported(
                        "robust pseudo-labels need a robust source model; case is standard_source_only",
                    ))
                }
                RobustPseudoSource::SelfArgmax => {
                    adapt2(&stage1.model, RobustLabelSource::SelfArgmax)?
                }
            };
            Ok(CaseOutcome {
                standard_track: stage1,
                robust_track: stage2,
                aux_robust_lineage: None,
            })
        }
        AvailabilityCase::RobustSourceOnly => {
            let f_sr = require(&sources.robust, "robust", case)?;
            let stage1 = adapt1(f_sr)?;
            let stage2 = match cfg.robust_labels {
                RobustPseudoSource::Robust => {
                    adapt2(f_sr, RobustLabelSource::Robust(&stage1.model))?
                }
                RobustPseudoSource::Standard => {
                    return Err(unsupported(
                        "standard pseudo-labels need a standard source model; case is robust_source_only",
                    ))
                }
                RobustPseudoSource::SelfArgmax => adapt2(f_sr, RobustLabelSource::SelfArgmax)?,
            };
            Ok(CaseOutcome {
                standard_track: stage1,
                robust_track: stage2,
                aux_robust_lineage: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_domain_pair, split, DatasetFamily, ShiftSpec, SplitFractions};
    use crate::nn::Activation;

    fn specs() -> (ShiftSpec, ShiftSpec) {
        let source = ShiftSpec {
            family: DatasetFamily::GaussianBlobs,
            classes: 2,
            samples_per_class: 40,
            input_dim: 2,
            noise_sigma: 0.3,
            rotation: 0.0,
            translation: vec![],
            scale: 1.0,
        };
        let target = ShiftSpec {
            rotation: 0.6,
            translation: vec![0.5, -0.4],
            ..source.clone()
        };
        (source, target)
    }

    fn model(seed: u64) -> Model {
        Model::new(2, &[16], 8, 2, Activation::Tanh, &mut RngSeed::new(seed, streams::MODEL_INIT).rng())
            .unwrap()
    }

    fn fast_optim() -> OptimConfig {
        OptimConfig {
            backbone_lr: 1e-2,
            head_lr: 1e-2,
            ..OptimConfig::default()
        }
    }

    fn schedule(epochs: usize) -> TrainSchedule {
        TrainSchedule {
            max_epochs: epochs,
            batch_size: 16,
            ..TrainSchedule::default()
        }
    }

    fn attack(eps: f64) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            steps: 5,
            step_size: 0.1 * eps.max(0.1),
            random_start: false,
            clamp_lo: -6.0,
            clamp_hi: 6.0,
        }
    }

    #[test]
    fn schedule_validation_catches_bad_fields() {
        let bad = TrainSchedule {
            max_epochs: 3,
            pseudo_refresh_interval: 5,
            batch_size: 0,
            early_stop_patience: 0,
        };
        assert_eq!(bad.validate().len(), 3);
        assert!(TrainSchedule::default().validate().is_empty());
        // A zero budget is legal; the refresh bound only binds when the
        // loop actually runs.
        let zero = TrainSchedule {
            max_epochs: 0,
            ..TrainSchedule::default()
        };
        assert!(zero.validate().is_empty());
    }

    #[test]
    fn zero_epochs_returns_the_initialized_model_unchanged() {
        let (src_spec, tgt_spec) = specs();
        let (src, _) = make_domain_pair(&src_spec, &tgt_spec, 1).unwrap();
        let splits = split(&src, &SplitFractions::default(), 1).unwrap();
        let mut m = model(1);
        let before = m.params_hash();
        let hist =
            train_source_standard(&mut m, &splits, &schedule(0), &fast_optim(), 1).unwrap();
        assert_eq!(m.params_hash(), before);
        assert_eq!(hist.epochs.len(), 1);
        assert_eq!(hist.epochs[0].epoch, 0);
        assert_eq!(hist.selected_epoch, Some(0));
    }

    #[test]
    fn source_training_learns_separable_blobs() {
        let (src_spec, tgt_spec) = specs();
        let (src, _) = make_domain_pair(&src_spec, &tgt_spec, 2).unwrap();
        let splits = split(&src, &SplitFractions::default(), 2).unwrap();
        let mut m = model(2);
        let hist =
            train_source_standard(&mut m, &splits, &schedule(20), &fast_optim(), 2).unwrap();
        let best = hist
            .epochs
            .iter()
            .filter_map(|e| e.val_accuracy)
            .fold(0.0, f64::max);
        assert!(best > 0.95, "best validation accuracy only {best}");
        // The returned model is the selected snapshot, not necessarily the
        // last epoch's parameters.
        let selected = hist.selected_epoch.unwrap();
        let recorded = hist.epochs[selected].val_accuracy.unwrap();
        let actual = clean_accuracy(&m, &splits.val.x, &splits.val.y).unwrap();
        assert_eq!(recorded.to_bits(), actual.to_bits());
    }

    #[test]
    fn source_training_is_deterministic() {
        let (src_spec, tgt_spec) = specs();
        let (src, _) = make_domain_pair(&src_spec, &tgt_spec, 3).unwrap();
        let splits = split(&src, &SplitFractions::default(), 3).unwrap();
        let mut a = model(3);
        let ha = train_source_standard(&mut a, &splits, &schedule(5), &fast_optim(), 3).unwrap();
        let mut b = model(3);
        let hb = train_source_standard(&mut b, &splits, &schedule(5), &fast_optim(), 3).unwrap();
        assert_eq!(a.params_hash(), b.params_hash());
        assert_eq!(ha, hb);
    }

    #[test]
    fn robust_training_at_zero_epsilon_matches_standard_bit_for_bit() {
        let (src_spec, tgt_spec) = specs();
        let (src, _) = make_domain_pair(&src_spec, &tgt_spec, 4).unwrap();
        let splits = split(&src, &SplitFractions::default(), 4).unwrap();
        let mut std_m = model(4);
        let std_h =
            train_source_standard(&mut std_m, &splits, &schedule(5), &fast_optim(), 4).unwrap();
        let mut rob_m = model(4);
        let rob_h = train_source_robust(
            &mut rob_m,
            &splits,
            &schedule(5),
            &fast_optim(),
            &attack(0.0),
            4,
        )
        .unwrap();
        assert_eq!(std_m.params_hash(), rob_m.params_hash());
        assert_eq!(std_h.selected_epoch, rob_h.selected_epoch);
        for (a, b) in std_h.epochs.iter().zip(&rob_h.epochs) {
            assert_eq!(
                a.val_accuracy.unwrap().to_bits(),
                b.val_accuracy.unwrap().to_bits()
            );
        }
    }

    /// Trains the small fixture end to end; shared by the adaptation tests.
    fn trained_source(seed: u64, epochs: usize) -> (Model, DomainDataset) {
        let (src_spec, tgt_spec) = specs();
        let (src, tgt) = make_domain_pair(&src_spec, &tgt_spec, seed).unwrap();
        let splits = split(&src, &SplitFractions::default(), seed).unwrap();
        let mut m = model(seed);
        train_source_standard(&mut m, &splits, &schedule(epochs), &fast_optim(), seed).unwrap();
        let tgt_splits = split(&tgt, &SplitFractions::default(), seed).unwrap();
        (m, tgt_splits.train)
    }

    #[test]
    fn adaptation_freezes_the_classifier_and_moves_the_encoder() {
        let (m, tgt_train) = trained_source(5, 10);
        let out = adapt_target_standard(
            &m,
            &tgt_train,
            &schedule(3),
            &fast_optim(),
            &AdaptOptions::default(),
            5,
        )
        .unwrap();
        assert_eq!(out.model.classifier_hash(), m.classifier_hash());
        assert_ne!(out.model.params_hash(), m.params_hash());
        assert!(out.model.classifier.frozen);
        assert_eq!(out.history.epochs.len(), 3);
        // Refresh interval 1: every epoch reports pseudo accuracy.
        assert!(out.history.epochs.iter().all(|e| e.pseudo_accuracy.is_some()));
    }

    #[test]
    fn refresh_interval_controls_pseudo_label_updates() {
        let (m, tgt_train) = trained_source(6, 8);
        let sched = TrainSchedule {
            max_epochs: 4,
            pseudo_refresh_interval: 2,
            batch_size: 16,
            early_stop_patience: 5,
        };
        let out = adapt_target_standard(
            &m,
            &tgt_train,
            &sched,
            &fast_optim(),
            &AdaptOptions::default(),
            6,
        )
        .unwrap();
        let refreshed: Vec<usize> = out
            .history
            .epochs
            .iter()
            .filter(|e| e.pseudo_accuracy.is_some())
            .map(|e| e.epoch)
            .collect();
        assert_eq!(refreshed, vec![1, 3]);
        // The returned set carries the stamp of the last refresh.
        assert_eq!(out.pseudo.epoch, 3);
    }

    #[test]
    fn gamma_zero_matches_disabled_contrastive_bit_for_bit() {
        let (m, tgt_train) = trained_source(7, 8);
        let zero_gamma = AdaptOptions {
            weights: LossWeights {
                gamma: 0.0,
                ..LossWeights::default()
            },
            ..AdaptOptions::default()
        };
        let disabled = AdaptOptions {
            flags: TermFlags {
                con: false,
                ..TermFlags::default()
            },
            ..AdaptOptions::default()
        };
        let a = adapt_target_standard(&m, &tgt_train, &schedule(3), &fast_optim(), &zero_gamma, 7)
            .unwrap();
        let b = adapt_target_standard(&m, &tgt_train, &schedule(3), &fast_optim(), &disabled, 7)
            .unwrap();
        assert_eq!(a.model.params_hash(), b.model.params_hash());
    }

    #[test]
    fn robust_adaptation_fixes_labels_once_and_freezes_the_classifier() {
        let (m, tgt_train) = trained_source(8, 8);
        let stage1 = adapt_target_standard(
            &m,
            &tgt_train,
            &schedule(2),
            &fast_optim(),
            &AdaptOptions::default(),
            8,
        )
        .unwrap();
        let out = adapt_target_robust(
            &m,
            RobustLabelSource::Standard(&stage1.model),
            &tgt_train,
            &schedule(3),
            &fast_optim(),
            &RobustAdaptOptions::default(),
            Some(&attack(0.3)),
            8,
        )
        .unwrap();
        assert_eq!(out.pseudo.epoch, 0);
        assert_eq!(out.pseudo.source, PseudoSource::StandardModel);
        assert_eq!(out.model.classifier_hash(), m.classifier_hash());
        // Labels are the provider's argmax, fixed before any training.
        let expect = model_pseudo_labels(
            &stage1.model,
            &tgt_train.x,
            PseudoSource::StandardModel,
            0,
        )
        .unwrap();
        assert_eq!(out.pseudo.labels, expect.labels);
    }

    #[test]
    fn self_argmax_labels_disable_label_dependent_terms() {
        let (m, tgt_train) = trained_source(9, 8);
        let out = adapt_target_robust(
            &m,
            RobustLabelSource::SelfArgmax,
            &tgt_train,
            &schedule(2),
            &fast_optim(),
            &RobustAdaptOptions::default(),
            Some(&attack(0.3)),
            9,
        )
        .unwrap();
        for e in &out.history.epochs {
            let bd = e.components.as_ref().unwrap();
            assert_ne!(bd.ent, 0.0);
            // Dropped terms contribute nothing to the optimized total.
            assert!((bd.total - (bd.ent + bd.div)).abs() < 1e-12);
        }
    }

    fn case_config(seed: u64, labels: RobustPseudoSource) -> CaseConfig {
        CaseConfig {
            adapt_schedule: schedule(2),
            optim: fast_optim(),
            options: AdaptOptions::default(),
            robust_options: RobustAdaptOptions::default(),
            attack: Some(attack(0.3)),
            robust_labels: labels,
            seed,
        }
    }

    #[test]
    fn run_case_both_reuses_the_standard_trajectory_bit_for_bit() {
        let (src_spec, tgt_spec) = specs();
        let (src, tgt) = make_domain_pair(&src_spec, &tgt_spec, 10).unwrap();
        let splits = split(&src, &SplitFractions::default(), 10).unwrap();
        let mut f_s = model(10);
        train_source_standard(&mut f_s, &splits, &schedule(8), &fast_optim(), 10).unwrap();
        let mut f_sr = model(10);
        train_source_robust(&mut f_sr, &splits, &schedule(8), &fast_optim(), &attack(0.3), 10)
            .unwrap();
        let tgt_train = split(&tgt, &SplitFractions::default(), 10).unwrap().train;

        let sources = SourceModels {
            standard: Some(f_s.clone()),
            robust: Some(f_sr),
        };
        let cfg = case_config(10, RobustPseudoSource::Standard);
        let outcome = run_case(AvailabilityCase::Both, &sources, &tgt_train, &cfg).unwrap();
        let standalone = adapt_target_standard(
            &f_s,
            &tgt_train,
            &cfg.adapt_schedule,
            &cfg.optim,
            &cfg.options,
            cfg.seed,
        )
        .unwrap();
        assert_eq!(
            outcome.standard_track.model.params_hash(),
            standalone.model.params_hash()
        );
        assert!(outcome.aux_robust_lineage.is_none());
        // Final inference model differs from the standard track.
        assert_ne!(
            outcome.robust_track.model.params_hash(),
            outcome.standard_track.model.params_hash()
        );
    }

    #[test]
    fn run_case_validates_model_and_label_requirements() {
        let (src_spec, tgt_spec) = specs();
        let (src, tgt) = make_domain_pair(&src_spec, &tgt_spec, 11).unwrap();
        let splits = split(&src, &SplitFractions::default(), 11).unwrap();
        let mut f_s = model(11);
        train_source_standard(&mut f_s, &splits, &schedule(2), &fast_optim(), 11).unwrap();
        let tgt_train = split(&tgt, &SplitFractions::default(), 11).unwrap().train;

        let only_standard = SourceModels {
            standard: Some(f_s),
            robust: None,
        };
        // Both-case without the robust model.
        assert!(run_case(
            AvailabilityCase::Both,
            &only_standard,
            &tgt_train,
            &case_config(11, RobustPseudoSource::Standard),
        )
        .is_err());
        // Standard-only case cannot take robust pseudo-labels.
        assert!(run_case(
            AvailabilityCase::StandardSourceOnly,
            &only_standard,
            &tgt_train,
            &case_config(11, RobustPseudoSource::Robust),
        )
        .is_err());
        // Robust-only case cannot take standard pseudo-labels.
        assert!(run_case(
            AvailabilityCase::RobustSourceOnly,
            &only_standard,
            &tgt_train,
            &case_config(11, RobustPseudoSource::Standard),
        )
        .is_err());
        // Standard-only with the matching label source works.
        let ok = run_case(
            AvailabilityCase::StandardSourceOnly,
            &only_standard,
            &tgt_train,
            &case_config(11, RobustPseudoSource::Standard),
        );
        assert!(ok.is_ok());
    }
}
