//! Training objectives.
//!
//! All losses are recorded on a [`Tape`] so their gradients come from the
//! same reverse pass as the model. The adaptation objective combines four
//! terms over a batch with predicted probabilities `p` and features `f`:
//!
//! * entropy: mean over the batch of `-sum_c p_c ln p_c`, pushing each
//!   prediction toward a single class;
//! * diversity: `sum_c q_c ln q_c` where `q` is the batch-mean probability
//!   vector, lowest when predictions spread evenly over classes;
//! * pseudo-label cross-entropy against externally supplied labels;
//! * pairwise contrastive penalty on features, pulling same-label pairs
//!   together and pushing different-label pairs at least `margin` apart.
//!
//! The combined objective is `ent + alpha * div + beta * pseudo + gamma *
//! con`; [`target_loss`] returns it along with a per-component breakdown.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::pseudo::PseudoLabelSet;

/// Floor applied inside logarithms of averaged probabilities.
const LOG_FLOOR: f64 = 1e-12;

/// Weights for the combined objective, plus the contrastive margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.3
}
fn default_gamma() -> f64 {
    0.2
}
fn default_margin() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: default_alpha(),
            beta: default_beta(),
            gamma: default_gamma(),
            margin: default_margin(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                bad.push(format!("weights.{name} must be a finite non-negative value, got {v}"));
            }
        }
        if !(self.margin > 0.0) {
            bad.push(format!("weights.margin must be positive, got {}", self.margin));
        }
        bad
    }

    /// Weighted combination used by [`target_loss`], exposed for reporting.
    pub fn combine(&self, ent: f64, div: f64, pseudo: f64, con: f64) -> f64 {
        ent + self.alpha * div + self.beta * pseudo + self.gamma * con
    }
}

/// Which terms of the combined objective are active. Disabled terms are
/// still evaluated for logging but excluded from the optimized total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFlags {
    pub ent: bool,
    pub div: bool,
    pub pseudo: bool,
    pub con: bool,
}

impl Default for TermFlags {
    fn default() -> Self {
        TermFlags {
            ent: true,
            div: true,
            pseudo: true,
            con: true,
        }
    }
}

/// Per-component values of one combined-loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ent: f64,
    pub div: f64,
    pub pseudo: f64,
    pub con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown {
            ent: 0.0,
            div: 0.0,
            pseudo: 0.0,
            con: 0.0,
            total: 0.0,
        }
    }
}

fn check_batch(tape: &Tape, logits: Var, context: &str) -> Result<(usize, usize)> {
    let (rows, cols) = tape.shape(logits);
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyData {
            context: context.into(),
        });
    }
    Ok((rows, cols))
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, context: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape {
            context: context.into(),
            expected: vec![rows],
            got: vec![labels.len()],
        });
    }
    for &l in labels {
        if l >= classes {
            return Err(Error::LabelRange { label: l, classes });
        }
    }
    Ok(())
}

fn finite_scalar(tape: &Tape, v: Var, context: &str) -> Result<Var> {
    if !tape.scalar(v).is_finite() {
        return Err(Error::NonFinite {
            context: context.into(),
            index: None,
        });
    }
    Ok(v)
}

/// Mean cross-entropy of `logits` against integer `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = check_batch(tape, logits, "cross_entropy")?;
    check_labels(labels, rows, cols, "cross_entropy labels")?;
    let lp = tape.log_softmax(logits);
    let picked = tape.pick_per_row(lp, labels);
    let mean = tape.mean_all(picked);
    let ce = tape.scale(mean, -1.0);
    finite_scalar(tape, ce, "cross_entropy")
}

/// Mean per-sample prediction entropy. Ranges over `[0, ln C]`.
pub fn entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    check_batch(tape, logits, "entropy_loss")?;
    let rows = tape.shape(logits).0;
    let lp = tape.log_softmax(logits);
    let p = tape.exp(lp);
    let plp = tape.mul(p, lp);
    let s = tape.sum_all(plp);
    let ent = tape.scale(s, -1.0 / rows as f64);
    finite_scalar(tape, ent, "entropy_loss")
}

/// Negative entropy of the batch-mean prediction: `sum_c q_c ln q_c`.
/// Ranges over `[-ln C, 0]` and is lowest when predictions spread evenly.
pub fn diversity_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    check_batch(tape, logits, "diversity_loss")?;
    let lp = tape.log_softmax(logits);
    let p = tape.exp(lp);
    let q = tape.col_mean(p);
    let lq = tape.log_clamped(q, LOG_FLOOR);
    let qlq = tape.mul(q, lq);
    let div = tape.sum_all(qlq);
    finite_scalar(tape, div, "diversity_loss")
}

/// Cross-entropy against pseudo-labels, addressed by dataset index.
pub fn pseudo_ce(
    tape: &mut Tape,
    logits: Var,
    pseudo: &PseudoLabelSet,
    idx: &[usize],
) -> Result<Var> {
    let labels = pseudo.gather(idx)?;
    cross_entropy(tape, logits, &labels)
}

/// Mean pairwise contrastive penalty over all unordered feature pairs:
/// `0.5 * [1{same} * D^2 + 1{diff} * max(0, margin - D)^2]` with `D` the
/// Euclidean distance. A single-sample batch has no pairs and yields zero.
pub fn contrastive_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let (rows, _) = tape.shape(features);
    if rows == 0 {
        return Err(Error::EmptyData {
            context: "contrastive_loss".into(),
        });
    }
    if labels.len() != rows {
        return Err(Error::Shape {
            context: "contrastive_loss labels".into(),
            expected: vec![rows],
            got: vec![labels.len()],
        });
    }
    if !(margin > 0.0) {
        return Err(Error::config(format!(
            "contrastive margin must be positive, got {margin}"
        )));
    }
    let con = tape.contrastive(features, labels, margin);
    finite_scalar(tape, con, "contrastive_loss")
}

/// Combined adaptation objective with component breakdown.
///
/// `labels` are the batch's pseudo-labels; when `None`, the pseudo and
/// contrastive terms are skipped regardless of `flags` (they are undefined
/// without labels) and report as zero.
pub fn target_loss(
    tape: &mut Tape,
    logits: Var,
    features: Var,
    labels: Option<&[usize]>,
    weights: &LossWeights,
    flags: &TermFlags,
) -> Result<(Var, LossBreakdown)> {
    let ent = entropy_loss(tape, logits)?;
    let div = diversity_loss(tape, logits)?;
    let labeled = match labels {
        Some(l) => {
            let ce = cross_entropy(tape, logits, l)?;
            let con = contrastive_loss(tape, features, l, weights.margin)?;
            Some((ce, con))
        }
        None => None,
    };

    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, v: Var| {
        total = Some(match total {
            Some(acc) => tape.add(acc, v),
            None => v,
        });
    };
    if flags.ent {
        push(tape, ent);
    }
    if flags.div {
        let scaled = tape.scale(div, weights.alpha);
        push(tape, scaled);
    }
    if let Some((ce, con)) = labeled {
        if flags.pseudo {
            let scaled = tape.scale(ce, weights.beta);
            push(tape, scaled);
        }
        if flags.con {
            let scaled = tape.scale(con, weights.gamma);
            push(tape, scaled);
        }
    }
    let total = match total {
        Some(v) => v,
        None => tape.leaf_scalar(0.0),
    };
    let total = finite_scalar(tape, total, "target_loss")?;

    let breakdown = LossBreakdown {
        ent: tape.scalar(ent),
        div: tape.scalar(div),
        pseudo: labeled.map(|(ce, _)| tape.scalar(ce)).unwrap_or(0.0),
        con: labeled.map(|(_, con)| tape.scalar(con)).unwrap_or(0.0),
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}

/// The adaptation objective evaluated on adversarially perturbed inputs.
/// Identical in form to [`target_loss`]; the separate name keeps call sites
/// honest about which batch they are feeding in.
pub fn robust_target_loss(
    tape: &mut Tape,
    logits: Var,
    features: Var,
    labels: Option<&[usize]>,
    weights: &LossWeights,
    flags: &TermFlags,
) -> Result<(Var, LossBreakdown)> {
    target_loss(tape, logits, features, labels, weights, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn logits(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn ce_value(t: &Tensor, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let l = tape.leaf(t);
        let v = cross_entropy(&mut tape, l, labels).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn cross_entropy_uniform_four_classes_is_ln4() {
        let t = logits(1, 4, vec![0.0; 4]);
        assert_abs_diff_eq!(ce_value(&t, &[2]), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_matches_closed_form_on_peaked_logits() {
        // logits (2, 0, 0) with label 0: loss = ln(e^2 + 2) - 2
        let t = logits(1, 3, vec![2.0, 0.0, 0.0]);
        let expected = (2f64.exp() + 2.0).ln() - 2.0;
        assert_abs_diff_eq!(ce_value(&t, &[0]), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.2395, epsilon = 5e-5);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let t = logits(1, 3, vec![0.0; 3]);
        let mut tape = Tape::new();
        let l = tape.leaf(&t);
        assert!(matches!(
            cross_entropy(&mut tape, l, &[3]),
            Err(Error::LabelRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn confidently_wrong_pseudo_labels_cost_more_than_chance() {
        // A prediction peaked on class 0 while the label says class 3.
        let t = logits(1, 4, vec![10.0, 0.0, 0.0, 0.0]);
        let naive = {
            let p = crate::tensor::softmax_rows(&t);
            -p.data()[3].ln()
        };
        let got = ce_value(&t, &[3]);
        assert_abs_diff_eq!(got, naive, epsilon = 1e-9);
        assert!(got > 4f64.ln());
    }

    fn ent_value(t: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let l = tape.leaf(t);
        let v = entropy_loss(&mut tape, l).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn entropy_of_one_hot_prediction_is_zero() {
        let t = logits(1, 3, vec![1000.0, 0.0, 0.0]);
        assert_eq!(ent_value(&t), 0.0);
    }

    #[test]
    fn entropy_of_half_half_prediction_is_ln2() {
        let t = logits(1, 4, vec![0.0, 0.0, -1000.0, -1000.0]);
        assert_abs_diff_eq!(ent_value(&t), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_of_uniform_prediction_is_ln_c() {
        let t = logits(2, 5, vec![0.7; 10]);
        assert_abs_diff_eq!(ent_value(&t), 5f64.ln(), epsilon = 1e-12);
    }

    fn div_value(t: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let l = tape.leaf(t);
        let v = diversity_loss(&mut tape, l).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn diversity_of_evenly_split_confident_batch_is_minus_ln_c() {
        // Four samples, each confidently on its own class: q is uniform.
        let mut data = vec![-1000.0; 16];
        for i in 0..4 {
            data[i * 4 + i] = 0.0;
        }
        let t = logits(4, 4, data);
        assert_abs_diff_eq!(div_value(&t), -(4f64.ln()), epsilon = 1e-9);
    }

    #[test]
    fn diversity_of_collapsed_batch_is_near_zero() {
        // Every sample confidently on class 1: q is one-hot, sum q ln q -> 0.
        let mut data = vec![-1000.0; 12];
        for i in 0..4 {
            data[i * 3 + 1] = 0.0;
        }
        let t = logits(4, 3, data);
        assert_abs_diff_eq!(div_value(&t), 0.0, epsilon = 1e-9);
    }

    fn con_value(f: &Tensor, labels: &[usize], margin: f64) -> f64 {
        let mut tape = Tape::new();
        let l = tape.leaf(f);
        let v = contrastive_loss(&mut tape, l, labels, margin).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn contrastive_same_label_pair_at_distance_two() {
        // D = 2, same label: 0.5 * 4 = 2
        let f = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(con_value(&f, &[1, 1], 1.0), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_close_pair_with_different_labels_pays_hinge() {
        // D = 0.4, margin 1: 0.5 * 0.6^2 = 0.18
        let f = Tensor::new(vec![2, 1], vec![0.0, 0.4]).unwrap();
        assert_abs_diff_eq!(con_value(&f, &[0, 1], 1.0), 0.18, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_far_pair_with_different_labels_is_free() {
        let f = Tensor::new(vec![2, 1], vec![0.0, 5.0]).unwrap();
        assert_eq!(con_value(&f, &[0, 1], 1.0), 0.0);
    }

    #[test]
    fn contrastive_single_sample_batch_is_zero() {
        let f = Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(con_value(&f, &[0], 1.0), 0.0);
    }

    #[test]
    fn contrastive_rejects_non_positive_margin() {
        let f = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(&f);
        assert!(contrastive_loss(&mut tape, l, &[0, 1], 0.0).is_err());
    }

    #[test]
    fn contrastive_ignores_label_names_beyond_equality() {
        let f = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.4, 1.0, 0.9, -0.3]).unwrap();
        let a = con_value(&f, &[0, 1, 0], 1.0);
        let b = con_value(&f, &[7, 2, 7], 1.0);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn contrastive_is_permutation_invariant() {
        let f = Tensor::new(vec![4, 2], vec![0.1, 0.2, -0.4, 1.0, 0.9, -0.3, 0.0, 0.5]).unwrap();
        let labels = [0usize, 1, 0, 1];
        let perm = [2usize, 0, 3, 1];
        let fp = f.gather_rows(&perm);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = con_value(&f, &labels, 1.0);
        let b = con_value(&fp, &lp, 1.0);
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }

    fn combined(
        logits_t: &Tensor,
        features_t: &Tensor,
        labels: &[usize],
        w: &LossWeights,
        flags: &TermFlags,
    ) -> LossBreakdown {
        let mut tape = Tape::new();
        let l = tape.leaf(logits_t);
        let f = tape.leaf(features_t);
        let (_, b) = target_loss(&mut tape, l, f, Some(labels), w, flags).unwrap();
        b
    }

    #[test]
    fn combined_loss_weighting_matches_hand_sum() {
        let l = logits(3, 4, vec![0.3, -0.2, 0.9, 0.1, 1.2, 0.0, -0.5, 0.2, 0.0, 0.4, 0.4, -1.0]);
        let f = Tensor::new(vec![3, 2], vec![0.2, 0.3, -0.6, 1.1, 0.8, -0.2]).unwrap();
        let labels = [0usize, 2, 2];
        let w = LossWeights::default();
        let b = combined(&l, &f, &labels, &w, &TermFlags::default());
        let hand = w.combine(b.ent, b.div, b.pseudo, b.con);
        assert!((b.total - hand).abs() <= 1e-12, "{} vs {}", b.total, hand);
    }

    #[test]
    fn weight_combination_matches_worked_example() {
        // components (ent, div, pseudo, con) = (0.5, 0.2, 1.0, 0.3)
        // with alpha 1.0, beta 0.3, gamma 0.2 => 1.06
        let w = LossWeights::default();
        assert_abs_diff_eq!(w.combine(0.5, 0.2, 1.0, 0.3), 1.06, epsilon = 1e-12);
    }

    #[test]
    fn all_weights_zero_reduces_to_entropy() {
        let l = logits(2, 3, vec![0.3, -0.2, 0.9, 1.2, 0.0, -0.5]);
        let f = Tensor::new(vec![2, 2], vec![0.2, 0.3, -0.6, 1.1]).unwrap();
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            margin: 1.0,
        };
        let b = combined(&l, &f, &[0, 1], &w, &TermFlags::default());
        assert_eq!(b.total.to_bits(), b.ent.to_bits());
    }

    #[test]
    fn doubling_beta_doubles_the_pseudo_contribution() {
        let l = logits(2, 3, vec![0.3, -0.2, 0.9, 1.2, 0.0, -0.5]);
        let f = Tensor::new(vec![2, 2], vec![0.2, 0.3, -0.6, 1.1]).unwrap();
        let base = LossWeights { beta: 0.0, ..LossWeights::default() };
        let w1 = LossWeights { beta: 0.3, ..LossWeights::default() };
        let w2 = LossWeights { beta: 0.6, ..LossWeights::default() };
        let flags = TermFlags::default();
        let t0 = combined(&l, &f, &[0, 1], &base, &flags).total;
        let t1 = combined(&l, &f, &[0, 1], &w1, &flags).total;
        let t2 = combined(&l, &f, &[0, 1], &w2, &flags).total;
        assert_abs_diff_eq!(t2 - t0, 2.0 * (t1 - t0), epsilon = 1e-12);
    }

    #[test]
    fn disabled_terms_report_values_but_skip_the_total() {
        let l = logits(2, 3, vec![0.3, -0.2, 0.9, 1.2, 0.0, -0.5]);
        let f = Tensor::new(vec![2, 2], vec![0.2, 0.3, -0.6, 1.1]).unwrap();
        let w = LossWeights::default();
        let flags = TermFlags {
            con: false,
            ..TermFlags::default()
        };
        // Same-label pair: the contrastive value is half the squared
        // distance, nonzero here, so logging is observable.
        let b = combined(&l, &f, &[0, 0], &w, &flags);
        assert!(b.con != 0.0, "component still evaluated for logging");
        let hand = b.ent + w.alpha * b.div + w.beta * b.pseudo;
        assert!((b.total - hand).abs() <= 1e-12);
    }

    #[test]
    fn missing_labels_skip_label_dependent_terms() {
        let l = logits(2, 3, vec![0.3, -0.2, 0.9, 1.2, 0.0, -0.5]);
        let f = Tensor::new(vec![2, 2], vec![0.2, 0.3, -0.6, 1.1]).unwrap();
        let mut tape = Tape::new();
        let lv = tape.leaf(&l);
        let fv = tape.leaf(&f);
        let (_, b) = target_loss(
            &mut tape,
            lv,
            fv,
            None,
            &LossWeights::default(),
            &TermFlags::default(),
        )
        .unwrap();
        assert_eq!(b.pseudo, 0.0);
        assert_eq!(b.con, 0.0);
        let hand = b.ent + b.div;
        assert!((b.total - hand).abs() <= 1e-12);
    }

    #[test]
    fn robust_variant_is_the_same_function_on_given_inputs() {
        let l = logits(2, 3, vec![0.3, -0.2, 0.9, 1.2, 0.0, -0.5]);
        let f = Tensor::new(vec![2, 2], vec![0.2, 0.3, -0.6, 1.1]).unwrap();
        let w = LossWeights::default();
        let flags = TermFlags::default();
        let mut t1 = Tape::new();
        let (l1, f1) = (t1.leaf(&l), t1.leaf(&f));
        let (_, a) = target_loss(&mut t1, l1, f1, Some(&[0, 1]), &w, &flags).unwrap();
        let mut t2 = Tape::new();
        let (l2, f2) = (t2.leaf(&l), t2.leaf(&f));
        let (_, b) = robust_target_loss(&mut t2, l2, f2, Some(&[0, 1]), &w, &flags).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
}
