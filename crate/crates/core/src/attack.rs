//! L-infinity projected gradient attacks and accuracy evaluation.
//!
//! [`pgd_attack`] runs sign-gradient ascent on the cross-entropy of a model
//! against given labels, projecting back into the epsilon ball around the
//! original inputs and into the valid input range after every step. With
//! `steps == 1`, no random start, and a step size of at least epsilon it
//! reduces exactly to the one-shot fast gradient sign method.
//!
//! The attack reads model parameters but never writes them, and asks for
//! gradients only with respect to the input batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::loss::cross_entropy;
use crate::nn::Model;
use crate::tensor::{argmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity budget. Zero disables the attack entirely.
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step magnitude of the sign update.
    pub step_size: f64,
    /// Start from a uniform point inside the epsilon ball instead of the
    /// clean input.
    pub random_start: bool,
    /// Valid input range; every iterate is clamped into it.
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl AttackConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            bad.push(format!("attack.epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if self.steps < 1 {
            bad.push("attack.steps must be at least 1".into());
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            bad.push(format!("attack.step_size must be finite and positive, got {}", self.step_size));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            bad.push(format!(
                "attack clamp range must satisfy lo < hi, got [{}, {}]",
                self.clamp_lo, self.clamp_hi
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

/// Sign with the zero convention sign(0) = 0, so a flat gradient moves
/// nothing rather than drifting positive.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of mean cross-entropy with respect to the input batch. Checks
/// logits and gradient rows for non-finite values and reports the first
/// offending batch row.
fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.insert_params(&mut tape);
    let xv = tape.leaf(x);
    let (_, logits) = model.forward_on(&mut tape, &params, xv);
    tape.value_tensor(logits).ensure_finite("pgd_attack logits")?;
    let loss = cross_entropy(&mut tape, logits, labels)?;
    tape.backward(loss)?;
    let g = tape.grad(xv);
    let cols = x.cols();
    if let Some(flat) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "pgd_attack input gradient".into(),
            index: Some(flat / cols),
        });
    }
    Ok(g.to_vec())
}

/// Runs the attack and returns the perturbed batch. `epsilon == 0` returns
/// the input bit-for-bit. The model is never modified.
pub fn pgd_attack(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.ensure_valid()?;
    if x.rows() == 0 {
        return Err(Error::EmptyData {
            context: "pgd_attack".into(),
        });
    }
    if labels.len() != x.rows() {
        return Err(Error::Shape {
            context: "pgd_attack labels".into(),
            expected: vec![x.rows()],
            got: vec![labels.len()],
        });
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }

    let x0 = x.data();
    let mut adv = x.clone();
    if cfg.random_start {
        let data = adv.data_mut();
        for v in data.iter_mut() {
            *v += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        }
        project(adv.data_mut(), x0, cfg);
    }

    for _ in 0..cfg.steps {
        let grad = input_gradient(model, &adv, labels)?;
        let data = adv.data_mut();
        for (v, g) in data.iter_mut().zip(&grad) {
            *v += cfg.step_size * sign(*g);
        }
        project(data, x0, cfg);
    }
    Ok(adv)
}

/// Clamp into the epsilon ball around the clean input, then into range.
fn project(adv: &mut [f64], x0: &[f64], cfg: &AttackConfig) {
    for (v, &orig) in adv.iter_mut().zip(x0) {
        *v = v.min(orig + cfg.epsilon).max(orig - cfg.epsilon);
        *v = v.min(cfg.clamp_hi).max(cfg.clamp_lo);
    }
}

/// Fraction of samples the model classifies correctly.
pub fn clean_accuracy(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptyData {
            context: "clean_accuracy".into(),
        });
    }
    if y.len() != x.rows() {
        return Err(Error::Shape {
            context: "clean_accuracy labels".into(),
            expected: vec![x.rows()],
            got: vec![y.len()],
        });
    }
    let (_, logits) = crate::pseudo::forward_batched(model, x)?;
    let pred = argmax_rows(&logits)?;
    let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Accuracy on inputs perturbed by [`pgd_attack`] under the true labels.
/// With `epsilon == 0` this equals [`clean_accuracy`] exactly.
pub fn adv_accuracy(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptyData {
            context: "adv_accuracy".into(),
        });
    }
    const BATCH: usize = 256;
    let n = x.rows();
    let mut hits = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let xb = x.gather_rows(&idx);
        let yb = &y[start..end];
        let adv = pgd_attack(model, &xb, yb, cfg, rng)?;
        let (_, logits) = model.forward(&adv)?;
        let pred = argmax_rows(&logits)?;
        hits += pred.iter().zip(yb).filter(|(a, b)| a == b).count();
        start = end;
    }
    Ok(hits as f64 / n as f64)
}

/// Per-class accuracy; classes absent from `y` report NaN-free zero counts
/// as `None`.
pub fn per_class_accuracy(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    classes: usize,
    attack: Option<(&AttackConfig, &mut ChaCha8Rng)>,
) -> Result<Vec<Option<f64>>> {
    if x.rows() == 0 {
        return Err(Error::EmptyData {
            context: "per_class_accuracy".into(),
        });
    }
    let eval_x = match attack {
        Some((cfg, rng)) => pgd_attack(model, x, y, cfg, rng)?,
        None => x.clone(),
    };
    let (_, logits) = crate::pseudo::forward_batched(model, &eval_x)?;
    let pred = argmax_rows(&logits)?;
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (p, &t) in pred.iter().zip(y) {
        if t >= classes {
            return Err(Error::LabelRange {
                label: t,
                classes,
            });
        }
        total[t] += 1;
        if *p == t {
            hit[t] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| {
            if total[c] == 0 {
                None
            } else {
                Some(hit[c] as f64 / total[c] as f64)
            }
        })
        .collect())
}
