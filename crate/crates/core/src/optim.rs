//! Adam optimizer with per-group learning rates and head freezing.
//!
//! Parameters fall into three groups (see [`ParamRole`]): backbone encoder
//! layers, the bottleneck (final encoder layer), and the classifier head.
//! The backbone gets its own learning rate; bottleneck and head share the
//! fast rate. A frozen classifier is skipped entirely, so its parameters
//! and moment buffers stay bit-identical across any number of steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelGrads, ParamRole};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Learning rate for encoder layers before the bottleneck.
    pub backbone_lr: f64,
    /// Learning rate for the bottleneck layer and the classifier.
    pub head_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            backbone_lr: 1e-3,
            head_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.backbone_lr > 0.0) {
            bad.push(format!("optim.backbone_lr must be positive, got {}", self.backbone_lr));
        }
        if !(self.head_lr > 0.0) {
            bad.push(format!("optim.head_lr must be positive, got {}", self.head_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            bad.push(format!("optim.beta1 must be in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bad.push(format!("optim.beta2 must be in [0, 1), got {}", self.beta2));
        }
        if !(self.eps > 0.0) {
            bad.push(format!("optim.eps must be positive, got {}", self.eps));
        }
        bad
    }

    fn lr_for(&self, role: ParamRole) -> f64 {
        match role {
            ParamRole::Backbone => self.backbone_lr,
            ParamRole::Bottleneck | ParamRole::Head => self.head_lr,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    role: ParamRole,
}

/// Optimizer state bound to one model's parameter layout.
pub struct Adam {
    cfg: OptimConfig,
    /// Encoder slots in layer order (weight, bias interleaved), then the two
    /// classifier slots.
    slots: Vec<Slot>,
    /// Number of completed updates; increases by exactly one per `step`.
    pub step_count: u64,
}

impl Adam {
    pub fn new(model: &Model, cfg: OptimConfig) -> Self {
        let last = model.encoder.layers.len() - 1;
        let mut slots = Vec::new();
        for (i, l) in model.encoder.layers.iter().enumerate() {
            let role = if i == last {
                ParamRole::Bottleneck
            } else {
                ParamRole::Backbone
            };
            slots.push(Slot {
                m: vec![0.0; l.weight.len()],
                v: vec![0.0; l.weight.len()],
                role,
            });
            slots.push(Slot {
                m: vec![0.0; l.bias.len()],
                v: vec![0.0; l.bias.len()],
                role,
            });
        }
        for t in [
            &model.classifier.linear.weight,
            &model.classifier.linear.bias,
        ] {
            slots.push(Slot {
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
                role: ParamRole::Head,
            });
        }
        Adam {
            cfg,
            slots,
            step_count: 0,
        }
    }

    /// Applies one Adam update. A frozen classifier receives no update and
    /// its moments do not advance.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads) -> Result<()> {
        if grads.enc.len() != model.encoder.layers.len() {
            return Err(Error::Shape {
                context: "Adam::step gradient layout".into(),
                expected: vec![model.encoder.layers.len()],
                got: vec![grads.enc.len()],
            });
        }
        self.step_count += 1;
        let t = self.step_count;
        let head_frozen = model.classifier.frozen;

        let mut slot = 0;
        for (layer, (gw, gb)) in model.encoder.layers.iter_mut().zip(&grads.enc) {
            for (param, grad) in [(&mut layer.weight, gw), (&mut layer.bias, gb)] {
                let s = &mut self.slots[slot];
                apply(param, grad, s, self.cfg.lr_for(s.role), &self.cfg, t)?;
                slot += 1;
            }
        }
        for (param, grad) in [
            (&mut model.classifier.linear.weight, &grads.cls.0),
            (&mut model.classifier.linear.bias, &grads.cls.1),
        ] {
            if head_frozen {
                slot += 1;
                continue;
            }
            let s = &mut self.slots[slot];
            apply(param, grad, s, self.cfg.lr_for(s.role), &self.cfg, t)?;
            slot += 1;
        }
        Ok(())
    }
}

fn apply(
    param: &mut Tensor,
    grad: &Tensor,
    slot: &mut Slot,
    lr: f64,
    cfg: &OptimConfig,
    t: u64,
) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(Error::Shape {
            context: "Adam::step gradient".into(),
            expected: param.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    grad.ensure_finite("Adam::step gradient")?;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let p = param.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
