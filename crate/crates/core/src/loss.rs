//! Multi-task detection objective: focal classification loss over every
//! non-ignored anchor plus smooth-L1 box regression over positive anchors,
//! both normalized by the positive count.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLabel, AssignmentResult};
use crate::error::{Error, Result};
use crate::heads::{box_offset, cls_offset, HeadVars, LevelOutputs};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight of the classification term.
    pub lambda: f64,
    /// Lower bound on the positive-anchor normalizer.
    pub normalizer_floor: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            lambda: 3.0,
            normalizer_floor: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("loss.alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("loss.lambda must be > 0, got {}", self.lambda)));
        }
        if self.normalizer_floor == 0 {
            return Err(Error::Config("loss.normalizer_floor must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Positive,
    Negative,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Signed logit `s` with `p_t = sigmoid(s)`.
fn signed(logit: f64, target: Target) -> f64 {
    match target {
        Target::Positive => logit,
        Target::Negative => -logit,
    }
}

fn alpha_t(target: Target, cfg: &LossConfig) -> f64 {
    match target {
        Target::Positive => cfg.alpha,
        Target::Negative => 1.0 - cfg.alpha,
    }
}

/// `-alpha_t (1 - p_t)^gamma ln(p_t)` with `p = sigmoid(logit)`.
///
/// Evaluated as `alpha_t * sigmoid(-s)^gamma * softplus(-s)`, which never
/// takes a logarithm of zero.
pub fn focal_loss(logit: f64, target: Target, cfg: &LossConfig) -> f64 {
    let s = signed(logit, target);
    let q = sigmoid(-s);
    alpha_t(target, cfg) * q.powf(cfg.gamma) * softplus(-s)
}

/// Derivative of [`focal_loss`] with respect to the logit.
pub fn focal_loss_grad(logit: f64, target: Target, cfg: &LossConfig) -> f64 {
    let s = signed(logit, target);
    let q = sigmoid(-s);
    // d/ds [q^g * softplus(-s)] = -q^g * (g * (1 - q) * softplus(-s) + q)
    let d_ds = -q.powf(cfg.gamma) * (cfg.gamma * (1.0 - q) * softplus(-s) + q);
    let d = alpha_t(target, cfg) * d_ds;
    match target {
        Target::Positive => d,
        Target::Negative => -d,
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// `lambda / N * sum(focal)`.
    pub cls_term: f64,
    /// `1 / N * sum(smooth_l1)`.
    pub reg_term: f64,
    pub n_pos: usize,
}

/// Gradients of the loss with respect to one level's raw head outputs.
pub struct LevelGrads<T: Real> {
    pub cls: Tensor<T>,
    pub boxes: Tensor<T>,
}

/// Evaluates the objective and its gradient with respect to every head
/// output. Anchors are ordered level-major as in [`crate::anchors::AnchorSet`].
pub fn multitask_loss<T: Real>(
    outputs: &[LevelOutputs<T>],
    assignment: &AssignmentResult,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<LevelGrads<T>>)> {
    let mut total_anchors = 0;
    for o in outputs {
        total_anchors += o.num_anchors()?;
    }
    if total_anchors != assignment.labels.len() {
        return Err(Error::Contract(format!(
            "head outputs cover {total_anchors} anchors, assignment has {}",
            assignment.labels.len()
        )));
    }
    let n_pos = assignment.num_positive();
    let norm = n_pos.max(cfg.normalizer_floor) as f64;
    let cls_scale = cfg.lambda / norm;
    let reg_scale = 1.0 / norm;

    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    let mut base = 0;
    for o in outputs {
        let (s, a) = o.layout()?;
        let mut dcls = vec![T::zero(); o.cls.len()];
        let mut dbox = vec![T::zero(); o.boxes.len()];
        for i in 0..s * s * a {
            let target = match assignment.labels[base + i] {
                AnchorLabel::Positive(_) => Target::Positive,
                AnchorLabel::Negative => Target::Negative,
                AnchorLabel::Ignored => continue,
            };
            let ci = cls_offset(i, s, a);
            let z = o.cls.data()[ci].as_f64();
            cls_sum += focal_loss(z, target, cfg);
            dcls[ci] = T::of(cls_scale * focal_loss_grad(z, target, cfg));
            if target == Target::Positive {
                let t_star = &assignment.targets[base + i];
                for (j, &tj) in t_star.iter().enumerate() {
                    let bi = box_offset(i, j, s, a);
                    let diff = o.boxes.data()[bi].as_f64() - tj;
                    reg_sum += smooth_l1(diff);
                    dbox[bi] = T::of(reg_scale * smooth_l1_grad(diff));
                }
            }
        }
        grads.push(LevelGrads {
            cls: Tensor::new(o.cls.dims().to_vec(), dcls)?,
            boxes: Tensor::new(o.boxes.dims().to_vec(), dbox)?,
        });
        base += s * s * a;
    }
    let cls_term = cls_scale * cls_sum;
    let reg_term = reg_scale * reg_sum;
    Ok((
        LossReport {
            total: cls_term + reg_term,
            cls_term,
            reg_term,
            n_pos,
        },
        grads,
    ))
}

/// Records the objective on `g` as a differentiable scalar.
pub fn multitask_loss_on_graph<T: Real>(
    g: &mut Graph<T>,
    heads: &[HeadVars],
    assignment: &AssignmentResult,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    let outputs: Vec<LevelOutputs<T>> = heads
        .iter()
        .map(|h| LevelOutputs {
            cls: g.value(h.cls).clone(),
            boxes: g.value(h.boxes).clone(),
        })
        .collect();
    let (report, grads) = multitask_loss(&outputs, assignment, cfg)?;
    let mut inputs = Vec::with_capacity(2 * heads.len());
    let mut local = Vec::with_capacity(2 * heads.len());
    for (h, gr) in heads.iter().zip(grads) {
        inputs.push(h.cls);
        local.push(gr.cls);
        inputs.push(h.boxes);
        local.push(gr.boxes);
    }
    let var = g.scalar_fn(&inputs, T::of(report.total), local)?;
    Ok((var, report))
}
