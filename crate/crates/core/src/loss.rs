//! Training objectives: Smooth-L1, SSIM loss, optional log10 wrapping, and
//! the weighted sum over the network's output heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::model::ForwardOutputs;

/// SSIM window used by both the loss and the metric.
pub const SSIM_WINDOW: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBase {
    SmoothL1,
    Ssim,
    SmoothL1PlusSsim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub base: LossBase,
    /// Minimize `log10(L + epsilon)` instead of `L`.
    pub log_scale: bool,
    pub epsilon: f64,
    /// Weights of the `sr1`, `sr2`, `sr_out` heads.
    pub head_weights: [f64; 3],
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            base: LossBase::SmoothL1,
            log_scale: false,
            epsilon: 1e-12,
            head_weights: [1.0, 1.0, 1.0],
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("loss epsilon must be positive, got {}", self.epsilon)));
        }
        if self.head_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("head weights must be finite and non-negative".into()));
        }
        if self.head_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one head weight must be positive".into()));
        }
        Ok(())
    }
}

/// `log10(loss + eps)`; the gradient is the base gradient scaled by
/// `1 / ((loss + eps) ln 10)`.
pub fn log_wrap(tape: &mut Tape, loss: &Var, eps: f64) -> Var {
    tape.log10(loss, eps)
}

/// Loss of one output head against the target, before head weighting.
fn head_term(tape: &mut Tape, spec: &LossSpec, pred: &Var, target: &Var) -> Result<Var> {
    let wrap = |tape: &mut Tape, v: Var| if spec.log_scale { log_wrap(tape, &v, spec.epsilon) } else { v };
    match spec.base {
        LossBase::SmoothL1 => {
            let l = tape.smooth_l1(pred, target)?;
            Ok(wrap(tape, l))
        }
        LossBase::Ssim => {
            let l = tape.ssim_loss(pred, target, SSIM_WINDOW, 1.0)?;
            Ok(wrap(tape, l))
        }
        LossBase::SmoothL1PlusSsim => {
            let l1 = tape.smooth_l1(pred, target)?;
            let l1 = wrap(tape, l1);
            let s = tape.ssim_loss(pred, target, SSIM_WINDOW, 1.0)?;
            let s = wrap(tape, s);
            tape.add(&l1, &s)
        }
    }
}

/// Weighted sum of the per-head losses. Without the aggregation head only
/// `sr1` contributes, with weight 1.
pub fn total_loss(tape: &mut Tape, spec: &LossSpec, outputs: &ForwardOutputs<Var>, target: &Var) -> Result<Var> {
    spec.validate()?;
    let heads = outputs.heads();
    if heads.len() == 1 {
        return head_term(tape, spec, heads[0], target);
    }
    let mut total: Option<Var> = None;
    for (pred, &w) in heads.iter().zip(&spec.head_weights) {
        if w == 0.0 {
            continue;
        }
        let term = head_term(tape, spec, pred, target)?;
        let term = if w == 1.0 { term } else { tape.scale(&term, w) };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    total.ok_or_else(|| Error::Config("no head carries weight".into()))
}
