//! The individual loss terms and their weighted combination.

use thiserror::Error;

use crate::autodiff::graph::GraphError;
use crate::autodiff::{NodeId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss term '{term}' is non-finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("invalid loss weights: {detail}")]
    BadWeights { detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Term weights and the distance-prior cut-off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub global: f64,
    pub local: f64,
    pub eikonal: f64,
    pub reg: f64,
    /// Cut-off threshold for the prior indicator, in scene-normalized units.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            global: 1.0,
            local: 0.5,
            eikonal: 0.1,
            reg: 0.1,
            epsilon: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.global < 0.0 || self.local < 0.0 || self.eikonal < 0.0 || self.reg < 0.0 {
            return Err(LossError::BadWeights {
                detail: "weights must be non-negative".into(),
            });
        }
        if self.epsilon <= 0.0 {
            return Err(LossError::BadWeights {
                detail: format!("epsilon must be positive, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

/// Mean L1 color difference over the ray batch (per-ray sum of absolute
/// channel differences, averaged over rays).
pub fn color_loss(tape: &mut Tape, rendered: NodeId, truth: &Tensor) -> Result<NodeId, GraphError> {
    let t = tape.constant(truth.clone());
    let diff = tape.sub(rendered, t)?;
    let ab = tape.abs(diff)?;
    let per_ray = tape.row_sum(ab)?;
    tape.mean(per_ray)
}

/// Prior-guided alignment: mean over samples of |f| gated by the indicator
/// that the (clamped) unsigned prior is at or below the cut-off. The
/// indicator form is the algebraic bracket of the prior term everywhere away
/// from the threshold, without its removable 0/0 singularity at equality.
pub fn global_loss(
    tape: &mut Tape,
    f: NodeId,
    udf_clamped: &Tensor,
    epsilon: f64,
) -> Result<NodeId, GraphError> {
    let mask = udf_clamped.map(|v| if v <= epsilon { 1.0 } else { 0.0 });
    let mask = tape.constant(mask);
    let fa = tape.abs(f)?;
    let gated = tape.mul(fa, mask)?;
    tape.mean(gated)
}

/// Unit-gradient regularizer: mean of (|grad f| - 1)^2 over the sample set.
pub fn eikonal_loss(tape: &mut Tape, grad: NodeId) -> Result<NodeId, GraphError> {
    let sq = tape.square(grad)?;
    let norm_sq = tape.row_sum(sq)?;
    // Epsilon keeps sqrt differentiable if a gradient ever vanishes.
    let safe = tape.add_const(norm_sq, 1e-12)?;
    let norm = tape.sqrt(safe)?;
    let centered = tape.add_const(norm, -1.0)?;
    let sq = tape.square(centered)?;
    tape.mean(sq)
}

/// Zero-level anchor at the SfM points: mean |f|.
pub fn reg_loss(tape: &mut Tape, f_at_points: NodeId) -> Result<NodeId, GraphError> {
    let fa = tape.abs(f_at_points)?;
    tape.mean(fa)
}

/// The individual term nodes; optional terms are disabled by ablation
/// switches or empty inputs.
pub struct LossParts {
    pub color: NodeId,
    pub global: Option<NodeId>,
    pub local: Option<NodeId>,
    pub eikonal: NodeId,
    pub reg: NodeId,
}

/// Per-term values recorded every iteration.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossValues {
    pub total: f64,
    pub color: f64,
    pub global: f64,
    pub local: f64,
    pub eikonal: f64,
    pub reg: f64,
}

/// Weighted sum of the loss terms. Every present term must be finite.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossParts,
    weights: &LossWeights,
) -> Result<(NodeId, LossValues), LossError> {
    weights.validate()?;
    let check = |tape: &Tape, id: NodeId, term: &'static str| -> Result<f64, LossError> {
        let v = tape.value(id).as_scalar();
        if !v.is_finite() {
            return Err(LossError::NonFinite { term, value: v });
        }
        Ok(v)
    };
    let mut values = LossValues {
        color: check(tape, parts.color, "color")?,
        ..Default::default()
    };
    let mut total = parts.color;
    if let Some(g) = parts.global {
        values.global = check(tape, g, "global")?;
        let scaled = tape.scale(g, weights.global)?;
        total = tape.add(total, scaled)?;
    }
    if let Some(l) = parts.local {
        values.local = check(tape, l, "local")?;
        let scaled = tape.scale(l, weights.local)?;
        total = tape.add(total, scaled)?;
    }
    values.eikonal = check(tape, parts.eikonal, "eikonal")?;
    let scaled = tape.scale(parts.eikonal, weights.eikonal)?;
    total = tape.add(total, scaled)?;
    values.reg = check(tape, parts.reg, "reg")?;
    let scaled = tape.scale(parts.reg, weights.reg)?;
    total = tape.add(total, scaled)?;
    values.total = check(tape, total, "total")?;
    Ok((total, values))
}
