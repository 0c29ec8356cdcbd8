//! Training objectives: segmentation cross-entropy, boundary BCE, the
//! boundary-aware attention loss, the auxiliary loss, and their weighted
//! combination.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::tensor::{Tape, Var};

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 20.0,
            lambda3: 1.0,
            lambda4: 0.4,
        }
    }
}

/// Full loss configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Positive-boundary threshold of the attention loss.
    pub att_threshold: f64,
    /// Mean (true) or sum (false) reduction for the boundary BCE.
    pub bce_mean: bool,
    pub ignore_label: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            att_threshold: 0.8,
            bce_mean: true,
            ignore_label: 255,
        }
    }
}

/// Scalar values of the individual terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_boundary: f64,
    pub l_att: f64,
    pub l_aux: f64,
    pub total: f64,
}

/// Mean cross-entropy of segmentation logits `[C, H, W]` against integer
/// labels, skipping `ignore_label` pixels.
pub fn cross_entropy_seg(tape: &mut Tape, logits: Var, targets: &[u32], ignore_label: u32) -> Result<Var> {
    tape.cross_entropy(logits, targets, ignore_label)
}

/// Binary cross-entropy of a predicted edge map in (0,1) against 0/1
/// boundary labels.
pub fn bce_boundary(tape: &mut Tape, pred: Var, target: &[f64], mean: bool) -> Result<Var> {
    tape.bce(pred, target, mean)
}

/// Boundary BCE averaged over several predicted edge maps (the per-scale
/// MSB outputs, all upsampled to label resolution).
pub fn bce_multi(tape: &mut Tape, preds: &[Var], target: &[f64], mean: bool) -> Result<Var> {
    let mut terms = Vec::with_capacity(preds.len());
    let w = 1.0 / preds.len() as f64;
    for &p in preds {
        terms.push((tape.bce(p, target, mean)?, w));
    }
    tape.weighted_sum(&terms)
}

/// Cross-entropy restricted to pixels whose predicted boundary exceeds
/// `threshold`. Zero (not NaN) when no pixel qualifies.
pub fn boundary_attention_loss(
    tape: &mut Tape,
    seg_logits: Var,
    targets: &[u32],
    ignore_label: u32,
    pred_boundary: Var,
    threshold: f64,
) -> Result<Var> {
    tape.gated_cross_entropy(seg_logits, targets, ignore_label, pred_boundary, threshold)
}

/// Combine already-computed scalar terms into the weighted total, keeping
/// the per-term values for logging. Fails loudly on a non-finite term.
pub fn total_loss(
    tape: &mut Tape,
    l_seg: Var,
    l_boundary: Var,
    l_att: Var,
    l_aux: Var,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let parts = [
        ("l_seg", l_seg),
        ("l_boundary", l_boundary),
        ("l_att", l_att),
        ("l_aux", l_aux),
    ];
    for (term, v) in parts {
        let value = tape.value(v).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    let total = tape.weighted_sum(&[
        (l_seg, w.lambda1),
        (l_boundary, w.lambda2),
        (l_att, w.lambda3),
        (l_aux, w.lambda4),
    ])?;
    let breakdown = LossBreakdown {
        l_seg: tape.value(l_seg).item(),
        l_boundary: tape.value(l_boundary).item(),
        l_att: tape.value(l_att).item(),
        l_aux: tape.value(l_aux).item(),
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

/// The complete training objective for one sample. Models without an MSB
/// branch contribute exact zeros for the boundary and attention terms.
pub fn training_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    targets: &[u32],
    boundary: &[f64],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let l_seg = cross_entropy_seg(tape, out.seg_logits, targets, cfg.ignore_label)?;
    let l_aux = cross_entropy_seg(tape, out.aux_logits, targets, cfg.ignore_label)?;
    let (l_boundary, l_att) = match out.fused_edge {
        Some(fused) => {
            let lb = bce_multi(tape, &out.edge_maps, boundary, cfg.bce_mean)?;
            let la = boundary_attention_loss(
                tape,
                out.seg_logits,
                targets,
                cfg.ignore_label,
                fused,
                cfg.att_threshold,
            )?;
            (lb, la)
        }
        None => {
            let zero = tape.constant(crate::Tensor::scalar(0.0));
            (zero, zero)
        }
    };
    total_loss(tape, l_seg, l_boundary, l_att, l_aux, &cfg.weights)
}
