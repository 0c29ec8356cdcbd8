//! Evaluation: confusion matrices, mIoU, pixel accuracy, band-restricted
//! boundary/interior F-scores, and cosine-similarity maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::boundary_from_mask;
use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Metric parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    /// Fraction of the image diagonal defining the boundary band radius.
    pub boundary_threshold: f64,
    pub num_classes: usize,
    pub ignore_label: u32,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            boundary_threshold: 0.0003,
            num_classes: 4,
            ignore_label: 255,
        }
    }
}

/// C×C counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, gt: u32, pred: u32) {
        self.counts[gt as usize * self.classes + pred as usize] += 1;
    }

    /// Accumulate all (gt, pred) pairs, skipping ignored pixels.
    pub fn update(&mut self, gt: &[u32], pred: &[u32], ignore: u32) {
        debug_assert_eq!(gt.len(), pred.len());
        for (&g, &p) in gt.iter().zip(pred) {
            if g != ignore {
                self.record(g, p);
            }
        }
    }

    /// Masked accumulation: only positions where `select` is true.
    pub fn update_where(&mut self, gt: &[u32], pred: &[u32], select: &[bool], ignore: u32) {
        debug_assert_eq!(gt.len(), pred.len());
        debug_assert_eq!(gt.len(), select.len());
        for ((&g, &p), &s) in gt.iter().zip(pred).zip(select) {
            if s && g != ignore {
                self.record(g, p);
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn class_tally(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.count(c, c);
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..self.classes {
            if other != c {
                fp += self.count(other, c);
                fn_ += self.count(c, other);
            }
        }
        (tp, fp, fn_)
    }
}

/// Mean IoU over classes present in ground truth or prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..cm.classes() {
        let (tp, fp, fn_) = cm.class_tally(c);
        let denom = tp + fp + fn_;
        if denom == 0 {
            continue;
        }
        present += 1;
        sum += tp as f64 / denom as f64;
    }
    Ok(sum / present as f64)
}

/// Fraction of correctly labeled pixels.
pub fn pixacc(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyConfusion);
    }
    let trace: u64 = (0..cm.classes()).map(|c| cm.count(c, c)).sum();
    Ok(trace as f64 / total as f64)
}

/// Macro-averaged F1 over classes present in the matrix. `None` when the
/// region contributed no pixels at all (kept distinct from a zero score).
pub fn macro_f1(cm: &ConfusionMatrix) -> Option<f64> {
    if cm.total() == 0 {
        return None;
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..cm.classes() {
        let (tp, fp, fn_) = cm.class_tally(c);
        if tp + fp + fn_ == 0 {
            continue;
        }
        present += 1;
        sum += 2.0 * tp as f64 / (2.0 * tp as f64 + (fp + fn_) as f64);
    }
    Some(sum / present as f64)
}

/// Band radius in pixels for a mask of the given size: the threshold is a
/// fraction of the image diagonal, rounded up.
pub fn band_radius(h: usize, w: usize, threshold: f64) -> usize {
    let diag = fmath::sqrt((h * h + w * w) as f64);
    fmath::ceil(threshold * diag) as usize
}

/// Pixels within the band radius of a ground-truth class transition.
pub fn boundary_band(mask: &[u32], h: usize, w: usize, threshold: f64) -> Vec<bool> {
    let d = band_radius(h, w, threshold).max(1);
    boundary_from_mask(mask, h, w, d).into_iter().map(|b| b == 1).collect()
}

/// Boundary and interior macro-F1 of one prediction, evaluated inside the
/// ground-truth boundary band and its complement respectively.
pub fn boundary_interior_fscores(
    pred: &[u32],
    gt: &[u32],
    h: usize,
    w: usize,
    cfg: &MetricConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    if pred.len() != gt.len() || pred.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "boundary_interior_fscores",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let band = boundary_band(gt, h, w, cfg.boundary_threshold);
    let mut cm_band = ConfusionMatrix::new(cfg.num_classes);
    let mut cm_interior = ConfusionMatrix::new(cfg.num_classes);
    cm_band.update_where(gt, pred, &band, cfg.ignore_label);
    let interior: Vec<bool> = band.iter().map(|&b| !b).collect();
    cm_interior.update_where(gt, pred, &interior, cfg.ignore_label);
    Ok((macro_f1(&cm_band), macro_f1(&cm_interior)))
}

/// Cosine similarity of every spatial position's feature vector against
/// the one at `(ref_y, ref_x)`. Zero-norm positions score 0 by convention;
/// a zero-norm reference is an error.
pub fn cosine_similarity_map(features: &Tensor, ref_y: usize, ref_x: usize) -> Result<Tensor> {
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if ref_y >= h || ref_x >= w {
        return Err(Error::IndexOutOfRange {
            index: ref_y * w + ref_x,
            len: h * w,
        });
    }
    let n = h * w;
    let data = features.data();
    let at = |ch: usize, p: usize| data[ch * n + p];
    let ref_p = ref_y * w + ref_x;
    let ref_norm_sq: f64 = (0..c).map(|ch| at(ch, ref_p) * at(ch, ref_p)).sum();
    if ref_norm_sq == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    let ref_norm = fmath::sqrt(ref_norm_sq);
    let mut out = vec![0.0; n];
    for p in 0..n {
        let mut dot = 0.0;
        let mut norm_sq = 0.0;
        for ch in 0..c {
            let v = at(ch, p);
            dot += v * at(ch, ref_p);
            norm_sq += v * v;
        }
        out[p] = if norm_sq == 0.0 {
            0.0
        } else {
            dot / (ref_norm * fmath::sqrt(norm_sq))
        };
    }
    Tensor::new(vec![h, w], out)
}

/// Argmax over the class axis of logits `[C, H, W]`.
pub fn argmax_classes(logits: &Tensor) -> Vec<u32> {
    let c = logits.shape()[0];
    let n: usize = logits.shape()[1..].iter().product();
    let data = logits.data();
    let mut out = vec![0u32; n];
    for (p, o) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = data[p];
        for ch in 1..c {
            let v = data[ch * n + p];
            if v > best_v {
                best_v = v;
                best = ch;
            }
        }
        *o = best as u32;
    }
    out
}
