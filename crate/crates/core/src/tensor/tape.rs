//! The operation tape: forward recording and reverse-mode backward.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::fmath;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp applied inside binary cross-entropy, per the loss contract.
pub const BCE_EPS: f64 = 1e-7;

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    requires_grad: bool,
    back: Back,
}

enum Back {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Log {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose2d {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Concat0 {
        xs: Vec<usize>,
        spans: Vec<usize>,
    },
    ReduceSum {
        x: usize,
    },
    ReduceMean {
        x: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    SoftmaxAxis {
        x: usize,
        axis: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        // im2col of every batch image, saved from the forward pass
        cols: Vec<f64>,
    },
    BilinearResize {
        x: usize,
        channels: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    CrossEntropy {
        logits: usize,
        // softmax probabilities, saved from the forward pass
        probs: Vec<f64>,
        targets: Vec<u32>,
        ignore: u32,
        classes: usize,
        valid: usize,
    },
    Bce {
        pred: usize,
        target: Vec<f64>,
        mean: bool,
    },
    // Cross-entropy restricted to gate > threshold; the gate is a hard
    // indicator, so no gradient flows to it.
    GatedCrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<u32>,
        selected: Vec<u32>,
        classes: usize,
    },
    WeightedSum {
        terms: Vec<(usize, f64)>,
    },
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients are retained only for leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, requires_grad, Back::Leaf)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, requires_grad: bool, back: Back) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            requires_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn out(&mut self, value: Tensor, needs_grad: bool, back: Back) -> Var {
        self.push(value, needs_grad, false, back)
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.out(value, ng, Back::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.out(value, ng, Back::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.out(value, ng, Back::Scale { x: x.0, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.out(value, ng, Back::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.out(value, ng, Back::Sigmoid { x: x.0 })
    }

    /// Natural log, floored at 1e-300 so finite inputs give finite outputs.
    pub fn log(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| fmath::ln(fmath::max(v, 1e-300))).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.out(value, ng, Back::Log { x: x.0 })
    }

    // ── Structure ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: vx.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), vx.data().to_vec())?;
        let ng = self.needs(x);
        Ok(self.out(value, ng, Back::Reshape { x: x.0 }))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2d",
                lhs: vx.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let src = vx.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let ng = self.needs(x);
        Ok(self.out(value, ng, Back::Transpose2d { x: x.0, rows: r, cols: c }))
    }

    /// Concatenate along axis 0 (channels for C×H×W maps).
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        let mut dim0 = 0;
        let mut spans = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.nodes[x.0].value.shape();
            if s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            dim0 += s[0];
            spans.push(self.nodes[x.0].value.numel());
        }
        let mut data = Vec::with_capacity(spans.iter().sum());
        for &x in xs {
            data.extend_from_slice(self.nodes[x.0].value.data());
        }
        let mut shape = first;
        shape[0] = dim0;
        let value = Tensor::new(shape, data)?;
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.out(
            value,
            ng,
            Back::Concat0 {
                xs: xs.iter().map(|v| v.0).collect(),
                spans,
            },
        ))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let ng = self.needs(x);
        self.out(Tensor::scalar(s), ng, Back::ReduceSum { x: x.0 })
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let s: f64 = vx.data().iter().sum();
        let m = s / vx.numel() as f64;
        let ng = self.needs(x);
        self.out(Tensor::scalar(m), ng, Back::ReduceMean { x: x.0 })
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul_nn_acc(m, k, n, va.data(), vb.data(), &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.out(value, ng, Back::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: vx.rank(),
            });
        }
        let mut data = vec![0.0; vx.numel()];
        kernels::softmax_axis(vx.data(), vx.shape(), axis, &mut data);
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.out(value, ng, Back::SoftmaxAxis { x: x.0, axis }))
    }

    // ── Convolution and resampling ──────────────────────────────────

    /// 2D cross-correlation with bias. Accepts C×H×W or N×C×H×W input;
    /// weight is Cout×Cin×k×k with odd k.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let vw = &self.nodes[weight.0].value;
        if vw.rank() != 4 || vw.shape()[2] != vw.shape()[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d weight",
                lhs: vw.shape().to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (c_out, c_in, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(alloc::format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let vb = &self.nodes[bias.0].value;
        if vb.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vb.shape().to_vec(),
                rhs: vec![c_out],
            });
        }
        let vx = &self.nodes[x.0].value;
        let (batched, batch, cx, h, w) = match vx.rank() {
            3 => (false, 1, vx.shape()[0], vx.shape()[1], vx.shape()[2]),
            4 => (true, vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d input",
                    lhs: vx.shape().to_vec(),
                    rhs: vec![0, 0, 0],
                })
            }
        };
        if cx != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let out_h = kernels::conv_out_len(h, k, stride, dilation, padding)
            .ok_or_else(|| Error::Config(alloc::format!("conv2d output height is not positive for input {h}")))?;
        let out_w = kernels::conv_out_len(w, k, stride, dilation, padding)
            .ok_or_else(|| Error::Config(alloc::format!("conv2d output width is not positive for input {w}")))?;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            dilation,
            padding,
            out_h,
            out_w,
        };
        let ckk = geom.cols_rows();
        let positions = geom.out_positions();
        let mut cols = vec![0.0; batch * ckk * positions];
        let mut data = vec![0.0; batch * c_out * positions];
        let image = c_in * h * w;
        for n in 0..batch {
            let img_cols = &mut cols[n * ckk * positions..(n + 1) * ckk * positions];
            kernels::im2col(&vx.data()[n * image..(n + 1) * image], &geom, img_cols);
            let out_img = &mut data[n * c_out * positions..(n + 1) * c_out * positions];
            kernels::matmul_nn_acc(c_out, ckk, positions, vw.data(), img_cols, out_img);
            for (co, &b) in vb.data().iter().enumerate() {
                for o in &mut out_img[co * positions..(co + 1) * positions] {
                    *o += b;
                }
            }
        }
        let shape = if batched {
            vec![batch, c_out, out_h, out_w]
        } else {
            vec![c_out, out_h, out_w]
        };
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.out(
            value,
            ng,
            Back::Conv2d {
                x: x.0,
                w: weight.0,
                b: bias.0,
                geom,
                cols,
            },
        ))
    }

    /// Bilinear resize (half-pixel centers, align-corners = false) of a
    /// C×H×W or N×C×H×W tensor to the given spatial size.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("bilinear_resize target size must be positive".into()));
        }
        let vx = &self.nodes[x.0].value;
        let (batched, channels, in_h, in_w) = match vx.rank() {
            3 => (false, vx.shape()[0], vx.shape()[1], vx.shape()[2]),
            4 => (true, vx.shape()[0] * vx.shape()[1], vx.shape()[2], vx.shape()[3]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "bilinear_resize",
                    lhs: vx.shape().to_vec(),
                    rhs: vec![0, 0, 0],
                })
            }
        };
        let ys = kernels::resize_axis(in_h, out_h);
        let xs = kernels::resize_axis(in_w, out_w);
        let mut data = vec![0.0; channels * out_h * out_w];
        kernels::bilinear_forward(vx.data(), channels, in_h, in_w, &ys, &xs, &mut data);
        let shape = if batched {
            vec![vx.shape()[0], vx.shape()[1], out_h, out_w]
        } else {
            vec![vx.shape()[0], out_h, out_w]
        };
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        Ok(self.out(
            value,
            ng,
            Back::BilinearResize {
                x: x.0,
                channels,
                in_h,
                in_w,
                out_h,
                out_w,
            },
        ))
    }

    // ── Fused objectives ────────────────────────────────────────────

    /// Mean softmax cross-entropy over non-ignored positions. Logits are
    /// `[classes, ...spatial]`; targets index the flattened spatial part.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        let classes = vl.shape()[0];
        let positions: usize = vl.shape()[1..].iter().product();
        if targets.len() != positions {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; classes * positions];
        kernels::softmax_axis(vl.data(), &[classes, positions], 0, &mut probs);
        let mut loss = 0.0;
        let mut valid = 0usize;
        let x = vl.data();
        for (p, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            debug_assert!((t as usize) < classes, "target label out of range");
            valid += 1;
            // log-softmax evaluated directly for stability
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = fmath::max(max, x[c * positions + p]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                sum += fmath::exp(x[c * positions + p] - max);
            }
            loss += fmath::ln(sum) + max - x[t as usize * positions + p];
        }
        if valid == 0 {
            return Err(Error::AllPixelsIgnored);
        }
        let value = Tensor::scalar(loss / valid as f64);
        let ng = self.needs(logits);
        Ok(self.out(
            value,
            ng,
            Back::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                ignore,
                classes,
                valid,
            },
        ))
    }

    /// Binary cross-entropy of predictions in (0,1) against 0/1 targets,
    /// clamped at [`BCE_EPS`]. `mean` selects mean vs sum reduction.
    pub fn bce(&mut self, pred: Var, target: &[f64], mean: bool) -> Result<Var> {
        let vp = &self.nodes[pred.0].value;
        if vp.numel() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: vp.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let mut loss = 0.0;
        for (&p, &b) in vp.data().iter().zip(target) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= b * fmath::ln(p) + (1.0 - b) * fmath::ln(1.0 - p);
        }
        if mean {
            loss /= target.len() as f64;
        }
        let value = Tensor::scalar(loss);
        let ng = self.needs(pred);
        Ok(self.out(
            value,
            ng,
            Back::Bce {
                pred: pred.0,
                target: target.to_vec(),
                mean,
            },
        ))
    }

    /// Cross-entropy averaged over positions where `gate > threshold`
    /// (and not ignored). Exactly zero when nothing is selected. The gate
    /// enters as a hard indicator: no gradient flows to it.
    pub fn gated_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: u32,
        gate: Var,
        threshold: f64,
    ) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        let classes = vl.shape()[0];
        let positions: usize = vl.shape()[1..].iter().product();
        let vg = &self.nodes[gate.0].value;
        if targets.len() != positions || vg.numel() != positions {
            return Err(Error::ShapeMismatch {
                op: "gated_cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len(), vg.numel()],
            });
        }
        let mut selected = Vec::new();
        for (p, &g) in vg.data().iter().enumerate() {
            if g > threshold && targets[p] != ignore {
                selected.push(p as u32);
            }
        }
        if selected.is_empty() {
            let ng = self.needs(logits);
            return Ok(self.out(
                Tensor::scalar(0.0),
                ng,
                Back::GatedCrossEntropy {
                    logits: logits.0,
                    probs: Vec::new(),
                    targets: targets.to_vec(),
                    selected,
                    classes,
                },
            ));
        }
        let x = vl.data();
        let mut probs = vec![0.0; classes * selected.len()];
        let mut loss = 0.0;
        for (si, &p) in selected.iter().enumerate() {
            let p = p as usize;
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = fmath::max(max, x[c * positions + p]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                let e = fmath::exp(x[c * positions + p] - max);
                probs[c * selected.len() + si] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for c in 0..classes {
                probs[c * selected.len() + si] *= inv;
            }
            loss += fmath::ln(sum) + max - x[targets[p] as usize * positions + p];
        }
        let value = Tensor::scalar(loss / selected.len() as f64);
        let ng = self.needs(logits);
        Ok(self.out(
            value,
            ng,
            Back::GatedCrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                selected,
                classes,
            },
        ))
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let t = &self.nodes[v.0].value;
            if t.numel() != 1 {
                return Err(Error::NonScalarLoss(t.shape().to_vec()));
            }
            total += c * t.item();
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.out(
            Tensor::scalar(total),
            ng,
            Back::WeightedSum {
                terms: terms.iter().map(|&(v, c)| (v.0, c)).collect(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// `requires_grad` leaf (zeros where the loss does not depend on it).
    /// A tape can only run backward once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(Error::NonScalarLoss(ln.value.shape().to_vec()));
        }
        if !ln.needs_grad {
            return Err(Error::DetachedGraph);
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[id].back, Back::Leaf) {
                continue;
            }
            let back = core::mem::replace(&mut self.nodes[id].back, Back::Leaf);
            let g = self.nodes[id].grad.take().expect("checked above");
            let contribs = self.backprop(&back, id, &g);
            for (target, c) in contribs {
                match &mut self.nodes[target].grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += v;
                        }
                    }
                    None => self.nodes[target].grad = Some(c),
                }
            }
        }
        // Leaves untouched by the loss still get a (zero) gradient.
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn backprop(&self, back: &Back, out_id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let mut contribs: Vec<(usize, Vec<f64>)> = Vec::new();
        let want = |tape: &Tape, id: usize| tape.nodes[id].needs_grad;
        match back {
            Back::Leaf => {}
            Back::Add { a, b } => {
                if want(self, *a) {
                    contribs.push((*a, g.to_vec()));
                }
                if want(self, *b) {
                    contribs.push((*b, g.to_vec()));
                }
            }
            Back::Mul { a, b } => {
                if want(self, *a) {
                    let da = g.iter().zip(self.val(*b).data()).map(|(g, y)| g * y).collect();
                    contribs.push((*a, da));
                }
                if want(self, *b) {
                    let db = g.iter().zip(self.val(*a).data()).map(|(g, x)| g * x).collect();
                    contribs.push((*b, db));
                }
            }
            Back::Scale { x, c } => {
                if want(self, *x) {
                    contribs.push((*x, g.iter().map(|g| g * c).collect()));
                }
            }
            Back::Relu { x } => {
                if want(self, *x) {
                    let dx = g
                        .iter()
                        .zip(self.val(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    contribs.push((*x, dx));
                }
            }
            Back::Sigmoid { x } => {
                if want(self, *x) {
                    let y = self.val(out_id).data();
                    let dx = g.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect();
                    contribs.push((*x, dx));
                }
            }
            Back::Log { x } => {
                if want(self, *x) {
                    let dx = g
                        .iter()
                        .zip(self.val(*x).data())
                        .map(|(g, &v)| g / fmath::max(v, 1e-300))
                        .collect();
                    contribs.push((*x, dx));
                }
            }
            Back::Reshape { x } => {
                if want(self, *x) {
                    contribs.push((*x, g.to_vec()));
                }
            }
            Back::Transpose2d { x, rows, cols } => {
                if want(self, *x) {
                    // g has shape cols×rows; transpose it back.
                    let mut dx = vec![0.0; rows * cols];
                    for j in 0..*cols {
                        for i in 0..*rows {
                            dx[i * cols + j] = g[j * rows + i];
                        }
                    }
                    contribs.push((*x, dx));
                }
            }
            Back::Concat0 { xs, spans } => {
                let mut offset = 0;
                for (&x, &span) in xs.iter().zip(spans) {
                    if want(self, x) {
                        contribs.push((x, g[offset..offset + span].to_vec()));
                    }
                    offset += span;
                }
            }
            Back::ReduceSum { x } => {
                if want(self, *x) {
                    contribs.push((*x, vec![g[0]; self.val(*x).numel()]));
                }
            }
            Back::ReduceMean { x } => {
                if want(self, *x) {
                    let n = self.val(*x).numel();
                    contribs.push((*x, vec![g[0] / n as f64; n]));
                }
            }
            Back::Matmul { a, b, m, k, n } => {
                if want(self, *a) {
                    // da = g · bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(*m, *n, *k, g, self.val(*b).data(), &mut da);
                    contribs.push((*a, da));
                }
                if want(self, *b) {
                    // db = aᵀ · g
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(*k, *m, *n, self.val(*a).data(), g, &mut db);
                    contribs.push((*b, db));
                }
            }
            Back::SoftmaxAxis { x, axis } => {
                if want(self, *x) {
                    let y = self.val(out_id);
                    let shape = y.shape();
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let yd = y.data();
                    let mut dx = vec![0.0; yd.len()];
                    for o in 0..outer {
                        let base = o * axis_len * inner;
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for a in 0..axis_len {
                                let idx = base + a * inner + i;
                                dot += g[idx] * yd[idx];
                            }
                            for a in 0..axis_len {
                                let idx = base + a * inner + i;
                                dx[idx] = yd[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    contribs.push((*x, dx));
                }
            }
            Back::Conv2d { x, w, b, geom, cols } => {
                let ckk = geom.cols_rows();
                let positions = geom.out_positions();
                let image = geom.c_in * geom.h * geom.w;
                if want(self, *w) {
                    let mut dw = vec![0.0; geom.c_out * ckk];
                    for n in 0..geom.batch {
                        kernels::matmul_nt_acc(
                            geom.c_out,
                            positions,
                            ckk,
                            &g[n * geom.c_out * positions..(n + 1) * geom.c_out * positions],
                            &cols[n * ckk * positions..(n + 1) * ckk * positions],
                            &mut dw,
                        );
                    }
                    contribs.push((*w, dw));
                }
                if want(self, *b) {
                    let mut db = vec![0.0; geom.c_out];
                    for n in 0..geom.batch {
                        let go = &g[n * geom.c_out * positions..(n + 1) * geom.c_out * positions];
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += go[co * positions..(co + 1) * positions].iter().sum::<f64>();
                        }
                    }
                    contribs.push((*b, db));
                }
                if want(self, *x) {
                    let wd = self.val(*w).data();
                    let mut dx = vec![0.0; geom.batch * image];
                    let mut dcols = vec![0.0; ckk * positions];
                    for n in 0..geom.batch {
                        dcols.fill(0.0);
                        kernels::matmul_tn_acc(
                            ckk,
                            geom.c_out,
                            positions,
                            wd,
                            &g[n * geom.c_out * positions..(n + 1) * geom.c_out * positions],
                            &mut dcols,
                        );
                        kernels::col2im_acc(&dcols, geom, &mut dx[n * image..(n + 1) * image]);
                    }
                    contribs.push((*x, dx));
                }
            }
            Back::BilinearResize {
                x,
                channels,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                if want(self, *x) {
                    let ys = kernels::resize_axis(*in_h, *out_h);
                    let xs = kernels::resize_axis(*in_w, *out_w);
                    let mut dx = vec![0.0; channels * in_h * in_w];
                    kernels::bilinear_backward(g, *channels, *in_h, *in_w, &ys, &xs, &mut dx);
                    contribs.push((*x, dx));
                }
            }
            Back::CrossEntropy {
                logits,
                probs,
                targets,
                ignore,
                classes,
                valid,
            } => {
                if want(self, *logits) {
                    let positions = targets.len();
                    let scale = g[0] / *valid as f64;
                    let mut dl = vec![0.0; classes * positions];
                    for (p, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for c in 0..*classes {
                            let idx = c * positions + p;
                            let onehot = if c as u32 == t { 1.0 } else { 0.0 };
                            dl[idx] = (probs[idx] - onehot) * scale;
                        }
                    }
                    contribs.push((*logits, dl));
                }
            }
            Back::Bce { pred, target, mean } => {
                if want(self, *pred) {
                    let scale = if *mean { g[0] / target.len() as f64 } else { g[0] };
                    let dp = self
                        .val(*pred)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&p, &b)| {
                            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                                // clamped region: flat in p
                                0.0
                            } else {
                                scale * (p - b) / (p * (1.0 - p))
                            }
                        })
                        .collect();
                    contribs.push((*pred, dp));
                }
            }
            Back::GatedCrossEntropy {
                logits,
                probs,
                targets,
                selected,
                classes,
            } => {
                if want(self, *logits) && !selected.is_empty() {
                    let positions = targets.len();
                    let scale = g[0] / selected.len() as f64;
                    let mut dl = vec![0.0; classes * positions];
                    for (si, &p) in selected.iter().enumerate() {
                        let p = p as usize;
                        let t = targets[p];
                        for c in 0..*classes {
                            let onehot = if c as u32 == t { 1.0 } else { 0.0 };
                            dl[c * positions + p] =
                                (probs[c * selected.len() + si] - onehot) * scale;
                        }
                    }
                    contribs.push((*logits, dl));
                }
            }
            Back::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if want(self, v) {
                        contribs.push((v, vec![g[0] * c]));
                    }
                }
            }
        }
        contribs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err, ABS_FLOOR, FD_STEP};
    use alloc::vec::Vec;

    fn leafed(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap(), true)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = leafed(&mut tape, &[2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]);
        let m = leafed(&mut tape, &[2, 2], alloc::vec![3.0, 4.0, 5.0, 6.0]);
        let prod = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(prod).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = leafed(&mut tape, &[1, 2], alloc::vec![1.0, 2.0]);
        let b = leafed(&mut tape, &[2, 1], alloc::vec![3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = leafed(&mut tape, &[1, 2], alloc::vec![1.0, 2.0]);
        let b = leafed(&mut tape, &[3, 1], alloc::vec![1.0, 2.0, 3.0]);
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, alloc::vec![1, 2]);
                assert_eq!(rhs, alloc::vec![3, 1]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_hand_result() {
        // d/dA sum(A·B) at A=[[1,2]], B=[[3],[4]] is [[3,4]].
        let mut tape = Tape::new();
        let a = leafed(&mut tape, &[1, 2], alloc::vec![1.0, 2.0]);
        let b = leafed(&mut tape, &[2, 1], alloc::vec![3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        let s = tape.reduce_sum(ab);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);

        // And against central differences.
        let numeric = central_diff(&[1.0, 2.0], FD_STEP, |x| {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::new(alloc::vec![1, 2], x.to_vec()).unwrap(), true);
            let b = t.leaf(Tensor::new(alloc::vec![2, 1], alloc::vec![3.0, 4.0]).unwrap(), false);
            let ab = t.matmul(a, b).unwrap();
            let s = t.reduce_sum(ab);
            t.value(s).item()
        });
        assert!(max_rel_err(&[3.0, 4.0], &numeric, ABS_FLOOR) < 1e-6);
    }

    #[test]
    fn softmax_reference_values() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[3], alloc::vec![0.0, 0.0, 0.0]);
        let y = tape.softmax_axis(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = leafed(&mut tape, &[2], alloc::vec![2.0, 0.0]);
        let y = tape.softmax_axis(x, 0).unwrap();
        let e2 = crate::fmath::exp(2.0);
        let expect = [e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)];
        let got = tape.value(y).data();
        assert!((got[0] - expect[0]).abs() < 1e-15);
        assert!((got[1] - expect[1]).abs() < 1e-15);
        assert!((got[0] - 0.8808).abs() < 1e-4);

        // Stabilization: huge but equal logits do not overflow.
        let x = leafed(&mut tape, &[2], alloc::vec![1000.0, 1000.0]);
        let y = tape.softmax_axis(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_slices_sum_to_one_on_both_axes() {
        let mut tape = Tape::new();
        let x = leafed(
            &mut tape,
            &[3, 4],
            (0..12).map(|i| ((i * 7919) % 23) as f64 * 0.3 - 3.0).collect(),
        );
        for axis in 0..2 {
            let y = tape.softmax_axis(x, axis).unwrap();
            let v = tape.value(y);
            let (rows, cols) = (3, 4);
            if axis == 0 {
                for j in 0..cols {
                    let s: f64 = (0..rows).map(|i| v.at2(i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            } else {
                for i in 0..rows {
                    let s: f64 = (0..cols).map(|j| v.at2(i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
            assert!(v.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert!(tape.softmax_axis(x, 2).is_err());
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[1, 3, 3], (0..9).map(|i| i as f64).collect());
        let w = leafed(&mut tape, &[1, 1, 1, 1], alloc::vec![1.0]);
        let b = leafed(&mut tape, &[1], alloc::vec![0.0]);
        let y = tape.conv2d(x, w, b, 1, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[1, 3, 3], alloc::vec![1.0; 9]);
        let w = leafed(&mut tape, &[1, 1, 3, 3], alloc::vec![1.0; 9]);
        let b = leafed(&mut tape, &[1], alloc::vec![0.0]);
        let y = tape.conv2d(x, w, b, 1, 1, 0).unwrap();
        assert_eq!(tape.shape(y), [1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_rejects_bad_configs() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[1, 2, 2], alloc::vec![0.0; 4]);
        let w_even = leafed(&mut tape, &[1, 1, 2, 2], alloc::vec![0.0; 4]);
        let b = leafed(&mut tape, &[1], alloc::vec![0.0]);
        assert!(matches!(tape.conv2d(x, w_even, b, 1, 1, 0), Err(Error::Config(_))));
        // 3×3 kernel on a 2×2 input without padding: negative output size.
        let w3 = leafed(&mut tape, &[1, 1, 3, 3], alloc::vec![0.0; 9]);
        assert!(matches!(tape.conv2d(x, w3, b, 1, 1, 0), Err(Error::Config(_))));
    }

    /// Shared helper: compare analytic gradients of a scalar objective
    /// against central differences for one leaf.
    fn conv_case(stride: usize, dilation: usize, padding: usize, shape: &[usize]) {
        let mk_data = |n: usize, salt: f64| -> Vec<f64> {
            (0..n).map(|i| crate::fmath::exp(((i as f64) * salt).sin() * 0.5) - 1.0).collect()
        };
        let c_in = if shape.len() == 4 { shape[1] } else { shape[0] };
        let c_out = 2;
        let w_shape = alloc::vec![c_out, c_in, 3, 3];
        let x0 = mk_data(shape.iter().product(), 0.7);
        let w0 = mk_data(w_shape.iter().product(), 1.3);
        let b0 = mk_data(c_out, 2.1);

        let run = |x: &[f64], w: &[f64], b: &[f64], grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap(), grads);
            let wv = tape.leaf(Tensor::new(w_shape.clone(), w.to_vec()).unwrap(), grads);
            let bv = tape.leaf(Tensor::new(alloc::vec![c_out], b.to_vec()).unwrap(), grads);
            let y = tape.conv2d(xv, wv, bv, stride, dilation, padding).unwrap();
            let y = tape.relu(y);
            let s = tape.reduce_sum(y);
            (tape, xv, wv, bv, s)
        };

        let (mut tape, xv, wv, bv, s) = run(&x0, &w0, &b0, true);
        tape.backward(s).unwrap();
        for (leaf, data, which) in [(xv, &x0, 0), (wv, &w0, 1), (bv, &b0, 2)] {
            let analytic = tape.grad(leaf).unwrap().to_vec();
            let numeric = central_diff(data, FD_STEP, |probe| {
                let (t, _, _, _, s) = match which {
                    0 => run(probe, &w0, &b0, false),
                    1 => run(&x0, probe, &b0, false),
                    _ => run(&x0, &w0, probe, false),
                };
                t.value(s).item()
            });
            let err = max_rel_err(&analytic, &numeric, ABS_FLOOR);
            assert!(err < 1e-6, "conv grad err {err} (leaf {which}, stride {stride}, dil {dilation})");
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        conv_case(1, 1, 1, &[2, 3, 5, 5]);
        conv_case(2, 1, 1, &[3, 6, 6]);
        conv_case(1, 2, 2, &[2, 5, 5]);
    }

    #[test]
    fn bilinear_resize_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[1, 2, 2], alloc::vec![1.0, 3.0, 5.0, 7.0]);
        let same = tape.bilinear_resize(x, 2, 2).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());

        // Half-pixel-centers doubling of [[1,3],[5,7]]: 1D weights are
        // [1, (.75,.25), (.25,.75), 1] along each axis.
        let up = tape.bilinear_resize(x, 4, 4).unwrap();
        let expect = [
            1.0, 1.5, 2.5, 3.0, //
            2.0, 2.5, 3.5, 4.0, //
            4.0, 4.5, 5.5, 6.0, //
            5.0, 5.5, 6.5, 7.0,
        ];
        let got = tape.value(up).data();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn bilinear_resize_gradients_match_finite_differences() {
        let x0: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).cos()).collect();
        let run = |x: &[f64], grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(alloc::vec![2, 3, 4], x.to_vec()).unwrap(), grads);
            let y = tape.bilinear_resize(xv, 5, 7).unwrap();
            // weight positions unevenly so the scatter pattern matters
            let w = Tensor::from_fn(&[2, 5, 7], |i| ((i % 5) as f64) - 2.0);
            let wv = tape.constant(w);
            let p = tape.mul(y, wv).unwrap();
            let s = tape.reduce_sum(p);
            (tape, xv, s)
        };
        let (mut tape, xv, s) = run(&x0, true);
        tape.backward(s).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = central_diff(&x0, FD_STEP, |p| {
            let (t, _, s) = run(p, false);
            t.value(s).item()
        });
        assert!(max_rel_err(&analytic, &numeric, ABS_FLOOR) < 1e-6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[2, 2], alloc::vec![0.3, -1.0, 2.0, 5.0]);
        let s = tape.reduce_sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[2], alloc::vec![1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.reduce_sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error_and_non_scalar_rejected() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[2], alloc::vec![1.0, 2.0]);
        let s = tape.reduce_sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), Error::BackwardConsumed);

        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[2], alloc::vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_on_detached_graph_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let y = tape.scale(x, 2.0);
        assert_eq!(tape.backward(y).unwrap_err(), Error::DetachedGraph);
    }

    #[test]
    fn untouched_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[2], alloc::vec![1.0, 2.0]);
        let unused = leafed(&mut tape, &[3], alloc::vec![0.0; 3]);
        let s = tape.reduce_sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        // conv -> relu -> mul -> mean, gradient w.r.t. everything.
        let x0: Vec<f64> = (0..1 * 4 * 4).map(|i| (i as f64 * 0.9).sin()).collect();
        let w0: Vec<f64> = (0..2 * 1 * 3 * 3).map(|i| (i as f64 * 0.51).cos() * 0.6).collect();
        let run = |x: &[f64], w: &[f64], grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(alloc::vec![1, 4, 4], x.to_vec()).unwrap(), grads);
            let wv = tape.leaf(Tensor::new(alloc::vec![2, 1, 3, 3], w.to_vec()).unwrap(), grads);
            let bv = tape.constant(Tensor::new(alloc::vec![2], alloc::vec![0.05, -0.2]).unwrap());
            let y = tape.conv2d(xv, wv, bv, 1, 1, 1).unwrap();
            let r = tape.relu(y);
            let sg = tape.sigmoid(r);
            let m = tape.reduce_mean(sg);
            (tape, xv, wv, m)
        };
        let (mut tape, xv, wv, m) = run(&x0, &w0, true);
        tape.backward(m).unwrap();
        for (leaf, data, is_x) in [(xv, &x0, true), (wv, &w0, false)] {
            let analytic = tape.grad(leaf).unwrap().to_vec();
            let numeric = central_diff(data, FD_STEP, |p| {
                let (t, _, _, m) = if is_x { run(p, &w0, false) } else { run(&x0, p, false) };
                t.value(m).item()
            });
            assert!(max_rel_err(&analytic, &numeric, ABS_FLOOR) < 1e-6);
        }
    }

    #[test]
    fn elementwise_ops_forward_and_reverse() {
        let mut tape = Tape::new();
        let a = leafed(&mut tape, &[3], alloc::vec![1.0, -2.0, 0.5]);
        let b = leafed(&mut tape, &[3], alloc::vec![4.0, 0.25, -1.0]);
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum).data(), &[5.0, -1.75, -0.5]);
        let prod = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(prod).data(), &[4.0, -0.5, -0.5]);
        let scaled = tape.scale(a, -2.0);
        assert_eq!(tape.value(scaled).data(), &[-2.0, 4.0, -1.0]);
        let rl = tape.relu(a);
        assert_eq!(tape.value(rl).data(), &[1.0, 0.0, 0.5]);

        let shape_err = {
            let c = leafed(&mut tape, &[2], alloc::vec![0.0, 0.0]);
            tape.add(a, c)
        };
        assert!(shape_err.is_err());

        // log is floored, not -inf.
        let z = leafed(&mut tape, &[2], alloc::vec![0.0, 1.0]);
        let lg = tape.log(z);
        assert!(tape.value(lg).data()[0].is_finite());
        assert_eq!(tape.value(lg).data()[1], 0.0);
    }

    #[test]
    fn sigmoid_log_gradients_match_finite_differences() {
        let x0 = [0.3, -1.2, 2.0, 0.01];
        let run = |x: &[f64], grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(alloc::vec![4], x.to_vec()).unwrap(), grads);
            let s = tape.sigmoid(xv);
            let l = tape.log(s);
            let m = tape.reduce_mean(l);
            (tape, xv, m)
        };
        let (mut tape, xv, m) = run(&x0, true);
        tape.backward(m).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = central_diff(&x0, FD_STEP, |p| {
            let (t, _, m) = run(p, false);
            t.value(m).item()
        });
        assert!(max_rel_err(&analytic, &numeric, ABS_FLOOR) < 1e-6);
    }

    #[test]
    fn reshape_transpose_concat_round_trip_gradients() {
        let x0: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect();
        let run = |x: &[f64], grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(alloc::vec![2, 3], x.to_vec()).unwrap(), grads);
            let t = tape.transpose2d(xv).unwrap();
            let r = tape.reshape(t, &[6]).unwrap();
            let doubled = tape.scale(r, 2.0);
            let cat = tape.concat0(&[r, doubled]).unwrap();
            let wv = tape.constant(Tensor::from_fn(&[12], |i| 1.0 + (i % 3) as f64));
            let p = tape.mul(cat, wv).unwrap();
            let s = tape.reduce_sum(p);
            (tape, xv, s)
        };
        let (mut tape, xv, s) = run(&x0, true);
        tape.backward(s).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = central_diff(&x0, FD_STEP, |p| {
            let (t, _, s) = run(p, false);
            t.value(s).item()
        });
        assert!(max_rel_err(&analytic, &numeric, ABS_FLOOR) < 1e-10);

        // transpose forward correctness
        let mut tape = Tape::new();
        let xv = leafed(&mut tape, &[2, 3], x0.clone());
        let t = tape.transpose2d(xv).unwrap();
        assert_eq!(tape.shape(t), [3, 2]);
        assert_eq!(tape.value(t).at2(2, 1), tape.value(xv).at2(1, 2));
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let x0: Vec<f64> = alloc::vec![0.2, -1.0, 0.7, 2.0, -0.3, 0.0];
        let run = |x: &[f64], grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(alloc::vec![2, 3], x.to_vec()).unwrap(), grads);
            let y = tape.softmax_axis(xv, 1).unwrap();
            let w = tape.constant(Tensor::from_fn(&[2, 3], |i| (i as f64) - 2.5));
            let p = tape.mul(y, w).unwrap();
            let s = tape.reduce_sum(p);
            (tape, xv, s)
        };
        let (mut tape, xv, s) = run(&x0, true);
        tape.backward(s).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = central_diff(&x0, FD_STEP, |p| {
            let (t, _, s) = run(p, false);
            t.value(s).item()
        });
        assert!(max_rel_err(&analytic, &numeric, ABS_FLOOR) < 1e-6);
    }

    #[test]
    fn fused_loss_gradients_match_finite_differences() {
        // cross_entropy, bce, gated cross-entropy in one pass each.
        let logits0: Vec<f64> = (0..3 * 4).map(|i| (i as f64 * 0.63).sin()).collect();
        let targets = [0u32, 2, 1, 2];
        let gate = Tensor::new(alloc::vec![4], alloc::vec![0.9, 0.1, 0.85, 0.2]).unwrap();

        let run_ce = |x: &[f64], grads: bool| {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::new(alloc::vec![3, 4], x.to_vec()).unwrap(), grads);
            let v = tape.cross_entropy(l, &targets, 255).unwrap();
            (tape, l, v)
        };
        let (mut tape, l, v) = run_ce(&logits0, true);
        tape.backward(v).unwrap();
        let analytic = tape.grad(l).unwrap().to_vec();
        let numeric = central_diff(&logits0, FD_STEP, |p| {
            let (t, _, v) = run_ce(p, false);
            t.value(v).item()
        });
        assert!(max_rel_err(&analytic, &numeric, ABS_FLOOR) < 1e-6);

        let pred0: Vec<f64> = alloc::vec![0.2, 0.7, 0.45, 0.95];
        let target = [0.0, 1.0, 1.0, 0.0];
        for mean in [true, false] {
            let run_bce = |x: &[f64], grads: bool| {
                let mut tape = Tape::new();
                let p = tape.leaf(Tensor::new(alloc::vec![4], x.to_vec()).unwrap(), grads);
                let v = tape.bce(p, &target, mean).unwrap();
                (tape, p, v)
            };
            let (mut tape, p, v) = run_bce(&pred0, true);
            tape.backward(v).unwrap();
            let analytic = tape.grad(p).unwrap().to_vec();
            let numeric = central_diff(&pred0, FD_STEP, |probe| {
                let (t, _, v) = run_bce(probe, false);
                t.value(v).item()
            });
            assert!(max_rel_err(&analytic, &numeric, ABS_FLOOR) < 1e-6);
        }

        let run_gated = |x: &[f64], grads: bool| {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::new(alloc::vec![3, 4], x.to_vec()).unwrap(), grads);
            let g = tape.constant(gate.clone());
            let v = tape.gated_cross_entropy(l, &targets, 255, g, 0.8).unwrap();
            (tape, l, v)
        };
        let (mut tape, l, v) = run_gated(&logits0, true);
        tape.backward(v).unwrap();
        let analytic = tape.grad(l).unwrap().to_vec();
        let numeric = central_diff(&logits0, FD_STEP, |p| {
            let (t, _, v) = run_gated(p, false);
            t.value(v).item()
        });
        assert!(max_rel_err(&analytic, &numeric, ABS_FLOOR) < 1e-6);
    }

    #[test]
    fn gradients_accumulate_across_multiple_uses() {
        // y = x + x -> dy/dx = 2
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[2], alloc::vec![1.0, -1.0]);
        let y = tape.add(x, x).unwrap();
        let s = tape.reduce_sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_fn(&[4, 4], |i| (i as f64 * 1.7).sin()), true);
            let sm = tape.softmax_axis(x, 1).unwrap();
            let s = tape.reduce_sum(sm);
            let _ = s;
            let mut t2 = tape;
            let v = t2.value(sm).data().to_vec();
            v
        };
        assert_eq!(build(), build());
    }
}
