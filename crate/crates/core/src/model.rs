//! The segmentation network: a small dilated backbone, the multi-scale
//! boundary extractor (MSB), boundary-guided cross-attention (BCA), a
//! non-local self-attention baseline, and the segmentation / auxiliary
//! heads.
//!
//! Attention layout: with `A1`/`B1` the projected query/key maps reshaped
//! to C×N, the similarity matrix is `S = B1ᵀ·A1`, so `S[i][j]` couples key
//! position `i` with query position `j`. A softmax over `i` (axis 0) makes
//! every column a distribution over key positions, and the aggregated
//! update `A2·F` is added residually onto `A`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::kernels;
use crate::tensor::{Tape, Tensor, Var};

/// Channel widths and head sizes. The defaults are desk scale; the paper
/// configuration (stage widths 256/512/1024/2048, unify 256, attention 256)
/// is representable but not practical to train here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Output channels of backbone stages 1–4.
    pub widths: [usize; 4],
    /// Channels each stage is unified to inside MSB.
    pub unify_channels: usize,
    /// Channels of the query/key projections.
    pub attn_channels: usize,
    /// Mid channels of the segmentation head.
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            widths: [8, 16, 24, 32],
            unify_channels: 8,
            attn_channels: 16,
            head_channels: 32,
        }
    }
}

/// Which context-aggregation variant a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// MSB + boundary-guided cross-attention.
    BcaNet,
    /// Self-attention over all positions (keys from the mainstream).
    NonLocal,
    /// Plain dilated backbone and head.
    Fcn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BcaNet => "bcanet",
            ModelKind::NonLocal => "nonlocal",
            ModelKind::Fcn => "fcn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bcanet" => Some(ModelKind::BcaNet),
            "nonlocal" => Some(ModelKind::NonLocal),
            "fcn" => Some(ModelKind::Fcn),
            _ => None,
        }
    }
}

// ── Parameter containers ────────────────────────────────────────────
//
// Generic over the payload so the same structure describes stored tensors
// (Params<Tensor>) and their tape bindings (Params<Var>).

#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    /// stages[i] = [conv1, conv2]
    pub stages: [[Conv<T>; 2]; 4],
}

#[derive(Debug, Clone)]
pub struct Msb<T> {
    pub unify: [Conv<T>; 4],
    pub edge: [Conv<T>; 4],
}

#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub query: Conv<T>,
    pub key: Conv<T>,
    pub value1: Conv<T>,
    pub value2: Conv<T>,
}

#[derive(Debug, Clone)]
pub struct SegHead<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub classify: Conv<T>,
}

#[derive(Debug, Clone)]
pub struct AuxHead<T> {
    pub conv: Conv<T>,
    pub classify: Conv<T>,
}

#[derive(Debug, Clone)]
pub struct Params<T> {
    pub backbone: Backbone<T>,
    pub msb: Option<Msb<T>>,
    pub attention: Option<Attention<T>>,
    pub seg_head: SegHead<T>,
    pub aux_head: AuxHead<T>,
}

impl<T> Conv<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn pick(&self, leaf: &str) -> Option<&T> {
        match leaf {
            "weight" => Some(&self.weight),
            "bias" => Some(&self.bias),
            _ => None,
        }
    }

    fn pick_mut(&mut self, leaf: &str) -> Option<&mut T> {
        match leaf {
            "weight" => Some(&mut self.weight),
            "bias" => Some(&mut self.bias),
            _ => None,
        }
    }
}

fn stage_index(s: &str) -> Option<usize> {
    match s {
        "stage1" | "unify1" | "edge1" => Some(0),
        "stage2" | "unify2" | "edge2" => Some(1),
        "stage3" | "unify3" | "edge3" => Some(2),
        "stage4" | "unify4" | "edge4" => Some(3),
        _ => None,
    }
}

impl<T> Params<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Params<U> {
        Params {
            backbone: Backbone {
                stages: core::array::from_fn(|s| {
                    core::array::from_fn(|c| self.backbone.stages[s][c].map(f))
                }),
            },
            msb: self.msb.as_ref().map(|m| Msb {
                unify: core::array::from_fn(|i| m.unify[i].map(f)),
                edge: core::array::from_fn(|i| m.edge[i].map(f)),
            }),
            attention: self.attention.as_ref().map(|a| Attention {
                query: a.query.map(f),
                key: a.key.map(f),
                value1: a.value1.map(f),
                value2: a.value2.map(f),
            }),
            seg_head: SegHead {
                conv1: self.seg_head.conv1.map(f),
                conv2: self.seg_head.conv2.map(f),
                classify: self.seg_head.classify.map(f),
            },
            aux_head: AuxHead {
                conv: self.aux_head.conv.map(f),
                classify: self.aux_head.classify.map(f),
            },
        }
    }

    /// Every parameter with its stable, unique name. The order defines the
    /// checkpoint and optimizer-state layout.
    pub fn named(&self) -> Vec<(String, &T)> {
        fn conv<'a, T>(name: String, c: &'a Conv<T>, out: &mut Vec<(String, &'a T)>) {
            out.push((format!("{name}.weight"), &c.weight));
            out.push((format!("{name}.bias"), &c.bias));
        }
        let mut out = Vec::new();
        for (s, stage) in self.backbone.stages.iter().enumerate() {
            for (c, p) in stage.iter().enumerate() {
                conv(format!("backbone.stage{}.conv{}", s + 1, c + 1), p, &mut out);
            }
        }
        if let Some(m) = &self.msb {
            for (i, p) in m.unify.iter().enumerate() {
                conv(format!("msb.unify{}", i + 1), p, &mut out);
            }
            for (i, p) in m.edge.iter().enumerate() {
                conv(format!("msb.edge{}", i + 1), p, &mut out);
            }
        }
        if let Some(a) = &self.attention {
            conv(String::from("attention.query"), &a.query, &mut out);
            conv(String::from("attention.key"), &a.key, &mut out);
            conv(String::from("attention.value1"), &a.value1, &mut out);
            conv(String::from("attention.value2"), &a.value2, &mut out);
        }
        conv(String::from("seg_head.conv1"), &self.seg_head.conv1, &mut out);
        conv(String::from("seg_head.conv2"), &self.seg_head.conv2, &mut out);
        conv(String::from("seg_head.classify"), &self.seg_head.classify, &mut out);
        conv(String::from("aux_head.conv"), &self.aux_head.conv, &mut out);
        conv(String::from("aux_head.classify"), &self.aux_head.classify, &mut out);
        out
    }

    /// Mutable counterpart of [`Params::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        fn conv<'a, T>(name: String, c: &'a mut Conv<T>, out: &mut Vec<(String, &'a mut T)>) {
            out.push((format!("{name}.weight"), &mut c.weight));
            out.push((format!("{name}.bias"), &mut c.bias));
        }
        let mut out = Vec::new();
        for (s, stage) in self.backbone.stages.iter_mut().enumerate() {
            for (c, p) in stage.iter_mut().enumerate() {
                conv(format!("backbone.stage{}.conv{}", s + 1, c + 1), p, &mut out);
            }
        }
        if let Some(m) = &mut self.msb {
            for (i, p) in m.unify.iter_mut().enumerate() {
                conv(format!("msb.unify{}", i + 1), p, &mut out);
            }
            for (i, p) in m.edge.iter_mut().enumerate() {
                conv(format!("msb.edge{}", i + 1), p, &mut out);
            }
        }
        if let Some(a) = &mut self.attention {
            conv(String::from("attention.query"), &mut a.query, &mut out);
            conv(String::from("attention.key"), &mut a.key, &mut out);
            conv(String::from("attention.value1"), &mut a.value1, &mut out);
            conv(String::from("attention.value2"), &mut a.value2, &mut out);
        }
        conv(String::from("seg_head.conv1"), &mut self.seg_head.conv1, &mut out);
        conv(String::from("seg_head.conv2"), &mut self.seg_head.conv2, &mut out);
        conv(String::from("seg_head.classify"), &mut self.seg_head.classify, &mut out);
        conv(String::from("aux_head.conv"), &mut self.aux_head.conv, &mut out);
        conv(String::from("aux_head.classify"), &mut self.aux_head.classify, &mut out);
        out
    }

    /// Visit every parameter with its stable, unique name.
    pub fn visit(&self, f: &mut impl FnMut(&str, &T)) {
        for (name, t) in self.named() {
            f(&name, t);
        }
    }

    fn conv_by_path(&self, parts: &[&str]) -> Option<&Conv<T>> {
        match parts {
            ["backbone", stage, conv] => {
                let s = stage_index(stage)?;
                let c = match *conv {
                    "conv1" => 0,
                    "conv2" => 1,
                    _ => return None,
                };
                Some(&self.backbone.stages[s][c])
            }
            ["msb", which] => {
                let m = self.msb.as_ref()?;
                let i = stage_index(which)?;
                if which.starts_with("unify") {
                    Some(&m.unify[i])
                } else {
                    Some(&m.edge[i])
                }
            }
            ["attention", which] => {
                let a = self.attention.as_ref()?;
                match *which {
                    "query" => Some(&a.query),
                    "key" => Some(&a.key),
                    "value1" => Some(&a.value1),
                    "value2" => Some(&a.value2),
                    _ => None,
                }
            }
            ["seg_head", which] => match *which {
                "conv1" => Some(&self.seg_head.conv1),
                "conv2" => Some(&self.seg_head.conv2),
                "classify" => Some(&self.seg_head.classify),
                _ => None,
            },
            ["aux_head", which] => match *which {
                "conv" => Some(&self.aux_head.conv),
                "classify" => Some(&self.aux_head.classify),
                _ => None,
            },
            _ => None,
        }
    }

    fn conv_by_path_mut(&mut self, parts: &[&str]) -> Option<&mut Conv<T>> {
        match parts {
            ["backbone", stage, conv] => {
                let s = stage_index(stage)?;
                let c = match *conv {
                    "conv1" => 0,
                    "conv2" => 1,
                    _ => return None,
                };
                Some(&mut self.backbone.stages[s][c])
            }
            ["msb", which] => {
                let m = self.msb.as_mut()?;
                let i = stage_index(which)?;
                if which.starts_with("unify") {
                    Some(&mut m.unify[i])
                } else {
                    Some(&mut m.edge[i])
                }
            }
            ["attention", which] => {
                let a = self.attention.as_mut()?;
                match *which {
                    "query" => Some(&mut a.query),
                    "key" => Some(&mut a.key),
                    "value1" => Some(&mut a.value1),
                    "value2" => Some(&mut a.value2),
                    _ => None,
                }
            }
            ["seg_head", which] => match *which {
                "conv1" => Some(&mut self.seg_head.conv1),
                "conv2" => Some(&mut self.seg_head.conv2),
                "classify" => Some(&mut self.seg_head.classify),
                _ => None,
            },
            ["aux_head", which] => match *which {
                "conv" => Some(&mut self.aux_head.conv),
                "classify" => Some(&mut self.aux_head.classify),
                _ => None,
            },
            _ => None,
        }
    }

    /// Look up a parameter by its visit name.
    pub fn by_name(&self, name: &str) -> Option<&T> {
        let parts: Vec<&str> = name.split('.').collect();
        let (leaf, path) = parts.split_last()?;
        self.conv_by_path(path)?.pick(leaf)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut T> {
        let parts: Vec<&str> = name.split('.').collect();
        let (leaf, path) = parts.split_last()?;
        let leaf = *leaf;
        self.conv_by_path_mut(path)?.pick_mut(leaf)
    }
}

// ── The model ───────────────────────────────────────────────────────

/// A complete model: kind, widths, and parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

/// One backbone stage output with its downsampling factor.
#[derive(Debug)]
pub struct StageFeature {
    pub var: Var,
    pub stride: usize,
}

/// The four stage outputs (strides 4, 8, 8, 8).
#[derive(Debug)]
pub struct BackboneFeatures {
    pub stages: [StageFeature; 4],
}

/// MSB outputs: concatenated boundary features at 1/8 scale plus the four
/// per-scale edge maps upsampled to input resolution.
#[derive(Debug)]
pub struct MsbOutput {
    pub boundary_feature: Var,
    pub edge_maps: Vec<Var>,
}

/// Everything one forward pass produces.
#[derive(Debug)]
pub struct ForwardOutput {
    pub seg_logits: Var,
    pub aux_logits: Var,
    /// Per-scale edge maps at full resolution (empty without MSB).
    pub edge_maps: Vec<Var>,
    /// Mean of the four edge maps; gates the attention loss.
    pub fused_edge: Option<Var>,
    /// N×N attention matrix (columns sum to one), when the model has one.
    pub attention: Option<Var>,
    /// Feature map entering the segmentation head.
    pub aggregated: Var,
    pub attn_h: usize,
    pub attn_w: usize,
}

fn he_conv(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Conv<Tensor> {
    let std = crate::fmath::sqrt(2.0 / (c_in * k * k) as f64);
    let weight = Tensor::from_fn(&[c_out, c_in, k, k], |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    });
    Conv {
        weight,
        bias: Tensor::zeros(&[c_out]),
    }
}

impl Model {
    /// Random initialization (He-style normal weights, zero biases),
    /// deterministic in `seed`. FCN models carry neither MSB nor attention
    /// parameters; non-local models key on the mainstream features.
    pub fn init(kind: ModelKind, config: ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_INIT);
        let [w1, w2, w3, w4] = config.widths;
        let backbone = Backbone {
            stages: [
                [he_conv(w1, 3, 3, &mut r), he_conv(w1, w1, 3, &mut r)],
                [he_conv(w2, w1, 3, &mut r), he_conv(w2, w2, 3, &mut r)],
                [he_conv(w3, w2, 3, &mut r), he_conv(w3, w3, 3, &mut r)],
                [he_conv(w4, w3, 3, &mut r), he_conv(w4, w4, 3, &mut r)],
            ],
        };
        let msb = match kind {
            ModelKind::BcaNet => {
                let u = config.unify_channels;
                Some(Msb {
                    unify: [
                        he_conv(u, w1, 3, &mut r),
                        he_conv(u, w2, 3, &mut r),
                        he_conv(u, w3, 3, &mut r),
                        he_conv(u, w4, 3, &mut r),
                    ],
                    edge: [
                        he_conv(1, u, 1, &mut r),
                        he_conv(1, u, 1, &mut r),
                        he_conv(1, u, 1, &mut r),
                        he_conv(1, u, 1, &mut r),
                    ],
                })
            }
            _ => None,
        };
        let attention = match kind {
            ModelKind::BcaNet => Some(Self::init_attention(&config, config.unify_channels * 4, &mut r)),
            ModelKind::NonLocal => Some(Self::init_attention(&config, config.widths[3], &mut r)),
            ModelKind::Fcn => None,
        };
        let c1 = config.widths[3];
        let h = config.head_channels;
        let classes = config.num_classes;
        let seg_head = SegHead {
            conv1: he_conv(h, c1, 3, &mut r),
            conv2: he_conv(h, h, 3, &mut r),
            classify: he_conv(classes, h, 1, &mut r),
        };
        let w3 = config.widths[2];
        let aux_head = AuxHead {
            conv: he_conv(w3, w3, 3, &mut r),
            classify: he_conv(classes, w3, 1, &mut r),
        };
        Model {
            kind,
            config,
            params: Params {
                backbone,
                msb,
                attention,
                seg_head,
                aux_head,
            },
        }
    }

    fn init_attention(config: &ModelConfig, key_channels: usize, r: &mut impl Rng) -> Attention<Tensor> {
        let c1 = config.widths[3];
        let c = config.attn_channels;
        Attention {
            query: he_conv(c, c1, 1, r),
            key: he_conv(c, key_channels, 1, r),
            value1: he_conv(c1, c1, 1, r),
            value2: he_conv(c1, c1, 1, r),
        }
    }

    /// Register every parameter on a tape. With `trainable`, gradients are
    /// retained for all of them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params<Var> {
        self.params.map(&mut |t: &Tensor| tape.leaf(t.clone(), trainable))
    }

    /// Clone of every parameter with its name, in visit order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Full forward pass per the network layout: backbone, then the
    /// kind-specific context aggregation, then both heads.
    pub fn forward(&self, tape: &mut Tape, bound: &Params<Var>, image: Var) -> Result<ForwardOutput> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ShapeMismatch {
                op: "forward image",
                lhs: shape,
                rhs: vec![3, 0, 0],
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let feats = backbone_forward(tape, &bound.backbone, image)?;
        let main = feats.stages[3].var;
        let (aggregated, attention, edge_maps, fused_edge) = match self.kind {
            ModelKind::Fcn => (main, None, Vec::new(), None),
            ModelKind::NonLocal => {
                let attn = bound.attention.as_ref().expect("nonlocal params");
                let (d, f) = nonlocal_forward(tape, attn, main)?;
                (d, Some(f), Vec::new(), None)
            }
            ModelKind::BcaNet => {
                let msb = bound.msb.as_ref().expect("bcanet params");
                let out = msb_forward(tape, msb, &feats, h, w)?;
                let attn = bound.attention.as_ref().expect("bcanet params");
                let (d, f) = bca_forward(tape, attn, main, out.boundary_feature)?;
                let fused = mean_maps(tape, &out.edge_maps)?;
                (d, Some(f), out.edge_maps, Some(fused))
            }
        };
        let seg_logits = seg_head(tape, &bound.seg_head, aggregated, h, w)?;
        let aux_logits = aux_head(tape, &bound.aux_head, feats.stages[2].var, h, w)?;
        Ok(ForwardOutput {
            seg_logits,
            aux_logits,
            edge_maps,
            fused_edge,
            attention,
            aggregated,
            attn_h: h / 8,
            attn_w: w / 8,
        })
    }
}

/// Mean of same-shaped maps.
fn mean_maps(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    let mut acc = maps[0];
    for &m in &maps[1..] {
        acc = tape.add(acc, m)?;
    }
    Ok(tape.scale(acc, 1.0 / maps.len() as f64))
}

fn conv_block(
    tape: &mut Tape,
    x: Var,
    conv: &Conv<Var>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<Var> {
    let y = tape.conv2d(x, conv.weight, conv.bias, stride, dilation, padding)?;
    Ok(tape.relu(y))
}

/// Four-stage dilated backbone. Stage 1 lands at 1/4 resolution, stages
/// 2–4 share 1/8; stages 3 and 4 use dilations 2 and 4. Input sides must
/// be divisible by 8 (no silent padding).
pub fn backbone_forward(tape: &mut Tape, bb: &Backbone<Var>, image: Var) -> Result<BackboneFeatures> {
    let shape = tape.shape(image);
    let (h, w) = (shape[1], shape[2]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be divisible by 8"
        )));
    }
    // (stride, dilation) per conv; padding keeps k=3 size-preserving.
    let plan: [[(usize, usize); 2]; 4] = [
        [(2, 1), (2, 1)],
        [(2, 1), (1, 1)],
        [(1, 2), (1, 2)],
        [(1, 4), (1, 4)],
    ];
    let mut x = image;
    let mut stages = Vec::with_capacity(4);
    for (s, convs) in bb.stages.iter().enumerate() {
        for (c, conv) in convs.iter().enumerate() {
            let (stride, dilation) = plan[s][c];
            x = conv_block(tape, x, conv, stride, dilation, dilation)?;
        }
        stages.push(StageFeature {
            var: x,
            stride: if s == 0 { 4 } else { 8 },
        });
    }
    let mut it = stages.into_iter();
    Ok(BackboneFeatures {
        stages: [
            it.next().expect("four stages"),
            it.next().expect("four stages"),
            it.next().expect("four stages"),
            it.next().expect("four stages"),
        ],
    })
}

/// Multi-scale boundary extractor. Each stage is unified to a common
/// channel width by a 3×3 conv, mapped to a sigmoid edge map by a 1×1
/// conv, and the unified features are resized to 1/8 scale and
/// concatenated; edge maps are upsampled to input resolution.
pub fn msb_forward(
    tape: &mut Tape,
    msb: &Msb<Var>,
    feats: &BackboneFeatures,
    in_h: usize,
    in_w: usize,
) -> Result<MsbOutput> {
    let (h8, w8) = (in_h / 8, in_w / 8);
    let mut unified_at_8 = Vec::with_capacity(4);
    let mut edge_maps = Vec::with_capacity(4);
    for (i, stage) in feats.stages.iter().enumerate() {
        let u = conv_block(tape, stage.var, &msb.unify[i], 1, 1, 1)?;
        let logits = tape.conv2d(u, msb.edge[i].weight, msb.edge[i].bias, 1, 1, 0)?;
        let edge = tape.sigmoid(logits);
        edge_maps.push(tape.bilinear_resize(edge, in_h, in_w)?);
        let u8 = if stage.stride == 8 {
            u
        } else {
            tape.bilinear_resize(u, h8, w8)?
        };
        unified_at_8.push(u8);
    }
    let boundary_feature = tape.concat0(&unified_at_8)?;
    Ok(MsbOutput {
        boundary_feature,
        edge_maps,
    })
}

fn attention_core(
    tape: &mut Tape,
    attn: &Attention<Var>,
    a: Var,
    key_source: Var,
) -> Result<(Var, Var)> {
    let a_shape = tape.shape(a).to_vec();
    let k_shape = tape.shape(key_source).to_vec();
    if a_shape[1..] != k_shape[1..] {
        return Err(Error::ShapeMismatch {
            op: "attention spatial dims",
            lhs: a_shape,
            rhs: k_shape,
        });
    }
    let (c1, h, w) = (a_shape[0], a_shape[1], a_shape[2]);
    let n = h * w;
    let c = tape.shape(attn.query.weight)[0];

    let a1 = tape.conv2d(a, attn.query.weight, attn.query.bias, 1, 1, 0)?;
    let b1 = tape.conv2d(key_source, attn.key.weight, attn.key.bias, 1, 1, 0)?;
    let a1m = tape.reshape(a1, &[c, n])?;
    let b1m = tape.reshape(b1, &[c, n])?;
    let b1t = tape.transpose2d(b1m)?;
    let sim = tape.matmul(b1t, a1m)?;
    // Column-stochastic: normalize over key positions (rows).
    let f = tape.softmax_axis(sim, 0)?;

    let v = conv_block(tape, a, &attn.value1, 1, 1, 0)?;
    let a2 = tape.conv2d(v, attn.value2.weight, attn.value2.bias, 1, 1, 0)?;
    let a2m = tape.reshape(a2, &[c1, n])?;
    let agg = tape.matmul(a2m, f)?;
    let agg3 = tape.reshape(agg, &[c1, h, w])?;
    // The residual add is part of the contract, not an option.
    let d = tape.add(a, agg3)?;
    Ok((d, f))
}

/// Boundary-guided context aggregation: queries from the mainstream `A`,
/// keys from the MSB boundary features `B`. Returns the enhanced feature
/// map `D = A + A2·F` and the attention matrix `F`.
pub fn bca_forward(tape: &mut Tape, attn: &Attention<Var>, a: Var, b: Var) -> Result<(Var, Var)> {
    attention_core(tape, attn, a, b)
}

/// Non-local baseline: identical wiring with keys from `A` itself.
pub fn nonlocal_forward(tape: &mut Tape, attn: &Attention<Var>, a: Var) -> Result<(Var, Var)> {
    attention_core(tape, attn, a, a)
}

/// Segmentation head: two 3×3 convs, a 1×1 classifier, then bilinear
/// upsampling of the logits to the requested size.
pub fn seg_head(tape: &mut Tape, head: &SegHead<Var>, d: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let x = conv_block(tape, d, &head.conv1, 1, 1, 1)?;
    let x = conv_block(tape, x, &head.conv2, 1, 1, 1)?;
    let logits = tape.conv2d(x, head.classify.weight, head.classify.bias, 1, 1, 0)?;
    tape.bilinear_resize(logits, out_h, out_w)
}

/// Auxiliary head on the stage-3 features.
pub fn aux_head(tape: &mut Tape, head: &AuxHead<Var>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let x = conv_block(tape, x, &head.conv, 1, 1, 1)?;
    let logits = tape.conv2d(x, head.classify.weight, head.classify.bias, 1, 1, 0)?;
    tape.bilinear_resize(logits, out_h, out_w)
}

// ── Gradcheck plumbing ──────────────────────────────────────────────

/// Visit the tape bindings of a model's parameters by name.
pub fn visit_bound(_model: &Model, bound: &Params<Var>, f: &mut impl FnMut(&str, Var)) {
    bound.visit(&mut |name, var| f(name, *var));
}

pub fn param_by_name<'m>(model: &'m Model, name: &str) -> Option<&'m Tensor> {
    model.params.by_name(name)
}

pub fn param_by_name_mut<'m>(model: &'m mut Model, name: &str) -> Option<&'m mut Tensor> {
    model.params.by_name_mut(name)
}

// ── Attention matrix views ──────────────────────────────────────────

/// Extracted N×N attention with its spatial grid, for inspection and
/// visualization.
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    values: Tensor,
    spatial_h: usize,
    spatial_w: usize,
}

impl AttentionMatrix {
    pub fn new(values: Tensor, spatial_h: usize, spatial_w: usize) -> Result<Self> {
        let n = spatial_h * spatial_w;
        if values.shape() != [n, n] {
            return Err(Error::ShapeMismatch {
                op: "AttentionMatrix",
                lhs: values.shape().to_vec(),
                rhs: vec![n, n],
            });
        }
        Ok(AttentionMatrix {
            values,
            spatial_h,
            spatial_w,
        })
    }

    pub fn n(&self) -> usize {
        self.spatial_h * self.spatial_w
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.spatial_h, self.spatial_w)
    }

    /// Column `j` (the attention distribution feeding pixel `j`) reshaped
    /// to the spatial grid.
    pub fn column(&self, j: usize) -> Result<Tensor> {
        let n = self.n();
        if j >= n {
            return Err(Error::IndexOutOfRange { index: j, len: n });
        }
        let data: Vec<f64> = (0..n).map(|i| self.values.at2(i, j)).collect();
        Tensor::new(vec![self.spatial_h, self.spatial_w], data)
    }
}

/// Column `j` of an attention matrix as a spatial map.
pub fn attention_column(f: &AttentionMatrix, j: usize) -> Result<Tensor> {
    f.column(j)
}

// ── Masked aggregation (the boundary-restriction approximation) ─────

/// Eq.-2 aggregation with the softmax renormalized over masked-in key
/// positions only. Value-level (no tape); used to quantify how well the
/// full attention is approximated by its boundary restriction.
pub fn bca_masked_aggregate(
    a: &Tensor,
    b: &Tensor,
    mask: &[bool],
    attn: &Attention<Tensor>,
) -> Result<Tensor> {
    let (c1, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if b.shape()[1..] != a.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "bca_masked_aggregate",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = h * w;
    if mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "bca_masked_aggregate mask",
            lhs: vec![mask.len()],
            rhs: vec![n],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyContext);
    }
    let c2 = b.shape()[0];
    let c = attn.query.weight.shape()[0];

    let a1 = conv1x1_value(&attn.query, a.data(), c1, n);
    let b1 = conv1x1_value(&attn.key, b.data(), c2, n);
    // v = relu(value1(a)); a2 = value2(v)
    let mut v = conv1x1_value(&attn.value1, a.data(), c1, n);
    for x in &mut v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let a2 = conv1x1_value(&attn.value2, &v, c1, n);

    // sim[i][j] = b1_i · a1_j
    let mut sim = vec![0.0; n * n];
    kernels::matmul_tn_acc(n, c, n, &b1, &a1, &mut sim);

    // Masked column-wise softmax over i. Mirrors the unmasked softmax
    // kernel operation-for-operation so a full mask reproduces
    // `bca_forward` bitwise.
    let mut fmat = vec![0.0; n * n];
    for j in 0..n {
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            if mask[i] {
                max = crate::fmath::max(max, sim[i * n + j]);
            }
        }
        let mut sum = 0.0;
        for i in 0..n {
            if mask[i] {
                let e = crate::fmath::exp(sim[i * n + j] - max);
                fmat[i * n + j] = e;
                sum += e;
            }
        }
        let inv = 1.0 / sum;
        for i in 0..n {
            fmat[i * n + j] *= inv;
        }
    }

    // D = A + A2·F̃, with the product accumulated exactly like the tape's
    // matmul so the full-mask case stays bit-identical.
    let mut agg = vec![0.0; c1 * n];
    kernels::matmul_nn_acc(c1, n, n, &a2, &fmat, &mut agg);
    let out: Vec<f64> = a.data().iter().zip(&agg).map(|(x, y)| x + y).collect();
    Tensor::new(vec![c1, h, w], out)
}

/// 1×1 convolution applied directly to a flattened C×N value buffer.
fn conv1x1_value(conv: &Conv<Tensor>, x: &[f64], c_in: usize, n: usize) -> Vec<f64> {
    let c_out = conv.weight.shape()[0];
    debug_assert_eq!(conv.weight.shape()[1], c_in);
    let mut out = vec![0.0; c_out * n];
    kernels::matmul_nn_acc(c_out, c_in, n, conv.weight.data(), x, &mut out);
    for (co, &bias) in conv.bias.data().iter().enumerate() {
        for o in &mut out[co * n..(co + 1) * n] {
            *o += bias;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmath;

    fn forward_once(kind: ModelKind, h: usize, w: usize) -> (Model, Tape, ForwardOutput) {
        let model = Model::init(kind, ModelConfig::default(), 11);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let image = tape.constant(Tensor::from_fn(&[3, h, w], |i| (i as f64 * 0.013).sin() * 0.5));
        let out = model.forward(&mut tape, &bound, image).unwrap();
        (model, tape, out)
    }

    #[test]
    fn backbone_stage_sizes_follow_input() {
        for (hw, expect_s1, expect_rest) in [(64usize, 16usize, 8usize), (128, 32, 16)] {
            let model = Model::init(ModelKind::Fcn, ModelConfig::default(), 3);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let image = tape.constant(Tensor::zeros(&[3, hw, hw]));
            let feats = backbone_forward(&mut tape, &bound.backbone, image).unwrap();
            let s1 = tape.shape(feats.stages[0].var).to_vec();
            assert_eq!(s1[1..], [expect_s1, expect_s1]);
            for s in 1..4 {
                let sh = tape.shape(feats.stages[s].var).to_vec();
                assert_eq!(sh[1..], [expect_rest, expect_rest], "stage {s}");
            }
            assert!(tape.value(feats.stages[3].var).is_finite());
        }
    }

    #[test]
    fn backbone_rejects_indivisible_input() {
        let model = Model::init(ModelKind::Fcn, ModelConfig::default(), 3);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let image = tape.constant(Tensor::zeros(&[3, 60, 64]));
        let err = backbone_forward(&mut tape, &bound.backbone, image).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn backbone_zero_image_gives_finite_outputs() {
        let model = Model::init(ModelKind::Fcn, ModelConfig::default(), 5);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let image = tape.constant(Tensor::zeros(&[3, 32, 32]));
        let feats = backbone_forward(&mut tape, &bound.backbone, image).unwrap();
        for s in &feats.stages {
            assert!(tape.value(s.var).is_finite());
        }
    }

    #[test]
    fn msb_concat_width_is_four_times_unify() {
        let (_model, tape, out) = forward_once(ModelKind::BcaNet, 64, 64);
        assert_eq!(out.edge_maps.len(), 4);
        for e in &out.edge_maps {
            assert_eq!(tape.shape(*e), [1, 64, 64]);
            assert!(tape
                .value(*e)
                .data()
                .iter()
                .all(|&v| v > 0.0 && v < 1.0));
        }
        // paper configuration: unify 256 over 4 stages concatenates to 1024
        assert_eq!(256 * 4, 1024);
    }

    #[test]
    fn msb_boundary_feature_shape() {
        let model = Model::init(ModelKind::BcaNet, ModelConfig::default(), 9);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let image = tape.constant(Tensor::zeros(&[3, 64, 64]));
        let feats = backbone_forward(&mut tape, &bound.backbone, image).unwrap();
        let msb = bound.msb.as_ref().unwrap();
        let out = msb_forward(&mut tape, msb, &feats, 64, 64).unwrap();
        assert_eq!(
            tape.shape(out.boundary_feature),
            [model.config.unify_channels * 4, 8, 8]
        );
    }

    #[test]
    fn full_forward_shapes_and_determinism() {
        let (_m, tape, out) = forward_once(ModelKind::BcaNet, 64, 64);
        assert_eq!(tape.shape(out.seg_logits), [4, 64, 64]);
        assert_eq!(tape.shape(out.aux_logits), [4, 64, 64]);
        assert_eq!(tape.shape(out.attention.unwrap()), [64, 64]);
        assert_eq!((out.attn_h, out.attn_w), (8, 8));

        let (_m2, tape2, out2) = forward_once(ModelKind::BcaNet, 64, 64);
        assert_eq!(tape.value(out.seg_logits), tape2.value(out2.seg_logits));
    }

    #[test]
    fn attention_columns_are_stochastic() {
        let (_m, tape, out) = forward_once(ModelKind::BcaNet, 32, 32);
        let f = tape.value(out.attention.unwrap());
        let n = f.shape()[0];
        for j in 0..n {
            let mut sum = 0.0;
            for i in 0..n {
                let v = f.at2(i, j);
                assert!(v > 0.0 && v < 1.0);
                sum += v;
            }
            assert!((sum - 1.0).abs() < 1e-9, "column {j} sums to {sum}");
        }
    }

    #[test]
    fn fcn_has_no_msb_or_attention_params() {
        let model = Model::init(ModelKind::Fcn, ModelConfig::default(), 2);
        let mut names = alloc::vec::Vec::new();
        model.params.visit(&mut |n, _| names.push(String::from(n)));
        assert!(names.iter().all(|n| !n.starts_with("msb.") && !n.starts_with("attention.")));
        // And bcanet has both.
        let model = Model::init(ModelKind::BcaNet, ModelConfig::default(), 2);
        let mut names = alloc::vec::Vec::new();
        model.params.visit(&mut |n, _| names.push(String::from(n)));
        assert!(names.iter().any(|n| n == "msb.unify1.weight"));
        assert!(names.iter().any(|n| n == "attention.key.weight"));
    }

    #[test]
    fn visit_names_are_unique_and_navigable() {
        let mut model = Model::init(ModelKind::BcaNet, ModelConfig::default(), 4);
        let mut names = alloc::vec::Vec::new();
        model.params.visit(&mut |n, _| names.push(String::from(n)));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for n in &names {
            assert!(model.params.by_name(n).is_some(), "by_name failed for {n}");
            assert!(model.params.by_name_mut(n).is_some());
        }
    }

    #[test]
    fn residual_identity_when_value_path_is_zero() {
        for kind in [ModelKind::BcaNet, ModelKind::NonLocal] {
            let mut model = Model::init(kind, ModelConfig::default(), 17);
            for name in ["attention.value1", "attention.value2"] {
                for leaf in ["weight", "bias"] {
                    let t = model.params.by_name_mut(&format!("{name}.{leaf}")).unwrap();
                    *t = Tensor::zeros(t.shape());
                }
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let image = tape.constant(Tensor::from_fn(&[3, 32, 32], |i| (i as f64 * 0.7).cos()));
            let out = model.forward(&mut tape, &bound, image).unwrap();
            let feats = {
                let mut t2 = Tape::new();
                let b2 = model.bind(&mut t2, false);
                let img2 = t2.constant(Tensor::from_fn(&[3, 32, 32], |i| (i as f64 * 0.7).cos()));
                let f = backbone_forward(&mut t2, &b2.backbone, img2).unwrap();
                t2.value(f.stages[3].var).clone()
            };
            let diff = tape
                .value(out.aggregated)
                .data()
                .iter()
                .zip(feats.data())
                .map(|(a, b)| fmath::abs(a - b))
                .fold(0.0, fmath::max);
            assert_eq!(diff, 0.0, "{kind:?} residual identity");
        }
    }

    #[test]
    fn bca_two_pixel_hand_case() {
        // N=2, C=1: B1=[1,0], A1=[2,1], A2=[1,3].
        let ident = |w: f64, b: f64| Conv {
            weight: Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap(),
            bias: Tensor::new(vec![1], vec![b]).unwrap(),
        };
        let attn_t = Attention {
            query: ident(1.0, 0.0),
            key: ident(1.0, 0.0),
            // v = relu(1·A) = A, A2 = -2·v + 5 => A=[2,1] -> A2=[1,3]
            value1: ident(1.0, 0.0),
            value2: ident(-2.0, 5.0),
        };
        let a = Tensor::new(vec![1, 1, 2], vec![2.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();

        let mut tape = Tape::new();
        let attn = Attention {
            query: Conv {
                weight: tape.leaf(attn_t.query.weight.clone(), false),
                bias: tape.leaf(attn_t.query.bias.clone(), false),
            },
            key: Conv {
                weight: tape.leaf(attn_t.key.weight.clone(), false),
                bias: tape.leaf(attn_t.key.bias.clone(), false),
            },
            value1: Conv {
                weight: tape.leaf(attn_t.value1.weight.clone(), false),
                bias: tape.leaf(attn_t.value1.bias.clone(), false),
            },
            value2: Conv {
                weight: tape.leaf(attn_t.value2.weight.clone(), false),
                bias: tape.leaf(attn_t.value2.bias.clone(), false),
            },
        };
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let (d, f) = bca_forward(&mut tape, &attn, av, bv).unwrap();

        // Column 0: softmax over [B1_1·A1_1, B1_2·A1_1] = [2, 0].
        let e2 = (2.0f64).exp();
        let f00 = e2 / (e2 + 1.0);
        let f10 = 1.0 / (e2 + 1.0);
        let fv = tape.value(f);
        assert!((fv.at2(0, 0) - f00).abs() < 1e-12);
        assert!((fv.at2(1, 0) - f10).abs() < 1e-12);
        assert!((f00 - 0.8808).abs() < 1e-4 && (f10 - 0.1192).abs() < 1e-4);

        let dv = tape.value(d);
        let expect_d0 = 2.0 + (f00 * 1.0 + f10 * 3.0);
        assert!((dv.data()[0] - expect_d0).abs() < 1e-12);
        assert!((dv.data()[0] - (2.0 + 1.2384)).abs() < 1e-4);

        // Masked with the full mask reproduces the tape result exactly.
        let masked = bca_masked_aggregate(&a, &b, &[true, true], &attn_t).unwrap();
        assert_eq!(masked.data(), dv.data());

        // A single masked-in position collapses to D_j = A_j + A2_p.
        let single = bca_masked_aggregate(&a, &b, &[false, true], &attn_t).unwrap();
        assert!((single.data()[0] - (2.0 + 3.0)).abs() < 1e-12);
        assert!((single.data()[1] - (1.0 + 3.0)).abs() < 1e-12);

        // All-zero mask is an error, not a NaN.
        assert_eq!(
            bca_masked_aggregate(&a, &b, &[false, false], &attn_t).unwrap_err(),
            Error::EmptyContext
        );
    }

    #[test]
    fn nonlocal_two_pixel_hand_case() {
        // Keys come from A itself: B1 = proj_k(A) = A = [2,1].
        let ident = |w: f64, b: f64| Conv {
            weight: Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap(),
            bias: Tensor::new(vec![1], vec![b]).unwrap(),
        };
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, c: &Conv<Tensor>| Conv {
            weight: tape.leaf(c.weight.clone(), false),
            bias: tape.leaf(c.bias.clone(), false),
        };
        let attn_t = Attention {
            query: ident(1.0, 0.0),
            key: ident(1.0, 0.0),
            value1: ident(1.0, 0.0),
            value2: ident(-2.0, 5.0),
        };
        let attn = Attention {
            query: mk(&mut tape, &attn_t.query),
            key: mk(&mut tape, &attn_t.key),
            value1: mk(&mut tape, &attn_t.value1),
            value2: mk(&mut tape, &attn_t.value2),
        };
        let av = tape.constant(Tensor::new(vec![1, 1, 2], vec![2.0, 1.0]).unwrap());
        let (d, f) = nonlocal_forward(&mut tape, &attn, av).unwrap();
        // Column 0: softmax over [A_1·A_1, A_2·A_1] = [4, 2].
        let fv = tape.value(f);
        let e = (4.0f64 - 2.0).exp();
        let f00 = e / (e + 1.0);
        assert!((fv.at2(0, 0) - f00).abs() < 1e-12);
        let col_sums: Vec<f64> = (0..2).map(|j| fv.at2(0, j) + fv.at2(1, j)).collect();
        for s in col_sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let dv = tape.value(d);
        let expect_d0 = 2.0 + (f00 * 1.0 + (1.0 - f00) * 3.0);
        assert!((dv.data()[0] - expect_d0).abs() < 1e-12);
    }

    #[test]
    fn uniform_attention_when_keys_vanish() {
        // Zero key projection => all similarities equal => F uniform, and
        // D_j = A_j + mean_i(A2_i).
        let mut model = Model::init(ModelKind::BcaNet, ModelConfig::default(), 23);
        for leaf in ["weight", "bias"] {
            let t = model.params.by_name_mut(&format!("attention.key.{leaf}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let image = tape.constant(Tensor::from_fn(&[3, 16, 16], |i| (i as f64 * 0.31).sin()));
        let out = model.forward(&mut tape, &bound, image).unwrap();
        let f = tape.value(out.attention.unwrap());
        let n = f.shape()[0];
        for idx in 0..n * n {
            assert!((f.data()[idx] - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn seg_head_constant_bias_gives_constant_planes() {
        let mut model = Model::init(ModelKind::Fcn, ModelConfig::default(), 31);
        let names: Vec<String> = ["seg_head.conv1", "seg_head.conv2", "seg_head.classify"]
            .iter()
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .collect();
        for n in &names {
            let t = model.params.by_name_mut(n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let betas = [0.5, -1.25, 2.0, 0.0];
        *model.params.by_name_mut("seg_head.classify.bias").unwrap() =
            Tensor::new(vec![4], betas.to_vec()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let image = tape.constant(Tensor::from_fn(&[3, 16, 16], |i| i as f64));
        let out = model.forward(&mut tape, &bound, image).unwrap();
        let logits = tape.value(out.seg_logits);
        for (c, &beta) in betas.iter().enumerate() {
            for p in 0..16 * 16 {
                assert_eq!(logits.data()[c * 256 + p], beta);
            }
        }
    }

    #[test]
    fn attention_column_sums_to_one_and_checks_range() {
        let (_m, tape, out) = forward_once(ModelKind::BcaNet, 16, 16);
        let f = AttentionMatrix::new(tape.value(out.attention.unwrap()).clone(), out.attn_h, out.attn_w)
            .unwrap();
        let col = attention_column(&f, 1).unwrap();
        assert_eq!(col.shape(), [2, 2]);
        let sum: f64 = col.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(col.data().iter().all(|&v| v >= 0.0));
        assert!(attention_column(&f, 4).is_err());

        // Uniform matrix: every column is the constant 1/N map.
        let n = 4;
        let uni = AttentionMatrix::new(Tensor::full(&[n, n], 1.0 / n as f64), 2, 2).unwrap();
        let col = uni.column(3).unwrap();
        assert!(col.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
