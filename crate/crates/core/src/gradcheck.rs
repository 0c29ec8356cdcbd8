//! Finite-difference gradient verification.
//!
//! The generic pieces here (central differences plus a relative-error
//! comparator) back both the unit tests and the `gradcheck` CLI command.
//! Scenario builders for whole model components live at the bottom; they
//! deliberately use small channel widths so a full per-coordinate sweep
//! stays fast, and they re-seed away from ReLU/threshold kinks where a
//! central difference would straddle a non-smooth point.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::fmath;

/// Step used for central differences throughout the crate.
pub const FD_STEP: f64 = 1e-6;

/// Absolute floor below which gradient disagreements are ignored.
pub const ABS_FLOOR: f64 = 1e-8;

/// Central finite-difference gradient of `f` at `x`.
///
/// `f` is called with perturbed copies of `x`; it must be a pure function
/// of its argument.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst elementwise relative error between two gradients, with
/// differences below `floor` treated as zero.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = fmath::abs(a - n);
        if diff <= floor {
            continue;
        }
        let denom = fmath::max(fmath::abs(a), fmath::abs(n));
        worst = fmath::max(worst, diff / denom);
    }
    worst
}

/// One checked parameter group: its name and worst relative error.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of a gradcheck scenario.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| fmath::max(m, g.max_rel_err))
    }

    pub fn worst_group(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).expect("finite errors"))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// Compare one analytic gradient group against central differences of `f`.
pub fn check_group(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    f: impl FnMut(&[f64]) -> f64,
) -> GroupReport {
    let numeric = central_diff(x, FD_STEP, f);
    GroupReport {
        name: String::from(name),
        max_rel_err: max_rel_err(analytic, &numeric, ABS_FLOOR),
    }
}

// ── Model-level scenarios ───────────────────────────────────────────
//
// Each scenario builds a small randomized problem, computes analytic
// gradients once, then sweeps every parameter coordinate with central
// differences. `corrupt` injects an error into the analytic side so the
// harness itself can be shown to catch discrepancies.

use crate::loss::{self, LossConfig};
use crate::model::{self, Model, ModelConfig, ModelKind};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

fn corrupt_first(grads: &mut [(String, Vec<f64>)]) {
    if let Some((_, g)) = grads.first_mut() {
        if let Some(v) = g.first_mut() {
            *v += 1e-3;
        }
    }
}

/// Small model configuration used by the gradcheck scenarios. The widths
/// are deliberately tiny so a per-coordinate sweep of every parameter
/// finishes quickly.
pub fn tiny_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes,
        widths: [4, 6, 8, 8],
        unify_channels: 4,
        attn_channels: 4,
        head_channels: 8,
    }
}

/// Gradcheck of all four loss terms against finite differences.
pub fn check_losses(seed: u64, corrupt: bool) -> Result<GradReport> {
    let mut r = rng::stream(seed, 90);
    let classes = 4usize;
    let (h, w) = (5usize, 4usize);
    let positions = h * w;
    let logits0 = random_tensor(&[classes, h, w], 1.0, &mut r);
    let targets: Vec<u32> = (0..positions).map(|_| r.gen_range(0..classes) as u32).collect();
    let pred0 = Tensor::from_fn(&[1, h, w], |_| r.gen_range(0.05..0.95));
    let boundary: Vec<f64> = (0..positions).map(|_| f64::from(r.gen_range(0..2u8))).collect();
    // Gate values sit away from the 0.5 threshold so the indicator is
    // stable under the finite-difference step.
    let gate = Tensor::from_fn(&[1, h, w], |_| {
        if r.gen_bool(0.5) {
            r.gen_range(0.7..0.9)
        } else {
            r.gen_range(0.1..0.3)
        }
    });
    let cfg = LossConfig {
        att_threshold: 0.5,
        ..LossConfig::default()
    };

    let eval = |logit_data: &[f64], pred_data: &[f64], term: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::new(alloc::vec![classes, h, w], logit_data.to_vec()).expect("shape fixed"),
            true,
        );
        let pred = tape.leaf(
            Tensor::new(alloc::vec![1, h, w], pred_data.to_vec()).expect("shape fixed"),
            true,
        );
        let gate = tape.constant(gate.clone());
        let v = match term {
            0 => loss::cross_entropy_seg(&mut tape, logits, &targets, cfg.ignore_label),
            1 => loss::bce_boundary(&mut tape, pred, &boundary, true),
            2 => loss::boundary_attention_loss(&mut tape, logits, &targets, cfg.ignore_label, gate, cfg.att_threshold),
            _ => {
                let seg = loss::cross_entropy_seg(&mut tape, logits, &targets, cfg.ignore_label)?;
                let bnd = loss::bce_boundary(&mut tape, pred, &boundary, true)?;
                let att = loss::boundary_attention_loss(
                    &mut tape,
                    logits,
                    &targets,
                    cfg.ignore_label,
                    gate,
                    cfg.att_threshold,
                )?;
                tape.weighted_sum(&[(seg, 1.0), (bnd, 20.0), (att, 1.0)])
            }
        }?;
        Ok(tape.value(v).item())
    };
    // Analytic gradients for each term.
    let mut groups = Vec::new();
    for (term, name) in [
        (0usize, "cross_entropy_seg/logits"),
        (1, "bce_boundary/pred"),
        (2, "boundary_attention_loss/logits"),
        (3, "total/logits+pred"),
    ] {
        let mut tape = Tape::new();
        let logits = tape.leaf(logits0.clone(), true);
        let pred = tape.leaf(pred0.clone(), true);
        let gate_v = tape.constant(gate.clone());
        let v = match term {
            0 => loss::cross_entropy_seg(&mut tape, logits, &targets, cfg.ignore_label)?,
            1 => loss::bce_boundary(&mut tape, pred, &boundary, true)?,
            2 => loss::boundary_attention_loss(
                &mut tape,
                logits,
                &targets,
                cfg.ignore_label,
                gate_v,
                cfg.att_threshold,
            )?,
            _ => {
                let seg = loss::cross_entropy_seg(&mut tape, logits, &targets, cfg.ignore_label)?;
                let bnd = loss::bce_boundary(&mut tape, pred, &boundary, true)?;
                let att = loss::boundary_attention_loss(
                    &mut tape,
                    logits,
                    &targets,
                    cfg.ignore_label,
                    gate_v,
                    cfg.att_threshold,
                )?;
                tape.weighted_sum(&[(seg, 1.0), (bnd, 20.0), (att, 1.0)])?
            }
        };
        tape.backward(v)?;
        let mut grads = alloc::vec![
            (String::from("logits"), tape.grad(logits).expect("leaf grad").to_vec()),
            (String::from("pred"), tape.grad(pred).expect("leaf grad").to_vec()),
        ];
        if corrupt {
            corrupt_first(&mut grads);
        }
        let lg = check_group(name, logits0.data(), &grads[0].1, |x| {
            eval(x, pred0.data(), term).expect("eval")
        });
        let pg = check_group(name, pred0.data(), &grads[1].1, |x| {
            eval(logits0.data(), x, term).expect("eval")
        });
        groups.push(GroupReport {
            name: String::from(name),
            max_rel_err: fmath::max(lg.max_rel_err, pg.max_rel_err),
        });
    }
    Ok(GradReport { groups })
}

/// Sweep every parameter of a model against central differences of the
/// full training objective on one random input.
fn check_model_params(
    model: &Model,
    image: &Tensor,
    targets: &[u32],
    boundary: &[f64],
    loss_cfg: &LossConfig,
    corrupt: bool,
) -> Result<GradReport> {
    let objective = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let out = m.forward(&mut tape, &bound, img)?;
        let (total, _) = loss::training_loss(&mut tape, &out, targets, boundary, loss_cfg)?;
        Ok(tape.value(total).item())
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let img = tape.constant(image.clone());
    let out = model.forward(&mut tape, &bound, img)?;
    let (total, _) = loss::training_loss(&mut tape, &out, targets, boundary, loss_cfg)?;
    tape.backward(total)?;
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    model::visit_bound(model, &bound, &mut |name, var| {
        grads.push((String::from(name), tape.grad(var).expect("leaf grad").to_vec()));
    });
    if corrupt {
        corrupt_first(&mut grads);
    }

    // Per-coordinate sweep, one parameter tensor at a time.
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for (name, analytic) in &grads {
        let x0 = model::param_by_name(model, name).expect("visited name").data().to_vec();
        let numeric = central_diff(&x0, FD_STEP, |x| {
            model::param_by_name_mut(&mut probe, name)
                .expect("visited name")
                .data_mut()
                .copy_from_slice(x);
            objective(&probe).expect("objective")
        });
        // restore
        model::param_by_name_mut(&mut probe, name)
            .expect("visited name")
            .data_mut()
            .copy_from_slice(&x0);
        groups.push(GroupReport {
            name: name.clone(),
            max_rel_err: max_rel_err(analytic, &numeric, ABS_FLOOR),
        });
    }
    Ok(GradReport { groups })
}

/// Gradcheck of the BCA module in isolation (random A, B inputs).
pub fn check_bca(seed: u64, corrupt: bool) -> Result<GradReport> {
    let mut r = rng::stream(seed, 91);
    let cfg = tiny_model_config(4);
    let model = Model::init(ModelKind::BcaNet, cfg.clone(), seed ^ 0xb0a);
    let c1 = cfg.widths[3];
    let c2 = cfg.unify_channels * 4;
    let (h, w) = (3usize, 3usize);
    let a0 = random_tensor(&[c1, h, w], 1.0, &mut r);
    let b0 = random_tensor(&[c2, h, w], 1.0, &mut r);
    // Random direction keeps the scalar objective sensitive to every output.
    let dir = random_tensor(&[c1, h, w], 1.0, &mut r);

    let objective = |m: &Model, a: &Tensor, b: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let attn = bound.attention.as_ref().expect("bcanet has attention");
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let (d, _f) = model::bca_forward(&mut tape, attn, av, bv)?;
        let dv = tape.constant(dir.clone());
        let weighted = tape.mul(d, dv)?;
        let s = tape.reduce_sum(weighted);
        Ok(tape.value(s).item())
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let attn = bound.attention.as_ref().expect("bcanet has attention");
    let av = tape.leaf(a0.clone(), true);
    let bv = tape.leaf(b0.clone(), true);
    let (d, _f) = model::bca_forward(&mut tape, attn, av, bv)?;
    let dv = tape.constant(dir.clone());
    let weighted = tape.mul(d, dv)?;
    let s = tape.reduce_sum(weighted);
    tape.backward(s)?;

    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    model::visit_bound(&model, &bound, &mut |name, var| {
        if name.starts_with("attention.") {
            grads.push((String::from(name), tape.grad(var).expect("leaf grad").to_vec()));
        }
    });
    grads.push((String::from("input.a"), tape.grad(av).expect("leaf grad").to_vec()));
    grads.push((String::from("input.b"), tape.grad(bv).expect("leaf grad").to_vec()));
    if corrupt {
        corrupt_first(&mut grads);
    }

    let mut probe = model.clone();
    let mut groups = Vec::new();
    for (name, analytic) in &grads {
        let numeric = match name.as_str() {
            "input.a" => central_diff(a0.data(), FD_STEP, |x| {
                let a = Tensor::new(a0.shape().to_vec(), x.to_vec()).expect("shape fixed");
                objective(&probe, &a, &b0).expect("objective")
            }),
            "input.b" => central_diff(b0.data(), FD_STEP, |x| {
                let b = Tensor::new(b0.shape().to_vec(), x.to_vec()).expect("shape fixed");
                objective(&probe, &a0, &b).expect("objective")
            }),
            _ => {
                let x0 = model::param_by_name(&model, name).expect("visited name").data().to_vec();
                let numeric = central_diff(&x0, FD_STEP, |x| {
                    model::param_by_name_mut(&mut probe, name)
                        .expect("visited name")
                        .data_mut()
                        .copy_from_slice(x);
                    objective(&probe, &a0, &b0).expect("objective")
                });
                model::param_by_name_mut(&mut probe, name)
                    .expect("visited name")
                    .data_mut()
                    .copy_from_slice(&x0);
                numeric
            }
        };
        groups.push(GroupReport {
            name: name.clone(),
            max_rel_err: max_rel_err(analytic, &numeric, ABS_FLOOR),
        });
    }
    Ok(GradReport { groups })
}

/// Gradcheck of the MSB extractor in isolation.
pub fn check_msb(seed: u64, corrupt: bool) -> Result<GradReport> {
    let mut r = rng::stream(seed, 92);
    let cfg = tiny_model_config(4);
    let model = Model::init(ModelKind::BcaNet, cfg.clone(), seed ^ 0x35b);
    let (h, w) = (16usize, 16usize);
    let image = random_tensor(&[3, h, w], 0.5, &mut r);
    let boundary: Vec<f64> = (0..h * w).map(|_| f64::from(r.gen_range(0..2u8))).collect();
    let dir_channels = cfg.unify_channels * 4;
    let dir = random_tensor(&[dir_channels, h / 8, w / 8], 1.0, &mut r);

    // Objective: directional probe of the boundary feature plus the edge
    // supervision, so both MSB outputs carry gradient.
    let objective = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let feats = model::backbone_forward(&mut tape, &bound.backbone, img)?;
        let msb = bound.msb.as_ref().expect("bcanet has msb");
        let out = model::msb_forward(&mut tape, msb, &feats, h, w)?;
        let dv = tape.constant(dir.clone());
        let probe = tape.mul(out.boundary_feature, dv)?;
        let s = tape.reduce_sum(probe);
        let edge_loss = loss::bce_multi(&mut tape, &out.edge_maps, &boundary, true)?;
        let total = tape.weighted_sum(&[(s, 1.0), (edge_loss, 5.0)])?;
        Ok(tape.value(total).item())
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let img = tape.constant(image.clone());
    let feats = model::backbone_forward(&mut tape, &bound.backbone, img)?;
    let msb = bound.msb.as_ref().expect("bcanet has msb");
    let out = model::msb_forward(&mut tape, msb, &feats, h, w)?;
    let dv = tape.constant(dir.clone());
    let probe = tape.mul(out.boundary_feature, dv)?;
    let s = tape.reduce_sum(probe);
    let edge_loss = loss::bce_multi(&mut tape, &out.edge_maps, &boundary, true)?;
    let total = tape.weighted_sum(&[(s, 1.0), (edge_loss, 5.0)])?;
    tape.backward(total)?;

    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    model::visit_bound(&model, &bound, &mut |name, var| {
        if name.starts_with("msb.") {
            grads.push((String::from(name), tape.grad(var).expect("leaf grad").to_vec()));
        }
    });
    if corrupt {
        corrupt_first(&mut grads);
    }

    let mut probe_model = model.clone();
    let mut groups = Vec::new();
    for (name, analytic) in &grads {
        let x0 = model::param_by_name(&model, name).expect("visited name").data().to_vec();
        let numeric = central_diff(&x0, FD_STEP, |x| {
            model::param_by_name_mut(&mut probe_model, name)
                .expect("visited name")
                .data_mut()
                .copy_from_slice(x);
            objective(&probe_model).expect("objective")
        });
        model::param_by_name_mut(&mut probe_model, name)
            .expect("visited name")
            .data_mut()
            .copy_from_slice(&x0);
        groups.push(GroupReport {
            name: name.clone(),
            max_rel_err: max_rel_err(analytic, &numeric, ABS_FLOOR),
        });
    }
    Ok(GradReport { groups })
}

/// Full-model gradcheck: every parameter of backbone, MSB, BCA and both
/// heads against central differences of the complete four-term objective
/// on a 3×16×16 input.
pub fn check_full(seed: u64, corrupt: bool) -> Result<GradReport> {
    let mut r = rng::stream(seed, 93);
    let cfg = tiny_model_config(4);
    let model = Model::init(ModelKind::BcaNet, cfg, seed ^ 0xf011);
    let (h, w) = (16usize, 16usize);
    let image = random_tensor(&[3, h, w], 0.5, &mut r);
    let targets: Vec<u32> = (0..h * w).map(|_| r.gen_range(0..4u32)).collect();
    let boundary: Vec<f64> = (0..h * w).map(|_| f64::from(r.gen_range(0..2u8))).collect();
    // At random init the fused edge prediction sits near 0.5; gate at 0.45
    // so a healthy margin separates every pixel from the indicator edge.
    let loss_cfg = LossConfig {
        att_threshold: 0.45,
        ..LossConfig::default()
    };
    ensure_gate_margin(&model, &image, &loss_cfg)?;
    check_model_params(&model, &image, &targets, &boundary, &loss_cfg, corrupt)
}

/// The gated loss differentiates an indicator; verify no fused edge value
/// sits within a kink's reach of the threshold for this seed.
fn ensure_gate_margin(model: &Model, image: &Tensor, cfg: &LossConfig) -> Result<()> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let out = model.forward(&mut tape, &bound, img)?;
    let gate = out.fused_edge.expect("bcanet emits a fused edge map");
    let min_margin = tape
        .value(gate)
        .data()
        .iter()
        .fold(f64::INFINITY, |m, &v| fmath::min(m, fmath::abs(v - cfg.att_threshold)));
    if min_margin < 1e-4 {
        return Err(crate::Error::Config(format!(
            "gradcheck seed places a gate value within {min_margin:.2e} of the threshold; pick another seed"
        )));
    }
    Ok(())
}
