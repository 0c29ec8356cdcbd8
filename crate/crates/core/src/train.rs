//! The training loop: batched momentum SGD under the polynomial schedule,
//! per-epoch validation, and checkpoint snapshots.
//!
//! Gradients of a batch are the mean of per-sample gradients; each sample
//! runs on its own tape, so samples may be evaluated on worker threads and
//! reduced in index order — the result is bit-identical to a sequential
//! run.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{dataset_split, generate_scene, SceneConfig, SegSample};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossConfig};
use crate::metrics::{
    argmax_classes, boundary_band, macro_f1, miou, pixacc, ConfusionMatrix, MetricConfig,
};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::{self, RngState};
use crate::tensor::{Tape, Tensor};

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    /// Worker threads for per-sample gradients; 0 picks the machine default.
    pub threads: usize,
    /// Boundary-band threshold of the evaluation metrics.
    pub boundary_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            epochs: 40,
            batch_size: 8,
            n_train: 500,
            n_val: 100,
            seed: 1,
            threads: 0,
            boundary_threshold: 0.0003,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.model.num_classes != self.scene.num_classes {
            return Err(Error::ClassCountMismatch {
                expected: self.model.num_classes,
                actual: self.scene.num_classes,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(())
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            boundary_threshold: self.boundary_threshold,
            num_classes: self.scene.num_classes,
            ignore_label: self.loss.ignore_label,
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.n_train.div_ceil(self.batch_size) as u64
    }

    pub fn max_iter(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_miou: f64,
    pub lr: f64,
}

/// A resumable training state snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub config: TrainConfig,
    pub iteration: u64,
    pub params: Vec<(String, Tensor)>,
    pub velocity: Vec<(String, Tensor)>,
    pub rng: RngState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    /// Rebuild the model this checkpoint describes. Parameter names and
    /// shapes must match the architecture exactly.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::init(self.kind, self.model_config(), 0);
        let mut slots = model.params.named_mut();
        if slots.len() != self.params.len() {
            return Err(Error::Config(alloc::format!(
                "checkpoint has {} parameters, architecture expects {}",
                self.params.len(),
                slots.len()
            )));
        }
        for ((sname, slot), (cname, stored)) in slots.iter_mut().zip(&self.params) {
            if sname != cname {
                return Err(Error::Config(alloc::format!(
                    "checkpoint parameter {cname} does not match architecture slot {sname}"
                )));
            }
            if slot.shape() != stored.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    lhs: slot.shape().to_vec(),
                    rhs: stored.shape().to_vec(),
                });
            }
            **slot = stored.clone();
        }
        Ok(model)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.config.model.clone()
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// A dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Metric rows for one split; `None` marks an undefined region score.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub split: Split,
    pub rows: Vec<(&'static str, Option<f64>)>,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|(m, _)| *m == metric).and_then(|(_, v)| *v)
    }
}

struct CachedSample {
    image: Tensor,
    mask: Vec<u32>,
    boundary: Vec<f64>,
}

impl CachedSample {
    fn from(s: SegSample) -> Self {
        let boundary = s.boundary.iter().map(|&b| f64::from(b)).collect();
        CachedSample {
            image: s.image,
            mask: s.mask,
            boundary,
        }
    }
}

fn cache_split(scene: &SceneConfig, range: core::ops::Range<usize>) -> Vec<CachedSample> {
    range.map(|i| CachedSample::from(generate_scene(scene, i))).collect()
}

/// Forward + backward for one sample; gradients come back in parameter
/// visit order.
fn sample_gradients(
    model: &Model,
    sample: &CachedSample,
    loss_cfg: &LossConfig,
) -> Result<(Vec<Vec<f64>>, LossBreakdown)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let image = tape.constant(sample.image.clone());
    let out = model.forward(&mut tape, &bound, image)?;
    let (total, breakdown) = loss::training_loss(&mut tape, &out, &sample.mask, &sample.boundary, loss_cfg)?;
    tape.backward(total)?;
    let mut grads = Vec::new();
    crate::model::visit_bound(model, &bound, &mut |_, var| {
        grads.push(tape.grad(var).expect("bound params retain grads").to_vec());
    });
    Ok((grads, breakdown))
}

#[cfg(feature = "std")]
fn resolve_threads(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

#[cfg(not(feature = "std"))]
fn resolve_threads(_requested: usize) -> usize {
    1
}

/// Per-sample results for a batch, in batch order. Worker threads only
/// change wall time, never values.
fn batch_gradients(
    model: &Model,
    batch: &[&CachedSample],
    loss_cfg: &LossConfig,
    threads: usize,
) -> Vec<Result<(Vec<Vec<f64>>, LossBreakdown)>> {
    #[cfg(feature = "std")]
    {
        if threads > 1 && batch.len() > 1 {
            let chunk = batch.len().div_ceil(threads);
            let mut results: Vec<Option<Result<_>>> = (0..batch.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                for (ci, (chunk_samples, out)) in
                    batch.chunks(chunk).zip(results.chunks_mut(chunk)).enumerate()
                {
                    let _ = ci;
                    scope.spawn(move || {
                        for (s, slot) in chunk_samples.iter().zip(out.iter_mut()) {
                            *slot = Some(sample_gradients(model, s, loss_cfg));
                        }
                    });
                }
            });
            return results.into_iter().map(|r| r.expect("all slots filled")).collect();
        }
    }
    let _ = threads;
    batch.iter().map(|s| sample_gradients(model, s, loss_cfg)).collect()
}

/// Train a model of the given kind. The per-epoch callback sees each log
/// line as it is produced.
pub fn train(
    cfg: &TrainConfig,
    kind: ModelKind,
    mut progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut model = Model::init(kind, cfg.model.clone(), cfg.seed);
    let (train_range, val_range) = dataset_split(cfg.n_train, cfg.n_val)?;
    let train_set = cache_split(&cfg.scene, train_range);
    let val_set = cache_split(&cfg.scene, val_range);
    let threads = resolve_threads(cfg.threads);

    let named = model.named_params();
    let mut optimizer = Optimizer::new(cfg.optim.clone(), cfg.max_iter(), &named);
    let mut shuffle_rng = rng::stream(cfg.seed, rng::STREAM_SHUFFLE);

    let snapshot = |model: &Model, opt: &Optimizer, rng_state: RngState| Checkpoint {
        version: CHECKPOINT_VERSION,
        kind,
        config: cfg.clone(),
        iteration: opt.iter,
        params: model.named_params(),
        velocity: opt.velocity.clone(),
        rng: rng_state,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut steps = 0u64;
        let mut last_lr = optimizer.lr()?;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&CachedSample> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let results = batch_gradients(&model, &batch, &cfg.loss, threads);
            let mut mean_grads: Option<Vec<Vec<f64>>> = None;
            let mut batch_bd = LossBreakdown::default();
            let inv = 1.0 / batch.len() as f64;
            for res in results {
                let (grads, bd) = res?;
                match &mut mean_grads {
                    None => {
                        let mut g = grads;
                        for group in &mut g {
                            for v in group.iter_mut() {
                                *v *= inv;
                            }
                        }
                        mean_grads = Some(g);
                    }
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (a, &g) in a.iter_mut().zip(g) {
                                *a += g * inv;
                            }
                        }
                    }
                }
                batch_bd.l_seg += bd.l_seg * inv;
                batch_bd.l_boundary += bd.l_boundary * inv;
                batch_bd.l_att += bd.l_att * inv;
                batch_bd.l_aux += bd.l_aux * inv;
                batch_bd.total += bd.total * inv;
            }
            if !batch_bd.total.is_finite() {
                return Err(Error::NonFinite {
                    term: "total",
                    value: batch_bd.total,
                });
            }
            let grads = mean_grads.expect("non-empty batch");
            let mut named_mut = model.params.named_mut();
            last_lr = optimizer.step(&mut named_mut, &grads)?;
            sums.l_seg += batch_bd.l_seg;
            sums.l_boundary += batch_bd.l_boundary;
            sums.l_att += batch_bd.l_att;
            sums.l_aux += batch_bd.l_aux;
            sums.total += batch_bd.total;
            steps += 1;
        }
        let val_miou = evaluate_cached(&model, cfg, &val_set)?.get("miou").unwrap_or(0.0);
        let inv = 1.0 / steps as f64;
        let entry = EpochLog {
            epoch,
            loss: LossBreakdown {
                l_seg: sums.l_seg * inv,
                l_boundary: sums.l_boundary * inv,
                l_att: sums.l_att * inv,
                l_aux: sums.l_aux * inv,
                total: sums.total * inv,
            },
            val_miou,
            lr: last_lr,
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&entry);
        }
        let improved = best.as_ref().map_or(true, |(b, _)| val_miou > *b);
        if improved {
            best = Some((
                val_miou,
                snapshot(&model, &optimizer, RngState::capture(&shuffle_rng)),
            ));
        }
        log.push(entry);
    }

    let final_checkpoint = snapshot(&model, &optimizer, RngState::capture(&shuffle_rng));
    let best_checkpoint = best.map(|(_, c)| c).unwrap_or_else(|| final_checkpoint.clone());
    Ok(TrainResult {
        final_checkpoint,
        best_checkpoint,
        log,
    })
}

/// Predicted label mask for one image (forward, argmax over classes).
pub fn predict_mask(model: &Model, image: &Tensor) -> Result<Vec<u32>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let out = model.forward(&mut tape, &bound, img)?;
    Ok(argmax_classes(tape.value(out.seg_logits)))
}

fn evaluate_cached(model: &Model, cfg: &TrainConfig, samples: &[CachedSample]) -> Result<MetricReport> {
    let metric = cfg.metric_config();
    let mut cm = ConfusionMatrix::new(metric.num_classes);
    let mut cm_band = ConfusionMatrix::new(metric.num_classes);
    let mut cm_interior = ConfusionMatrix::new(metric.num_classes);
    let (h, w) = (cfg.scene.image_size, cfg.scene.image_size);
    for s in samples {
        let pred = predict_mask(model, &s.image)?;
        cm.update(&s.mask, &pred, metric.ignore_label);
        let band = boundary_band(&s.mask, h, w, metric.boundary_threshold);
        cm_band.update_where(&s.mask, &pred, &band, metric.ignore_label);
        let interior: Vec<bool> = band.iter().map(|&b| !b).collect();
        cm_interior.update_where(&s.mask, &pred, &interior, metric.ignore_label);
    }
    Ok(MetricReport {
        split: Split::Val,
        rows: alloc::vec![
            ("miou", Some(miou(&cm)?)),
            ("pixacc", Some(pixacc(&cm)?)),
            ("f_boundary", macro_f1(&cm_band)),
            ("f_interior", macro_f1(&cm_interior)),
        ],
    })
}

/// Evaluate a model over a split of its configured corpus: mIoU, pixel
/// accuracy, and band-restricted boundary/interior F-scores, accumulated
/// over all images of the split.
pub fn evaluate(model: &Model, cfg: &TrainConfig, split: Split) -> Result<MetricReport> {
    if model.config.num_classes != cfg.scene.num_classes {
        return Err(Error::ClassCountMismatch {
            expected: model.config.num_classes,
            actual: cfg.scene.num_classes,
        });
    }
    let (train_range, val_range) = dataset_split(cfg.n_train, cfg.n_val)?;
    let range = match split {
        Split::Train => train_range,
        Split::Val => val_range,
    };
    let samples = cache_split(&cfg.scene, range);
    let mut report = evaluate_cached(model, cfg, &samples)?;
    report.split = split;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            scene: SceneConfig {
                image_size: 32,
                ..SceneConfig::default()
            },
            model: ModelConfig {
                widths: [4, 6, 8, 8],
                unify_channels: 4,
                attn_channels: 4,
                head_channels: 8,
                ..ModelConfig::default()
            },
            epochs: 1,
            batch_size: 4,
            n_train: 8,
            n_val: 4,
            seed: 3,
            threads: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params_and_empty_log() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let result = train(&cfg, ModelKind::Fcn, None).unwrap();
        assert!(result.log.is_empty());
        assert_eq!(result.final_checkpoint.iteration, 0);
        let init = Model::init(ModelKind::Fcn, cfg.model.clone(), cfg.seed);
        for ((n1, t1), (n2, t2)) in init.named_params().iter().zip(&result.final_checkpoint.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn fcn_checkpoints_lack_msb_and_attention() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let result = train(&cfg, ModelKind::Fcn, None).unwrap();
        assert!(result
            .final_checkpoint
            .params
            .iter()
            .all(|(n, _)| !n.starts_with("msb.") && !n.starts_with("attention.")));
        let result = train(&cfg, ModelKind::BcaNet, None).unwrap();
        assert!(result
            .final_checkpoint
            .params
            .iter()
            .any(|(n, _)| n.starts_with("msb.")));
    }

    #[test]
    fn loss_decreases_on_fixed_batch_over_first_steps() {
        // Small lr, three seeds, same batch each step: the total loss must
        // strictly decrease across the first five steps.
        for seed in [1u64, 2, 3] {
            let mut cfg = tiny_config();
            cfg.seed = seed;
            cfg.optim.lr0 = 0.002;
            cfg.n_train = 4;
            cfg.batch_size = 4;
            cfg.validate().unwrap();
            let model_cfg = cfg.model.clone();
            let mut model = Model::init(ModelKind::BcaNet, model_cfg, seed);
            let (train_range, _) = dataset_split(cfg.n_train, cfg.n_val).unwrap();
            let samples = cache_split(&cfg.scene, train_range);
            let named = model.named_params();
            let mut opt = Optimizer::new(cfg.optim.clone(), 1000, &named);
            let mut last = f64::INFINITY;
            for step in 0..5 {
                let batch: Vec<&CachedSample> = samples.iter().collect();
                let results = batch_gradients(&model, &batch, &cfg.loss, 1);
                let mut total = 0.0;
                let mut mean: Option<Vec<Vec<f64>>> = None;
                let inv = 1.0 / batch.len() as f64;
                for r in results {
                    let (g, bd) = r.unwrap();
                    total += bd.total * inv;
                    match &mut mean {
                        None => {
                            let mut g = g;
                            for gr in &mut g {
                                for v in gr.iter_mut() {
                                    *v *= inv;
                                }
                            }
                            mean = Some(g);
                        }
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&g) {
                                for (a, &g) in a.iter_mut().zip(g) {
                                    *a += g * inv;
                                }
                            }
                        }
                    }
                }
                assert!(total < last, "seed {seed} step {step}: {total} !< {last}");
                last = total;
                let mut named_mut = model.params.named_mut();
                opt.step(&mut named_mut, &mean.unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let a = train(&cfg, ModelKind::BcaNet, None).unwrap();
        let b = train(&cfg, ModelKind::BcaNet, None).unwrap();
        assert_eq!(a.log, b.log);
        for ((n1, t1), (n2, t2)) in a.final_checkpoint.params.iter().zip(&b.final_checkpoint.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        assert_eq!(a.final_checkpoint.rng, b.final_checkpoint.rng);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut cfg = tiny_config();
        cfg.threads = 1;
        let a = train(&cfg, ModelKind::BcaNet, None).unwrap();
        cfg.threads = 4;
        let b = train(&cfg, ModelKind::BcaNet, None).unwrap();
        assert_eq!(a.log, b.log);
        for ((_, t1), (_, t2)) in a.final_checkpoint.params.iter().zip(&b.final_checkpoint.params) {
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn checkpoint_to_model_round_trips_forward_outputs() {
        let cfg = tiny_config();
        let result = train(&cfg, ModelKind::BcaNet, None).unwrap();
        let model = result.final_checkpoint.to_model().unwrap();
        let image = generate_scene(&cfg.scene, 999).image;
        let direct = {
            let mut m2 = Model::init(ModelKind::BcaNet, cfg.model.clone(), cfg.seed);
            for (slot, (_, stored)) in m2.params.named_mut().into_iter().zip(&result.final_checkpoint.params) {
                *slot.1 = stored.clone();
            }
            predict_mask(&m2, &image).unwrap()
        };
        assert_eq!(predict_mask(&model, &image).unwrap(), direct);
    }

    #[test]
    fn evaluate_rejects_class_mismatch() {
        let cfg = tiny_config();
        let model = Model::init(ModelKind::Fcn, cfg.model.clone(), 1);
        let mut other = cfg.clone();
        other.scene.num_classes = 3;
        other.model.num_classes = 3;
        let err = evaluate(&model, &other, Split::Val).unwrap_err();
        assert!(matches!(err, Error::ClassCountMismatch { .. }));
    }

    #[test]
    fn evaluating_ground_truth_masks_is_perfect() {
        // Feed the metrics the ground truth directly: mIoU must be 1.
        let cfg = tiny_config();
        let metric = cfg.metric_config();
        let mut cm = ConfusionMatrix::new(metric.num_classes);
        let (_, val) = dataset_split(cfg.n_train, cfg.n_val).unwrap();
        for idx in val {
            let s = generate_scene(&cfg.scene, idx);
            cm.update(&s.mask, &s.mask, metric.ignore_label);
        }
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn report_has_one_row_per_metric() {
        let cfg = tiny_config();
        let model = Model::init(ModelKind::Fcn, cfg.model.clone(), 1);
        let report = evaluate(&model, &cfg, Split::Val).unwrap();
        assert_eq!(report.rows.len(), 4);
        let again = evaluate(&model, &cfg, Split::Val).unwrap();
        assert_eq!(report, again);
    }
}
