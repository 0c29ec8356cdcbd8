//! Procedural synthetic scenes and exact boundary ground truth.
//!
//! Scenes are axis-aligned rectangles and ellipses over a background, each
//! class with a fixed, well-separated base color plus Gaussian noise. With
//! some probability a shape carries an interior patch painted in another
//! class's color while the label stays the host's — the intra-class
//! ambiguity the attention mechanism is meant to resolve. Generation is
//! pure per (seed, index): every image lives on its own RNG stream.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Image side (square, divisible by 8).
    pub image_size: usize,
    /// Background plus shape classes.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Probability that a shape carries a deceptively colored interior patch.
    pub ambiguity_prob: f64,
    pub noise_std: f64,
    /// Radius of the derived boundary band.
    pub boundary_radius: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            num_classes: 4,
            shapes_min: 3,
            shapes_max: 5,
            ambiguity_prob: 0.5,
            noise_std: 0.05,
            boundary_radius: 2,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.num_classes > PALETTE.len() {
            return Err(Error::Config(alloc::format!(
                "num_classes must be at most {}",
                PALETTE.len()
            )));
        }
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return Err(Error::Config(
                "image_size must be at least 32 and divisible by 8".into(),
            ));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min must not exceed shapes_max".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_prob) {
            return Err(Error::Config("ambiguity_prob must lie in [0, 1]".into()));
        }
        if self.boundary_radius == 0 {
            return Err(Error::Config("boundary_radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// One image with its label mask and derived binary boundary map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// 3×H×W, values in [0, 1].
    pub image: Tensor,
    /// H×W class labels.
    pub mask: Vec<u32>,
    /// H×W, 1 on the boundary band.
    pub boundary: Vec<u8>,
}

/// Base colors, mutually far apart in RGB. Index = class label.
const PALETTE: [[f64; 3]; 8] = [
    [0.12, 0.12, 0.12],
    [0.90, 0.15, 0.15],
    [0.15, 0.85, 0.15],
    [0.15, 0.20, 0.90],
    [0.90, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.92, 0.92, 0.92],
];

pub fn class_color(class: usize) -> [f64; 3] {
    PALETTE[class]
}

struct Painter {
    size: usize,
    image: Vec<f64>,
    mask: Vec<u32>,
}

impl Painter {
    fn paint(&mut self, x: usize, y: usize, class: u32, noise: [f64; 3]) {
        let color = PALETTE[class as usize];
        let n = self.size * self.size;
        let p = y * self.size + x;
        for ch in 0..3 {
            self.image[ch * n + p] = (color[ch] + noise[ch]).clamp(0.0, 1.0);
        }
        self.mask[p] = class;
    }

    fn recolor(&mut self, x: usize, y: usize, class_color: usize, noise: [f64; 3]) {
        let color = PALETTE[class_color];
        let n = self.size * self.size;
        let p = y * self.size + x;
        for ch in 0..3 {
            self.image[ch * n + p] = (color[ch] + noise[ch]).clamp(0.0, 1.0);
        }
    }
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rect,
    Ellipse,
}

fn gauss3(rng: &mut ChaCha8Rng, std: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for o in &mut out {
        let z: f64 = rng.sample(StandardNormal);
        *o = z * std;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn paint_rect(
    p: &mut Painter,
    rng: &mut ChaCha8Rng,
    noise_std: f64,
    x0: usize,
    y0: usize,
    bw: usize,
    bh: usize,
    class: u32,
) {
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let noise = gauss3(rng, noise_std);
            p.paint(x, y, class, noise);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn paint_ellipse(
    p: &mut Painter,
    rng: &mut ChaCha8Rng,
    noise_std: f64,
    x0: usize,
    y0: usize,
    bw: usize,
    bh: usize,
    class: u32,
) {
    let cx = x0 as f64 + bw as f64 / 2.0;
    let cy = y0 as f64 + bh as f64 / 2.0;
    let rx = bw as f64 / 2.0;
    let ry = bh as f64 / 2.0;
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                let noise = gauss3(rng, noise_std);
                p.paint(x, y, class, noise);
            }
        }
    }
}

/// Deterministically generate scene `index` of the corpus described by
/// `cfg`. Later shapes occlude earlier ones; the mask always matches the
/// painted geometry (ambiguity patches recolor pixels without relabeling).
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> SegSample {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let mut p = Painter {
        size,
        image: vec![0.0; 3 * size * size],
        mask: vec![0; size * size],
    };
    for y in 0..size {
        for x in 0..size {
            let noise = gauss3(&mut rng, cfg.noise_std);
            p.paint(x, y, 0, noise);
        }
    }

    let n_shapes = rng.gen_range(cfg.shapes_min..=cfg.shapes_max);
    for _ in 0..n_shapes {
        let kind = if rng.gen_bool(0.5) {
            ShapeKind::Rect
        } else {
            ShapeKind::Ellipse
        };
        let class = rng.gen_range(1..cfg.num_classes) as u32;
        let min_side = size / 5;
        let max_side = (size * 9) / 20;
        let bw = rng.gen_range(min_side..=max_side);
        let bh = rng.gen_range(min_side..=max_side);
        let x0 = rng.gen_range(0..size - bw);
        let y0 = rng.gen_range(0..size - bh);
        match kind {
            ShapeKind::Rect => paint_rect(&mut p, &mut rng, cfg.noise_std, x0, y0, bw, bh, class),
            ShapeKind::Ellipse => paint_ellipse(&mut p, &mut rng, cfg.noise_std, x0, y0, bw, bh, class),
        }

        if rng.gen_bool(cfg.ambiguity_prob) {
            // Interior patch: at most half the bounding box per side,
            // centered inside it, painted in another class's color. Only
            // pixels at Chebyshev distance > 2 from foreign labels are
            // recolored, so the patch never touches the host's boundary.
            let disguise = {
                let mut d = rng.gen_range(0..cfg.num_classes - 1) as u32;
                if d >= class {
                    d += 1;
                }
                d
            };
            let pw = (bw / 2).max(2);
            let ph = (bh / 2).max(2);
            let px0 = x0 + (bw - pw) / 2;
            let py0 = y0 + (bh - ph) / 2;
            for y in py0..py0 + ph {
                for x in px0..px0 + pw {
                    if interior_of(&p.mask, size, x, y, class, 2) {
                        let noise = gauss3(&mut rng, cfg.noise_std);
                        p.recolor(x, y, disguise as usize, noise);
                    }
                }
            }
        }
    }

    let boundary = boundary_from_mask(&p.mask, size, size, cfg.boundary_radius);
    SegSample {
        image: Tensor::new(vec![3, size, size], p.image).expect("painter size"),
        mask: p.mask,
        boundary,
    }
}

/// True when every pixel within Chebyshev distance `margin` (clipped to
/// the image) carries `class`.
fn interior_of(mask: &[u32], size: usize, x: usize, y: usize, class: u32, margin: usize) -> bool {
    let x_lo = x.saturating_sub(margin);
    let y_lo = y.saturating_sub(margin);
    let x_hi = (x + margin).min(size - 1);
    let y_hi = (y + margin).min(size - 1);
    for yy in y_lo..=y_hi {
        for xx in x_lo..=x_hi {
            if mask[yy * size + xx] != class {
                return false;
            }
        }
    }
    true
}

/// Binary boundary map: pixel p is marked iff some pixel q within
/// Chebyshev distance `radius` carries a different label. The image border
/// by itself is not a boundary.
pub fn boundary_from_mask(mask: &[u32], h: usize, w: usize, radius: usize) -> Vec<u8> {
    debug_assert_eq!(mask.len(), h * w);
    debug_assert!(radius >= 1);
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let y_lo = y.saturating_sub(radius);
        let y_hi = (y + radius).min(h - 1);
        for x in 0..w {
            let label = mask[y * w + x];
            let x_lo = x.saturating_sub(radius);
            let x_hi = (x + radius).min(w - 1);
            'scan: for yy in y_lo..=y_hi {
                let row = &mask[yy * w..yy * w + w];
                for xx in x_lo..=x_hi {
                    if row[xx] != label {
                        out[y * w + x] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Disjoint train/val index ranges: [0, n_train) and [n_train, n_train + n_val).
pub fn dataset_split(n_train: usize, n_val: usize) -> Result<(core::ops::Range<usize>, core::ops::Range<usize>)> {
    let total = n_train
        .checked_add(n_val)
        .ok_or_else(|| Error::Config("dataset split sizes overflow".into()))?;
    Ok((0..n_train, n_train..total))
}
