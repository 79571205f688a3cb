//! Deterministic synthetic scenes with exact segmentation masks.
//!
//! Each foreground class has a unique signature: a shape family (rectangle,
//! circle, triangle, ring) crossed with a one-pixel texture family
//! (horizontal stripes, vertical stripes, checker, dots). Colors are drawn per
//! instance from the same palette as the background, so a pixel's color alone
//! says little about its class. Shapes never overlap: up to four are laid out
//! in the cells of a jittered 2x2 partition, any further ones are placed by
//! bounded rejection sampling.

mod calibrate;
pub mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use calibrate::{linear_probe_accuracy, LinearProbe};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Rect,
    Circle,
    Triangle,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    HStripes,
    VStripes,
    Checker,
    Dots,
}

const SHAPES: [ShapeFamily; 4] = [
    ShapeFamily::Rect,
    ShapeFamily::Circle,
    ShapeFamily::Triangle,
    ShapeFamily::Ring,
];
const TEXTURES: [TextureFamily; 4] = [
    TextureFamily::HStripes,
    TextureFamily::VStripes,
    TextureFamily::Checker,
    TextureFamily::Dots,
];

/// Maximum number of foreground classes with distinct signatures.
pub const MAX_CLASSES: usize = 16;

/// Signature of foreground class `class` (1-based). Consecutive classes differ
/// in both shape and texture where possible.
pub fn signature(class: usize) -> (ShapeFamily, TextureFamily) {
    let k = class - 1;
    (SHAPES[k % 4], TEXTURES[(k + k / 4) % 4])
}

pub fn class_name(class: usize) -> String {
    if class == 0 {
        return "background".into();
    }
    let (s, t) = signature(class);
    let s = serde_json::to_value(s).unwrap();
    let t = serde_json::to_value(t).unwrap();
    format!("{}-{}", s.as_str().unwrap(), t.as_str().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Foreground classes; labels run `1..=class_count`, 0 is background.
    pub class_count: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            class_count: 6,
            min_shapes: 3,
            max_shapes: 4,
            min_size: 12,
            max_size: 18,
            noise: 0.03,
            train_size: 400,
            eval_size: 100,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.class_count < 2 || self.class_count > MAX_CLASSES {
            return bad("class_count must be in 2..=16");
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return bad("split sizes must be at least 1");
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad("need 1 <= min_shapes <= max_shapes");
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size > self.image_size {
            return bad("need 4 <= min_size <= max_size <= image_size");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite nonnegative number");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    /// `(image, image, 3)` values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major class ids, 0 = background.
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn contains(&self, class: u8) -> bool {
        self.labels.contains(&class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    /// Number of train images containing each class (index 0 = background).
    pub fn train_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count() + 1];
        for s in &self.train {
            let mut seen = vec![false; self.class_count() + 1];
            for &l in &s.labels {
                if (l as usize) < seen.len() {
                    seen[l as usize] = true;
                }
            }
            for (c, &p) in seen.iter().enumerate() {
                counts[c] += p as usize;
            }
        }
        counts
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    class: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

fn disjoint(a: &Placed, b: &Placed) -> bool {
    a.x0 >= b.x0 + b.w || b.x0 >= a.x0 + a.w || a.y0 >= b.y0 + b.h || b.y0 >= a.y0 + a.h
}

fn inside(shape: ShapeFamily, p: &Placed, x: usize, y: usize) -> bool {
    // pixel centers relative to the box, in [0, 1]
    let fx = (x - p.x0) as f64 + 0.5;
    let fy = (y - p.y0) as f64 + 0.5;
    let (w, h) = (p.w as f64, p.h as f64);
    match shape {
        ShapeFamily::Rect => true,
        ShapeFamily::Circle | ShapeFamily::Ring => {
            let dx = (fx - w / 2.0) / (w / 2.0);
            let dy = (fy - h / 2.0) / (h / 2.0);
            let d = dx * dx + dy * dy;
            match shape {
                ShapeFamily::Circle => d <= 1.0,
                _ => (0.25..=1.0).contains(&d),
            }
        }
        ShapeFamily::Triangle => {
            let t = fy / h;
            (fx - w / 2.0).abs() <= t * w / 2.0 + 0.5
        }
    }
}

fn texture_on(texture: TextureFamily, x: usize, y: usize, phase: usize) -> bool {
    let (x, y) = (x + phase, y + phase / 2);
    match texture {
        TextureFamily::HStripes => y % 2 == 0,
        TextureFamily::VStripes => x % 2 == 0,
        TextureFamily::Checker => (x + y) % 2 == 0,
        TextureFamily::Dots => x % 2 == 0 && y % 2 == 0,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

fn render(spec: &SceneSpec, rng: &mut ChaCha8Rng, id: u32) -> Sample {
    let s = spec.image_size;
    // Background: a smooth blend of two random colors along a random direction.
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut pixels = vec![0.0f64; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let t = 0.5 + ((x as f64 / s as f64 - 0.5) * ca + (y as f64 / s as f64 - 0.5) * sa);
            let t = t.clamp(0.0, 1.0);
            for ch in 0..3 {
                pixels[(y * s + x) * 3 + ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let mut labels = vec![0u8; s * s];

    // Jittered 2x2 layout: one shape per chosen cell, extra shapes (beyond
    // four) are placed anywhere that is still free.
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let sx = rng.random_range(s * 3 / 8..=s * 5 / 8);
    let sy = rng.random_range(s * 3 / 8..=s * 5 / 8);
    let cells = [(0, 0, sx, sy), (sx, 0, s - sx, sy), (0, sy, sx, s - sy), (sx, sy, s - sx, s - sy)];
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut placed: Vec<Placed> = Vec::new();
    for (n, &cell) in order.iter().cycle().take(count).enumerate() {
        let class = rng.random_range(1..=spec.class_count);
        if n < 4 {
            let (cx, cy, cw, ch) = cells[cell];
            let w = rng.random_range(spec.min_size.min(cw)..=spec.max_size.min(cw).max(spec.min_size.min(cw)));
            let h = rng.random_range(spec.min_size.min(ch)..=spec.max_size.min(ch).max(spec.min_size.min(ch)));
            let x0 = cx + rng.random_range(0..=cw - w);
            let y0 = cy + rng.random_range(0..=ch - h);
            placed.push(Placed { class, x0, y0, w, h });
            continue;
        }
        let mut ok = None;
        for _attempt in 0..100 {
            let w = rng.random_range(spec.min_size..=spec.max_size);
            let h = rng.random_range(spec.min_size..=spec.max_size);
            let x0 = rng.random_range(0..=s - w);
            let y0 = rng.random_range(0..=s - h);
            let cand = Placed { class, x0, y0, w, h };
            if placed.iter().all(|p| disjoint(&cand, p)) {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(p) => placed.push(p),
            None => {
                log::debug!("sample {id}: placed {} of {count} shapes", placed.len());
                break;
            }
        }
    }

    for p in &placed {
        let (shape, texture) = signature(p.class);
        let fg = random_color(rng);
        let mut other = random_color(rng);
        // keep the texture visible
        if (0..3).map(|c| (fg[c] - other[c]).abs()).sum::<f64>() < 0.6 {
            other = fg.map(|v| 1.0 - v);
        }
        let phase = rng.random_range(0..4usize);
        for y in p.y0..p.y0 + p.h {
            for x in p.x0..p.x0 + p.w {
                if !inside(shape, p, x, y) {
                    continue;
                }
                labels[y * s + x] = p.class as u8;
                let col = if texture_on(texture, x, y, phase) { fg } else { other };
                pixels[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&col);
            }
        }
    }

    if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).unwrap();
        for v in pixels.iter_mut() {
            *v += dist.sample(rng);
        }
    }
    let image = Tensor::new(
        &[s, s, 3],
        pixels.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
    .unwrap();
    Sample { id, image, labels }
}

/// Generates the train and eval splits of `spec`.
pub fn generate(spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.train_size)
        .map(|i| render(spec, &mut rng, i as u32))
        .collect();
    let eval = (0..spec.eval_size)
        .map(|i| render(spec, &mut rng, (spec.train_size + i) as u32))
        .collect();
    let ds = Dataset {
        spec: spec.clone(),
        train,
        eval,
    };
    let counts = ds.train_class_counts();
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n == 0 {
            log::warn!("class {c} does not occur in any train image");
        }
    }
    Ok(ds)
}
