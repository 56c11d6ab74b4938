//! Synthetic cardiac-like segmentation data.
//!
//! Each image holds one shape per foreground class on a dim background. The
//! shape roles loosely follow short-axis cardiac anatomy: a thin ring
//! (myocardium-like, the small hard class), a filled ellipse and a convex
//! polygon blob. Smaller distractor shapes borrow foreground intensities but
//! stay background in the mask, and a per-image gain and offset shift the
//! whole intensity range, so neither brightness nor local texture alone
//! identifies a class. Every sample is a pure function of
//! `(seed, split, index)`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_manifest, write_sample, DatasetManifest, SampleEntry, Split, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Rng, Stream};
use crate::tensor::{ImageTensor, MaskTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_bias")]
    pub bias_amplitude: f64,
    /// Per-image acquisition gain drawn from `[1 - gain_spread, 1 + gain_spread]`.
    #[serde(default = "default_gain_spread")]
    pub gain_spread: f64,
    /// Per-image intensity offset drawn from `[-offset_spread, offset_spread]`.
    #[serde(default = "default_offset_spread")]
    pub offset_spread: f64,
    /// Small unlabeled shapes drawn with foreground intensities; they stay background in the mask.
    #[serde(default = "default_distractors")]
    pub distractors: usize,
}

fn default_noise() -> f64 {
    0.05
}

fn default_bias() -> f64 {
    0.1
}

fn default_gain_spread() -> f64 {
    0.4
}

fn default_offset_spread() -> f64 {
    0.15
}

fn default_distractors() -> usize {
    4
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_labeled: 8,
            n_unlabeled: 192,
            n_test: 50,
            height: 64,
            width: 64,
            num_classes: 3,
            seed: 0,
            noise_sigma: default_noise(),
            bias_amplitude: default_bias(),
            gain_spread: default_gain_spread(),
            offset_spread: default_offset_spread(),
            distractors: default_distractors(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be in [2, 5], got {}", self.num_classes)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "image size must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.n_labeled == 0 {
            return Err(Error::Config("n_labeled must be at least 1".into()));
        }
        if self.n_unlabeled == 0 {
            return Err(Error::Config("n_unlabeled must be at least 1".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if !(self.bias_amplitude >= 0.0 && self.bias_amplitude.is_finite()) {
            return Err(Error::Config("bias_amplitude must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.gain_spread) || !(self.offset_spread >= 0.0 && self.offset_spread.is_finite()) {
            return Err(Error::Config("gain_spread must lie in [0, 1) and offset_spread be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ring,
    Ellipse,
    Polygon,
}

impl ShapeKind {
    /// Shape used for foreground class `k >= 1`.
    pub fn for_class(k: usize) -> Self {
        match (k - 1) % 3 {
            0 => ShapeKind::Ring,
            1 => ShapeKind::Ellipse,
            _ => ShapeKind::Polygon,
        }
    }
}

/// Mean intensity of class `k` (0 is background).
fn class_intensity(k: usize) -> f64 {
    const TABLE: [f64; 5] = [0.25, 0.55, 0.65, 0.45, 0.8];
    TABLE[k]
}

const SHAPE_JITTER: f64 = 0.04;

/// Generates sample `index` of `split`.
pub fn generate_sample(cfg: &SynthConfig, split: Split, index: usize) -> Result<(ImageTensor, MaskTensor)> {
    cfg.validate()?;
    let split_tag = match split {
        Split::TrainLabeled => 0u64,
        Split::TrainUnlabeled => 1,
        Split::Test => 2,
    };
    let mut rng = keyed_rng(cfg.seed, Stream::Synth as u64, (split_tag << 32) | index as u64);
    let (h, w) = (cfg.height, cfg.width);
    let mask = place_shapes(&mut rng, h, w, cfg.num_classes)?;

    let mut means = vec![class_intensity(0) + rng.random_range(-SHAPE_JITTER..=SHAPE_JITTER)];
    for k in 1..cfg.num_classes {
        means.push(class_intensity(k) + rng.random_range(-SHAPE_JITTER..=SHAPE_JITTER));
    }

    let bias = BiasField::sample(&mut rng, cfg.bias_amplitude);
    let gain = 1.0 + cfg.gain_spread * rng.random_range(-1.0..=1.0);
    let offset = cfg.offset_spread * rng.random_range(-1.0..=1.0);
    let clutter = place_distractors(&mut rng, &mask, cfg.num_classes, cfg.distractors);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
            let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
            let k = match clutter[y * w + x] {
                0 => mask.data[y * w + x] as usize,
                c => c as usize,
            };
            let value = gain * (means[k] + bias.at(u, v)) + offset + noise.sample(&mut rng);
            data.push(value.clamp(0.0, 1.0) as f32);
        }
    }
    Ok((ImageTensor::new(1, h, w, data)?, mask))
}

/// Smooth multiplicative-free bias: a tilted plane plus one low-frequency
/// cosine product, scaled so `|b| <= amplitude`.
struct BiasField {
    gx: f64,
    gy: f64,
    gc: f64,
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
}

impl BiasField {
    fn sample(rng: &mut Rng, amplitude: f64) -> Self {
        let gx: f64 = rng.random_range(-1.0..=1.0);
        let gy: f64 = rng.random_range(-1.0..=1.0);
        let gc: f64 = rng.random_range(-1.0..=1.0);
        let norm = (gx.abs() + gy.abs() + gc.abs()).max(1e-12);
        Self {
            gx: amplitude * gx / norm,
            gy: amplitude * gy / norm,
            gc: amplitude * gc / norm,
            fx: rng.random_range(0.5..=1.5),
            fy: rng.random_range(0.5..=1.5),
            px: rng.random_range(0.0..2.0 * PI),
            py: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.gx * u + self.gy * v + self.gc * (PI * self.fx * u + self.px).cos() * (PI * self.fy * v + self.py).cos()
    }
}

fn place_shapes(rng: &mut Rng, h: usize, w: usize, num_classes: usize) -> Result<MaskTensor> {
    let mut mask = MaskTensor::filled(h, w, 0);
    let m = h.min(w) as f64;
    for k in 1..num_classes {
        let kind = ShapeKind::for_class(k);
        let mut scale = 1.0;
        let mut placed = false;
        'outer: for _ in 0..12 {
            for _ in 0..200 {
                let shape = Shape::sample(rng, kind, m * scale, h, w);
                if let Some(pixels) = shape.rasterize_free(&mask) {
                    for p in pixels {
                        mask.data[p] = k as u8;
                    }
                    placed = true;
                    break 'outer;
                }
            }
            scale *= 0.85;
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {num_classes} non-overlapping shapes in a {h}x{w} image"
            )));
        }
    }
    Ok(mask)
}

/// Per-pixel class whose intensity a distractor borrows (0 where there is none).
fn place_distractors(rng: &mut Rng, mask: &MaskTensor, num_classes: usize, count: usize) -> Vec<u8> {
    let (h, w) = (mask.height, mask.width);
    let mut occupied = mask.clone();
    let mut clutter = vec![0u8; h * w];
    let m = h.min(w) as f64;
    for _ in 0..count {
        let look = rng.random_range(1..num_classes);
        let kind = ShapeKind::for_class(rng.random_range(1..num_classes));
        for _ in 0..50 {
            let shape = Shape::sample(rng, kind, m * 0.5, h, w);
            if let Some(pixels) = shape.rasterize_free(&occupied) {
                for p in pixels {
                    occupied.data[p] = look as u8;
                    clutter[p] = look as u8;
                }
                break;
            }
        }
    }
    clutter
}

struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    /// Inner/outer radius ratio for rings.
    hole: f64,
    /// Unit-circle vertex angles for polygons, ascending.
    vertices: Vec<(f64, f64)>,
}

impl Shape {
    fn sample(rng: &mut Rng, kind: ShapeKind, m: f64, h: usize, w: usize) -> Self {
        let (lo, hi) = match kind {
            ShapeKind::Ring => (0.13, 0.21),
            ShapeKind::Ellipse => (0.09, 0.16),
            ShapeKind::Polygon => (0.10, 0.17),
        };
        let ry = rng.random_range(lo..=hi) * m;
        let rx = rng.random_range(lo..=hi) * m;
        let angle = rng.random_range(0.0..PI);
        let hole = rng.random_range(0.55..=0.75);
        let r = ry.max(rx);
        let cy = rng.random_range((r + 1.0)..=(h as f64 - r - 2.0).max(r + 1.0));
        let cx = rng.random_range((r + 1.0)..=(w as f64 - r - 2.0).max(r + 1.0));
        let vertices = if kind == ShapeKind::Polygon {
            let n = rng.random_range(5..=8);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            angles.sort_by(|a, b| a.total_cmp(b));
            angles.into_iter().map(|a| (a.cos(), a.sin())).collect()
        } else {
            Vec::new()
        };
        Self { kind, cy, cx, ry, rx, angle, hole, vertices }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r2 = u * u + v * v;
        match self.kind {
            ShapeKind::Ellipse => r2 <= 1.0,
            ShapeKind::Ring => r2 <= 1.0 && r2 > self.hole * self.hole,
            ShapeKind::Polygon => {
                // Vertices on the unit circle in angular order form a convex polygon.
                let n = self.vertices.len();
                (0..n).all(|i| {
                    let (ax, ay) = self.vertices[i];
                    let (bx, by) = self.vertices[(i + 1) % n];
                    (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
                })
            }
        }
    }

    /// Pixel indices of the shape if it is non-empty and keeps a one-pixel gap
    /// to every occupied pixel.
    fn rasterize_free(&self, mask: &MaskTensor) -> Option<Vec<usize>> {
        let (h, w) = (mask.height, mask.width);
        let mut pixels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    continue;
                }
                let y0 = y.saturating_sub(1);
                let x0 = x.saturating_sub(1);
                for ny in y0..=(y + 1).min(h - 1) {
                    for nx in x0..=(x + 1).min(w - 1) {
                        if mask.data[ny * w + nx] != 0 {
                            return None;
                        }
                    }
                }
                pixels.push(y * w + x);
            }
        }
        (pixels.len() >= 4).then_some(pixels)
    }
}

/// Writes a complete synthetic dataset to `out` and returns its manifest.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut samples = Vec::new();
    for (split, count, prefix) in [
        (Split::TrainLabeled, cfg.n_labeled, "l"),
        (Split::TrainUnlabeled, cfg.n_unlabeled, "u"),
        (Split::Test, cfg.n_test, "t"),
    ] {
        for i in 0..count {
            let id = format!("{prefix}{i:05}");
            let (image, mask) = generate_sample(cfg, split, i)?;
            let entry = SampleEntry {
                image_path: format!("images/{id}.f32"),
                mask_path: (split != Split::TrainUnlabeled).then(|| format!("masks/{id}.u8")),
                id,
                split,
                height: cfg.height,
                width: cfg.width,
                channels: 1,
            };
            write_sample(out, &entry, &image, Some(&mask))?;
            samples.push(entry);
        }
    }
    let manifest = DatasetManifest { format_version: FORMAT_VERSION, num_classes: cfg.num_classes, samples };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}
