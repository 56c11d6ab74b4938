//! Weak and strong views of unlabeled images.
//!
//! The weak view `a(u)` is a random crop plus flips. The strong view `A(u)`
//! reuses the *same* crop and flips, then applies brightness/contrast jitter
//! and finally an aligned copy-paste from another sample of the batch. Every
//! random choice is kept in an [`AugRecord`] so the teacher's pseudo-labels,
//! computed on the weak view, can be spliced to match the strong view pixel
//! for pixel.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ImageTensor, MaskTensor};

/// Axis-aligned box, `(top, left, height, width)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelBox {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.top + self.height <= height && self.left + self.width <= width
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeomTransform {
    pub crop_box: PixelBox,
    pub flip_h: bool,
    pub flip_v: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityParams {
    pub brightness_delta: f64,
    pub contrast_factor: f64,
}

impl IntensityParams {
    pub const IDENTITY: Self = Self { brightness_delta: 0.0, contrast_factor: 1.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PastePlan {
    pub source_batch_index: usize,
    #[serde(rename = "box")]
    pub region: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub geom: GeomTransform,
    pub intensity: Option<IntensityParams>,
    pub paste: Option<PastePlan>,
}

impl AugRecord {
    /// One-line JSON rendering for debug logs and replay.
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("AugRecord serializes")
    }

    pub fn from_log_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Training crop `(height, width)`.
    pub crop: (usize, usize),
    /// Random crop position and flips; when off, a centered crop without flips.
    pub geometric: bool,
    pub intensity: bool,
    pub copy_paste: bool,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    /// Probability of applying each of brightness and contrast.
    pub intensity_prob: f64,
    /// Paste box area as a fraction of the view.
    pub paste_area: (f64, f64),
}

impl AugConfig {
    pub fn new(crop: (usize, usize)) -> Self {
        Self {
            crop,
            geometric: true,
            intensity: true,
            copy_paste: true,
            brightness_range: (-0.2, 0.2),
            contrast_range: (0.7, 1.3),
            intensity_prob: 0.8,
            paste_area: (0.1, 0.4),
        }
    }

    pub fn weak_only(crop: (usize, usize)) -> Self {
        Self { intensity: false, copy_paste: false, ..Self::new(crop) }
    }
}

/// Uniform crop position, each flip with probability 1/2.
pub fn sample_geom(rng: &mut Rng, image_shape: (usize, usize), crop: (usize, usize)) -> Result<GeomTransform> {
    let (h, w) = image_shape;
    let (ch, cw) = crop;
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::Config(format!("crop {ch}x{cw} does not fit image {h}x{w}")));
    }
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    Ok(GeomTransform {
        crop_box: PixelBox::new(top, left, ch, cw),
        flip_h: rng.random_bool(0.5),
        flip_v: rng.random_bool(0.5),
    })
}

/// Deterministic centered crop, no flips.
pub fn center_geom(image_shape: (usize, usize), crop: (usize, usize)) -> Result<GeomTransform> {
    let (h, w) = image_shape;
    let (ch, cw) = crop;
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::Config(format!("crop {ch}x{cw} does not fit image {h}x{w}")));
    }
    Ok(GeomTransform { crop_box: PixelBox::new((h - ch) / 2, (w - cw) / 2, ch, cw), flip_h: false, flip_v: false })
}

/// Maps output pixel `(y, x)` of a transformed view to its source pixel.
#[inline]
fn source_of(t: &GeomTransform, y: usize, x: usize) -> (usize, usize) {
    let b = &t.crop_box;
    let yy = if t.flip_v { b.height - 1 - y } else { y };
    let xx = if t.flip_h { b.width - 1 - x } else { x };
    (b.top + yy, b.left + xx)
}

/// Crop then flip; pure index gathering, applied identically to the mask.
pub fn apply_geom(
    image: &ImageTensor,
    mask: Option<&MaskTensor>,
    t: &GeomTransform,
) -> Result<(ImageTensor, Option<MaskTensor>)> {
    let b = &t.crop_box;
    if !b.fits(image.height, image.width) || b.height == 0 || b.width == 0 {
        return Err(Error::Shape(format!("crop box {b:?} outside {}x{} image", image.height, image.width)));
    }
    if let Some(m) = mask {
        if (m.height, m.width) != (image.height, image.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {}x{}",
                m.height, m.width, image.height, image.width
            )));
        }
    }
    let mut out = ImageTensor::filled(image.channels, b.height, b.width, 0.0);
    for c in 0..image.channels {
        for y in 0..b.height {
            for x in 0..b.width {
                let (sy, sx) = source_of(t, y, x);
                *out.at_mut(c, y, x) = image.at(c, sy, sx);
            }
        }
    }
    let out_mask = mask.map(|m| {
        let mut d = Vec::with_capacity(b.area());
        for y in 0..b.height {
            for x in 0..b.width {
                let (sy, sx) = source_of(t, y, x);
                d.push(m.at(sy, sx));
            }
        }
        MaskTensor { height: b.height, width: b.width, data: d }
    });
    Ok((out, out_mask))
}

/// `clamp((x - mean) * contrast + mean + brightness, 0, 1)` with the mean
/// taken over the whole image.
pub fn apply_intensity(image: &ImageTensor, p: &IntensityParams) -> ImageTensor {
    let n = image.data.len().max(1) as f64;
    let mean = image.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let data = image
        .data
        .iter()
        .map(|&v| ((v as f64 - mean) * p.contrast_factor + mean + p.brightness_delta).clamp(0.0, 1.0) as f32)
        .collect();
    ImageTensor { data, ..*image }
}

pub fn sample_intensity(rng: &mut Rng, cfg: &AugConfig) -> IntensityParams {
    let mut p = IntensityParams::IDENTITY;
    if rng.random_bool(cfg.intensity_prob) {
        p.brightness_delta = rng.random_range(cfg.brightness_range.0..=cfg.brightness_range.1);
    }
    if rng.random_bool(cfg.intensity_prob) {
        p.contrast_factor = rng.random_range(cfg.contrast_range.0..=cfg.contrast_range.1);
    }
    p
}

/// A box covering a uniform fraction of the view in `cfg.paste_area`, with
/// log-uniform aspect ratio in `[1/2, 2]`.
pub fn sample_paste_box(rng: &mut Rng, view: (usize, usize), cfg: &AugConfig) -> PixelBox {
    let (h, w) = view;
    let ratio = rng.random_range(cfg.paste_area.0..=cfg.paste_area.1);
    let aspect = rng.random_range(0.5f64.ln()..=2.0f64.ln()).exp();
    let area = ratio * (h * w) as f64;
    let bh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let bw = ((area / bh as f64).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - bh);
    let left = rng.random_range(0..=w - bw);
    PixelBox::new(top, left, bh, bw)
}

fn check_plan(h: usize, w: usize, region: &PixelBox) -> Result<()> {
    if !region.fits(h, w) {
        return Err(Error::Shape(format!("paste box {region:?} outside {h}x{w} view")));
    }
    Ok(())
}

/// Replaces the target's pixels inside the plan's box with the source's
/// pixels at the same coordinates.
pub fn apply_paste(target: &ImageTensor, source: &ImageTensor, plan: &PastePlan) -> Result<ImageTensor> {
    if (target.channels, target.height, target.width) != (source.channels, source.height, source.width) {
        return Err(Error::Shape("paste source and target differ in shape".into()));
    }
    check_plan(target.height, target.width, &plan.region)?;
    let mut out = target.clone();
    let r = &plan.region;
    for c in 0..target.channels {
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                *out.at_mut(c, y, x) = source.at(c, y, x);
            }
        }
    }
    Ok(out)
}

/// Splices `planes` stacked `h×w` planes: inside the box from `source`,
/// elsewhere from `target`.
pub fn splice_planes<T: Copy>(target: &[T], source: &[T], h: usize, w: usize, region: &PixelBox) -> Result<Vec<T>> {
    if target.len() != source.len() || h * w == 0 || !target.len().is_multiple_of(h * w) {
        return Err(Error::Shape("splice inputs disagree in size".into()));
    }
    check_plan(h, w, region)?;
    let mut out = target.to_vec();
    for (p, plane) in out.chunks_exact_mut(h * w).enumerate() {
        let src = &source[p * h * w..(p + 1) * h * w];
        for y in region.top..region.top + region.height {
            let row = y * w;
            plane[row + region.left..row + region.left + region.width]
                .copy_from_slice(&src[row + region.left..row + region.left + region.width]);
        }
    }
    Ok(out)
}

/// Pseudo-label and confidence mask matching a pasted view: inside the box
/// both come from the source sample, elsewhere from the target.
pub fn mix_pseudo_labels(
    target_label: &MaskTensor,
    target_conf: &[f64],
    source_label: &MaskTensor,
    source_conf: &[f64],
    plan: Option<&PastePlan>,
) -> Result<(MaskTensor, Vec<f64>)> {
    let (h, w) = (target_label.height, target_label.width);
    if (source_label.height, source_label.width) != (h, w) || target_conf.len() != h * w || source_conf.len() != h * w {
        return Err(Error::Shape("pseudo-label inputs disagree in size".into()));
    }
    let Some(plan) = plan else {
        return Ok((target_label.clone(), target_conf.to_vec()));
    };
    let labels = splice_planes(&target_label.data, &source_label.data, h, w, &plan.region)?;
    let conf = splice_planes(target_conf, source_conf, h, w, &plan.region)?;
    Ok((MaskTensor { height: h, width: w, data: labels }, conf))
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub weak: ImageTensor,
    pub strong: ImageTensor,
    pub record: AugRecord,
}

/// Builds weak/strong views for a batch. Paste sources pair sample `i` with
/// `(i + 1) mod n` and copy the source's post-intensity pixels.
pub fn build_views(batch: &[&ImageTensor], rng: &mut Rng, cfg: &AugConfig) -> Result<Vec<View>> {
    if batch.is_empty() {
        return Err(Error::Shape("build_views needs a nonempty batch".into()));
    }
    let n = batch.len();
    let mut records = Vec::with_capacity(n);
    let mut weak = Vec::with_capacity(n);
    let mut jittered = Vec::with_capacity(n);
    for img in batch {
        let shape = (img.height, img.width);
        let geom = if cfg.geometric { sample_geom(rng, shape, cfg.crop)? } else { center_geom(shape, cfg.crop)? };
        let (w, _) = apply_geom(img, None, &geom)?;
        let intensity = cfg.intensity.then(|| sample_intensity(rng, cfg));
        jittered.push(match &intensity {
            Some(p) => apply_intensity(&w, p),
            None => w.clone(),
        });
        weak.push(w);
        records.push(AugRecord { geom, intensity, paste: None });
    }
    if cfg.copy_paste && n >= 2 {
        for (i, rec) in records.iter_mut().enumerate() {
            rec.paste =
                Some(PastePlan { source_batch_index: (i + 1) % n, region: sample_paste_box(rng, cfg.crop, cfg) });
        }
    }
    let mut views = Vec::with_capacity(n);
    for (i, (w, record)) in weak.into_iter().zip(records).enumerate() {
        let strong = match &record.paste {
            Some(plan) => apply_paste(&jittered[i], &jittered[plan.source_batch_index], plan)?,
            None => jittered[i].clone(),
        };
        views.push(View { weak: w, strong, record });
    }
    Ok(views)
}
