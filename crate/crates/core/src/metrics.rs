//! Overlap and surface-distance metrics on label grids.
//!
//! Distances are in pixels (unit spacing). Boundaries use 4-connectivity
//! with the image border counted as outside the class.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_labels, softmax_probs, NormStats, ParamSet, SegNet};
use crate::tensor::{MaskTensor, Tensor4};

fn check_pair(pred: &MaskTensor, gt: &MaskTensor) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// Dice and Jaccard of class `k` in percent. Both absent scores 100/100,
/// exactly one absent scores 0/0.
pub fn dice_jaccard(pred: &MaskTensor, gt: &MaskTensor, k: u8) -> Result<(f64, f64)> {
    check_pair(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == k, b == k);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok((100.0, 100.0));
    }
    let union = p + g - both;
    Ok((200.0 * both as f64 / (p + g) as f64, 100.0 * both as f64 / union as f64))
}

/// Coordinates of class pixels having a 4-neighbour outside the class.
pub fn boundary_pixels(mask: &MaskTensor, k: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.at(y as usize, x as usize) == k
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.at(y, x) != k {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn nearest(from: &[(usize, usize)], to: &[(usize, usize)], out: &mut Vec<f64>) {
    for &(y, x) in from {
        let best = to
            .iter()
            .map(|&(v, u)| {
                let dy = y as f64 - v as f64;
                let dx = x as f64 - u as f64;
                dy * dy + dx * dx
            })
            .fold(f64::INFINITY, f64::min);
        out.push(best.sqrt());
    }
}

/// Bidirectional nearest-boundary distances for class `k`, sorted ascending.
/// `None` when either boundary is empty.
pub fn surface_distances(pred: &MaskTensor, gt: &MaskTensor, k: u8) -> Result<Option<Vec<f64>>> {
    check_pair(pred, gt)?;
    let bp = boundary_pixels(pred, k);
    let bg = boundary_pixels(gt, k);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let mut d = Vec::with_capacity(bp.len() + bg.len());
    nearest(&bp, &bg, &mut d);
    nearest(&bg, &bp, &mut d);
    d.sort_by(f64::total_cmp);
    Ok(Some(d))
}

/// Nearest-rank 95th percentile of a sorted list: element `⌈0.95·n⌉ − 1`.
pub fn hd95(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let rank = (95 * n).div_ceil(100);
    Some(sorted[rank - 1])
}

pub fn asd(distances: &[f64]) -> Option<f64> {
    if distances.is_empty() {
        return None;
    }
    Some(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// Metrics of one class on one sample. Distances are `None` when exactly one
/// of prediction and ground truth lacks the class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn class_score(pred: &MaskTensor, gt: &MaskTensor, k: u8) -> Result<ClassScore> {
    let (dice, jaccard) = dice_jaccard(pred, gt, k)?;
    let present = (pred.data.contains(&k), gt.data.contains(&k));
    let (hd, sd) = match present {
        (false, false) => (Some(0.0), Some(0.0)),
        _ => match surface_distances(pred, gt, k)? {
            Some(d) => (hd95(&d), asd(&d)),
            None => (None, None),
        },
    };
    Ok(ClassScore { dice, jaccard, hd95: hd, asd: sd })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Student,
    Teacher,
}

impl Which {
    pub fn as_str(self) -> &'static str {
        match self {
            Which::Student => "student",
            Which::Teacher => "teacher",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Which::Student),
            "teacher" => Ok(Which::Teacher),
            other => Err(Error::Config(format!("expected `student` or `teacher`, got `{other}`"))),
        }
    }
}

/// Averages over samples; distance means skip undefined samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    /// Class id, or `None` for the mean over foreground classes.
    pub class: Option<u8>,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Samples whose distances were undefined.
    pub undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub which: Which,
    pub n_samples: usize,
    pub per_class: Vec<ClassSummary>,
    pub mean: ClassSummary,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    /// Aggregates per-sample foreground scores (`scores[s][k-1]` for class `k`).
    pub fn from_scores(which: Which, scores: &[Vec<ClassScore>]) -> Result<Self> {
        let Some(first) = scores.first() else {
            return Err(Error::EmptySplit("no samples to aggregate".into()));
        };
        let n = scores.len() as f64;
        let per_class: Vec<ClassSummary> = (0..first.len())
            .map(|c| ClassSummary {
                class: Some(c as u8 + 1),
                dice: scores.iter().map(|s| s[c].dice).sum::<f64>() / n,
                jaccard: scores.iter().map(|s| s[c].jaccard).sum::<f64>() / n,
                hd95: mean_defined(scores.iter().map(|s| s[c].hd95)),
                asd: mean_defined(scores.iter().map(|s| s[c].asd)),
                undefined: scores.iter().filter(|s| s[c].hd95.is_none()).count(),
            })
            .collect();
        let k = per_class.len() as f64;
        let mean = ClassSummary {
            class: None,
            dice: per_class.iter().map(|c| c.dice).sum::<f64>() / k,
            jaccard: per_class.iter().map(|c| c.jaccard).sum::<f64>() / k,
            hd95: mean_defined(per_class.iter().map(|c| c.hd95)),
            asd: mean_defined(per_class.iter().map(|c| c.asd)),
            undefined: per_class.iter().map(|c| c.undefined).sum(),
        };
        Ok(Self { which, n_samples: scores.len(), per_class, mean })
    }

    pub fn rows(&self) -> impl Iterator<Item = &ClassSummary> {
        self.per_class.iter().chain(std::iter::once(&self.mean))
    }

    pub const CSV_HEADER: &'static str = "which,class,dice,jaccard,hd95,asd,undefined";

    pub fn csv_rows(&self, prefix: Option<&str>) -> String {
        let mut s = String::new();
        for r in self.rows() {
            let class = r.class.map_or_else(|| "mean".to_string(), |c| c.to_string());
            if let Some(p) = prefix {
                s.push_str(p);
                s.push(',');
            }
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{},{},{}",
                self.which.as_str(),
                class,
                r.dice,
                r.jaccard,
                fmt_opt(r.hd95),
                fmt_opt(r.asd),
                r.undefined
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows(None))
    }

    /// Markdown table with the usual arrow-annotated column names.
    pub fn to_table(&self) -> String {
        let mut s = format!("{} on {} samples\n\n", self.which.as_str(), self.n_samples);
        s.push_str("| Class | Dice↑ (%) | Jaccard↑ (%) | 95HD↓ (px) | ASD↓ (px) | undefined |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in self.rows() {
            let class = r.class.map_or_else(|| "mean".to_string(), |c| c.to_string());
            let _ = writeln!(
                s,
                "| {class} | {:.2} | {:.2} | {} | {} | {} |",
                r.dice,
                r.jaccard,
                r.hd95.map_or_else(|| "-".into(), |v| format!("{v:.2}")),
                r.asd.map_or_else(|| "-".into(), |v| format!("{v:.2}")),
                r.undefined
            );
        }
        s
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }
}

/// Foreground scores of a prediction against ground truth over `K` classes.
pub fn score_sample(pred: &MaskTensor, gt: &MaskTensor, num_classes: usize) -> Result<Vec<ClassScore>> {
    (1..num_classes).map(|k| class_score(pred, gt, k as u8)).collect()
}

/// Running-statistics forward on every sample, argmax prediction, and
/// aggregate metrics. Samples are processed in chunks in a fixed order.
pub fn evaluate(
    net: &SegNet,
    params: &ParamSet,
    stats: &NormStats,
    samples: &[(&crate::tensor::ImageTensor, &MaskTensor)],
    which: Which,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation split has no samples".into()));
    }
    const CHUNK: usize = 8;
    let k = net.config().num_classes;
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let images: Vec<_> = chunk.iter().map(|(img, _)| *img).collect();
        let x = Tensor4::from_images(&images)?;
        let logits = net.forward_eval(params, stats, &x)?;
        let preds = argmax_labels(&softmax_probs(&logits));
        for (pred, (_, gt)) in preds.iter().zip(chunk) {
            scores.push(score_sample(pred, gt, k)?);
        }
    }
    MetricsReport::from_scores(which, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, cells: &[(usize, usize)]) -> MaskTensor {
        let mut m = MaskTensor::filled(h, w, 0);
        for &(y, x) in cells {
            m.data[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn overlap_cases() {
        let a = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(dice_jaccard(&a, &a, 1).unwrap(), (100.0, 100.0));
        let b = mask(3, 3, &[(2, 2)]);
        assert_eq!(dice_jaccard(&a, &b, 1).unwrap(), (0.0, 0.0));
        let empty = mask(3, 3, &[]);
        assert_eq!(dice_jaccard(&empty, &empty, 1).unwrap(), (100.0, 100.0));
        assert_eq!(dice_jaccard(&empty, &b, 1).unwrap(), (0.0, 0.0));
        let (d, j) = dice_jaccard(&mask(3, 3, &[(0, 0)]), &mask(3, 3, &[(0, 0), (0, 1)]), 1).unwrap();
        assert!((d - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(j, 50.0);
    }

    #[test]
    fn single_pixels_at_three_four_offset() {
        let d = surface_distances(&mask(8, 8, &[(0, 0)]), &mask(8, 8, &[(3, 4)]), 1).unwrap().unwrap();
        assert_eq!(d, vec![5.0, 5.0]);
        assert_eq!(hd95(&d), Some(5.0));
    }

    #[test]
    fn boundary_of_filled_square_excludes_interior() {
        let cells: Vec<_> = (1..4).flat_map(|y| (1..4).map(move |x| (y, x))).collect();
        let b = boundary_pixels(&mask(5, 5, &cells), 1);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        // Touching the border makes edge pixels boundary even with class neighbours.
        let full = MaskTensor::filled(3, 3, 1);
        assert_eq!(boundary_pixels(&full, 1).len(), 8);
    }

    #[test]
    fn percentile_and_mean() {
        // Rank ⌈0.95·20⌉ = 19 lands on the last zero; with one zero fewer
        // the rank ⌈0.95·19⌉ = 19 is the outlier.
        let mut v = vec![0.0; 19];
        v.push(100.0);
        assert_eq!(hd95(&v), Some(0.0));
        v.remove(0);
        assert_eq!(hd95(&v), Some(100.0));
        assert_eq!(hd95(&[7.0]), Some(7.0));
        assert_eq!(hd95(&[]), None);
        assert_eq!(asd(&[1.0, 3.0]), Some(2.0));
        assert_eq!(hd95(&[0.0; 5]), Some(0.0));
    }

    #[test]
    fn undefined_surface_is_counted() {
        let gt = mask(4, 4, &[(1, 1)]);
        let empty = mask(4, 4, &[]);
        let s = class_score(&empty, &gt, 1).unwrap();
        assert_eq!(s.hd95, None);
        let perfect = class_score(&gt, &gt, 1).unwrap();
        let report = MetricsReport::from_scores(Which::Student, &[vec![s], vec![perfect]]).unwrap();
        assert_eq!(report.per_class[0].undefined, 1);
        assert_eq!(report.per_class[0].hd95, Some(0.0));
        assert_eq!(report.per_class[0].dice, 50.0);
        assert!(report.to_csv().lines().count() == 3);
        assert!(MetricsReport::from_scores(Which::Student, &[]).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = MaskTensor> {
        proptest::collection::vec(0u8..2, 36).prop_map(|d| MaskTensor { height: 6, width: 6, data: d })
    }

    proptest! {
        #[test]
        fn symmetric_distances(a in arb_mask(), b in arb_mask()) {
            let ab = surface_distances(&a, &b, 1).unwrap();
            let ba = surface_distances(&b, &a, 1).unwrap();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn dice_at_least_jaccard(a in arb_mask(), b in arb_mask()) {
            let (d, j) = dice_jaccard(&a, &b, 1).unwrap();
            prop_assert!(d >= j - 1e-12);
            prop_assert!((0.0..=100.0).contains(&d) && (0.0..=100.0).contains(&j));
        }

        #[test]
        fn translation_invariance(a in proptest::collection::vec(0u8..2, 16), b in proptest::collection::vec(0u8..2, 16), dy in 0usize..3, dx in 0usize..3) {
            // Embed both 4×4 masks into a 10×10 canvas at two offsets; the
            // canvas keeps a one-pixel margin so the border never interferes.
            let embed = |src: &[u8], oy: usize, ox: usize| {
                let mut m = MaskTensor::filled(10, 10, 0);
                for y in 0..4 {
                    for x in 0..4 {
                        m.data[(y + 1 + oy) * 10 + x + 1 + ox] = src[y * 4 + x];
                    }
                }
                m
            };
            let s0 = class_score(&embed(&a, 0, 0), &embed(&b, 0, 0), 1).unwrap();
            let s1 = class_score(&embed(&a, dy, dx), &embed(&b, dy, dx), 1).unwrap();
            prop_assert_eq!(s0, s1);
        }
    }
}
