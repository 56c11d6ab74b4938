//! Per-pixel class distributions over `N×K×H×W` tensors.

use crate::error::{Error, Result};
use crate::tensor::{MaskTensor, Tensor4};

/// Softmax over the class axis, stabilized by subtracting the per-pixel max.
pub fn softmax_probs(logits: &Tensor4) -> Tensor4 {
    let hw = logits.plane();
    let k = logits.c;
    let mut out = logits.clone();
    for n in 0..logits.n {
        let s = out.sample_mut(n);
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(s[c * hw + p]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (s[c * hw + p] - mx).exp();
                s[c * hw + p] = e;
                z += e;
            }
            for c in 0..k {
                s[c * hw + p] /= z;
            }
        }
    }
    out
}

/// Chain rule through softmax: `dz_k = p_k (g_k - Σ_j p_j g_j)`.
pub fn softmax_backward(probs: &Tensor4, grad_probs: &Tensor4) -> Tensor4 {
    let hw = probs.plane();
    let k = probs.c;
    let mut out = Tensor4::zeros(probs.n, probs.c, probs.h, probs.w);
    for n in 0..probs.n {
        let p = probs.sample(n);
        let g = grad_probs.sample(n);
        let o = out.sample_mut(n);
        for px in 0..hw {
            let dot: f64 = (0..k).map(|c| p[c * hw + px] * g[c * hw + px]).sum();
            for c in 0..k {
                o[c * hw + px] = p[c * hw + px] * (g[c * hw + px] - dot);
            }
        }
    }
    out
}

/// Per-pixel argmax; ties resolve to the lowest class index.
pub fn argmax_labels(probs: &Tensor4) -> Vec<MaskTensor> {
    let hw = probs.plane();
    (0..probs.n)
        .map(|n| {
            let s = probs.sample(n);
            let data = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..probs.c {
                        if s[c * hw + p] > s[best * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            MaskTensor { height: probs.h, width: probs.w, data }
        })
        .collect()
}

/// Stacks masks into an `N×K×H×W` one-hot tensor.
pub fn one_hot(masks: &[&MaskTensor], num_classes: usize) -> Result<Tensor4> {
    let first = masks.first().ok_or_else(|| Error::Shape("one_hot of an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut out = Tensor4::zeros(masks.len(), num_classes, h, w);
    let hw = h * w;
    for (n, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Shape("one_hot masks differ in size".into()));
        }
        let s = out.sample_mut(n);
        for (p, &c) in m.data.iter().enumerate() {
            if c as usize >= num_classes {
                return Err(Error::Shape(format!("class {c} >= {num_classes}")));
            }
            s[c as usize * hw + p] = 1.0;
        }
    }
    Ok(out)
}
