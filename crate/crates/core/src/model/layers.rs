//! Batched layer kernels with explicit backward passes.
//!
//! Convolutions lower to `im2col` + GEMM per sample. All reductions run in a
//! fixed order so results are bit-reproducible.

use std::cell::RefCell;

use crate::tensor::Tensor4;

thread_local! {
    static SCRATCH: RefCell<[Vec<f64>; 2]> = const { RefCell::new([Vec::new(), Vec::new()]) };
}

/// Runs `f` with two per-thread work buffers of `len` elements each. The
/// buffers hold stale data from earlier calls, so `f` must write every
/// element before reading it. Reusing them avoids zeroing megabytes per
/// convolution.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let [a, b] = &mut *bufs;
        if a.len() < len {
            a.resize(len, 0.0);
            b.resize(len, 0.0);
        }
        f(&mut a[..len], &mut b[..len])
    })
}

/// `C = A·B + beta·C` for row/column strided f64 matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cols: usize, rs: usize, cs: usize| (r - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C too small");
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A too small");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B too small");
    }
    // SAFETY: every index touched is bounded by the asserts above; the
    // output does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Lowers one `cin×h×w` sample to a `(cin·k·k)×(h·w)` column matrix for a
/// stride-1 convolution with zero padding `k/2`.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..x0.min(w)].fill(0.0);
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0).min(w)..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (w as isize - dxo).min(w as isize).max(0) as usize;
                    for x in x0..x1.max(x0) {
                        dst[(x as isize + dxo) as usize] += src[x];
                    }
                }
            }
        }
    }
}

/// Stride-1 `k×k` convolution, zero padding `k/2`. Weight layout
/// `[cout, cin, k, k]`.
pub(crate) fn conv_forward(x: &Tensor4, weight: &[f64], bias: Option<&[f64]>, cout: usize, k: usize) -> Tensor4 {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = Tensor4::zeros(x.n, cout, h, w);
    let scratch = if k == 1 { 0 } else { kk * hw };
    with_scratch(scratch, |cols, _| {
        for n in 0..x.n {
            let src = x.sample(n);
            let b: &[f64] = if k == 1 {
                src
            } else {
                im2col(src, cin, h, w, k, cols);
                cols
            };
            let dst = out.sample_mut(n);
            if let Some(bias) = bias {
                for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
                    plane.fill(bias[co]);
                }
            }
            gemm(cout, kk, hw, weight, (kk, 1), b, (hw, 1), if bias.is_some() { 1.0 } else { 0.0 }, dst, (hw, 1));
        }
    });
    out
}

/// Gradients of [`conv_forward`]. Accumulates into `dweight`/`dbias`;
/// returns `dx` when requested.
pub(crate) fn conv_backward(
    x: &Tensor4,
    weight: &[f64],
    dy: &Tensor4,
    k: usize,
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor4> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = dy.c;
    let hw = h * w;
    let kk = cin * k * k;
    let mut dx = need_dx.then(|| Tensor4::zeros(x.n, cin, h, w));
    let scratch = if k == 1 { 0 } else { kk * hw };
    with_scratch(scratch, |cols, dcols| {
        for n in 0..x.n {
            let src = x.sample(n);
            let g = dy.sample(n);
            let b: &[f64] = if k == 1 {
                src
            } else {
                im2col(src, cin, h, w, k, cols);
                cols
            };
            // dW[cout, kk] += dY[cout, hw] · cols[kk, hw]^T
            gemm(cout, hw, kk, g, (hw, 1), b, (1, hw), 1.0, dweight, (kk, 1));
            if let Some(dx) = dx.as_mut() {
                if k == 1 {
                    // dX[cin, hw] = W^T[cin, cout] · dY[cout, hw]
                    gemm(cin, cout, hw, weight, (1, kk), g, (hw, 1), 0.0, dx.sample_mut(n), (hw, 1));
                } else {
                    gemm(kk, cout, hw, weight, (1, kk), g, (hw, 1), 0.0, dcols, (hw, 1));
                    col2im(dcols, cin, h, w, k, dx.sample_mut(n));
                }
            }
        }
    });
    if let Some(db) = dbias {
        for n in 0..dy.n {
            for (co, plane) in dy.sample(n).chunks_exact(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
    }
    dx
}

/// 2×2 stride-2 transposed convolution. Weight layout `[cin, cout, 2, 2]`.
pub(crate) fn upconv_forward(x: &Tensor4, weight: &[f64], bias: &[f64], cout: usize) -> Tensor4 {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let m = cout * 4;
    let mut out = Tensor4::zeros(x.n, cout, 2 * h, 2 * w);
    with_scratch(m * hw, |ycol, _| {
        for n in 0..x.n {
            // Y[(co,a,b), hw] = W^T[(co,a,b), cin] · X[cin, hw]
            gemm(m, cin, hw, weight, (1, m), x.sample(n), (hw, 1), 0.0, ycol, (hw, 1));
            let dst = out.sample_mut(n);
            for co in 0..cout {
                for a in 0..2 {
                    for b in 0..2 {
                        let row = &ycol[(co * 4 + a * 2 + b) * hw..][..hw];
                        for y in 0..h {
                            let orow = &mut dst[(co * 2 * h + 2 * y + a) * 2 * w..][..2 * w];
                            for xx in 0..w {
                                orow[2 * xx + b] = row[y * w + xx] + bias[co];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn upconv_backward(
    x: &Tensor4,
    weight: &[f64],
    dy: &Tensor4,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Tensor4 {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = dy.c;
    let hw = h * w;
    let m = cout * 4;
    let mut dx = Tensor4::zeros(x.n, cin, h, w);
    with_scratch(m * hw, |gcol, _| {
        for n in 0..x.n {
            let g = dy.sample(n);
            for co in 0..cout {
                for a in 0..2 {
                    for b in 0..2 {
                        let row = &mut gcol[(co * 4 + a * 2 + b) * hw..][..hw];
                        for y in 0..h {
                            let grow = &g[(co * 2 * h + 2 * y + a) * 2 * w..][..2 * w];
                            for xx in 0..w {
                                row[y * w + xx] = grow[2 * xx + b];
                            }
                        }
                    }
                }
            }
            for co in 0..cout {
                dbias[co] += gcol[co * 4 * hw..(co + 1) * 4 * hw].iter().sum::<f64>();
            }
            // dW[cin, m] += X[cin, hw] · G[m, hw]^T
            gemm(cin, hw, m, x.sample(n), (hw, 1), gcol, (1, hw), 1.0, dweight, (m, 1));
            // dX[cin, hw] = W[cin, m] · G[m, hw]
            gemm(cin, m, hw, weight, (m, 1), gcol, (hw, 1), 0.0, dx.sample_mut(n), (hw, 1));
        }
    });
    dx
}

/// Per-channel batch statistics over `(N, H, W)`: biased mean and variance.
pub(crate) fn channel_stats(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let hw = x.plane();
    let count = (x.n * hw) as f64;
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for c in 0..x.c {
        let mut s = 0.0;
        for n in 0..x.n {
            s += x.sample(n)[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for n in 0..x.n {
            v += x.sample(n)[c * hw..(c + 1) * hw].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

/// `relu(gamma · (x - mean) · inv_std + beta)`, also returning `xhat`.
pub(crate) fn norm_relu_forward(
    x: &Tensor4,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    keep_xhat: bool,
) -> (Tensor4, Option<Vec<f64>>) {
    let hw = x.plane();
    let mut out = Vec::with_capacity(x.data.len());
    let mut xhat = keep_xhat.then(|| Vec::with_capacity(x.data.len()));
    for (i, plane) in x.data.chunks_exact(hw).enumerate() {
        let c = i % x.c;
        let (m, s, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        if let Some(xhat) = xhat.as_mut() {
            xhat.extend(plane.iter().map(|&v| (v - m) * s));
        }
        out.extend(plane.iter().map(|&v| (g * ((v - m) * s) + b).max(0.0)));
    }
    let out = Tensor4 { n: x.n, c: x.c, h: x.h, w: x.w, data: out };
    (out, xhat)
}

/// Backward of batch-statistics normalization followed by ReLU.
pub(crate) fn norm_relu_backward(
    dy: &Tensor4,
    out: &Tensor4,
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor4 {
    let hw = dy.plane();
    let count = (dy.n * hw) as f64;
    let dz: Vec<f64> = dy.data.iter().zip(&out.data).map(|(&g, &o)| if o <= 0.0 { 0.0 } else { g }).collect();
    let mut scale = vec![0.0; dy.c];
    let mut sums = vec![(0.0, 0.0); dy.c];
    for c in 0..dy.c {
        let mut sum_dz = 0.0;
        let mut sum_dz_xhat = 0.0;
        for n in 0..dy.n {
            let off = (n * dy.c + c) * hw;
            for i in off..off + hw {
                sum_dz += dz[i];
                sum_dz_xhat += dz[i] * xhat[i];
            }
        }
        dgamma[c] += sum_dz_xhat;
        dbeta[c] += sum_dz;
        scale[c] = gamma[c] * inv_std[c] / count;
        sums[c] = (sum_dz, sum_dz_xhat);
    }
    let mut dx = Vec::with_capacity(dz.len());
    for (i, (g, xh)) in dz.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
        let c = i % dy.c;
        let (sc, (sum_dz, sum_dz_xhat)) = (scale[c], sums[c]);
        dx.extend(g.iter().zip(xh).map(|(&g, &x)| sc * (count * g - sum_dz - x * sum_dz_xhat)));
    }
    Tensor4 { n: dy.n, c: dy.c, h: dy.h, w: dy.w, data: dx }
}

/// 2×2 max pooling; returns the pooled tensor and the winning offset (0..4)
/// of every output cell. Ties keep the first offset in row-major order.
pub(crate) fn maxpool_forward(x: &Tensor4) -> (Tensor4, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut which = 0u8;
                for (o, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = src[(2 * y + dy) * x.w + 2 * xx + dx];
                    if v > best {
                        best = v;
                        which = o as u8;
                    }
                }
                let oi = nc * oh * ow + y * ow + xx;
                out.data[oi] = best;
                arg[oi] = which;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(dy: &Tensor4, arg: &[u8], h: usize, w: usize) -> Tensor4 {
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for nc in 0..dy.n * dy.c {
        for y in 0..oh {
            for xx in 0..ow {
                let oi = nc * oh * ow + y * ow + xx;
                let o = arg[oi] as usize;
                dx.data[nc * h * w + (2 * y + o / 2) * w + 2 * xx + o % 2] += dy.data[oi];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat_channels(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for n in 0..a.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor4 { n: a.n, c: a.c + b.c, h: a.h, w: a.w, data }
}

pub(crate) fn split_channels(x: &Tensor4, ca: usize) -> (Tensor4, Tensor4) {
    let cb = x.c - ca;
    let la = ca * x.plane();
    let mut a = Vec::with_capacity(x.n * la);
    let mut b = Vec::with_capacity(x.data.len() - x.n * la);
    for n in 0..x.n {
        let src = x.sample(n);
        a.extend_from_slice(&src[..la]);
        b.extend_from_slice(&src[la..]);
    }
    (Tensor4 { n: x.n, c: ca, h: x.h, w: x.w, data: a }, Tensor4 { n: x.n, c: cb, h: x.h, w: x.w, data: b })
}
