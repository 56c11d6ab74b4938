use crate::error::Result;
use crate::model::{ParamKind, ParamSet};

/// Heavy-ball SGD: `buf ← μ·buf + g (+ wd·w for kernels)`, `w ← w − lr·buf`.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    buffers: &mut ParamSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(buffers)?;
    for ((p, g), b) in params.iter_mut().zip(grads.iter()).zip(buffers.iter_mut()) {
        let wd = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
        for ((w, &gi), bi) in p.data.iter_mut().zip(&g.data).zip(b.data.iter_mut()) {
            let step = gi + wd * *w;
            *bi = momentum * *bi + step;
            *w -= lr * *bi;
        }
    }
    Ok(())
}
