use rand_distr::{Distribution, Normal};

use super::layers::{
    channel_stats, concat_channels, conv_backward, conv_forward, maxpool_backward, maxpool_forward, norm_relu_backward,
    norm_relu_forward, split_channels, upconv_backward, upconv_forward,
};
use super::params::{NormStats, Param, ParamKind, ParamSet, RunningStats};
use super::{ForwardMode, SegNetConfig, BN_EPS};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor4;

/// conv3×3 (no bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
struct ConvNormRelu {
    weight: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
struct Block {
    first: ConvNormRelu,
    second: ConvNormRelu,
}

#[derive(Debug, Clone)]
struct UpStage {
    weight: usize,
    bias: usize,
    cout: usize,
    block: Block,
}

#[derive(Debug, Clone)]
struct Head {
    weight: usize,
    bias: usize,
}

struct Layout {
    params: Vec<Param>,
    norms: Vec<RunningStats>,
}

impl Layout {
    fn param(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        let len = shape.iter().product();
        self.params.push(Param { name, shape, kind, data: vec![0.0; len] });
        self.params.len() - 1
    }

    fn cnr(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvNormRelu {
        let weight = self.param(format!("{prefix}.conv.weight"), vec![cout, cin, 3, 3], ParamKind::Weight);
        let gamma = self.param(format!("{prefix}.norm.weight"), vec![cout], ParamKind::NormScale);
        let beta = self.param(format!("{prefix}.norm.bias"), vec![cout], ParamKind::NormShift);
        self.norms.push(RunningStats { name: format!("{prefix}.norm"), mean: vec![0.0; cout], var: vec![1.0; cout] });
        ConvNormRelu { weight, gamma, beta, norm: self.norms.len() - 1, cout }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> Block {
        Block {
            first: self.cnr(&format!("{prefix}.0"), cin, cout),
            second: self.cnr(&format!("{prefix}.1"), cout, cout),
        }
    }
}

/// UNet with `depth` pooling stages; channel width doubles per stage.
#[derive(Debug, Clone)]
pub struct SegNet {
    cfg: SegNetConfig,
    encoder: Vec<Block>,
    bottleneck: Block,
    /// Deepest stage first.
    decoder: Vec<UpStage>,
    head: Head,
    template: ParamSet,
    norm_template: NormStats,
}

struct CnrTape {
    input: Tensor4,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    out: Tensor4,
}

struct BlockTape {
    first: CnrTape,
    second: CnrTape,
}

struct PoolTape {
    argmax: Vec<u8>,
    h: usize,
    w: usize,
}

/// Activations recorded by a `Train` forward for the backward pass.
pub struct Tape {
    encoder: Vec<(BlockTape, PoolTape)>,
    bottleneck: BlockTape,
    decoder: Vec<(Tensor4, usize, BlockTape)>,
    head_input: Tensor4,
}

pub struct ForwardOutput {
    pub logits: Tensor4,
    pub tape: Option<Tape>,
}

enum StatsAccess<'a> {
    Update(&'a mut NormStats, f64),
    Frozen(&'a NormStats),
}

impl SegNet {
    pub fn new(cfg: SegNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut l = Layout { params: Vec::new(), norms: Vec::new() };
        let width = |s: usize| cfg.base_channels << s;
        let mut encoder = Vec::new();
        let mut cin = cfg.in_channels;
        for s in 0..cfg.depth {
            encoder.push(l.block(&format!("enc{s}"), cin, width(s)));
            cin = width(s);
        }
        let bottleneck = l.block("mid", cin, width(cfg.depth));
        let mut decoder = Vec::new();
        for s in (0..cfg.depth).rev() {
            let up_in = width(s + 1);
            let cout = width(s);
            let weight = l.param(format!("dec{s}.up.weight"), vec![up_in, cout, 2, 2], ParamKind::Weight);
            let bias = l.param(format!("dec{s}.up.bias"), vec![cout], ParamKind::Bias);
            let block = l.block(&format!("dec{s}"), 2 * cout, cout);
            decoder.push(UpStage { weight, bias, cout, block });
        }
        let head = Head {
            weight: l.param("head.weight".into(), vec![cfg.num_classes, width(0), 1, 1], ParamKind::Weight),
            bias: l.param("head.bias".into(), vec![cfg.num_classes], ParamKind::Bias),
        };
        Ok(Self {
            cfg,
            encoder,
            bottleneck,
            decoder,
            head,
            template: ParamSet::new(l.params),
            norm_template: NormStats { layers: l.norms },
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    /// Deterministic He-normal kernels, unit norm scales, zero shifts/biases,
    /// running mean 0 and variance 1.
    pub fn init(&self, seed: u64) -> (ParamSet, NormStats) {
        let mut rng = stream_rng(seed, Stream::Init);
        let mut params = self.template.clone();
        for p in params.iter_mut() {
            match p.kind {
                ParamKind::Weight => {
                    // Conv kernels are [cout, cin, k, k]; transposed kernels [cin, cout, 2, 2]
                    // where each output position sees `cin` inputs.
                    let fan_in =
                        if p.name.contains(".up.") { p.shape[0] } else { p.shape[1] * p.shape[2] * p.shape[3] };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    for v in p.data.iter_mut() {
                        *v = normal.sample(&mut rng);
                    }
                }
                ParamKind::NormScale => p.data.fill(1.0),
                ParamKind::Bias | ParamKind::NormShift => p.data.fill(0.0),
            }
        }
        (params, self.norm_template.clone())
    }

    pub fn num_parameters(&self) -> usize {
        self.template.num_scalars()
    }

    fn check_input(&self, params: &ParamSet, stats: &NormStats, x: &Tensor4) -> Result<()> {
        params.check_layout(&self.template)?;
        stats.check_layout(&self.norm_template)?;
        if x.c != self.cfg.in_channels {
            return Err(Error::Shape(format!("input has {} channels, model expects {}", x.c, self.cfg.in_channels)));
        }
        let m = self.cfg.size_multiple();
        if x.n == 0 || x.h == 0 || x.w == 0 || !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {}x{}x{}x{}: batch must be nonempty and H, W multiples of {m}",
                x.n, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        stats: &mut NormStats,
        x: &Tensor4,
        mode: ForwardMode,
    ) -> Result<ForwardOutput> {
        self.check_input(params, stats, x)?;
        let momentum = self.cfg.norm_momentum;
        Ok(match mode {
            ForwardMode::Eval => {
                ForwardOutput { logits: self.run(params, &mut StatsAccess::Frozen(stats), x, false).0, tape: None }
            }
            ForwardMode::Train => {
                let (logits, tape) = self.run(params, &mut StatsAccess::Update(stats, momentum), x, true);
                ForwardOutput { logits, tape }
            }
            ForwardMode::StatsOnly => ForwardOutput {
                logits: self.run(params, &mut StatsAccess::Update(stats, momentum), x, false).0,
                tape: None,
            },
        })
    }

    /// `Eval` forward through a shared reference.
    pub fn forward_eval(&self, params: &ParamSet, stats: &NormStats, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(params, stats, x)?;
        Ok(self.run(params, &mut StatsAccess::Frozen(stats), x, false).0)
    }

    fn run(
        &self,
        params: &ParamSet,
        stats: &mut StatsAccess<'_>,
        x: &Tensor4,
        record: bool,
    ) -> (Tensor4, Option<Tape>) {
        let mut enc_tapes = Vec::new();
        let mut skips = Vec::new();
        let mut h = x.clone();
        for block in &self.encoder {
            let (out, bt) = self.block_forward(block, params, stats, h, record);
            let (pooled, argmax) = maxpool_forward(&out);
            if let Some(bt) = bt {
                enc_tapes.push((bt, PoolTape { argmax, h: out.h, w: out.w }));
            }
            skips.push(out);
            h = pooled;
        }
        let (mut h, mid_tape) = self.block_forward(&self.bottleneck, params, stats, h, record);
        let mut dec_tapes = Vec::new();
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            let up = upconv_forward(&h, params.data(stage.weight), params.data(stage.bias), stage.cout);
            let cat = concat_channels(&up, &skip);
            let (out, bt) = self.block_forward(&stage.block, params, stats, cat, record);
            if let Some(bt) = bt {
                dec_tapes.push((h, stage.cout, bt));
            }
            h = out;
        }
        let logits =
            conv_forward(&h, params.data(self.head.weight), Some(params.data(self.head.bias)), self.cfg.num_classes, 1);
        let tape = record.then(|| Tape {
            encoder: enc_tapes,
            bottleneck: mid_tape.expect("recorded"),
            decoder: dec_tapes,
            head_input: h,
        });
        (logits, tape)
    }

    fn block_forward(
        &self,
        block: &Block,
        params: &ParamSet,
        stats: &mut StatsAccess<'_>,
        x: Tensor4,
        record: bool,
    ) -> (Tensor4, Option<BlockTape>) {
        let (mid, t1) = cnr_forward(&block.first, params, stats, x, record);
        let (out, t2) = cnr_forward(&block.second, params, stats, mid, record);
        let tape = match (t1, t2) {
            (Some(first), Some(second)) => Some(BlockTape { first, second }),
            _ => None,
        };
        (out, tape)
    }

    /// Parameter gradients for `grad_logits = dL/dlogits` of a recorded forward.
    pub fn backward(&self, params: &ParamSet, tape: Tape, grad_logits: &Tensor4) -> Result<ParamSet> {
        let mut grads = params.zeros_like();
        let Tape { encoder, bottleneck, decoder, head_input } = tape;
        if grad_logits.shape() != [head_input.n, self.cfg.num_classes, head_input.h, head_input.w] {
            return Err(Error::Shape("gradient does not match the recorded forward".into()));
        }
        let mut g = {
            let (dw, db) = two_mut(&mut grads, self.head.weight, self.head.bias);
            conv_backward(&head_input, params.data(self.head.weight), grad_logits, 1, dw, Some(db), true)
                .expect("dx requested")
        };
        let mut skip_grads = Vec::new();
        for (stage, (up_in, cout, bt)) in self.decoder.iter().zip(decoder).rev() {
            let dcat = block_backward(&stage.block, params, &mut grads, bt, g);
            let (dup, dskip) = split_channels(&dcat, cout);
            skip_grads.push(dskip);
            let (dw, db) = two_mut(&mut grads, stage.weight, stage.bias);
            g = upconv_backward(&up_in, params.data(stage.weight), &dup, dw, db);
        }
        g = block_backward(&self.bottleneck, params, &mut grads, bottleneck, g);
        for (i, (block, (bt, pool))) in self.encoder.iter().zip(encoder).enumerate().rev() {
            let mut dout = maxpool_backward(&g, &pool.argmax, pool.h, pool.w);
            let dskip = skip_grads.pop().expect("one skip gradient per stage");
            for (a, b) in dout.data.iter_mut().zip(&dskip.data) {
                *a += b;
            }
            if i == 0 {
                block_backward_input_free(block, params, &mut grads, bt, dout);
            } else {
                g = block_backward(block, params, &mut grads, bt, dout);
            }
        }
        Ok(grads)
    }
}

fn two_mut(grads: &mut ParamSet, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let mut it = grads.iter_mut();
    let pa = it.nth(a).expect("index");
    let pb = it.nth(b - a - 1).expect("index");
    (&mut pa.data, &mut pb.data)
}

fn three_mut(grads: &mut ParamSet, a: usize, b: usize, c: usize) -> (&mut [f64], &mut [f64], &mut [f64]) {
    assert!(a < b && b < c);
    let mut it = grads.iter_mut();
    let pa = it.nth(a).expect("index");
    let pb = it.nth(b - a - 1).expect("index");
    let pc = it.nth(c - b - 1).expect("index");
    (&mut pa.data, &mut pb.data, &mut pc.data)
}

fn cnr_forward(
    layer: &ConvNormRelu,
    params: &ParamSet,
    stats: &mut StatsAccess<'_>,
    x: Tensor4,
    record: bool,
) -> (Tensor4, Option<CnrTape>) {
    let z = conv_forward(&x, params.data(layer.weight), None, layer.cout, 3);
    let (mean, var) = match stats {
        StatsAccess::Frozen(s) => {
            let l = &s.layers[layer.norm];
            (l.mean.clone(), l.var.clone())
        }
        StatsAccess::Update(s, m) => {
            let (mean, var) = channel_stats(&z);
            let count = (z.n * z.plane()) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let l = &mut s.layers[layer.norm];
            let m = *m;
            for c in 0..layer.cout {
                l.mean[c] = (1.0 - m) * l.mean[c] + m * mean[c];
                l.var[c] = (1.0 - m) * l.var[c] + m * var[c] * unbias;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (out, xhat) = norm_relu_forward(&z, &mean, &inv_std, params.data(layer.gamma), params.data(layer.beta), record);
    let tape = record.then(|| CnrTape { input: x, xhat: xhat.expect("recorded"), inv_std, out: out.clone() });
    (out, tape)
}

fn cnr_backward(
    layer: &ConvNormRelu,
    params: &ParamSet,
    grads: &mut ParamSet,
    tape: CnrTape,
    dy: Tensor4,
    need_dx: bool,
) -> Option<Tensor4> {
    let dz = {
        let (_, dgamma, dbeta) = three_mut(grads, layer.weight, layer.gamma, layer.beta);
        norm_relu_backward(&dy, &tape.out, &tape.xhat, &tape.inv_std, params.data(layer.gamma), dgamma, dbeta)
    };
    conv_backward(&tape.input, params.data(layer.weight), &dz, 3, grads.data_mut(layer.weight), None, need_dx)
}

fn block_backward(block: &Block, params: &ParamSet, grads: &mut ParamSet, tape: BlockTape, dy: Tensor4) -> Tensor4 {
    let dmid = cnr_backward(&block.second, params, grads, tape.second, dy, true).expect("dx");
    cnr_backward(&block.first, params, grads, tape.first, dmid, true).expect("dx")
}

/// First block: the network input needs no gradient.
fn block_backward_input_free(block: &Block, params: &ParamSet, grads: &mut ParamSet, tape: BlockTape, dy: Tensor4) {
    let dmid = cnr_backward(&block.second, params, grads, tape.second, dy, true).expect("dx");
    cnr_backward(&block.first, params, grads, tape.first, dmid, false);
}
