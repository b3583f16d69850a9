//! The full network: stem convolution, residual stages, classifier head.
//!
//! [`Model`] holds real-valued proxy weights for training; [`QuantModel`] is
//! the frozen deployable form with integer weights. Both drive the same
//! real-valued forward pass, [`forward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{expand_kernel, mux, Activation, CflogConfig, CflogWeights, ModelConfig};
use crate::ca::{default_seed, generate_kernel, CaKernel};
use crate::error::{Error, Result};
use crate::quant::{self, TernarySpec};
use crate::tensor::{self, conv2d_backward_gemm, conv2d_gemm, BnCache, BnParams, ConvSpec, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightKind {
    Binary,
    Ternary(TernarySpec),
}

/// A learnable convolution kernel: proxy weights plus their quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    pub dims: [usize; 4],
    pub proxy: Vec<f64>,
    pub kind: WeightKind,
}

impl QuantLayer {
    fn random(dims: [usize; 4], ternary: bool, rng: &mut ChaCha8Rng) -> Self {
        let len = dims.iter().product();
        let proxy: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kind = if ternary {
            let mut spec = TernarySpec::new(2.0 / 3.0);
            // uniform proxies never have both tertiles at zero
            spec.update_from(&proxy).expect("layer has at least 3 weights");
            WeightKind::Ternary(spec)
        } else {
            WeightKind::Binary
        };
        QuantLayer { dims, proxy, kind }
    }

    pub fn quantized(&self) -> Vec<i8> {
        match self.kind {
            WeightKind::Binary => quant::binarize(&self.proxy),
            WeightKind::Ternary(spec) => self.proxy.iter().map(|&w| quant::ternary(w, spec.s)).collect(),
        }
    }

    pub fn step_size(&self) -> Option<f64> {
        match self.kind {
            WeightKind::Ternary(spec) => Some(spec.s),
            WeightKind::Binary => None,
        }
    }

    /// Weights used by the forward pass.
    fn effective(&self, quantize: bool) -> Tensor4<f64> {
        let data = if quantize {
            let q = self.quantized();
            debug_assert!(match self.kind {
                WeightKind::Binary => q.iter().all(|&v| v == 1 || v == -1),
                WeightKind::Ternary(_) => q.iter().all(|&v| (-1..=1).contains(&v)),
            });
            q.into_iter().map(f64::from).collect()
        } else {
            self.proxy.clone()
        };
        Tensor4::from_vec(self.dims, data).expect("layer dims are consistent")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CflogParams {
    pub config: CflogConfig,
    pub reduce: QuantLayer,
    pub grouped: QuantLayer,
    pub expand: CaKernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub cflogs: [CflogParams; 2],
    pub bns: [BnParams; 2],
}

/// Trainable network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: QuantLayer,
    pub stem_bn: BnParams,
    pub blocks: Vec<BlockParams>,
    pub head: QuantLayer,
    pub head_bn: BnParams,
}

/// Builds the network with proxies drawn from `config.master_seed`. Every
/// expansion automaton gets its own balanced seed row.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    let n = config.n;
    let stem = QuantLayer::random([n, config.input_channels, 3, 3], true, &mut rng);
    let mut blocks = Vec::with_capacity(config.block_count());
    for b in 0..config.block_count() {
        let mut make = |j: usize| -> Result<CflogParams> {
            let cfg = config.cflog_config(default_seed(n, config.ca_seed(2 * b + j)))?;
            Ok(CflogParams {
                reduce: QuantLayer::random(cfg.reduce_dims(), false, &mut rng),
                grouped: QuantLayer::random(cfg.grouped_dims(), true, &mut rng),
                expand: generate_kernel(&cfg.ca)?,
                config: cfg,
            })
        };
        let c0 = make(0)?;
        let c1 = make(1)?;
        blocks.push(BlockParams {
            cflogs: [c0, c1],
            bns: [BnParams::new(n), BnParams::new(n)],
        });
    }
    let head = QuantLayer::random([config.class_count, n, 1, 1], false, &mut rng);
    Ok(Model {
        config: config.clone(),
        stem,
        stem_bn: BnParams::new(n),
        blocks,
        head,
        head_bn: BnParams::new(config.class_count),
    })
}

/// Real-valued weights resolved for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights {
    pub stem: Tensor4<f64>,
    pub blocks: Vec<[CflogWeights<f64>; 2]>,
    pub head: Tensor4<f64>,
}

/// All batch-norm layers of a network, in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetNorms {
    pub stem: BnParams,
    pub blocks: Vec<[BnParams; 2]>,
    pub head: BnParams,
}

/// Ternary layers in a fixed order: stem first, then every grouped convolution.
pub fn ternary_layers(model: &Model) -> Vec<&QuantLayer> {
    let mut out = vec![&model.stem];
    for b in &model.blocks {
        for c in &b.cflogs {
            out.push(&c.grouped);
        }
    }
    out
}

pub fn ternary_layers_mut(model: &mut Model) -> Vec<&mut QuantLayer> {
    let mut out = vec![&mut model.stem];
    for b in &mut model.blocks {
        for c in &mut b.cflogs {
            out.push(&mut c.grouped);
        }
    }
    out
}

impl Model {
    pub fn weights(&self, quantize: bool) -> NetWeights {
        NetWeights {
            stem: self.stem.effective(quantize),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    [0, 1].map(|j| CflogWeights {
                        reduce: b.cflogs[j].reduce.effective(quantize),
                        grouped: b.cflogs[j].grouped.effective(quantize),
                        expand: expand_kernel(&b.cflogs[j].expand),
                    })
                })
                .collect(),
            head: self.head.effective(quantize),
        }
    }

    pub fn norms(&self) -> NetNorms {
        NetNorms {
            stem: self.stem_bn.clone(),
            blocks: self.blocks.iter().map(|b| b.bns.clone()).collect(),
            head: self.head_bn.clone(),
        }
    }

    pub fn set_norms(&mut self, norms: NetNorms) {
        self.stem_bn = norms.stem;
        for (b, n) in self.blocks.iter_mut().zip(norms.blocks) {
            b.bns = n;
        }
        self.head_bn = norms.head;
    }

    /// Step sizes of all ternary layers, stem first.
    pub fn step_sizes(&self) -> Vec<f64> {
        ternary_layers(self).iter().filter_map(|l| l.step_size()).collect()
    }

    /// Freezes the model: quantized weights and `f32`-rounded batch norm.
    pub fn to_quant(&self) -> QuantModel {
        let cflog = |c: &CflogParams| QuantCflog {
            config: c.config.clone(),
            reduce: c.reduce.quantized(),
            grouped: c.grouped.quantized(),
            expand: c.expand.clone(),
        };
        let round = |p: &BnParams| {
            let mut p = p.clone();
            p.round_to_f32();
            p
        };
        QuantModel {
            config: self.config.clone(),
            stem: self.stem.quantized(),
            stem_bn: round(&self.stem_bn),
            blocks: self
                .blocks
                .iter()
                .map(|b| QuantBlock {
                    cflogs: [cflog(&b.cflogs[0]), cflog(&b.cflogs[1])],
                    bns: [round(&b.bns[0]), round(&b.bns[1])],
                })
                .collect(),
            head: self.head.quantized(),
            head_bn: round(&self.head_bn),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantCflog {
    pub config: CflogConfig,
    /// Binary, `(latent, c_in, 1, 1)`.
    pub reduce: Vec<i8>,
    /// Ternary, `(latent, latent / g, 3, 3)`.
    pub grouped: Vec<i8>,
    pub expand: CaKernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantBlock {
    pub cflogs: [QuantCflog; 2],
    pub bns: [BnParams; 2],
}

/// Deployable network: integer weights, regenerable CA kernels, batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    pub config: ModelConfig,
    /// Ternary, `(n, input_channels, 3, 3)`.
    pub stem: Vec<i8>,
    pub stem_bn: BnParams,
    pub blocks: Vec<QuantBlock>,
    /// Binary, `(class_count, n, 1, 1)`.
    pub head: Vec<i8>,
    pub head_bn: BnParams,
}

fn tensor_from_i8(dims: [usize; 4], w: &[i8]) -> Tensor4<f64> {
    Tensor4::from_vec(dims, w.iter().map(|&v| f64::from(v)).collect()).expect("weight dims are consistent")
}

impl QuantModel {
    pub fn stem_dims(&self) -> [usize; 4] {
        [self.config.n, self.config.input_channels, 3, 3]
    }

    pub fn head_dims(&self) -> [usize; 4] {
        [self.config.class_count, self.config.n, 1, 1]
    }

    pub fn weights(&self) -> NetWeights {
        NetWeights {
            stem: tensor_from_i8(self.stem_dims(), &self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    [0, 1].map(|j| {
                        let c = &b.cflogs[j];
                        CflogWeights {
                            reduce: tensor_from_i8(c.config.reduce_dims(), &c.reduce),
                            grouped: tensor_from_i8(c.config.grouped_dims(), &c.grouped),
                            expand: expand_kernel(&c.expand),
                        }
                    })
                })
                .collect(),
            head: tensor_from_i8(self.head_dims(), &self.head),
        }
    }

    pub fn norms(&self) -> NetNorms {
        NetNorms {
            stem: self.stem_bn.clone(),
            blocks: self.blocks.iter().map(|b| b.bns.clone()).collect(),
            head: self.head_bn.clone(),
        }
    }

    /// Real-valued quantized simulation with inference-mode batch norm.
    pub fn forward_real(&self, images: &Tensor4<f64>, record: bool) -> Result<ForwardOutput> {
        let mut norms = self.norms();
        forward(
            &self.config,
            &self.weights(),
            &mut norms,
            images,
            ForwardMode {
                activation: Activation::Quantized(self.config.k),
                training: false,
                record,
            },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub activation: Activation,
    /// Batch statistics (and running-stat updates) instead of running statistics.
    pub training: bool,
    /// Keep per-layer activations in [`ForwardOutput::trace`].
    pub record: bool,
}

/// Saved state of one residual block for the backward pass.
#[derive(Clone, Debug)]
struct BlockTape {
    input: Tensor4<f64>,
    reduce_out: [Tensor4<f64>; 2],
    grouped_out: [Tensor4<f64>; 2],
    pre: [Tensor4<f64>; 2],
    bn: [BnCache; 2],
    h1: Tensor4<f64>,
    control: Vec<bool>,
    out_dims: [usize; 4],
    pool_idx: Option<Vec<usize>>,
}

/// Everything [`backward`] needs from a training forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    input: Tensor4<f64>,
    stem_pre: Tensor4<f64>,
    stem_bn: BnCache,
    blocks: Vec<BlockTape>,
    head_in: Tensor4<f64>,
    head_bn: BnCache,
    head_dims: [usize; 4],
    activation: Activation,
}

/// Logits plus optional trace and tape.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Row-major `[batch][class]`.
    pub logits: Vec<f64>,
    pub classes: usize,
    /// Named per-layer activations, when recorded.
    pub trace: Vec<(String, Tensor4<f64>)>,
    pub control_balance: Vec<f64>,
    pub tape: Option<Tape>,
}

impl ForwardOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.chunks(self.classes).map(argmax).collect()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn norm(x: &Tensor4<f64>, p: &mut BnParams, training: bool) -> Result<(Tensor4<f64>, Option<BnCache>)> {
    if training {
        let (y, c) = tensor::batch_norm_train(x, p)?;
        Ok((y, Some(c)))
    } else {
        Ok((tensor::batch_norm_infer(x, p)?, None))
    }
}

/// Grid of the 8-bit input pixels in `[0, 1]`.
pub const PIXEL_LEVELS: f64 = 255.0;

/// Convolution of a tensor whose values lie on the grid `j / scale`. The grid
/// indices are convolved as exact integers and divided once at the end, so
/// the result equals an integer accumulator over `scale` bit for bit.
fn scaled_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, spec: ConvSpec, scale: Option<f64>) -> Result<Tensor4<f64>> {
    match scale {
        Some(s) => Ok(conv2d_gemm(&x.map(|v| (v * s).round()), w, spec)?.map(|v| v / s)),
        None => conv2d_gemm(x, w, spec),
    }
}

/// Inference-mode logits of a quantized head. The accumulators are integers
/// scaled by `1 / levels`; they are summed unscaled and divided once, so
/// classes with equal sums get equal logits.
fn exact_head_logits(head_pre: &Tensor4<f64>, bn: &BnParams, levels: f64) -> Vec<f64> {
    let denom = levels * head_pre.plane() as f64;
    (0..head_pre.batch())
        .flat_map(|n| (0..head_pre.channels()).map(move |c| (n, c)))
        .map(|(n, c)| {
            let sum: f64 = head_pre.channel(n, c).iter().map(|v| (v * levels).round()).sum();
            bn.apply(c, sum / denom)
        })
        .collect()
}

/// Factorized convolution returning `(reduced, grouped, expanded)`.
fn cflog_real(
    x: &Tensor4<f64>,
    w: &CflogWeights<f64>,
    scale: Option<f64>,
) -> Result<(Tensor4<f64>, Tensor4<f64>, Tensor4<f64>)> {
    let xs = match scale {
        Some(s) => x.map(|v| (v * s).round()),
        None => x.clone(),
    };
    let r = conv2d_gemm(&xs, &w.reduce, ConvSpec::pointwise())?;
    let g = conv2d_gemm(&r, &w.grouped, ConvSpec::same(w.groups()))?;
    let c = conv2d_gemm(&g, &w.expand, ConvSpec::pointwise())?;
    Ok(match scale {
        Some(s) => (r.map(|v| v / s), g.map(|v| v / s), c.map(|v| v / s)),
        None => (r, g, c),
    })
}

/// The network's forward pass.
///
/// stem 3×3 conv → BN → act → stages of {residual blocks → 2×2 max pool}
/// → 1×1 conv → BN → global average pool.
pub fn forward(
    cfg: &ModelConfig,
    w: &NetWeights,
    norms: &mut NetNorms,
    x: &Tensor4<f64>,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    if x.channels() != cfg.input_channels || x.height() != cfg.input_size || x.width() != cfg.input_size {
        return Err(Error::shape(format!(
            "input {:?} does not match {}x{}x{}",
            x.dims(),
            cfg.input_channels,
            cfg.input_size,
            cfg.input_size
        )));
    }
    let act = mode.activation;
    let training = mode.training;
    let mut trace = Vec::new();
    let mut balance = Vec::new();

    let (pixel_scale, level_scale) = match act {
        Activation::Quantized(k) => (Some(PIXEL_LEVELS), Some(quant::levels(k) as f64)),
        Activation::FullPrecision => (None, None),
    };
    let stem_pre = scaled_conv(x, &w.stem, ConvSpec::same(1), pixel_scale)?;
    let (stem_bn_out, stem_cache) = norm(&stem_pre, &mut norms.stem, training)?;
    let mut a = stem_bn_out.map(|v| act.act(v));
    if mode.record {
        trace.push(("stem".to_string(), a.clone()));
    }

    let mut block_tapes = Vec::new();
    let mut b = 0;
    for _stage in 0..cfg.stages {
        for j in 0..cfg.blocks_per_stage {
            let input = a;
            let cw = &w.blocks[b];
            let bn = &mut norms.blocks[b];

            let (r1, g1, c1) = cflog_real(&input, &cw[0], level_scale)?;
            let (pre1, bn1) = norm(&c1, &mut bn[0], training)?;
            let h1 = pre1.map(|v| act.act(v));

            let (r2, g2, c2) = cflog_real(&h1, &cw[1], level_scale)?;
            let (pre2, bn2) = norm(&c2, &mut bn[1], training)?;
            let i1 = pre2.map(|v| act.act(v));

            let i0 = input.zip_map(&i1, |p, q| act.shift(p + q))?;
            let control = act.control(&input);
            balance.push(crate::blocks::control_balance(&control));
            let out = mux(&i0, &i1, &control)?;
            let out_dims = out.dims();

            let last_in_stage = j + 1 == cfg.blocks_per_stage;
            if mode.record {
                trace.push((format!("block{b}.h1"), h1.clone()));
                trace.push((format!("block{b}.i1"), i1.clone()));
                trace.push((format!("block{b}.out"), out.clone()));
            }
            let (next, pool_idx) = if last_in_stage {
                let (p, idx) = tensor::maxpool2x2_with_indices(&out)?;
                if mode.record {
                    trace.push((format!("block{b}.pool"), p.clone()));
                }
                (p, Some(idx))
            } else {
                (out, None)
            };
            if training {
                block_tapes.push(BlockTape {
                    input,
                    reduce_out: [r1, r2],
                    grouped_out: [g1, g2],
                    pre: [pre1, pre2],
                    bn: [bn1.expect("training"), bn2.expect("training")],
                    h1,
                    control,
                    out_dims,
                    pool_idx,
                });
            }
            a = next;
            b += 1;
        }
    }

    let head_pre = scaled_conv(&a, &w.head, ConvSpec::pointwise(), level_scale)?;
    let (head_out, head_cache) = norm(&head_pre, &mut norms.head, training)?;
    let logits = match level_scale {
        Some(l) if !training => exact_head_logits(&head_pre, &norms.head, l),
        _ => tensor::global_avg_pool(&head_out),
    };
    let head_dims = head_out.dims();
    if mode.record {
        trace.push(("head.bn".to_string(), head_out));
    }
    let tape = if training {
        Some(Tape {
            input: x.clone(),
            stem_pre: stem_bn_out,
            stem_bn: stem_cache.expect("training"),
            blocks: block_tapes,
            head_in: a,
            head_bn: head_cache.expect("training"),
            head_dims,
            activation: act,
        })
    } else {
        None
    };
    Ok(ForwardOutput {
        logits,
        classes: cfg.class_count,
        trace,
        control_balance: balance,
        tape,
    })
}

/// Replaces every running statistic by the batch statistics of `x` under the
/// given activation regime, with quantized weights.
pub fn recalibrate_norms(model: &mut Model, x: &Tensor4<f64>, activation: Activation) -> Result<()> {
    let mut norms = model.norms();
    let zero = |p: &mut BnParams| {
        p.moving_mean.iter_mut().for_each(|v| *v = 0.0);
        p.moving_var.iter_mut().for_each(|v| *v = 0.0);
    };
    zero(&mut norms.stem);
    norms.blocks.iter_mut().flatten().for_each(zero);
    zero(&mut norms.head);
    let mode = ForwardMode {
        activation,
        training: true,
        record: false,
    };
    forward(&model.config, &model.weights(true), &mut norms, x, mode)?;
    let unscale = |p: &mut BnParams| {
        let f = 1.0 / (1.0 - tensor::BN_MOMENTUM);
        p.moving_mean.iter_mut().for_each(|v| *v *= f);
        p.moving_var.iter_mut().for_each(|v| *v *= f);
    };
    unscale(&mut norms.stem);
    norms.blocks.iter_mut().flatten().for_each(unscale);
    unscale(&mut norms.head);
    model.set_norms(norms);
    Ok(())
}

/// Gradients with respect to the quantized weights and the batch-norm affines.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub stem: Vec<f64>,
    pub stem_bn: (Vec<f64>, Vec<f64>),
    /// Per block: `[reduce, grouped]` for each of the two factorized convolutions.
    pub blocks: Vec<[[Vec<f64>; 2]; 2]>,
    pub block_bns: Vec<[(Vec<f64>, Vec<f64>); 2]>,
    pub head: Vec<f64>,
    pub head_bn: (Vec<f64>, Vec<f64>),
}

fn mask_grad(grad: &mut Tensor4<f64>, pre: &Tensor4<f64>, act: Activation) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if !act.grad_mask(p) {
            *g = 0.0;
        }
    }
}

fn cflog_backward(
    w: &CflogWeights<f64>,
    input: &Tensor4<f64>,
    reduce_out: &Tensor4<f64>,
    grouped_out: &Tensor4<f64>,
    grad: &Tensor4<f64>,
) -> Result<(Tensor4<f64>, Vec<f64>, Vec<f64>)> {
    let (g_grouped_out, _) = conv2d_backward_gemm(grouped_out, &w.expand, grad, ConvSpec::pointwise())?;
    let (g_reduce_out, gw_grouped) =
        conv2d_backward_gemm(reduce_out, &w.grouped, &g_grouped_out, ConvSpec::same(w.groups()))?;
    let (g_input, gw_reduce) = conv2d_backward_gemm(input, &w.reduce, &g_reduce_out, ConvSpec::pointwise())?;
    Ok((g_input, gw_reduce.into_vec(), gw_grouped.into_vec()))
}

/// Backpropagates `grad_logits` (row-major `[batch][class]`) through a
/// recorded training pass. The multiplexer control and the residual halving
/// are passed through as constants and identity respectively.
pub fn backward(w: &NetWeights, norms: &NetNorms, tape: &Tape, grad_logits: &[f64]) -> Result<Gradients> {
    let act = tape.activation;
    let g_head_out = tensor::global_avg_pool_backward(tape.head_dims, grad_logits);
    let (g_head_pre, hg, hb) = tensor::batch_norm_backward(&g_head_out, &tape.head_bn, &norms.head.gamma)?;
    let (mut g, gw_head) = conv2d_backward_gemm(&tape.head_in, &w.head, &g_head_pre, ConvSpec::pointwise())?;

    let nb = tape.blocks.len();
    let mut block_grads = vec![[[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]]; nb];
    let mut block_bn_grads = vec![[(Vec::new(), Vec::new()), (Vec::new(), Vec::new())]; nb];
    for b in (0..nb).rev() {
        let t = &tape.blocks[b];
        let cw = &w.blocks[b];
        let g_out = match &t.pool_idx {
            Some(idx) => tensor::maxpool2x2_backward(t.out_dims, idx, &g),
            None => g,
        };
        let c = g_out.channels();
        let mut g_i1 = Tensor4::zeros(t.out_dims);
        let mut g_i0 = Tensor4::zeros(t.out_dims);
        for n in 0..g_out.batch() {
            for ch in 0..c {
                let dst = if t.control[n * c + ch] { &mut g_i1 } else { &mut g_i0 };
                dst.channel_mut(n, ch).copy_from_slice(g_out.channel(n, ch));
            }
        }
        // y = input + i1, halved with a pass-through gradient
        let mut g_input = g_i0.clone();
        let mut g_i1 = g_i1.zip_map(&g_i0, |p, q| p + q)?;

        mask_grad(&mut g_i1, &t.pre[1], act);
        let (g_c2, bg2, bb2) = tensor::batch_norm_backward(&g_i1, &t.bn[1], &norms.blocks[b][1].gamma)?;
        let (mut g_h1, gr2, gg2) = cflog_backward(&cw[1], &t.h1, &t.reduce_out[1], &t.grouped_out[1], &g_c2)?;
        mask_grad(&mut g_h1, &t.pre[0], act);
        let (g_c1, bg1, bb1) = tensor::batch_norm_backward(&g_h1, &t.bn[0], &norms.blocks[b][0].gamma)?;
        let (g_in1, gr1, gg1) = cflog_backward(&cw[0], &t.input, &t.reduce_out[0], &t.grouped_out[0], &g_c1)?;
        for (d, s) in g_input.data_mut().iter_mut().zip(g_in1.data()) {
            *d += s;
        }
        block_grads[b] = [[gr1, gg1], [gr2, gg2]];
        block_bn_grads[b] = [(bg1, bb1), (bg2, bb2)];
        g = g_input;
    }

    mask_grad(&mut g, &tape.stem_pre, act);
    let (g_stem_pre, sg, sb) = tensor::batch_norm_backward(&g, &tape.stem_bn, &norms.stem.gamma)?;
    let (_, gw_stem) = conv2d_backward_gemm(&tape.input, &w.stem, &g_stem_pre, ConvSpec::same(1))?;

    Ok(Gradients {
        stem: gw_stem.into_vec(),
        stem_bn: (sg, sb),
        blocks: block_grads,
        block_bns: block_bn_grads,
        head: gw_head.into_vec(),
        head_bn: (hg, hb),
    })
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.chunks(classes).zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += -(exps[y] / sum).ln();
        for c in 0..classes {
            let p = exps[c] / sum;
            grad[i * classes + c] = (p - if c == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (loss / batch as f64, grad)
}
