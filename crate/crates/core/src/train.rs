//! Quantization-aware training with balanced ternary step sizes.
//!
//! Every epoch starts by resetting the step size of each ternary layer from
//! the tertiles of its proxy weights, then runs Adam over shuffled batches
//! with weights quantized in the forward pass and straight-through gradients
//! in the backward pass.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::Activation;
use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, backward, forward, softmax_cross_entropy, ForwardMode, Model, QuantLayer, WeightKind};
use crate::quant;

/// Optimizer and schedule settings. Defaults follow the CIFAR-10 recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Full-precision epochs run before the two quantized stages.
    pub epochs_pretrain: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_rate: f64,
    pub decay_start_pretrain: usize,
    pub decay_start_stage1: usize,
    pub decay_start_stage2: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub clip_proxies: bool,
    pub rng_seed: u64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_pretrain: 0,
            epochs_stage1: 180,
            epochs_stage2: 150,
            batch_size: 50,
            lr: 1e-3,
            lr_decay_rate: 0.9,
            decay_start_pretrain: 120,
            decay_start_stage1: 120,
            decay_start_stage2: 80,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_proxies: true,
            rng_seed: 0,
            augment: Augment {
                pad_crop: true,
                flip: true,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_stage1 + self.epochs_stage2 + self.epochs_pretrain == 0 {
            return Err(Error::config("epochs_stage1", "no training epochs configured"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be a non-negative number, got {}", self.lr)));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) {
            return Err(Error::config("lr_decay_rate", format!("must lie in (0, 1], got {}", self.lr_decay_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`: constant up to `decay_start`, then
    /// multiplied by the decay rate once per epoch.
    pub fn lr_at(&self, epoch: usize, decay_start: usize) -> f64 {
        let decays = epoch.saturating_sub(decay_start);
        self.lr * self.lr_decay_rate.powi(decays as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Real weights, real activations.
    Pretrain,
    /// Quantized weights, real activations.
    Stage1,
    /// Quantized weights and activations.
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    pub fn quantize_weights(self) -> bool {
        self != Stage::Pretrain
    }

    pub fn activation(self, k: u32) -> Activation {
        match self {
            Stage::Stage2 => Activation::Quantized(k),
            _ => Activation::FullPrecision,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adaptive_moment_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), state.m.len());
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Snapshot of every quantized layer's proxy weights and step size.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyStore {
    pub proxies: Vec<Vec<f64>>,
    /// `None` for binary layers.
    pub steps: Vec<Option<f64>>,
}

fn quant_layers(model: &Model) -> Vec<&QuantLayer> {
    let mut out = vec![&model.stem];
    for b in &model.blocks {
        for c in &b.cflogs {
            out.push(&c.reduce);
            out.push(&c.grouped);
        }
    }
    out.push(&model.head);
    out
}

impl ProxyStore {
    pub fn of(model: &Model) -> Self {
        let layers = quant_layers(model);
        ProxyStore {
            proxies: layers.iter().map(|l| l.proxy.clone()).collect(),
            steps: layers.iter().map(|l| l.step_size()).collect(),
        }
    }
}

/// Resets every ternary step size from the current proxy tertiles.
pub fn update_step_sizes(model: &mut Model) -> Result<()> {
    for layer in model::ternary_layers_mut(model) {
        if let WeightKind::Ternary(spec) = &mut layer.kind {
            spec.update_from(&layer.proxy)?;
        }
    }
    Ok(())
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the training-mode predictions made while fitting.
    pub accuracy: f64,
    pub lr: f64,
    pub step_sizes: Vec<f64>,
    /// Mean fraction of multiplexer channels taking the residual-free path.
    pub control_balance: f64,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        let s: Vec<String> = self.step_sizes.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "stage={} epoch={} loss={:.6} accuracy={:.4} lr={:.6e} balance={:.4} s={}",
            self.stage,
            self.epoch,
            self.loss,
            self.accuracy,
            self.lr,
            self.control_balance,
            s.join(",")
        )
    }
}

/// Adam state for every trainable tensor, in [`Model::visit_params`] order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(model: &Model) -> Self {
        let mut sizes = Vec::new();
        visit_params(model, &mut |p: &[f64], _| sizes.push(p.len()));
        Optimizer {
            states: sizes.into_iter().map(AdamState::new).collect(),
        }
    }
}

/// Walks the trainable tensors in a fixed order: stem, stem BN, each block's
/// four quantized convolutions and two BN pairs, head, head BN. The flag
/// marks proxy weights.
fn visit_params(model: &Model, f: &mut dyn FnMut(&[f64], bool)) {
    f(&model.stem.proxy, true);
    f(&model.stem_bn.gamma, false);
    f(&model.stem_bn.beta, false);
    for b in &model.blocks {
        for c in &b.cflogs {
            f(&c.reduce.proxy, true);
            f(&c.grouped.proxy, true);
        }
        for bn in &b.bns {
            f(&bn.gamma, false);
            f(&bn.beta, false);
        }
    }
    f(&model.head.proxy, true);
    f(&model.head_bn.gamma, false);
    f(&model.head_bn.beta, false);
}

fn params_mut(model: &mut Model) -> Vec<(&mut Vec<f64>, bool)> {
    let mut out: Vec<(&mut Vec<f64>, bool)> = vec![
        (&mut model.stem.proxy, true),
        (&mut model.stem_bn.gamma, false),
        (&mut model.stem_bn.beta, false),
    ];
    for b in &mut model.blocks {
        for c in &mut b.cflogs {
            out.push((&mut c.reduce.proxy, true));
            out.push((&mut c.grouped.proxy, true));
        }
        for bn in &mut b.bns {
            out.push((&mut bn.gamma, false));
            out.push((&mut bn.beta, false));
        }
    }
    out.push((&mut model.head.proxy, true));
    out.push((&mut model.head_bn.gamma, false));
    out.push((&mut model.head_bn.beta, false));
    out
}

fn flatten_grads(g: model::Gradients) -> Vec<Vec<f64>> {
    let mut out = vec![g.stem, g.stem_bn.0, g.stem_bn.1];
    for (convs, bns) in g.blocks.into_iter().zip(g.block_bns) {
        for [reduce, grouped] in convs {
            out.push(reduce);
            out.push(grouped);
        }
        for (gamma, beta) in bns {
            out.push(gamma);
            out.push(beta);
        }
    }
    out.push(g.head);
    out.push(g.head_bn.0);
    out.push(g.head_bn.1);
    out
}

/// Applies one optimizer step given per-tensor gradients. Proxy gradients are
/// masked by the weight straight-through estimator first.
pub fn apply_gradients(model: &mut Model, opt: &mut Optimizer, grads: model::Gradients, lr: f64, cfg: &TrainConfig) {
    let grads = flatten_grads(grads);
    let params = params_mut(model);
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), opt.states.len());
    for (((param, is_proxy), mut grad), state) in params.into_iter().zip(grads).zip(opt.states.iter_mut()) {
        if is_proxy {
            quant::weight_backward(param).apply(&mut grad);
        }
        adaptive_moment_step(param, &grad, state, lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
        if is_proxy && cfg.clip_proxies {
            param.iter_mut().for_each(|w| *w = w.clamp(-1.0, 1.0));
        }
    }
}

/// Runs `epochs` epochs of one stage. `on_epoch` sees each epoch's metrics as
/// soon as they are known.
#[allow(clippy::too_many_arguments)]
pub fn train_btq(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: Stage,
    epochs: usize,
    decay_start: usize,
    rng: &mut ChaCha8Rng,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mc = model.config.clone();
    if data.channels != mc.input_channels || data.side != mc.input_size {
        return Err(Error::Data(format!(
            "images are {}x{}x{}, model expects {}x{}x{}",
            data.channels, data.side, data.side, mc.input_channels, mc.input_size, mc.input_size
        )));
    }
    if data.classes > mc.class_count {
        return Err(Error::Data(format!(
            "dataset has {} classes, model has {}",
            data.classes, mc.class_count
        )));
    }
    let mode = ForwardMode {
        activation: stage.activation(mc.k),
        training: true,
        record: false,
    };
    let mut opt = Optimizer::new(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        if stage.quantize_weights() {
            update_step_sizes(model)?;
        }
        let lr = cfg.lr_at(epoch, decay_start);
        order.shuffle(rng);
        let (mut loss_sum, mut correct, mut balance_sum, mut balance_count) = (0.0, 0usize, 0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.augmented_batch(batch, cfg.augment, rng);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let w = model.weights(stage.quantize_weights());
            let mut norms = model.norms();
            let out = forward(&mc, &w, &mut norms, &x, mode)?;
            let (loss, grad_logits) = softmax_cross_entropy(&out.logits, &labels, mc.class_count);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "{stage} epoch {epoch} batch {bi}: loss is {loss}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            correct += out.predictions().iter().zip(&labels).filter(|(p, l)| p == l).count();
            balance_sum += out.control_balance.iter().sum::<f64>();
            balance_count += out.control_balance.len();
            let grads = backward(&w, &model.norms(), out.tape.as_ref().expect("training pass"), &grad_logits)?;
            model.set_norms(norms);
            apply_gradients(model, &mut opt, grads, lr, cfg);
        }
        let m = EpochMetrics {
            stage,
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            lr,
            step_sizes: model.step_sizes(),
            control_balance: if balance_count == 0 { 0.0 } else { balance_sum / balance_count as f64 },
        };
        log::info!("{}", m.to_line());
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Optional full-precision pretraining, then quantized weights with real
/// activations, then fully quantized fine-tuning.
pub fn two_stage_train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut history = Vec::new();
    for (stage, epochs, start) in [
        (Stage::Pretrain, cfg.epochs_pretrain, cfg.decay_start_pretrain),
        (Stage::Stage1, cfg.epochs_stage1, cfg.decay_start_stage1),
        (Stage::Stage2, cfg.epochs_stage2, cfg.decay_start_stage2),
    ] {
        if epochs > 0 {
            history.extend(train_btq(model, data, cfg, stage, epochs, start, &mut rng, on_epoch)?);
        }
    }
    Ok(history)
}

/// Top-1 accuracy of inference-mode predictions.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let q = model.to_quant();
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for batch in idx.chunks(batch_size.max(1)) {
        let out = q.forward_real(&data.batch(batch), false)?;
        correct += out
            .predictions()
            .iter()
            .zip(batch)
            .filter(|(p, &i)| **p == data.labels[i])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}
