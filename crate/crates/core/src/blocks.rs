//! Composite structures: the factorized convolution with CA-generated
//! expansion, thresholded global average pooling, the multiplexed residual
//! block, the network configuration, and parameter/size accounting.

use std::fmt::Write as _;

use num_rational::Ratio;

use crate::ca::{CaConfig, CaKernel};
use crate::error::{Error, Result};
use crate::quant::{self, levels};
use crate::tensor::{self, conv2d, conv_accumulator_bound, BnParams, ConvSpec, Element, Tensor4};

/// Largest feature-map count accepted; with `MAX_K` this keeps every integer
/// accumulator within `i32`.
pub const MAX_N: usize = 256;
pub const MAX_K: u32 = 4;
/// Bits per input pixel on the integer path.
pub const INPUT_BITS: u32 = 8;

/// Shape of one factorized convolution: `c_in -> latent` binary pointwise,
/// `latent -> latent` grouped 3×3 ternary, `latent -> c_out` fixed CA pointwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CflogConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub latent: usize,
    pub groups: usize,
    pub ca: CaConfig,
}

impl CflogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.groups == 0 {
            return Err(Error::config("latent", "latent and groups must be positive"));
        }
        if !self.latent.is_multiple_of(self.groups) {
            return Err(Error::config(
                "g",
                format!("{} groups do not divide latent width {}", self.groups, self.latent),
            ));
        }
        if self.latent > self.c_in {
            return Err(Error::config(
                "latent",
                format!("latent {} exceeds input channels {}", self.latent, self.c_in),
            ));
        }
        if self.ca.width != self.c_out || self.ca.steps != self.latent {
            return Err(Error::config(
                "ca",
                format!(
                    "automaton is {}x{}, layer needs {}x{}",
                    self.ca.width, self.ca.steps, self.c_out, self.latent
                ),
            ));
        }
        self.ca.validate()
    }

    pub fn reduce_dims(&self) -> [usize; 4] {
        [self.latent, self.c_in, 1, 1]
    }
    pub fn grouped_dims(&self) -> [usize; 4] {
        [self.latent, self.latent / self.groups, 3, 3]
    }
    pub fn expand_dims(&self) -> [usize; 4] {
        [self.c_out, self.latent, 1, 1]
    }

    /// Trainable weights: the reduction and the grouped convolution.
    pub fn trainable_params(&self) -> usize {
        self.c_in * self.latent + 9 * self.latent * self.latent / self.groups
    }
}

/// Weights of the three sub-convolutions of one factorized convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CflogWeights<T> {
    pub reduce: Tensor4<T>,
    pub grouped: Tensor4<T>,
    pub expand: Tensor4<T>,
}

impl<T: Element> CflogWeights<T> {
    pub fn groups(&self) -> usize {
        self.reduce.batch() / self.grouped.channels()
    }
}

/// Expansion kernel of a CA as a `(c_out, latent, 1, 1)` tensor.
pub fn expand_kernel<T: Element + From<i8>>(kernel: &CaKernel) -> Tensor4<T> {
    Tensor4::from_vec(
        [kernel.width(), kernel.steps(), 1, 1],
        kernel.mapped().iter().map(|&v| T::from(v)).collect(),
    )
    .expect("kernel dims are positive")
}

/// The three stacked convolutions, with nothing in between.
pub fn cflog_forward<T: Element>(x: &Tensor4<T>, w: &CflogWeights<T>) -> Result<Tensor4<T>> {
    let r = conv2d(x, &w.reduce, ConvSpec::pointwise())?;
    let g = conv2d(&r, &w.grouped, ConvSpec::same(w.groups()))?;
    conv2d(&g, &w.expand, ConvSpec::pointwise())
}

/// Per-channel control signal, `S[n][c] = GAP(x)[n][c] > 0.5 * tgap_max`.
pub fn tgap(x: &Tensor4<f64>, tgap_max: f64) -> Vec<bool> {
    tensor::global_avg_pool(x)
        .into_iter()
        .map(|m| m > 0.5 * tgap_max)
        .collect()
}

/// [`tgap`] with `tgap_max = 1` on a k-bit activation tensor, evaluated on
/// integer levels so that a mean of exactly one half is never misjudged.
pub fn tgap_quantized(x: &Tensor4<f64>, k: u32) -> Vec<bool> {
    let l = levels(k) as f64;
    let plane = x.plane() as i64;
    (0..x.batch())
        .flat_map(|n| (0..x.channels()).map(move |c| (n, c)))
        .map(|(n, c)| {
            let sum: i64 = x.channel(n, c).iter().map(|&v| (v * l).round() as i64).sum();
            2 * sum > plane * levels(k) as i64
        })
        .collect()
}

/// Full-precision control signal: the threshold is half of each sample's
/// largest channel mean.
pub fn tgap_full_precision(x: &Tensor4<f64>) -> Vec<bool> {
    let gap = tensor::global_avg_pool(x);
    let c = x.channels();
    gap.chunks(c)
        .flat_map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().map(move |&m| m > 0.5 * max).collect::<Vec<_>>()
        })
        .collect()
}

/// Channel-wise 2-input multiplexer: channel `c` of sample `n` comes from
/// `i1` where `s[n * C + c]` is set, otherwise from `i0`.
pub fn mux<T: Element>(i0: &Tensor4<T>, i1: &Tensor4<T>, s: &[bool]) -> Result<Tensor4<T>> {
    i0.expect_same_dims(i1)?;
    if s.len() != i0.batch() * i0.channels() {
        return Err(Error::shape(format!(
            "control signal has {} entries, expected {}",
            s.len(),
            i0.batch() * i0.channels()
        )));
    }
    let mut out = i0.clone();
    for n in 0..i0.batch() {
        for c in 0..i0.channels() {
            if s[n * i0.channels() + c] {
                out.channel_mut(n, c).copy_from_slice(i1.channel(n, c));
            }
        }
    }
    Ok(out)
}

/// Activation regime of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// ReLU, real halving after the residual addition, TGAP against the per-sample max.
    FullPrecision,
    /// k-bit QReLU, Bitshift requantization, TGAP against 1.
    Quantized(u32),
}

impl Activation {
    #[inline]
    pub fn act(self, x: f64) -> f64 {
        match self {
            Activation::FullPrecision => x.max(0.0),
            Activation::Quantized(k) => quant::qrelu(x, k),
        }
    }

    /// Surrogate derivative of [`Activation::act`].
    #[inline]
    pub fn grad_mask(self, x: f64) -> bool {
        match self {
            Activation::FullPrecision => x > 0.0,
            Activation::Quantized(_) => quant::ste_pass(x),
        }
    }

    #[inline]
    pub fn shift(self, y: f64) -> f64 {
        match self {
            Activation::FullPrecision => 0.5 * y,
            Activation::Quantized(k) => quant::bitshift(y, k),
        }
    }

    pub fn control(self, x: &Tensor4<f64>) -> Vec<bool> {
        match self {
            Activation::FullPrecision => tgap_full_precision(x),
            Activation::Quantized(k) => tgap_quantized(x, k),
        }
    }
}

/// One multiplexed residual block in inference form.
#[derive(Clone, Debug)]
pub struct MrbState {
    pub cflogs: [CflogWeights<f64>; 2],
    pub bns: [BnParams; 2],
    pub k: u32,
}

/// Intermediate values of a residual block.
#[derive(Clone, Debug)]
pub struct MrbOutputs {
    pub h1: Tensor4<f64>,
    pub i1: Tensor4<f64>,
    pub i0: Tensor4<f64>,
    pub control: Vec<bool>,
    pub out: Tensor4<f64>,
}

/// Quantized residual block with inference-mode batch norm:
/// `h1 = Q(BN(F1 x))`, `I1 = Q(BN(F2 h1))`, `I0 = Bitshift(x + I1)`,
/// output `MUX(I0, I1; TGAP(x))`.
pub fn mrb_forward(x: &Tensor4<f64>, state: &MrbState) -> Result<MrbOutputs> {
    let act = Activation::Quantized(state.k);
    let pre1 = tensor::batch_norm_infer(&cflog_forward(x, &state.cflogs[0])?, &state.bns[0])?;
    let h1 = pre1.map(|v| act.act(v));
    let pre2 = tensor::batch_norm_infer(&cflog_forward(&h1, &state.cflogs[1])?, &state.bns[1])?;
    let i1 = pre2.map(|v| act.act(v));
    let i0 = x.zip_map(&i1, |a, b| act.shift(a + b))?;
    let control = act.control(x);
    let out = mux(&i0, &i1, &control)?;
    Ok(MrbOutputs {
        h1,
        i1,
        i0,
        control,
        out,
    })
}

/// Fraction of channels whose control bit is set.
pub fn control_balance(control: &[bool]) -> f64 {
    if control.is_empty() {
        return 0.0;
    }
    control.iter().filter(|&&b| b).count() as f64 / control.len() as f64
}

/// Hyperparameters that fix the network graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Feature maps after the stem and inside every block.
    pub n: usize,
    /// Groups of the 3×3 convolution inside each factorized convolution.
    pub g: usize,
    /// Activation bitwidth.
    pub k: u32,
    /// Number of {residual blocks, max-pool} stages.
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub class_count: usize,
    pub input_channels: usize,
    /// Square input side length.
    pub input_size: usize,
    pub master_seed: u64,
    pub ca_rule: u8,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 128,
            g: 4,
            k: 3,
            stages: 3,
            blocks_per_stage: 1,
            class_count: 10,
            input_channels: 3,
            input_size: 32,
            master_seed: 0,
            ca_rule: crate::ca::DEFAULT_RULE,
        }
    }
}

impl ModelConfig {
    pub fn latent(&self) -> usize {
        self.n / 2
    }

    pub fn block_count(&self) -> usize {
        self.stages * self.blocks_per_stage
    }

    pub fn activation_levels(&self) -> u32 {
        levels(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > MAX_K {
            return Err(Error::config("k", format!("must be in 1..={MAX_K}, got {}", self.k)));
        }
        if self.n < 6 || !self.n.is_multiple_of(2) || self.n > MAX_N {
            return Err(Error::config(
                "n",
                format!("must be even and in 6..={MAX_N}, got {}", self.n),
            ));
        }
        if self.g == 0 || !self.latent().is_multiple_of(self.g) {
            return Err(Error::config(
                "g",
                format!("must divide the latent width {}, got {}", self.latent(), self.g),
            ));
        }
        if self.stages == 0 {
            return Err(Error::config("stages", "must be positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage", "must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.input_channels == 0 || self.input_channels > 16 {
            return Err(Error::config("input_channels", "must be in 1..=16"));
        }
        let div = 1usize << self.stages.min(30);
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::config(
                "input_size",
                format!(
                    "{} is not divisible by 2^{} (one halving per stage)",
                    self.input_size, self.stages
                ),
            ));
        }
        let worst = self.worst_accumulator();
        if worst > i32::MAX as u64 {
            return Err(Error::Overflow(format!(
                "worst-case accumulator {worst} exceeds the 32-bit range"
            )));
        }
        Ok(())
    }

    /// Worst-case magnitude of the stem accumulator (8-bit pixels).
    pub fn stem_accumulator_bound(&self) -> u64 {
        conv_accumulator_bound(3, 3, self.input_channels, (1 << INPUT_BITS) - 1, 1)
    }

    /// Worst-case magnitude of a factorized-convolution accumulator.
    pub fn cflog_accumulator_bound(&self) -> u64 {
        let m = self.latent();
        let reduce = conv_accumulator_bound(1, 1, self.n, levels(self.k) as u64, 1);
        let grouped = conv_accumulator_bound(3, 3, m / self.g, reduce, 1);
        conv_accumulator_bound(1, 1, m, grouped, 1)
    }

    pub fn head_accumulator_bound(&self) -> u64 {
        conv_accumulator_bound(1, 1, self.n, levels(self.k) as u64, 1)
    }

    pub fn worst_accumulator(&self) -> u64 {
        self.stem_accumulator_bound()
            .max(self.cflog_accumulator_bound())
            .max(self.head_accumulator_bound())
    }

    /// Spatial side length at the input of stage `stage`.
    pub fn stage_size(&self, stage: usize) -> usize {
        self.input_size >> stage
    }

    /// Seed of the expansion automaton of factorized convolution `index`
    /// (counted over the whole network), derived from the master seed.
    pub fn ca_seed(&self, index: usize) -> u64 {
        self.master_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xCA00 + index as u64)
    }

    pub fn cflog_config(&self, seed_row: Vec<u8>) -> Result<CflogConfig> {
        let cfg = CflogConfig {
            c_in: self.n,
            c_out: self.n,
            latent: self.latent(),
            groups: self.g,
            ca: CaConfig::new(self.ca_rule, self.n, self.latent(), seed_row)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exact compression rate of a factorized convolution against a regular 3×3
/// one, with `latent = c_in / 2`. Returns `(closed_form, counted)`.
pub fn compression_rate(c_in: u64, c_out: u64, g: u64) -> Result<(Ratio<u64>, Ratio<u64>)> {
    if c_in == 0 || c_out == 0 || g == 0 {
        return Err(Error::config("compression_rate", "inputs must be positive"));
    }
    if !c_in.is_multiple_of(2) {
        return Err(Error::config("c_in", "must be even"));
    }
    let m = c_in / 2;
    let closed = Ratio::new(c_in, c_out) * (Ratio::new(1, 18) + Ratio::new(1, 4 * g));
    let counted = (Ratio::from_integer(c_in * m) + Ratio::new(9 * m * m, g))
        / Ratio::from_integer(9 * c_in * c_out);
    Ok((closed, counted))
}

/// Storage precision of one weight class in the size report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageKind {
    Binary,
    Ternary,
    /// Regenerated from a stored seed row.
    CaGenerated,
    BatchNorm,
}

impl StorageKind {
    fn name(self) -> &'static str {
        match self {
            StorageKind::Binary => "binary",
            StorageKind::Ternary => "ternary",
            StorageKind::CaGenerated => "ca",
            StorageKind::BatchNorm => "bn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeRow {
    pub layer: String,
    pub kind: StorageKind,
    /// Trainable (or stored) values in the layer.
    pub params: usize,
    pub bits: u64,
    /// Compression rate of a factorized convolution, when this row is one.
    pub compression: Option<Ratio<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
    pub bn_bits: u32,
}

/// Reference model size (Mb) of the n=128, g=4 configuration on CIFAR-10.
pub const REFERENCE_MB_N128_G4: f64 = 1.72;
/// Reference model size (Mb) of the n=128, g=8 configuration on CIFAR-10.
pub const REFERENCE_MB_N128_G8: f64 = 1.13;

impl SizeReport {
    pub fn total_bits(&self) -> u64 {
        self.rows.iter().map(|r| r.bits).sum()
    }

    pub fn total_params(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.kind != StorageKind::BatchNorm)
            .map(|r| r.params)
            .sum()
    }

    /// Total size in megabits (10^6 bits).
    pub fn total_mb(&self) -> f64 {
        self.total_bits() as f64 / 1e6
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:<8} {:>10} {:>12} {:>10}", "layer", "storage", "params", "bits", "CR");
        for r in &self.rows {
            let cr = r.compression.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<24} {:<8} {:>10} {:>12} {:>10}",
                r.layer,
                r.kind.name(),
                r.params,
                r.bits,
                cr
            );
        }
        let _ = writeln!(s, "total bits: {}", self.total_bits());
        let _ = writeln!(s, "total Mb: {:.4}", self.total_mb());
        s
    }

    /// One `key=value` record per row, then a totals record.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = write!(s, "layer={} storage={} params={} bits={}", r.layer, r.kind.name(), r.params, r.bits);
            if let Some(c) = r.compression {
                let _ = write!(s, " cr={c}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "total_bits={} total_mb={:.6} bn_bits={}",
            self.total_bits(),
            self.total_mb(),
            self.bn_bits
        );
        s
    }
}

/// Storage accounting: binary weights at 1 bit, ternary at 2 bits, CA kernels
/// at the width of their seed row, batch norm folded to a scale and a shift
/// per channel at `bn_bits` each.
pub fn size_report(cfg: &ModelConfig, bn_bits: u32) -> Result<SizeReport> {
    cfg.validate()?;
    let (n, m) = (cfg.n, cfg.latent());
    let bn_row = |layer: String, channels: usize| SizeRow {
        layer,
        kind: StorageKind::BatchNorm,
        params: 2 * channels,
        bits: 2 * channels as u64 * bn_bits as u64,
        compression: None,
    };
    let mut rows = Vec::new();
    let stem = 9 * cfg.input_channels * n;
    rows.push(SizeRow {
        layer: "stem.conv".into(),
        kind: StorageKind::Ternary,
        params: stem,
        bits: 2 * stem as u64,
        compression: None,
    });
    rows.push(bn_row("stem.bn".into(), n));
    let (cr, _) = compression_rate(n as u64, n as u64, cfg.g as u64)?;
    for b in 0..cfg.block_count() {
        for j in 0..2 {
            let p = format!("block{b}.cflog{j}");
            rows.push(SizeRow {
                layer: format!("{p}.reduce"),
                kind: StorageKind::Binary,
                params: n * m,
                bits: (n * m) as u64,
                compression: Some(cr),
            });
            let grouped = 9 * m * m / cfg.g;
            rows.push(SizeRow {
                layer: format!("{p}.grouped"),
                kind: StorageKind::Ternary,
                params: grouped,
                bits: 2 * grouped as u64,
                compression: None,
            });
            rows.push(SizeRow {
                layer: format!("{p}.expand"),
                kind: StorageKind::CaGenerated,
                params: 0,
                bits: n as u64,
                compression: None,
            });
            rows.push(bn_row(format!("block{b}.bn{j}"), n));
        }
    }
    let head = n * cfg.class_count;
    rows.push(SizeRow {
        layer: "head.conv".into(),
        kind: StorageKind::Binary,
        params: head,
        bits: head as u64,
        compression: None,
    });
    rows.push(bn_row("head.bn".into(), cfg.class_count));
    Ok(SizeReport { rows, bn_bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ca::{default_seed, generate_kernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ca_cfg(width: usize, steps: usize, seed: u64) -> CaConfig {
        CaConfig::new(30, width, steps, default_seed(width, seed)).unwrap()
    }

    fn random_cflog(c: usize, m: usize, g: usize, rng: &mut ChaCha8Rng) -> CflogWeights<f64> {
        let cfg = CflogConfig {
            c_in: c,
            c_out: c,
            latent: m,
            groups: g,
            ca: ca_cfg(c, m, rng.random()),
        };
        cfg.validate().unwrap();
        let reduce: Vec<f64> = (0..c * m).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let grouped: Vec<f64> = (0..9 * m * m / g).map(|_| rng.random_range(-1i32..=1) as f64).collect();
        CflogWeights {
            reduce: Tensor4::from_vec(cfg.reduce_dims(), reduce).unwrap(),
            grouped: Tensor4::from_vec(cfg.grouped_dims(), grouped).unwrap(),
            expand: expand_kernel(&generate_kernel(&cfg.ca).unwrap()),
        }
    }

    /// Composes the three kernels into one `(c_out, c_in, 3, 3)` kernel.
    fn composed_kernel(w: &CflogWeights<f64>) -> Tensor4<f64> {
        let [m, c_in, _, _] = w.reduce.dims();
        let c_out = w.expand.batch();
        let mg = w.grouped.channels();
        let mut eff = Tensor4::zeros([c_out, c_in, 3, 3]);
        for o in 0..c_out {
            for l in 0..m {
                let e = w.expand.at(o, l, 0, 0);
                let group = l / mg;
                for lj in 0..mg {
                    let src = group * mg + lj;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let gw = w.grouped.at(l, lj, ky, kx);
                            for i in 0..c_in {
                                let v = eff.at(o, i, ky, kx) + e * gw * w.reduce.at(src, i, 0, 0);
                                eff.set(o, i, ky, kx, v);
                            }
                        }
                    }
                }
            }
        }
        eff
    }

    #[test]
    fn cflog_equals_composed_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(c, m, g) in &[(4, 2, 1), (8, 4, 2), (16, 8, 4), (12, 6, 3)] {
            let w = random_cflog(c, m, g, &mut rng);
            let x = Tensor4::from_vec([2, c, 8, 8], (0..2 * c * 64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let y = cflog_forward(&x, &w).unwrap();
            let y_ref = conv2d(&x, &composed_kernel(&w), ConvSpec::same(1)).unwrap();
            for (a, b) in y.data().iter().zip(y_ref.data()) {
                assert!((a - b).abs() <= 1e-9);
            }
            // integer path is exact
            let xi = x.map(|v| (v * 7.0).round().abs() as i32);
            let wi = CflogWeights {
                reduce: w.reduce.map(|v| v as i32),
                grouped: w.grouped.map(|v| v as i32),
                expand: w.expand.map(|v| v as i32),
            };
            let yi = cflog_forward(&xi, &wi).unwrap();
            let yr = conv2d(&xi.map(|v| v as f64), &composed_kernel(&w), ConvSpec::same(1)).unwrap();
            assert_eq!(yi.map(|v| v as f64), yr);
        }
    }

    #[test]
    fn cflog_all_plus_one_center_pixel() {
        // c=4, m=2, g=1: every reduce/grouped weight is +1, expand from the automaton.
        let cfg = CflogConfig {
            c_in: 4,
            c_out: 4,
            latent: 2,
            groups: 1,
            ca: CaConfig::new(30, 4, 2, vec![0, 1, 0, 0]).unwrap(),
        };
        let kernel = generate_kernel(&cfg.ca).unwrap();
        let w = CflogWeights {
            reduce: Tensor4::filled(cfg.reduce_dims(), 1.0),
            grouped: Tensor4::filled(cfg.grouped_dims(), 1.0),
            expand: expand_kernel(&kernel),
        };
        let x = Tensor4::filled([1, 4, 3, 3], 1.0);
        let y = cflog_forward(&x, &w).unwrap();
        // centre pixel: reduce gives 4 per latent channel; grouped sums 9 pixels
        // over both latent channels, 72; the expansion sums those with ±1.
        for o in 0..4 {
            let e: f64 = (0..2).map(|t| kernel.weight(o, t) as f64).sum();
            assert_eq!(y.at(0, o, 1, 1), 72.0 * e);
        }
        let y_ref = conv2d(&x, &composed_kernel(&w), ConvSpec::same(1)).unwrap();
        assert_eq!(y, y_ref);
    }

    #[test]
    fn cflog_zero_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random_cflog(8, 4, 2, &mut rng);
        let y = cflog_forward(&Tensor4::zeros([1, 8, 4, 4]), &w).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cflog_config_errors() {
        let mut cfg = CflogConfig {
            c_in: 8,
            c_out: 8,
            latent: 4,
            groups: 3,
            ca: ca_cfg(8, 4, 1),
        };
        assert!(cfg.validate().is_err());
        cfg.groups = 2;
        cfg.validate().unwrap();
        cfg.latent = 10;
        cfg.ca = ca_cfg(8, 10, 1);
        assert!(cfg.validate().is_err());
        cfg.latent = 4;
        cfg.ca = ca_cfg(8, 5, 1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tgap_examples() {
        let x = Tensor4::from_vec(
            [1, 3, 1, 2],
            vec![0.6, 0.6, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(tgap(&x, 1.0), vec![true, false, false]);
        assert_eq!(tgap_quantized(&x.map(|v| if v == 0.6 { 4.0 / 7.0 } else { v }), 3), vec![true, false, false]);
        // half-on k=2 channel sits exactly on the threshold
        let h = Tensor4::from_vec([1, 1, 1, 4], vec![1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
        assert_eq!(tgap_quantized(&h, 2), vec![false]);
        assert_eq!(tgap_full_precision(&Tensor4::zeros([1, 2, 2, 2])), vec![false, false]);
    }

    #[test]
    fn mux_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let i0 = Tensor4::from_vec([2, 3, 2, 2], (0..24).map(|_| rng.random::<f64>()).collect()).unwrap();
        let i1 = Tensor4::from_vec([2, 3, 2, 2], (0..24).map(|_| rng.random::<f64>()).collect()).unwrap();
        assert_eq!(mux(&i0, &i1, &[true; 6]).unwrap(), i1);
        assert_eq!(mux(&i0, &i1, &[false; 6]).unwrap(), i0);
        let s = [true, false, true, false, false, true];
        let out = mux(&i0, &i1, &s).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let sel = if s[n * 3 + c] { 1.0 } else { 0.0 };
                for ((o, a), b) in out.channel(n, c).iter().zip(i0.channel(n, c)).zip(i1.channel(n, c)) {
                    assert_eq!(*o, b * sel + a * (1.0 - sel));
                }
            }
        }
        assert!(mux(&i0, &i1, &[true; 5]).is_err());
    }

    fn random_state(n: usize, g: usize, k: u32, rng: &mut ChaCha8Rng) -> MrbState {
        let bn = |rng: &mut ChaCha8Rng| {
            let mut p = BnParams::new(n);
            for c in 0..n {
                p.gamma[c] = rng.random_range(0.02..0.2);
                p.beta[c] = rng.random_range(0.0..0.6);
                p.moving_mean[c] = rng.random_range(-2.0..2.0);
                p.moving_var[c] = rng.random_range(0.5..4.0);
            }
            p
        };
        MrbState {
            cflogs: [random_cflog(n, n / 2, g, rng), random_cflog(n, n / 2, g, rng)],
            bns: [bn(rng), bn(rng)],
            k,
        }
    }

    fn random_codewords(dims: [usize; 4], k: u32, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        let l = levels(k);
        let len = dims.iter().product();
        Tensor4::from_vec(dims, (0..len).map(|_| rng.random_range(0..=l) as f64 / l as f64).collect()).unwrap()
    }

    #[test]
    fn mrb_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for k in 1..=3 {
            let st = random_state(8, 2, k, &mut rng);
            let x = Tensor4::zeros([1, 8, 4, 4]);
            let o = mrb_forward(&x, &st).unwrap();
            assert!(o.control.iter().all(|&b| !b));
            assert_eq!(o.out, o.i1.map(|v| quant::bitshift(v, k)));
        }
    }

    #[test]
    fn mrb_selected_channels_pass_i1() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for k in 1..=3 {
            let st = random_state(8, 4, k, &mut rng);
            let x = random_codewords([2, 8, 4, 4], k, &mut rng);
            let o = mrb_forward(&x, &st).unwrap();
            let gap = tensor::global_avg_pool(&x);
            for n in 0..2 {
                for c in 0..8 {
                    if gap[n * 8 + c] > 0.5 + 1e-9 {
                        assert_eq!(o.out.channel(n, c), o.i1.channel(n, c));
                    }
                }
            }
        }
    }

    #[test]
    fn mrb_k1_additive_path_is_or() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let st = random_state(8, 2, 1, &mut rng);
        for _ in 0..10 {
            let x = random_codewords([2, 8, 6, 6], 1, &mut rng);
            let o = mrb_forward(&x, &st).unwrap();
            for ((a, b), y) in x.data().iter().zip(o.i1.data()).zip(o.i0.data()) {
                assert_eq!(*y, ((*a as u8) | (*b as u8)) as f64);
            }
        }
    }

    #[test]
    fn mrb_output_is_codeword() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for k in 1..=3 {
            let st = random_state(8, 2, k, &mut rng);
            let x = random_codewords([3, 8, 4, 4], k, &mut rng);
            let o = mrb_forward(&x, &st).unwrap();
            let l = levels(k) as f64;
            for v in o.out.data() {
                let s = v * l;
                assert_eq!(s, s.round());
                assert!((0.0..=l).contains(&s));
            }
            let b = control_balance(&o.control);
            assert!((0.0..=1.0).contains(&b));
        }
    }

    #[test]
    fn compression_rate_examples() {
        let (closed, counted) = compression_rate(128, 128, 4).unwrap();
        assert_eq!(closed, Ratio::new(17, 144));
        assert_eq!(closed, counted);
        assert_eq!(128 * 64 + 9 * 64 * 64 / 4, 17408);
        assert_eq!(9 * 128 * 128, 147456);
        assert_eq!(compression_rate(64, 64, 1).unwrap().0, Ratio::new(11, 36));
        assert_eq!(compression_rate(128, 128, 8).unwrap().0, Ratio::new(25, 288));
        let big = compression_rate(64, 64, 1 << 20).unwrap().0;
        assert!(big > Ratio::new(1, 18) && big - Ratio::new(1, 18) < Ratio::new(1, 1 << 20));
        assert!(compression_rate(63, 64, 1).is_err());
        for g in [1u64, 2, 4, 8] {
            for c in (16..=256).step_by(16) {
                let (a, b) = compression_rate(c, c, g).unwrap();
                assert_eq!(a, b);
                let (a, b) = compression_rate(c, 2 * c, g).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn model_config_validation() {
        ModelConfig::default().validate().unwrap();
        let bad = |f: &dyn Fn(&mut ModelConfig), field: &str| {
            let mut c = ModelConfig::default();
            f(&mut c);
            match c.validate() {
                Err(Error::Config { field: got, .. }) => assert_eq!(got, field),
                other => panic!("expected config error on {field}, got {other:?}"),
            }
        };
        bad(&|c| c.k = 0, "k");
        bad(&|c| c.k = 5, "k");
        bad(&|c| c.n = 7, "n");
        bad(&|c| c.n = 512, "n");
        bad(&|c| c.g = 3, "g");
        bad(&|c| c.stages = 0, "stages");
        bad(&|c| c.class_count = 1, "classes");
        bad(&|c| c.input_size = 20, "input_size");
    }

    #[test]
    fn largest_accepted_config_fits_accumulator() {
        let cfg = ModelConfig {
            n: MAX_N,
            g: 1,
            k: MAX_K,
            input_channels: 16,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        assert!(cfg.worst_accumulator() <= i32::MAX as u64);
    }

    #[test]
    fn size_report_rows() {
        let cfg = ModelConfig {
            n: 128,
            g: 4,
            ..ModelConfig::default()
        };
        let r = size_report(&cfg, 16).unwrap();
        let row = |name: &str| r.rows.iter().find(|x| x.layer == name).unwrap().clone();
        assert_eq!(row("stem.conv").bits, 6912);
        assert_eq!(row("head.conv").bits, 1280);
        assert_eq!(row("block0.cflog0.reduce").compression, Some(Ratio::new(17, 144)));
        assert_eq!(row("block0.cflog0.expand").params, 0);
        assert!(r.to_kv().contains("total_bits="));
        assert!(r.to_text().contains("total Mb"));

        let mut prev = 0;
        for n in [16, 32, 64, 128, 256] {
            let bits = size_report(&ModelConfig { n, g: 4, ..ModelConfig::default() }, 16).unwrap().total_bits();
            assert!(bits > prev);
            prev = bits;
        }
    }
}
