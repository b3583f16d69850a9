//! Integer-only inference.
//!
//! Activations are k-bit levels `0..=2^k - 1`, weights are `{-1, 0, +1}`,
//! and every convolution accumulates in `i32`. Batch norm followed by the
//! quantized ReLU is folded into per-channel threshold comparisons. Only the
//! classifier's final batch norm is evaluated, in fixed point.

use rayon::prelude::*;

use crate::blocks::{cflog_forward, expand_kernel, CflogWeights, ModelConfig, INPUT_BITS};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, QuantModel};
use crate::quant::{levels, qrelu_level};
use crate::tensor::{conv2d, maxpool2x2, BnParams, ConvSpec, Tensor4};

/// Integer activation tensor with its bit width.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub values: Tensor4<i32>,
    pub k: u32,
}

impl QuantTensor {
    pub fn new(values: Tensor4<i32>, k: u32) -> Result<Self> {
        let l = levels(k) as i32;
        if let Some(v) = values.data().iter().find(|&&v| !(0..=l).contains(&v)) {
            return Err(Error::Data(format!("level {v} outside 0..={l}")));
        }
        Ok(QuantTensor { values, k })
    }

    /// Real value of every element, `level / (2^k - 1)`.
    pub fn to_real(&self) -> Tensor4<f64> {
        let l = levels(self.k) as f64;
        self.values.map(|v| f64::from(v) / l)
    }
}

/// How a channel's requantized level depends on its accumulator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChannelThresholds {
    /// Level = number of thresholds `t` with `acc >= t`.
    Rising(Vec<i64>),
    /// Level = number of thresholds `t` with `acc <= t`.
    Falling(Vec<i64>),
    /// Zero batch-norm slope.
    Constant(u32),
}

/// Batch norm plus k-bit quantized ReLU folded into integer comparisons.
///
/// Thresholds are non-decreasing; equal neighbours mean one accumulator step
/// skips several levels. `i64::MIN` / `i64::MAX` stand for "always" / "never"
/// inside the accumulator range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThresholdBank {
    pub k: u32,
    pub channels: Vec<ChannelThresholds>,
}

impl ThresholdBank {
    #[inline]
    pub fn requantize(&self, channel: usize, acc: i64) -> u32 {
        match &self.channels[channel] {
            ChannelThresholds::Rising(t) => t.partition_point(|&t| t <= acc) as u32,
            ChannelThresholds::Falling(t) => (t.len() - t.partition_point(|&t| t < acc)) as u32,
            ChannelThresholds::Constant(level) => *level,
        }
    }

    fn apply(&self, acc: &Tensor4<i32>) -> Result<Tensor4<i32>> {
        if acc.channels() != self.channels.len() {
            return Err(Error::shape(format!(
                "{} accumulator channels for {} threshold channels",
                acc.channels(),
                self.channels.len()
            )));
        }
        let mut out = acc.clone();
        for n in 0..acc.batch() {
            for c in 0..acc.channels() {
                for v in out.channel_mut(n, c) {
                    *v = self.requantize(c, i64::from(*v)) as i32;
                }
            }
        }
        Ok(out)
    }
}

/// The level a real-valued pipeline assigns to accumulator `acc`.
fn folded_level(bn: &BnParams, c: usize, k: u32, denom: f64, acc: i64) -> u32 {
    qrelu_level(bn.apply(c, acc as f64 / denom), k)
}

/// Folds `qrelu(bn(acc / denom))` into thresholds valid for `|acc| <= bound`.
///
/// The real-valued composition is monotone in `acc` (every floating-point
/// step is a correctly rounded monotone operation), so each threshold is
/// found by binary search over the accumulator range.
pub fn fold_bn_qrelu(bn: &BnParams, k: u32, denom: u32, bound: u64) -> Result<ThresholdBank> {
    bn.validate()?;
    if denom == 0 {
        return Err(Error::config("denom", "accumulator scale must be positive"));
    }
    let (lo, hi) = (-(bound as i64), bound as i64);
    let denom = f64::from(denom);
    let l = levels(k);
    let channels = (0..bn.channels())
        .map(|c| {
            let f = |acc: i64| folded_level(bn, c, k, denom, acc);
            if bn.gamma[c] == 0.0 {
                return ChannelThresholds::Constant(f(0));
            }
            let rising = bn.gamma[c] > 0.0;
            let t = (1..=l)
                .map(|level| {
                    if rising {
                        // smallest acc with f(acc) >= level
                        if f(lo) >= level {
                            return i64::MIN;
                        }
                        if f(hi) < level {
                            return i64::MAX;
                        }
                        let (mut a, mut b) = (lo, hi);
                        while b - a > 1 {
                            let mid = a + (b - a) / 2;
                            if f(mid) >= level {
                                b = mid;
                            } else {
                                a = mid;
                            }
                        }
                        b
                    } else {
                        // largest acc with f(acc) >= level
                        if f(hi) >= level {
                            return i64::MAX;
                        }
                        if f(lo) < level {
                            return i64::MIN;
                        }
                        let (mut a, mut b) = (lo, hi);
                        while b - a > 1 {
                            let mid = a + (b - a) / 2;
                            if f(mid) >= level {
                                a = mid;
                            } else {
                                b = mid;
                            }
                        }
                        a
                    }
                })
                .collect::<Vec<i64>>();
            if rising {
                ChannelThresholds::Rising(t)
            } else {
                ChannelThresholds::Falling(t.into_iter().rev().collect())
            }
        })
        .collect();
    Ok(ThresholdBank { k, channels })
}

/// Integer shift-right requantization of the residual sum; OR for `k = 1`.
#[inline]
pub fn int_bitshift(a: i32, b: i32, k: u32) -> i32 {
    if k == 1 {
        a | b
    } else {
        (a + b) >> 1
    }
}

/// `GAP(x) > 0.5` for levels, as `2 · Σ x > HW · (2^k - 1)`.
pub fn int_tgap(x: &Tensor4<i32>, k: u32) -> Vec<bool> {
    let bar = x.plane() as i64 * i64::from(levels(k));
    (0..x.batch())
        .flat_map(|n| (0..x.channels()).map(move |c| (n, c)))
        .map(|(n, c)| 2 * x.channel(n, c).iter().map(|&v| i64::from(v)).sum::<i64>() > bar)
        .collect()
}

/// Fixed-point per-class affine of the classifier: with `Σacc` the spatial
/// sum of the head accumulator, `score_c = a_c · Σacc + b_c · HW` equals
/// `2^shift · HW · logit_c` up to rounding of `a_c`, `b_c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadAffine {
    pub scale: Vec<i64>,
    pub offset: Vec<i64>,
    pub shift: i32,
}

/// Significant bits kept in the head coefficients.
pub const HEAD_MANTISSA_BITS: i32 = 32;

impl HeadAffine {
    pub fn from_bn(bn: &BnParams, levels: u32) -> Result<Self> {
        bn.validate()?;
        let c = bn.channels();
        let mut a = Vec::with_capacity(c);
        let mut b = Vec::with_capacity(c);
        for ch in 0..c {
            let inv = 1.0 / (bn.moving_var[ch] + bn.epsilon).sqrt();
            a.push(bn.gamma[ch] * inv / f64::from(levels));
            b.push(bn.beta[ch] - bn.gamma[ch] * bn.moving_mean[ch] * inv);
        }
        let max = a.iter().chain(&b).fold(0.0f64, |m, v| m.max(v.abs()));
        if !max.is_finite() {
            return Err(Error::Overflow("non-finite classifier batch norm".into()));
        }
        let shift = if max == 0.0 { 0 } else { HEAD_MANTISSA_BITS - 1 - max.log2().ceil() as i32 };
        let fix = |v: f64| (v * 2f64.powi(shift)).round() as i64;
        Ok(HeadAffine {
            scale: a.into_iter().map(fix).collect(),
            offset: b.into_iter().map(fix).collect(),
            shift,
        })
    }

    pub fn score(&self, class: usize, acc_sum: i64, plane: i64) -> Result<i64> {
        self.scale[class]
            .checked_mul(acc_sum)
            .and_then(|s| self.offset[class].checked_mul(plane).and_then(|o| s.checked_add(o)))
            .ok_or_else(|| Error::Overflow(format!("class {class} score exceeds 64 bits")))
    }

    /// Real logit represented by a score.
    pub fn to_logit(&self, score: i64, plane: usize) -> f64 {
        score as f64 / 2f64.powi(self.shift) / plane as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntBlock {
    pub cflogs: [CflogWeights<i32>; 2],
    pub banks: [ThresholdBank; 2],
}

/// A frozen network lowered to integer operations.
#[derive(Clone, Debug, PartialEq)]
pub struct IntModel {
    pub config: ModelConfig,
    pub stem: Tensor4<i32>,
    pub stem_bank: ThresholdBank,
    pub blocks: Vec<IntBlock>,
    pub head: Tensor4<i32>,
    pub head_affine: HeadAffine,
}

fn i32_tensor(dims: [usize; 4], w: &[i8]) -> Tensor4<i32> {
    Tensor4::from_vec(dims, w.iter().map(|&v| i32::from(v)).collect()).expect("weight dims are consistent")
}

impl IntModel {
    pub fn from_quant(q: &QuantModel) -> Result<Self> {
        let cfg = &q.config;
        cfg.validate()?;
        let worst = cfg.worst_accumulator();
        if worst > i32::MAX as u64 {
            return Err(Error::Overflow(format!("accumulator bound {worst} exceeds i32")));
        }
        let l = levels(cfg.k);
        let pixel_max = (1u32 << INPUT_BITS) - 1;
        let stem_bank = fold_bn_qrelu(&q.stem_bn, cfg.k, pixel_max, cfg.stem_accumulator_bound())?;
        let blocks = q
            .blocks
            .iter()
            .map(|b| {
                let cflog = |j: usize| {
                    let c = &b.cflogs[j];
                    CflogWeights {
                        reduce: i32_tensor(c.config.reduce_dims(), &c.reduce),
                        grouped: i32_tensor(c.config.grouped_dims(), &c.grouped),
                        expand: expand_kernel(&c.expand),
                    }
                };
                let bank = |j: usize| fold_bn_qrelu(&b.bns[j], cfg.k, l, cfg.cflog_accumulator_bound());
                Ok(IntBlock {
                    cflogs: [cflog(0), cflog(1)],
                    banks: [bank(0)?, bank(1)?],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IntModel {
            config: cfg.clone(),
            stem: i32_tensor(q.stem_dims(), &q.stem),
            stem_bank,
            blocks,
            head: i32_tensor(q.head_dims(), &q.head),
            head_affine: HeadAffine::from_bn(&q.head_bn, l)?,
        })
    }
}

/// Arithmetic domain of one step of the integer pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Integer,
    FixedPoint,
}

/// Result of an integer forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct IntOutput {
    /// Row-major `[batch][class]` fixed-point scores.
    pub scores: Vec<i64>,
    pub classes: usize,
    /// Named level tensors, matching the real-valued trace names.
    pub trace: Vec<(String, Tensor4<i32>)>,
    /// Every operation executed, in order, with its arithmetic domain.
    pub ops: Vec<(&'static str, Domain)>,
}

impl IntOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.scores
            .chunks(self.classes)
            .map(|row| argmax(&row.iter().map(|&s| s as f64).collect::<Vec<_>>()))
            .collect()
    }
}

/// Converts 8-bit images (channel-major, concatenated) to an input tensor.
pub fn pixels_to_tensor(pixels: &[u8], batch: usize, channels: usize, side: usize) -> Result<Tensor4<i32>> {
    Tensor4::from_vec([batch, channels, side, side], pixels.iter().map(|&p| i32::from(p)).collect())
}

/// Which arithmetic evaluates a frozen network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    /// Floating-point simulation of the quantized network.
    Real,
    Integer,
}

/// Predicted class of every image, evaluated in batches.
pub fn predict(q: &QuantModel, int: &IntModel, data: &Dataset, engine: Engine, batch_size: usize) -> Result<Vec<usize>> {
    let cfg = &q.config;
    if data.channels != cfg.input_channels || data.side != cfg.input_size {
        return Err(Error::Data(format!(
            "images are {}x{}x{}, the model expects {}x{}x{}",
            data.channels, data.side, data.side, cfg.input_channels, cfg.input_size, cfg.input_size
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let per_batch = chunks
        .par_iter()
        .map(|batch| match engine {
            Engine::Real => Ok(q.forward_real(&data.batch(batch), false)?.predictions()),
            Engine::Integer => {
                let pixels: Vec<u8> = batch.iter().flat_map(|&i| data.image(i).iter().copied()).collect();
                let t = pixels_to_tensor(&pixels, batch.len(), data.channels, data.side)?;
                Ok(int_forward(int, &t, false)?.predictions())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

/// Integer-only forward pass over 8-bit pixels.
pub fn int_forward(model: &IntModel, pixels: &Tensor4<i32>, record: bool) -> Result<IntOutput> {
    let cfg = &model.config;
    if pixels.channels() != cfg.input_channels || pixels.height() != cfg.input_size || pixels.width() != cfg.input_size {
        return Err(Error::shape(format!("input {:?} does not match the model", pixels.dims())));
    }
    if pixels.data().iter().any(|&p| !(0..=255).contains(&p)) {
        return Err(Error::Data("pixels must be 8-bit".into()));
    }
    let k = cfg.k;
    let mut ops = Vec::new();
    let mut trace = Vec::new();

    let acc = conv2d(pixels, &model.stem, ConvSpec::same(1))?;
    ops.push(("stem.conv", Domain::Integer));
    let mut a = model.stem_bank.apply(&acc)?;
    ops.push(("stem.threshold", Domain::Integer));
    if record {
        trace.push(("stem".to_string(), a.clone()));
    }

    let mut b = 0;
    for _ in 0..cfg.stages {
        for j in 0..cfg.blocks_per_stage {
            let blk = &model.blocks[b];
            let h1 = blk.banks[0].apply(&cflog_forward(&a, &blk.cflogs[0])?)?;
            let i1 = blk.banks[1].apply(&cflog_forward(&h1, &blk.cflogs[1])?)?;
            ops.push(("block.cflog", Domain::Integer));
            ops.push(("block.threshold", Domain::Integer));
            let i0 = a.zip_map(&i1, |x, y| int_bitshift(x, y, k))?;
            ops.push(("block.bitshift", Domain::Integer));
            let s = int_tgap(&a, k);
            ops.push(("block.tgap", Domain::Integer));
            let out = crate::blocks::mux(&i0, &i1, &s)?;
            ops.push(("block.mux", Domain::Integer));
            if record {
                trace.push((format!("block{b}.h1"), h1));
                trace.push((format!("block{b}.i1"), i1));
                trace.push((format!("block{b}.out"), out.clone()));
            }
            a = if j + 1 == cfg.blocks_per_stage {
                let p = maxpool2x2(&out)?;
                ops.push(("block.maxpool", Domain::Integer));
                if record {
                    trace.push((format!("block{b}.pool"), p.clone()));
                }
                p
            } else {
                out
            };
            b += 1;
        }
    }

    let acc = conv2d(&a, &model.head, ConvSpec::pointwise())?;
    ops.push(("head.conv", Domain::Integer));
    debug_assert!(ops.iter().all(|(_, d)| *d == Domain::Integer));
    let plane = acc.plane() as i64;
    let mut scores = Vec::with_capacity(acc.batch() * acc.channels());
    for n in 0..acc.batch() {
        for c in 0..acc.channels() {
            let sum: i64 = acc.channel(n, c).iter().map(|&v| i64::from(v)).sum();
            scores.push(model.head_affine.score(c, sum, plane)?);
        }
    }
    ops.push(("head.affine", Domain::FixedPoint));
    Ok(IntOutput {
        scores,
        classes: cfg.class_count,
        trace,
        ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::qrelu;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bn1(gamma: f64, beta: f64, mean: f64, var: f64) -> BnParams {
        BnParams {
            gamma: vec![gamma],
            beta: vec![beta],
            moving_mean: vec![mean],
            moving_var: vec![var],
            epsilon: 1e-5,
        }
    }

    /// Level of every accumulator in range, computed the slow way.
    fn sweep(bn: &BnParams, k: u32, denom: u32, bound: i64) -> Vec<u32> {
        let l = levels(k) as f64;
        (-bound..=bound)
            .map(|acc| (qrelu(bn.apply(0, acc as f64 / denom as f64), k) * l).round() as u32)
            .collect()
    }

    #[test]
    fn unit_bn_single_threshold() {
        let bn = bn1(1.0, 0.0, 0.0, 1.0 - 1e-5);
        let bank = fold_bn_qrelu(&bn, 1, 1, 50).unwrap();
        assert_eq!(bank.channels[0], ChannelThresholds::Rising(vec![1]));
        assert_eq!(bank.requantize(0, 0), 0);
        assert_eq!(bank.requantize(0, 1), 1);
    }

    #[test]
    fn negative_gamma_is_non_increasing() {
        let bn = bn1(-0.8, 0.4, 3.0, 2.0);
        let bank = fold_bn_qrelu(&bn, 3, 7, 200).unwrap();
        assert!(matches!(bank.channels[0], ChannelThresholds::Falling(_)));
        let levels: Vec<u32> = (-200..=200).map(|a| bank.requantize(0, a)).collect();
        assert!(levels.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(levels, sweep(&bn, 3, 7, 200));
    }

    #[test]
    fn zero_gamma_is_constant() {
        let bank = fold_bn_qrelu(&bn1(0.0, 0.6, 1.0, 1.0), 2, 3, 10).unwrap();
        assert_eq!(bank.channels[0], ChannelThresholds::Constant(2));
    }

    #[test]
    fn random_banks_match_exhaustive_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..60 {
            let k = rng.random_range(1..=3);
            let denom = *[1u32, 3, 7, 255].get(rng.random_range(0..4)).unwrap();
            let bn = bn1(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.5),
                rng.random_range(-20.0..20.0),
                rng.random_range(0.01..50.0),
            );
            let bound = 400;
            let bank = fold_bn_qrelu(&bn, k, denom, bound).unwrap();
            let got: Vec<u32> = (-(bound as i64)..=bound as i64).map(|a| bank.requantize(0, a)).collect();
            assert_eq!(got, sweep(&bn, k, denom, bound as i64));
        }
    }

    #[test]
    fn thresholds_are_ordered_and_cover_levels() {
        let bn = bn1(0.5, 0.0, 0.0, 1.0);
        let bank = fold_bn_qrelu(&bn, 2, 3, 100).unwrap();
        let ChannelThresholds::Rising(t) = &bank.channels[0] else { panic!() };
        assert_eq!(t.len(), 3);
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
        let hit: std::collections::HashSet<u32> = (-100..=100).map(|a| bank.requantize(0, a)).collect();
        assert_eq!(hit.len(), 4);
    }

    #[test]
    fn shift_is_floor_half() {
        for a in 0..=15 {
            for b in 0..=15 {
                assert_eq!(int_bitshift(a, b, 4), (a + b) / 2);
            }
        }
        for a in 0..=1 {
            for b in 0..=1 {
                assert_eq!(int_bitshift(a, b, 1), (a + b + 1) / 2);
            }
        }
    }

    #[test]
    fn int_tgap_boundary() {
        let x = Tensor4::from_vec([1, 2, 1, 2], vec![7, 0, 7, 1]).unwrap();
        // channel 0 mean exactly one half: not selected
        assert_eq!(int_tgap(&x, 3), vec![false, true]);
    }

    #[test]
    fn head_affine_tracks_real_logits() {
        let bn = BnParams {
            gamma: vec![0.7, -1.3, 0.0],
            beta: vec![0.2, -0.1, 0.05],
            moving_mean: vec![1.5, -2.0, 0.0],
            moving_var: vec![4.0, 0.5, 1.0],
            epsilon: 1e-5,
        };
        let head = HeadAffine::from_bn(&bn, 7).unwrap();
        let plane = 16usize;
        for acc_sum in [-500i64, 0, 37, 900] {
            for c in 0..3 {
                let real = bn.apply(c, acc_sum as f64 / 7.0 / plane as f64);
                let got = head.to_logit(head.score(c, acc_sum, plane as i64).unwrap(), plane);
                assert!((got - real).abs() < 1e-7, "{got} vs {real}");
            }
        }
    }

    #[test]
    fn quant_tensor_checks_range() {
        assert!(QuantTensor::new(Tensor4::from_vec([1, 1, 1, 2], vec![0, 8]).unwrap(), 3).is_err());
        let q = QuantTensor::new(Tensor4::from_vec([1, 1, 1, 2], vec![0, 7]).unwrap(), 3).unwrap();
        assert_eq!(q.to_real().data(), &[0.0, 1.0]);
    }
}
