//! Activation and weight quantizers with their straight-through gradients.
//!
//! Rounding to nearest resolves ties away from zero throughout (`f64::round`).

use crate::error::{Error, Result};

/// Number of non-zero levels of a `k`-bit activation, `2^k - 1`.
#[inline]
pub fn levels(k: u32) -> u32 {
    debug_assert!((1..=16).contains(&k));
    (1u32 << k) - 1
}

/// k-bit quantized ReLU of a single value. Saturates to `[0, 1]`.
#[inline]
pub fn qrelu(x: f64, k: u32) -> f64 {
    if k == 1 {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    let l = levels(k) as f64;
    (x * l).round().clamp(0.0, l) / l
}

/// Integer level of [`qrelu`], in `0..=2^k - 1`.
#[inline]
pub fn qrelu_level(x: f64, k: u32) -> u32 {
    if k == 1 {
        return u32::from(x > 0.0);
    }
    let l = levels(k) as f64;
    (x * l).round().clamp(0.0, l) as u32
}

pub fn qrelu_forward(x: &[f64], k: u32) -> Vec<f64> {
    x.iter().map(|&v| qrelu(v, k)).collect()
}

/// Binary gradient mask of a straight-through estimator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SteMask(pub Vec<u8>);

impl SteMask {
    pub fn all_ones(len: usize) -> Self {
        SteMask(vec![1; len])
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    /// Multiplies `grad` in place, zeroing masked-out entries.
    pub fn apply(&self, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.0.len());
        for (g, &m) in grad.iter_mut().zip(&self.0) {
            if m == 0 {
                *g = 0.0;
            }
        }
    }
}

#[inline]
pub fn ste_pass(x: f64) -> bool {
    x.abs() <= 1.0
}

/// `1{|x| <= 1}` on the raw (pre-saturation) input.
pub fn qrelu_backward(x: &[f64]) -> SteMask {
    SteMask(x.iter().map(|&v| u8::from(ste_pass(v))).collect())
}

/// Requantizes the sum of two k-bit activations back to k bits.
///
/// `y` must be a sum of two codewords; it is snapped to its integer level
/// before halving so that floating-point error cannot move the floor.
#[inline]
pub fn bitshift(y: f64, k: u32) -> f64 {
    if k == 1 {
        return (y / 2.0).ceil();
    }
    let l = levels(k) as f64;
    let sum_level = (y * l).round();
    (sum_level / 2.0).floor() / l
}

pub fn bitshift_forward(y: &[f64], k: u32) -> Vec<f64> {
    y.iter().map(|&v| bitshift(v, k)).collect()
}

/// The halving is passed straight through.
pub fn bitshift_backward(y: &[f64]) -> SteMask {
    SteMask::all_ones(y.len())
}

#[inline]
pub fn ternary(w: f64, s: f64) -> i8 {
    (w / s).round().clamp(-1.0, 1.0) as i8
}

/// `clip(round(w / s), -1, 1)`.
pub fn ternary_quantize(w: &[f64], s: f64) -> Result<Vec<i8>> {
    if !(s > 0.0) {
        return Err(Error::config("step_size", format!("must be positive, got {s}")));
    }
    Ok(w.iter().map(|&v| ternary(v, s)).collect())
}

/// Empirical 1/3 and 2/3 quantiles: sorted values at `floor(N/3)` and `floor(2N/3)`.
pub fn compute_tertiles(w: &[f64]) -> Result<(f64, f64)> {
    if w.len() < 3 {
        return Err(Error::Data(format!(
            "tertiles need at least 3 values, got {}",
            w.len()
        )));
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok((sorted[n / 3], sorted[2 * n / 3]))
}

/// `s = |q1| + |q2|`; both tertiles at zero is reported as degenerate.
pub fn update_step_size(q1: f64, q2: f64) -> Result<f64> {
    let s = q1.abs() + q2.abs();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Degenerate(format!("tertiles ({q1}, {q2}) give no usable step size")));
    }
    Ok(s)
}

/// Step size of a ternary layer together with the tertiles it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TernarySpec {
    pub s: f64,
    pub q1: f64,
    pub q2: f64,
}

impl TernarySpec {
    pub fn new(s: f64) -> Self {
        TernarySpec { s, q1: -s / 2.0, q2: s / 2.0 }
    }

    /// Recomputes the step size from `w`. On a degenerate distribution the
    /// previous step size is kept and a warning is logged.
    pub fn update_from(&mut self, w: &[f64]) -> Result<()> {
        let (q1, q2) = compute_tertiles(w)?;
        match update_step_size(q1, q2) {
            Ok(s) => {
                *self = TernarySpec { s, q1, q2 };
                Ok(())
            }
            Err(e) => {
                log::warn!("{e}; keeping step size {}", self.s);
                Ok(())
            }
        }
    }
}

/// Sign with `sign(0) = +1`.
#[inline]
pub fn binary(w: f64) -> i8 {
    if w >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn binarize(w: &[f64]) -> Vec<i8> {
    w.iter().map(|&v| binary(v)).collect()
}

/// Shared weight STE, `1{|w| <= 1}`.
pub fn weight_backward(w: &[f64]) -> SteMask {
    qrelu_backward(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qrelu_examples() {
        assert_eq!(qrelu(0.5, 2), 2.0 / 3.0);
        for k in 1..=4 {
            assert_eq!(qrelu(-0.3, k), 0.0);
        }
        assert_eq!(qrelu(0.2, 1), 1.0);
        assert_eq!(qrelu(0.0, 1), 0.0);
        assert_eq!(qrelu(7.5, 3), 1.0);
    }

    #[test]
    fn qrelu_picks_nearest_codeword() {
        // enumerate the codebook and take the closest entry, ties going up
        for k in 2..=4 {
            let l = levels(k);
            let codebook: Vec<f64> = (0..=l).map(|j| j as f64 / l as f64).collect();
            for i in -40..=140 {
                let x = i as f64 / 97.0;
                let mut best = codebook[0];
                for &c in &codebook {
                    let (dc, db) = ((x - c).abs(), (x - best).abs());
                    if dc < db - 1e-12 || ((dc - db).abs() <= 1e-12 && c > best) {
                        best = c;
                    }
                }
                assert_eq!(qrelu(x, k), best, "x={x}, k={k}");
            }
        }
    }

    #[test]
    fn qrelu_mask_examples() {
        assert_eq!(qrelu_backward(&[0.99, 1.01, -1.0, 1.0, -1.0001]).0, vec![1, 0, 1, 1, 0]);
    }

    #[test]
    fn bitshift_examples() {
        assert_eq!(bitshift(4.0 / 3.0, 2), 2.0 / 3.0);
        assert_eq!(bitshift(1.0, 2), 1.0 / 3.0);
        for a in 0..=1 {
            for b in 0..=1 {
                assert_eq!(bitshift((a + b) as f64, 1), (a | b) as f64);
            }
        }
        assert_eq!(bitshift_backward(&[0.3, 2.0]).0, vec![1, 1]);
        assert!(bitshift_backward(&[]).is_empty());
        assert_eq!(bitshift_backward(&[1.5]).0, vec![1]);
    }

    #[test]
    fn ternary_examples() {
        assert_eq!(ternary_quantize(&[0.74, 0.29, -2.0], 0.6).unwrap(), vec![1, 0, -1]);
        assert!(ternary_quantize(&[0.1], 0.0).is_err());
        assert!(ternary_quantize(&[0.1], -1.0).is_err());
        // tie at exactly half a step goes away from zero
        assert_eq!(ternary(0.5, 1.0), 1);
        assert_eq!(ternary(-0.5, 1.0), -1);
    }

    #[test]
    fn tertile_examples() {
        let (q1, q2) = compute_tertiles(&[0.9, -0.3, 0.1, -0.9, 0.3, -0.1]).unwrap();
        assert_eq!((q1, q2), (-0.1, 0.3));
        assert_eq!(compute_tertiles(&[0.4; 7]).unwrap(), (0.4, 0.4));
        assert!(compute_tertiles(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn step_size_examples() {
        assert!((update_step_size(-0.3, 0.3).unwrap() - 0.6).abs() < 1e-15);
        assert!((update_step_size(-0.5, 0.1).unwrap() - 0.6).abs() < 1e-15);
        assert!(update_step_size(0.0, 0.0).is_err());

        let mut spec = TernarySpec::new(0.25);
        spec.update_from(&[0.0; 9]).unwrap();
        assert_eq!(spec.s, 0.25);
        spec.update_from(&[-1.0, -0.5, 0.0, 0.5, 1.0, 0.2]).unwrap();
        assert_eq!(spec.s, spec.q1.abs() + spec.q2.abs());
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[0.2, -0.2, 0.0]), vec![1, -1, 1]);
        assert_eq!(weight_backward(&[0.5, -1.5]).0, vec![1, 0]);
    }

    #[test]
    fn ste_mask_apply() {
        let mut g = vec![1.0, 2.0, 3.0];
        SteMask(vec![1, 0, 1]).apply(&mut g);
        assert_eq!(g, vec![1.0, 0.0, 3.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn qrelu_idempotent(x in -3.0f64..3.0, k in 1u32..=4) {
                let once = qrelu(x, k);
                prop_assert_eq!(qrelu(once, k), once);
            }

            #[test]
            fn qrelu_output_is_codeword(x in -3.0f64..3.0, k in 1u32..=4) {
                let scaled = qrelu(x, k) * levels(k) as f64;
                prop_assert_eq!(scaled, scaled.round());
                prop_assert!((0.0..=levels(k) as f64).contains(&scaled));
                prop_assert_eq!(scaled as u32, qrelu_level(x, k));
            }

            #[test]
            fn ternary_scale_covariance(w in -5.0f64..5.0, s in 0.01f64..3.0) {
                // w / s computed once on both sides, so equality is exact
                prop_assert_eq!(ternary(w, s), ternary(w / s, 1.0));
            }

            #[test]
            fn masks_match_predicate(xs in proptest::collection::vec(-2.0f64..2.0, 0..64)) {
                let m = qrelu_backward(&xs);
                for (x, b) in xs.iter().zip(&m.0) {
                    prop_assert_eq!(*b == 1, x.abs() <= 1.0);
                }
                prop_assert!(bitshift_backward(&xs).0.iter().all(|&b| b == 1));
            }
        }
    }
}
