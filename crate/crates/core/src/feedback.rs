//! User-side feedback: soft subcarrier selection and power quantization.
//!
//! A user measures `|y_m|²` on every subcarrier and reports one subcarrier
//! index plus one power value. Selection goes through a temperature-scaled
//! softmax so that training can differentiate through it; the deployed
//! protocol rounds the resulting soft index.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, softmax_scaled_row};
use crate::config::watts_to_dbm;
use crate::error::{Error, Result};

/// Temperature-scaled softmax `w_m = exp(α p_m) / Σ exp(α p_m')`.
pub fn softmax_weights(powers: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_selection_inputs(powers, alpha)?;
    Ok(softmax_row(powers, alpha))
}

/// Softmax over powers mapped affinely onto `[0, 1]` first, the selection
/// rule used by training and evaluation.
pub fn normalized_softmax_weights(powers: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_selection_inputs(powers, alpha)?;
    Ok(softmax_scaled_row(powers, alpha))
}

fn check_selection_inputs(powers: &[f64], alpha: f64) -> Result<()> {
    if powers.is_empty() {
        return Err(Error::InvalidArgument("empty power vector".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {alpha}")));
    }
    if powers.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("subcarrier powers".into()));
    }
    Ok(())
}

/// Result of soft selection over `M` subcarriers. Indices are one-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftIndex {
    pub soft_m: f64,
    pub hard_m: usize,
    /// `Σ w_m p_m`.
    pub soft_power: f64,
}

/// Soft index `Σ w_m m`, its rounding (half away from zero) and the
/// weight-averaged power.
pub fn soft_index(weights: &[f64], powers: &[f64]) -> SoftIndex {
    let soft_m: f64 = weights.iter().enumerate().map(|(i, w)| w * (i + 1) as f64).sum();
    let soft_power: f64 = weights.iter().zip(powers).map(|(w, p)| w * p).sum();
    let hard_m = (soft_m.round() as usize).clamp(1, weights.len());
    SoftIndex { soft_m, hard_m, soft_power }
}

/// Uniform mid-rise quantizer on `[lo, hi]` (dBm) with `2^bits` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub lo: f64,
    pub hi: f64,
    pub bits: u32,
}

impl Quantizer {
    pub fn new(lo: f64, hi: f64, bits: u32) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit width must be in 1..=16, got {bits}")));
        }
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidArgument(format!("invalid quantizer range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi, bits })
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn cell_width(&self) -> f64 {
        (self.hi - self.lo) / self.levels() as f64
    }

    /// Cell index, with out-of-range inputs clamped to the edge cells.
    pub fn code(&self, x: f64) -> u32 {
        let k = ((x - self.lo) / self.cell_width()).floor();
        k.clamp(0.0, (self.levels() - 1) as f64) as u32
    }

    pub fn decode(&self, code: u32) -> f64 {
        self.lo + (code as f64 + 0.5) * self.cell_width()
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.decode(self.code(x))
    }
}

/// Quantizes one power value; see [`Quantizer`].
pub fn quantize_power(power_dbm: f64, bits: u32, lo: f64, hi: f64) -> Result<f64> {
    Ok(Quantizer::new(lo, hi, bits)?.quantize(power_dbm))
}

/// Linear-interpolated percentile of unsorted data, `pct` in `[0, 100]`.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (pos - i as f64) * (v[j] - v[i])
}

/// Power range from the 0.5th and 99.5th percentiles of observed powers.
pub fn calibrate_range(powers_dbm: &[f64]) -> Result<(f64, f64)> {
    if powers_dbm.is_empty() {
        return Err(Error::InvalidArgument("no powers to calibrate from".into()));
    }
    if powers_dbm.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("calibration powers".into()));
    }
    let lo = percentile(powers_dbm, 0.5);
    let mut hi = percentile(powers_dbm, 99.5);
    if hi - lo < 1e-6 {
        hi = lo + 1.0;
    }
    Ok((lo, hi))
}

/// What one user sends back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    /// One-based subcarrier index.
    pub subcarrier_index: usize,
    pub power_dbm: f64,
    pub bits_used: Option<u32>,
}

impl FeedbackMessage {
    /// Deployed-protocol feedback from per-subcarrier powers in watts:
    /// rounded soft index, the power measured there, optionally quantized.
    pub fn from_powers(powers_w: &[f64], alpha: f64, quantizer: Option<&Quantizer>) -> Result<Self> {
        let weights = normalized_softmax_weights(powers_w, alpha)?;
        let sel = soft_index(&weights, powers_w);
        let raw = watts_to_dbm(powers_w[sel.hard_m - 1]);
        let power_dbm = quantizer.map_or(raw, |q| q.quantize(raw));
        Ok(Self { subcarrier_index: sel.hard_m, power_dbm, bits_used: quantizer.map(|q| q.bits) })
    }

    /// `(index, power code)` as sent on the uplink; `None` for raw power.
    pub fn encode(&self, quantizer: &Quantizer) -> (usize, u32) {
        (self.subcarrier_index, quantizer.code(self.power_dbm))
    }
}

/// Bits needed to address one of `num_subcarriers` indices.
pub fn index_bits(num_subcarriers: usize) -> u32 {
    if num_subcarriers <= 1 {
        0
    } else {
        usize::BITS - (num_subcarriers - 1).leading_zeros()
    }
}

/// Uplink bits per user: `ceil(log2 M) + b`.
pub fn feedback_bits_per_user(num_subcarriers: usize, bits: u32) -> u32 {
    index_bits(num_subcarriers) + bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_powers_give_uniform_weights() {
        let w = softmax_weights(&[2.0; 5], 20.0).unwrap();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let w = normalized_softmax_weights(&[2.0; 5], 20.0).unwrap();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn dominant_power_takes_all_weight() {
        let w = softmax_weights(&[0.0, 0.1, 10.0, 0.2], 50.0).unwrap();
        assert!(w[2] > 1.0 - 1e-12);
    }

    #[test]
    fn small_temperature_is_nearly_uniform() {
        let w = softmax_weights(&[0.0, 0.3, 1.0, 0.2], 1e-9).unwrap();
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn selection_rejects_bad_inputs() {
        assert!(softmax_weights(&[1.0, f64::NAN], 1.0).is_err());
        assert!(softmax_weights(&[1.0, 2.0], 0.0).is_err());
        assert!(softmax_weights(&[], 1.0).is_err());
    }

    #[test]
    fn one_hot_and_tie_rounding() {
        let mut w = vec![0.0; 10];
        w[6] = 1.0;
        let s = soft_index(&w, &[1.0; 10]);
        assert_eq!((s.soft_m, s.hard_m), (7.0, 7));

        let mut w = vec![0.0; 10];
        w[2] = 0.5;
        w[3] = 0.5;
        let s = soft_index(&w, &[1.0; 10]);
        assert_eq!((s.soft_m, s.hard_m), (3.5, 4));
    }

    #[test]
    fn quantizer_examples() {
        let q = Quantizer::new(-100.0, -60.0, 1).unwrap();
        assert_eq!(q.quantize(-95.0), -90.0);
        assert_eq!(q.quantize(-61.0), -70.0);
        assert_eq!(q.quantize(-130.0), -90.0);
        assert_eq!(q.quantize(-10.0), -70.0);
        assert!(Quantizer::new(-60.0, -100.0, 4).is_err());
        assert!(Quantizer::new(-100.0, -60.0, 0).is_err());
        assert!(Quantizer::new(-100.0, -60.0, 17).is_err());
    }

    #[test]
    fn fine_quantizer_error_bound() {
        let q = Quantizer::new(-100.0, -60.0, 16).unwrap();
        for i in 0..1000 {
            let x = -100.0 + 40.0 * i as f64 / 999.0;
            assert!((q.quantize(x) - x).abs() <= 40.0 / 2f64.powi(17) + 1e-12);
        }
    }

    #[test]
    fn overhead_bits() {
        assert_eq!(feedback_bits_per_user(1584, 8), 19);
        assert_eq!(feedback_bits_per_user(1024, 8), 18);
        assert_eq!(index_bits(2), 1);
        assert_eq!(index_bits(256), 8);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert!((percentile(&v, 0.5) - 0.5).abs() < 1e-12);
        let (lo, hi) = calibrate_range(&v).unwrap();
        assert!((lo - 0.5).abs() < 1e-12 && (hi - 99.5).abs() < 1e-12);
    }

    #[test]
    fn message_uses_rounded_index() {
        let mut p = vec![1e-12; 16];
        p[9] = 1e-6;
        let msg = FeedbackMessage::from_powers(&p, 20.0, None).unwrap();
        assert_eq!(msg.subcarrier_index, 10);
        assert!((msg.power_dbm - (-30.0)).abs() < 1e-9);
        let q = Quantizer::new(-100.0, -20.0, 4).unwrap();
        let msg = FeedbackMessage::from_powers(&p, 20.0, Some(&q)).unwrap();
        assert_eq!(msg.bits_used, Some(4));
        assert_eq!(msg.power_dbm, q.quantize(-30.0));
        assert_eq!(msg.encode(&q).0, 10);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(p in prop::collection::vec(-5.0f64..5.0, 2..20), c in -100.0f64..100.0) {
            let a = softmax_weights(&p, 3.0).unwrap();
            let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
            let b = softmax_weights(&shifted, 3.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn hard_index_affine_invariant(
            p in prop::collection::vec(0.0f64..1.0, 2..40),
            scale in 1e-8f64..1e3,
            shift in -10.0f64..10.0,
        ) {
            let a = normalized_softmax_weights(&p, 20.0).unwrap();
            let mapped: Vec<f64> = p.iter().map(|v| scale * v + shift).collect();
            let b = normalized_softmax_weights(&mapped, 20.0).unwrap();
            prop_assert_eq!(soft_index(&a, &p).hard_m, soft_index(&b, &mapped).hard_m);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn soft_index_inside_range(p in prop::collection::vec(-1e3f64..1e3, 1..64), alpha in 0.01f64..100.0) {
            let w = normalized_softmax_weights(&p, alpha).unwrap();
            let s = soft_index(&w, &p);
            prop_assert!(s.soft_m >= 1.0 - 1e-9 && s.soft_m <= p.len() as f64 + 1e-9);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn peaked_vectors_select_argmax(
            p in prop::collection::vec(0.0f64..0.5, 3..64),
            peak in 0usize..64,
        ) {
            // Peak at least 0.5 above every other entry after normalization.
            let peak = peak % p.len();
            let mut p = p;
            p[peak] = 1.5;
            let w = normalized_softmax_weights(&p, 20.0).unwrap();
            // Oracle: plain argmax.
            let argmax = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 + 1;
            prop_assert_eq!(soft_index(&w, &p).hard_m, argmax);
        }

        #[test]
        fn quantizer_error_within_half_cell(x in -100.0f64..-60.0, bits in 1u32..=16) {
            let q = Quantizer::new(-100.0, -60.0, bits).unwrap();
            prop_assert!((q.quantize(x) - x).abs() <= q.cell_width() / 2.0 + 1e-9);
        }
    }
}
