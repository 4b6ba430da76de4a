//! Uniform quantization: `r = S (q - Z)`.
//!
//! All quantizers in the crate (activation quantizers, table construction,
//! fake quantization during training) go through [`quantize`] so that floor
//! and clamp behave identically everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest scale produced by calibration of a zero-width range.
pub const DEFAULT_SCALE_EPSILON: f64 = 1.0 / 16_777_216.0; // 2^-24

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bit-width {0} outside [{MIN_BITS}, {MAX_BITS}]")]
    InvalidBits(u32),
    #[error("scale must be finite and positive, got {0}")]
    InvalidScale(f64),
    #[error("zero-point {zero_point} outside [{lo}, {hi}]")]
    ZeroPointOutOfRange { zero_point: i32, lo: i32, hi: i32 },
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error("calibration statistics are empty")]
    EmptyCalibration,
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeMismatch { len: usize, shape: Vec<usize> },
    #[error("code {code} at index {index} outside [{lo}, {hi}]")]
    CodeOutOfRange { code: i32, index: usize, lo: i32, hi: i32 },
}

/// Integer range convention.
///
/// `Narrow` is symmetric, `[-2^(b-1)+1, 2^(b-1)-1]`; `Wide` is the full
/// two's-complement range `[-2^(b-1), 2^(b-1)-1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeMode {
    Narrow,
    Wide,
}

/// Rounding applied to `x / S` before the zero-point shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    /// `floor`, toward negative infinity.
    #[default]
    Floor,
    /// `floor(v + 1/2)`.
    Nearest,
}

pub fn integer_range(bits: u32, mode: RangeMode) -> Result<(i32, i32), QuantError> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(QuantError::InvalidBits(bits));
    }
    let half = 1i32 << (bits - 1);
    Ok(match mode {
        RangeMode::Narrow => (-half + 1, half - 1),
        RangeMode::Wide => (-half, half - 1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f64,
    zero_point: i32,
    bits: u32,
    range_mode: RangeMode,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u32, range_mode: RangeMode) -> Result<Self, QuantError> {
        let (lo, hi) = integer_range(bits, range_mode)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::InvalidScale(scale));
        }
        if zero_point < lo || zero_point > hi {
            return Err(QuantError::ZeroPointOutOfRange { zero_point, lo, hi });
        }
        Ok(Self { scale, zero_point, bits, range_mode })
    }

    /// Symmetric parameters: zero-point 0.
    pub fn symmetric(scale: f64, bits: u32, range_mode: RangeMode) -> Result<Self, QuantError> {
        Self::new(scale, 0, bits, range_mode)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn range_mode(&self) -> RangeMode {
        self.range_mode
    }

    /// `(lo, hi)` of the integer codes.
    pub fn range(&self) -> (i32, i32) {
        integer_range(self.bits, self.range_mode).expect("bits validated at construction")
    }

    pub fn contains(&self, q: i32) -> bool {
        let (lo, hi) = self.range();
        (lo..=hi).contains(&q)
    }

    /// Range of `q - Z`, the zero-point corrected codes seen by accumulators.
    pub fn centered_range(&self) -> (i64, i64) {
        let (lo, hi) = self.range();
        (lo as i64 - self.zero_point as i64, hi as i64 - self.zero_point as i64)
    }

    /// Re-validates deserialized parameters.
    pub fn validate(&self) -> Result<(), QuantError> {
        Self::new(self.scale, self.zero_point, self.bits, self.range_mode).map(|_| ())
    }
}

/// `clamp(floor(x / S) + Z, lo, hi)`.
pub fn quantize(x: f64, p: &QuantParams) -> Result<i32, QuantError> {
    quantize_with(x, p, Rounding::Floor)
}

pub fn quantize_with(x: f64, p: &QuantParams, rounding: Rounding) -> Result<i32, QuantError> {
    if !x.is_finite() {
        return Err(QuantError::NonFinite(x));
    }
    let v = x / p.scale;
    let v = match rounding {
        Rounding::Floor => v.floor(),
        Rounding::Nearest => (v + 0.5).floor(),
    };
    let (lo, hi) = p.range();
    // Clamp in floating point first: v may be far outside i32.
    let shifted = v + p.zero_point as f64;
    Ok(shifted.clamp(lo as f64, hi as f64) as i32)
}

/// Whether `x` would be clamped by [`quantize_with`], i.e. lies outside the
/// span of codes the quantizer can represent without saturating.
pub fn saturates(x: f64, p: &QuantParams, rounding: Rounding) -> bool {
    let v = x / p.scale;
    let v = match rounding {
        Rounding::Floor => v.floor(),
        Rounding::Nearest => (v + 0.5).floor(),
    };
    let (lo, hi) = p.range();
    let shifted = v + p.zero_point as f64;
    shifted < lo as f64 || shifted > hi as f64
}

pub fn dequantize(q: i32, p: &QuantParams) -> f64 {
    p.scale * (q as f64 - p.zero_point as f64)
}

/// Running min/max of observed reals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub min_seen: f64,
    pub max_seen: f64,
    pub count: u64,
}

impl Default for CalibrationStats {
    fn default() -> Self {
        Self { min_seen: f64::INFINITY, max_seen: f64::NEG_INFINITY, count: 0 }
    }
}

impl CalibrationStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut s = Self::new();
        s.extend(values);
        s
    }

    pub fn observe(&mut self, x: f64) {
        self.min_seen = self.min_seen.min(x);
        self.max_seen = self.max_seen.max(x);
        self.count += 1;
    }

    pub fn extend(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.observe(v);
        }
    }

    /// Associative and commutative; the empty stats are the identity.
    pub fn merge(&self, other: &Self) -> Self {
        Self {
            min_seen: self.min_seen.min(other.min_seen),
            max_seen: self.max_seen.max(other.max_seen),
            count: self.count + other.count,
        }
    }
}

pub fn calibrate(stats: &CalibrationStats, bits: u32, range_mode: RangeMode, symmetric: bool) -> Result<QuantParams, QuantError> {
    calibrate_with_epsilon(stats, bits, range_mode, symmetric, DEFAULT_SCALE_EPSILON)
}

/// Min/max calibration.
///
/// Affine mode maps `min_seen` onto the lowest code; the zero-point is
/// clamped into the code range when zero is far outside the observed span.
pub fn calibrate_with_epsilon(
    stats: &CalibrationStats,
    bits: u32,
    range_mode: RangeMode,
    symmetric: bool,
    epsilon: f64,
) -> Result<QuantParams, QuantError> {
    if stats.count == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    let (lo, hi) = integer_range(bits, range_mode)?;
    if symmetric {
        let max_abs = stats.min_seen.abs().max(stats.max_seen.abs());
        let scale = (max_abs / hi as f64).max(epsilon);
        return QuantParams::symmetric(scale, bits, range_mode);
    }
    let scale = ((stats.max_seen - stats.min_seen) / (hi - lo) as f64).max(epsilon);
    let zp = lo as f64 - (stats.min_seen / scale).floor();
    let zero_point = zp.clamp(lo as f64, hi as f64) as i32;
    QuantParams::new(scale, zero_point, bits, range_mode)
}

/// Integer tensor with its quantization parameters. Row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    qparams: QuantParams,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, qparams: QuantParams) -> Result<Self, QuantError> {
        let t = Self { shape, data, qparams };
        t.validate()?;
        Ok(t)
    }

    /// Quantizes reals elementwise.
    pub fn quantize(shape: Vec<usize>, values: &[f64], qparams: QuantParams, rounding: Rounding) -> Result<Self, QuantError> {
        let data = values
            .iter()
            .map(|&x| quantize_with(x, &qparams, rounding))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(shape, data, qparams)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        self.qparams.validate()?;
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(QuantError::ShapeMismatch { len: self.data.len(), shape: self.shape.clone() });
        }
        let (lo, hi) = self.qparams.range();
        if let Some((index, &code)) = self.data.iter().enumerate().find(|(_, &q)| q < lo || q > hi) {
            return Err(QuantError::CodeOutOfRange { code, index, lo, hi });
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn qparams(&self) -> &QuantParams {
        &self.qparams
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&q| dequantize(q, &self.qparams)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(scale: f64, zp: i32, bits: u32, mode: RangeMode) -> QuantParams {
        QuantParams::new(scale, zp, bits, mode).unwrap()
    }

    #[test]
    fn ranges() {
        assert_eq!(integer_range(2, RangeMode::Narrow).unwrap(), (-1, 1));
        assert_eq!(integer_range(2, RangeMode::Wide).unwrap(), (-2, 1));
        assert_eq!(integer_range(8, RangeMode::Wide).unwrap(), (-128, 127));
        assert_eq!(integer_range(16, RangeMode::Narrow).unwrap(), (-32767, 32767));
        assert_eq!(integer_range(1, RangeMode::Wide), Err(QuantError::InvalidBits(1)));
        assert_eq!(integer_range(17, RangeMode::Narrow), Err(QuantError::InvalidBits(17)));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, &p(1.0, 0, 8, RangeMode::Wide)).unwrap(), 0);
        assert_eq!(quantize(2.3, &p(0.5, 1, 8, RangeMode::Wide)).unwrap(), 5);
        assert_eq!(quantize(-3.0, &p(2.0, 0, 2, RangeMode::Narrow)).unwrap(), -1);
        assert!(matches!(quantize(f64::NAN, &p(1.0, 0, 8, RangeMode::Wide)), Err(QuantError::NonFinite(_))));
        assert!(quantize(f64::INFINITY, &p(1.0, 0, 8, RangeMode::Wide)).is_err());
    }

    #[test]
    fn floor_rounds_toward_negative_infinity() {
        let q = p(1.0, 0, 8, RangeMode::Wide);
        assert_eq!(quantize(-0.5, &q).unwrap(), -1);
        assert_eq!(quantize(-1.0, &q).unwrap(), -1);
        assert_eq!(quantize(-1.0001, &q).unwrap(), -2);
        assert_eq!(quantize_with(-0.5, &q, Rounding::Nearest).unwrap(), 0);
        assert_eq!(quantize_with(-0.51, &q, Rounding::Nearest).unwrap(), -1);
        assert_eq!(quantize_with(0.5, &q, Rounding::Nearest).unwrap(), 1);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(5, &p(0.5, 1, 8, RangeMode::Wide)), 2.0);
        assert_eq!(dequantize(7, &p(0.3, 7, 8, RangeMode::Wide)), 0.0);
        assert_eq!(dequantize(-1, &p(1.0, 0, 8, RangeMode::Wide)), -1.0);
    }

    #[test]
    fn params_validation() {
        assert!(matches!(QuantParams::new(0.0, 0, 8, RangeMode::Wide), Err(QuantError::InvalidScale(_))));
        assert!(matches!(QuantParams::new(-1.0, 0, 8, RangeMode::Wide), Err(QuantError::InvalidScale(_))));
        assert!(matches!(
            QuantParams::new(1.0, -2, 2, RangeMode::Narrow),
            Err(QuantError::ZeroPointOutOfRange { zero_point: -2, lo: -1, hi: 1 })
        ));
        assert!(QuantParams::new(1.0, -2, 2, RangeMode::Wide).is_ok());
    }

    #[test]
    fn calibrate_examples() {
        let s = CalibrationStats::from_values([-1.0, 1.0]);
        let q = calibrate(&s, 2, RangeMode::Narrow, true).unwrap();
        assert_eq!((q.scale(), q.zero_point()), (1.0, 0));

        let s = CalibrationStats::from_values([0.0, 255.0]);
        let q = calibrate(&s, 8, RangeMode::Wide, false).unwrap();
        assert_eq!((q.scale(), q.zero_point()), (1.0, -128));
        assert_eq!(quantize(0.0, &q).unwrap(), -128);
        assert_eq!(quantize(255.0, &q).unwrap(), 127);

        let s = CalibrationStats::from_values([5.0, 5.0]);
        let q = calibrate(&s, 8, RangeMode::Wide, false).unwrap();
        assert_eq!(q.scale(), DEFAULT_SCALE_EPSILON);
        let codes: Vec<i32> = [4.9, 5.0, 5.1].iter().map(|&x| quantize(x, &q).unwrap()).collect();
        assert!(codes.iter().all(|&c| c == codes[0]), "{codes:?}");

        assert_eq!(calibrate(&CalibrationStats::new(), 8, RangeMode::Wide, false), Err(QuantError::EmptyCalibration));
    }

    #[test]
    fn affine_calibration_covers_observed_range() {
        let s = CalibrationStats::from_values([-0.7, 3.2]);
        for mode in [RangeMode::Narrow, RangeMode::Wide] {
            for bits in 2..=8 {
                let q = calibrate(&s, bits, mode, false).unwrap();
                let (lo, hi) = q.range();
                assert_eq!(quantize(-0.7, &q).unwrap(), lo);
                assert!(quantize(3.2, &q).unwrap() >= hi - 1);
            }
        }
    }

    #[test]
    fn stats_merge_is_associative_with_identity() {
        let a = CalibrationStats::from_values([1.0, 4.0]);
        let b = CalibrationStats::from_values([-2.0]);
        let c = CalibrationStats::from_values([7.0, 0.5, 3.0]);
        assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
        assert_eq!(a.merge(&b), b.merge(&a));
        assert_eq!(a.merge(&CalibrationStats::new()), a);
        assert_eq!(a.merge(&b).merge(&c).count, 6);
    }

    #[test]
    fn qtensor_checks() {
        let q = p(1.0, 0, 2, RangeMode::Narrow);
        assert!(QTensor::new(vec![2, 2], vec![1, 0, -1, 1], q).is_ok());
        assert!(matches!(QTensor::new(vec![3], vec![1, 0], q), Err(QuantError::ShapeMismatch { .. })));
        assert!(matches!(QTensor::new(vec![2], vec![1, -2], q), Err(QuantError::CodeOutOfRange { index: 1, .. })));
    }

    fn arb_params() -> impl Strategy<Value = QuantParams> {
        (2u32..=16, any::<bool>(), -6.0f64..6.0, any::<u16>()).prop_map(|(bits, wide, log_scale, zp_seed)| {
            let mode = if wide { RangeMode::Wide } else { RangeMode::Narrow };
            let (lo, hi) = integer_range(bits, mode).unwrap();
            let zp = lo + (zp_seed as i32).rem_euclid(hi - lo + 1);
            QuantParams::new(2f64.powf(log_scale), zp, bits, mode).unwrap()
        })
    }

    proptest! {
        #[test]
        fn quantize_stays_in_range(p in arb_params(), x in -1e6f64..1e6) {
            let q = quantize(x, &p).unwrap();
            prop_assert!(p.contains(q));
        }

        #[test]
        fn quantize_is_monotone(p in arb_params(), a in -1e4f64..1e4, b in -1e4f64..1e4) {
            let (x1, x2) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(x1, &p).unwrap() <= quantize(x2, &p).unwrap());
        }

        #[test]
        fn roundtrip_error_bounded_by_scale(p in arb_params(), t in 0.0f64..1.0) {
            let (lo, hi) = p.range();
            let x_lo = dequantize(lo, &p);
            let x_hi = dequantize(hi, &p);
            let x = x_lo + t * (x_hi - x_lo);
            let back = dequantize(quantize(x, &p).unwrap(), &p);
            prop_assert!((back - x).abs() <= p.scale() * (1.0 + 1e-9), "x={x} back={back}");
        }

        #[test]
        fn narrow_symmetry_on_grid(bits in 2u32..=16, log_scale in -6i32..6, k_seed in any::<i32>()) {
            let p = QuantParams::symmetric(2f64.powi(log_scale), bits, RangeMode::Narrow).unwrap();
            let (_, hi) = p.range();
            let k = k_seed.rem_euclid(hi + 1);
            let x = k as f64 * p.scale();
            prop_assert_eq!(quantize(-x, &p).unwrap(), -quantize(x, &p).unwrap());
        }
    }
}
