//! Scalar statistical kernels: order-statistic quantiles, the inverse Normal
//! CDF, the elementwise tanh soft clip and Shannon entropy.
//!
//! Inputs are `f32` latent values; every accumulation runs in `f64`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Linear-interpolation quantile of `values` at probability `q`.
///
/// With the sorted values `v[0..n]` and `p = q·(n−1)` this returns
/// `v[⌊p⌋] + frac(p)·(v[⌊p⌋+1] − v[⌊p⌋])`.
pub fn quantile(values: &[f32], q: f64) -> Result<f32> {
    let sorted = SortedSample::new(values)?;
    sorted.quantile(q)
}

/// A sorted copy of a sample, for evaluating several quantiles with one sort.
#[derive(Clone, Debug)]
pub struct SortedSample {
    sorted: Vec<f32>,
}

impl SortedSample {
    pub fn new(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("quantile of an empty sequence"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable_by(f32::total_cmp);
        Ok(SortedSample { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn quantile(&self, q: f64) -> Result<f32> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
        }
        let v = &self.sorted;
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        if lo + 1 >= v.len() {
            return Ok(v[v.len() - 1]);
        }
        let frac = pos - lo as f64;
        let (a, b) = (v[lo] as f64, v[lo + 1] as f64);
        Ok((a + frac * (b - a)) as f32)
    }
}

/// Lower/upper probability levels `(q_ℓ, q_h)` with `0 ≤ q_ℓ < q_h ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantilePair {
    low: f64,
    high: f64,
}

impl QuantilePair {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) {
            return Err(Error::invalid(format!(
                "quantile levels must lie in [0, 1], got ({low}, {high})"
            )));
        }
        if low >= high {
            return Err(Error::invalid(format!(
                "q_low < q_high required, got ({low}, {high})"
            )));
        }
        Ok(QuantilePair { low, high })
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }
}

/// Standard Normal CDF `Φ(z)`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

// Acklam's rational approximation to Φ⁻¹, relative error < 1.2e-9.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_LOW: f64 = 0.024_25;

/// Φ⁻¹ on the lower half `p ∈ (0, 0.5]`; the result is never positive.
fn ndtri_lower(p: f64) -> f64 {
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // one Halley step against the erfc-based CDF
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    let x = x - u / (1.0 + 0.5 * x * u);
    x.min(0.0)
}

/// Inverse of the standard Normal CDF: returns `z` with `Φ(z) = p`.
///
/// Absolute error is below 1e-9 for `p ∈ [1e-6, 1 − 1e-6]`. The result is
/// exactly antisymmetric, `ndtri(p) == -ndtri(1 - p)`, and `ndtri(0.5) == 0`.
pub fn ndtri(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "ndtri requires p in (0, 1), got {p}"
        )));
    }
    if p <= 0.5 {
        Ok(ndtri_lower(p))
    } else {
        // 1 − p is exact for p in [0.5, 1)
        Ok(-ndtri_lower(1.0 - p))
    }
}

/// Tanh soft clip of `x` into the corridor `[lo, hi]`:
/// `m + δ·tanh(α·(x − m)/(δ + ε))` with `m = (lo+hi)/2`, `δ = (hi−lo)/2`.
///
/// The result always lies in `[lo, hi]`; a zero-width corridor returns `m`.
#[inline]
pub fn soft_clip_elem(x: f32, lo: f32, hi: f32, alpha: f32, eps: f32) -> f32 {
    let (lo, hi) = (lo as f64, hi as f64);
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let y = (alpha as f64 * (x as f64 - mid) / (half + eps as f64)).tanh();
    (mid + half * y) as f32
}

const NORMALIZATION_TOL: f64 = 1e-6;

/// Shannon entropy (natural log) of a probability vector, with `0·ln 0 = 0`.
pub fn row_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("entropy of an empty distribution"));
    }
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!(
            "probability entry {v} is negative or not finite"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.clamp(0.0, (p.len() as f64).ln())
}

/// In-place softmax of a row of logits.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantile_examples() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5).unwrap(), 3.0);
        assert_eq!(quantile(&v, 0.25).unwrap(), 2.0);
        assert_eq!(quantile(&[7.0], 0.0).unwrap(), 7.0);
        assert_eq!(quantile(&[7.0], 0.37).unwrap(), 7.0);
        assert_eq!(quantile(&[7.0], 1.0).unwrap(), 7.0);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&v, 1.5).is_err());
    }

    #[test]
    fn quantile_interpolates_between_order_statistics() {
        // p = 0.1 * 4 = 0.4 between 10 and 20
        let v = [40.0, 10.0, 30.0, 20.0, 50.0];
        assert_eq!(quantile(&v, 0.1).unwrap(), 14.0);
    }

    #[test]
    fn ndtri_examples() {
        assert_eq!(ndtri(0.5).unwrap(), 0.0);
        assert!((ndtri(0.999).unwrap() - 3.090_232_306_167_813).abs() < 1e-9);
        let lo = ndtri(0.125).unwrap();
        assert!((lo + 1.150_349_380_376_008).abs() < 1e-9);
        assert_eq!(ndtri(0.875).unwrap(), -lo);
    }

    #[test]
    fn ndtri_domain() {
        for p in [0.0, 1.0, -0.1, 1.1, f64::NAN] {
            assert!(ndtri(p).is_err(), "p = {p}");
        }
    }

    #[test]
    fn soft_clip_examples() {
        assert_eq!(soft_clip_elem(0.25, -0.5, 1.0, 2.0, 1e-6), 0.25);
        assert_eq!(soft_clip_elem(123.0, 0.7, 0.7, 2.0, 1e-6), 0.7);
        let y = soft_clip_elem(1.0, -1.0, 1.0, 2.0, 1e-12);
        assert!((y - 2f32.tanh()).abs() < 1e-6);
        assert!((y - 0.964_028).abs() < 1e-6);
    }

    #[test]
    fn entropy_examples() {
        assert!((row_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(row_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((row_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(row_entropy(&[0.5, 0.6]).is_err());
        assert!(row_entropy(&[1.5, -0.5]).is_err());
    }

    proptest! {
        #[test]
        fn quantile_monotone_in_level(
            v in prop::collection::vec(-1e3f32..1e3, 1..64),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let s = SortedSample::new(&v).unwrap();
            let (q1, q2) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.quantile(q1).unwrap() <= s.quantile(q2).unwrap());
            let min = v.iter().copied().fold(f32::INFINITY, f32::min);
            let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(s.quantile(0.0).unwrap(), min);
            prop_assert_eq!(s.quantile(1.0).unwrap(), max);
        }

        #[test]
        fn soft_clip_bounded_and_monotone(
            lo in -50f32..50.0,
            width in 0f32..20.0,
            alpha in 0.1f32..8.0,
            x1 in -200f32..200.0,
            x2 in -200f32..200.0,
        ) {
            let hi = lo + width;
            let mid = 0.5 * (lo as f64 + hi as f64);
            let half = 0.5 * (hi as f64 - lo as f64);
            let (a, b) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
            let ya = soft_clip_elem(a, lo, hi, alpha, 1e-6);
            let yb = soft_clip_elem(b, lo, hi, alpha, 1e-6);
            prop_assert!(ya <= yb);
            prop_assert!((ya as f64 - mid).abs() <= half);
            prop_assert!(ya >= lo && yb <= hi);
        }

        #[test]
        fn entropy_permutation_invariant(
            w in prop::collection::vec(0.0f64..1.0, 2..16),
            seed in any::<u64>(),
        ) {
            let total: f64 = w.iter().sum();
            prop_assume!(total > 1e-3);
            let p: Vec<f64> = w.iter().map(|v| v / total).collect();
            let mut shuffled = p.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let (h1, h2) = (row_entropy(&p).unwrap(), row_entropy(&shuffled).unwrap());
            prop_assert!((h1 - h2).abs() < 1e-12);
            prop_assert!(h1 >= 0.0 && h1 <= (p.len() as f64).ln() + 1e-12);
        }
    }
}
