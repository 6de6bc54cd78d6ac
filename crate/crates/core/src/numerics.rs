//! Dense f64 kernels, numerically stable softmax, unit-norm projection and
//! seeded random streams.
//!
//! Every reduction runs left to right over its axis with no reassociation, so
//! identical inputs always produce bit-identical outputs.

use crate::error::{shape_err, Result, SecuError};

/// Vectors with norm at or below this value cannot be normalized.
pub const EPS_NORM: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return shape_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return shape_err(format!("row {i} has length {}, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-width matrix has no meaningful rows to walk
        let cols = self.cols.max(1);
        self.data
            .chunks_exact(cols)
            .take(if self.cols == 0 { 0 } else { self.rows })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += alpha * other`, elementwise.
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return shape_err(format!(
                "cannot add {}x{} into {}x{}",
                other.rows, other.cols, self.rows, self.cols
            ));
        }
        axpy(alpha, &other.data, &mut self.data)
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return shape_err(format!(
                "matvec: {}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok(self.iter_rows().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`, accumulated row by row in index order.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return shape_err(format!(
                "matvec_t: ({}x{})ᵀ times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in self.iter_rows().zip(v) {
            axpy_unchecked(s, r, &mut out);
        }
        Ok(out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Inner product with a fixed left-to-right summation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) -> Result<()> {
    if x.len() != y.len() {
        return shape_err(format!("axpy: lengths {} and {}", x.len(), y.len()));
    }
    axpy_unchecked(alpha, x, y);
    Ok(())
}

#[inline]
pub(crate) fn axpy_unchecked(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Projects `v` onto the unit sphere.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

/// In-place variant of [`normalize`]; returns the norm before projection.
pub fn normalize_in_place(v: &mut [f64]) -> Result<f64> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(SecuError::NonFinite("normalize"));
    }
    if n <= EPS_NORM {
        return Err(SecuError::DegenerateVector { norm: n });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

/// Softmax with max subtraction.
pub fn stable_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(SecuError::InvalidArgument(
            "softmax over zero classes".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SecuError::NonFinite("softmax scores"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let mut total = 0.0;
    for e in &out {
        total += e;
    }
    out.iter_mut().for_each(|e| *e /= total);
    Ok(out)
}

/// `log Σ exp(s_k)` evaluated with max subtraction.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores {
        total += (s - max).exp();
    }
    max + total.ln()
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = j;
        }
    }
    best
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Neumaier-compensated sum, used where long sums are compared against each other.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Seeded random streams.
///
/// All randomness comes from ChaCha8 seeded with `seed_from_u64(seed)`. A
/// computation that needs an independent stream selects it with
/// `set_stream(id)`, using the ids below, so adding or removing one consumer
/// never shifts the draws seen by another.
pub mod rng {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub type SeededRng = ChaCha8Rng;

    pub const STREAM_DATA: u64 = 1;
    pub const STREAM_ENCODER_INIT: u64 = 2;
    pub const STREAM_INIT_ORDER: u64 = 3;
    pub const STREAM_PROBE: u64 = 4;
    const STREAM_EPOCH_ORDER: u64 = 1 << 32;
    const STREAM_AUGMENT: u64 = 2 << 32;
    const STREAM_HEAD: u64 = 3 << 32;
    const STREAM_TRIAL: u64 = 4 << 32;

    pub fn seeded(seed: u64) -> SeededRng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn stream(seed: u64, id: u64) -> SeededRng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(id);
        r
    }

    pub fn epoch_order(seed: u64, epoch: usize) -> SeededRng {
        stream(seed, STREAM_EPOCH_ORDER + epoch as u64)
    }

    pub fn augment(seed: u64, epoch: usize) -> SeededRng {
        stream(seed, STREAM_AUGMENT + epoch as u64)
    }

    pub fn head(seed: u64, head: usize) -> SeededRng {
        stream(seed, STREAM_HEAD + head as u64)
    }

    /// Per-trial stream for probes; trial `t` of master seed `s` always sees the same draws.
    pub fn trial(seed: u64, t: u64) -> SeededRng {
        stream(seed, STREAM_TRIAL + t)
    }

    pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        rng.sample(StandardNormal)
    }

    /// Uniformly distributed unit vector in `d` dimensions.
    pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
            if super::normalize_in_place(&mut v).is_ok() {
                return v;
            }
        }
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_on_equal_scores() {
        let p = stable_softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_extreme_gap() {
        // e^-40 / (1 + e^-40), evaluated in extended precision: 4.248354255291589e-18
        let p = stable_softmax(&[20.0, -20.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-16);
        assert!((p[1] - 4.248354255291589e-18).abs() < 1e-30);
    }

    #[test]
    fn softmax_large_magnitudes_do_not_overflow() {
        let p = stable_softmax(&[1e4, -1e4, 9999.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            stable_softmax(&[0.0, f64::NAN]),
            Err(SecuError::NonFinite(_))
        ));
        assert!(stable_softmax(&[f64::INFINITY]).is_err());
        assert!(stable_softmax(&[]).is_err());
    }

    #[test]
    fn normalize_basic_and_degenerate() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(matches!(
            normalize(&[1e-300, 1e-300]),
            Err(SecuError::DegenerateVector { .. })
        ));
        assert!(normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn kernels_identity_zero_and_hand_expansion() {
        let v = [1.5, -2.0, 0.25];
        assert_eq!(Mat::identity(3).matvec(&v).unwrap(), v.to_vec());
        assert_eq!(Mat::zeros(2, 3).matvec(&v).unwrap(), vec![0.0, 0.0]);

        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Mat::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        // [1 2;3 4][5 6;7 8] = [19 22; 43 50]
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matvec(&[1.0, -1.0]).unwrap(), vec![-1.0, -1.0]);
        assert_eq!(a.matvec_t(&[1.0, -1.0]).unwrap(), vec![-2.0, -2.0]);

        let mut y = vec![1.0, 1.0];
        axpy(2.0, &[0.5, -1.0], &mut y).unwrap();
        assert_eq!(y, vec![2.0, -1.0]);
    }

    #[test]
    fn kernels_reject_shape_mismatch() {
        let a = Mat::zeros(2, 3);
        assert!(a.matvec(&[1.0, 2.0]).is_err());
        assert!(a.matmul(&Mat::zeros(2, 2)).is_err());
        assert!(axpy(1.0, &[1.0], &mut [0.0, 0.0]).is_err());
        assert!(Mat::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn argmin_argmax_break_ties_low() {
        assert_eq!(argmin(&[1.0, 0.0, 0.0]), 1);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        use rand::Rng;
        let a: Vec<u64> = (0..4).map(|_| rng::stream(9, 5).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| rng::stream(9, 5).random()).collect();
        assert_eq!(a, b);
        let mut r1 = rng::stream(9, 5);
        let mut r2 = rng::stream(9, 6);
        assert_ne!(r1.random::<u64>(), r2.random::<u64>());
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(s in prop::collection::vec(-1e4f64..1e4, 1..12)) {
            let p = stable_softmax(&s).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(
            s in prop::collection::vec(-51_200i32..51_200, 1..10),
            c in -102_400i32..102_400,
        ) {
            // dyadic grid keeps s + c exact, isolating the kernel's own rounding
            let s: Vec<f64> = s.into_iter().map(|v| v as f64 / 1024.0).collect();
            let c = c as f64 / 1024.0;
            let p = stable_softmax(&s).unwrap();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let q = stable_softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
            }
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..16)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() <= 1e-12);
            let w = normalize(&u).unwrap();
            for (a, b) in u.iter().zip(&w) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn kernels_are_deterministic(v in prop::collection::vec(-10f64..10.0, 6)) {
            let m = Mat::from_vec(2, 3, v.clone()).unwrap();
            let x = [v[0], v[2], v[4]];
            prop_assert_eq!(m.matvec(&x).unwrap(), m.matvec(&x).unwrap());
            prop_assert_eq!(dot(&v, &v).to_bits(), dot(&v, &v).to_bits());
        }
    }
}
