//! Dense row-major matrices, stable softmax helpers and the seeded generator
//! every other module draws randomness from.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{AfrError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AfrError::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(AfrError::invalid(format!(
                "matrix entry ({}, {}) is not finite",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AfrError::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty-column matrix has no data anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · otherᵀ + bias` where `other` is `k × cols`; the usual affine
    /// map of a dense layer whose weights are stored output-major.
    pub fn affine_transposed(&self, other: &Matrix, bias: &[f64]) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimensions differ");
        assert_eq!(other.rows, bias.len(), "bias length");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for (r, x) in self.iter_rows().enumerate() {
            let dst = out.row_mut(r);
            for (k, w) in other.iter_rows().enumerate() {
                dst[k] = dot(x, w) + bias[k];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `log Σ exp(vᵢ)` with a max shift.
/// Mean and population standard deviation by Welford's update, which
/// returns exactly `(x, 0)` when every value is `x`.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (mean, (m2 / values.len() as f64).sqrt())
}

pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(AfrError::invalid("log_sum_exp of an empty slice"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AfrError::invalid("log_sum_exp input is not finite"));
    }
    Ok(lse_unchecked(values))
}

#[inline]
pub(crate) fn lse_unchecked(values: &[f64]) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Writes the softmax of `logits` into `out`.
#[inline]
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if !logits.all_finite() {
        return Err(AfrError::invalid("softmax input is not finite"));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let (src, dst) = (
            logits.row(r),
            &mut out.data[r * logits.cols..(r + 1) * logits.cols],
        );
        softmax_into(src, dst);
    }
    Ok(out)
}

/// Rescales `gradient` onto the ℓ2 ball of radius `max_norm` when it lies
/// outside it.
pub fn clip_gradient_norm(gradient: &[f64], max_norm: f64) -> Vec<f64> {
    let mut g = gradient.to_vec();
    clip_in_place(&mut g, max_norm);
    g
}

pub(crate) fn clip_in_place(g: &mut [f64], max_norm: f64) {
    let norm = l2_norm(g);
    if norm > max_norm {
        let scale = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Seeded generator. Backed by xoshiro256++ (seeded through SplitMix64), so
/// a given seed yields the same stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator for a named sub-stream.
    pub fn derive(&self, stream: u64) -> Rng {
        // golden-ratio mix keeps nearby stream ids apart
        Rng::new(self.seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box–Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// Uniform integer in `[0, n)`, unbiased (rejection sampling).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let p = softmax_rows(&m).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert!((p.get(1, 0) - 1.0).abs() < 1e-300 + f64::EPSILON);
        assert!(p.get(1, 1) >= 0.0 && p.get(1, 1) < 1e-300);

        let p = softmax_rows(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        for (got, want) in p.row(0).iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn lse_examples() {
        assert_eq!(log_sum_exp(&[3.25]).unwrap(), 3.25);
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let v = log_sum_exp(&[-1000.0, -1000.0]).unwrap();
        assert!((v - (-1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_gradient_norm(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let g = clip_gradient_norm(&[3.0, 4.0], 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_gradient_norm(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn rng_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(Rng::new(43).next_u64(), xs[0]);
    }

    #[test]
    fn sample_indices_distinct() {
        let mut rng = Rng::new(7);
        let mut s = rng.sample_indices(100, 30);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 30);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized(row in proptest::collection::vec(-50.0f64..50.0, 1..8), shift in -20.0f64..20.0) {
            let m = Matrix::new(1, row.len(), row.clone()).unwrap();
            let p = softmax_rows(&m).unwrap();
            let total: f64 = p.row(0).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted = Matrix::new(1, row.len(), row.iter().map(|v| v + shift).collect()).unwrap();
            let q = softmax_rows(&shifted).unwrap();
            for (a, b) in p.row(0).iter().zip(q.row(0)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn clipping_is_idempotent(g in proptest::collection::vec(-10.0f64..10.0, 1..16), max_norm in 0.1f64..5.0) {
            let once = clip_gradient_norm(&g, max_norm);
            prop_assert!(l2_norm(&once) <= max_norm * (1.0 + 1e-12));
            if l2_norm(&g) > max_norm {
                prop_assert!((l2_norm(&once) - max_norm).abs() < 1e-12);
            }
            let twice = clip_gradient_norm(&once, max_norm);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mean_and_std_of_identical_values_is_exact() {
        for x in [0.776, 0.1, 1.0 / 3.0] {
            assert_eq!(mean_and_std(&[x, x, x]), (x, 0.0));
        }
        let (m, s) = mean_and_std(&[0.6, 0.8]);
        assert!((m - 0.7).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
    }
}
