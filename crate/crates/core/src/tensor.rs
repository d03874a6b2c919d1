// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices, the Adam optimizer state and the seeded RNG.
//!
//! Storage is `f32`; every reduction (dot products, sums) accumulates in
//! `f64` and rounds once on store.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major `rows × cols` matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must share one length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f32]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

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

    /// Internal constructor for values produced by arithmetic on finite
    /// inputs. Non-finite results are still caught in debug builds.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major backing data.
    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Sets one entry. Non-finite values are rejected.
    pub fn set(&mut self, r: usize, c: usize, value: f32) -> Result<()> {
        if r >= self.rows || c >= self.cols {
            return Err(Error::Index(format!(
                "({r}, {c}) outside {}x{} matrix",
                self.rows, self.cols
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("entry ({r}, {c}) = {value}")));
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut out = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, out)
    }

    /// `self · otherᵀ`. Both operands are walked row-wise, so this is the
    /// cache-friendly form used by the trainers.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.push(dot(a, other.row(j)) as f32);
            }
        }
        Ok(Self::from_raw(self.rows, other.rows, out))
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&self, bias: &[f32]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} columns",
                bias.len(),
                self.cols
            )));
        }
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
        Ok(Self::from_raw(self.rows, self.cols, out))
    }

    /// Column means, accumulated in `f64`.
    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += f64::from(*v);
            }
        }
        let n = self.rows.max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut acc = vec![0.0f64; b.cols];
    let mut out = Vec::with_capacity(a.rows * b.cols);
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = f64::from(aik);
            for (s, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *s += aik * f64::from(bkj);
            }
        }
        out.extend(acc.iter().map(|v| *v as f32));
    }
    Ok(Matrix::from_raw(a.rows, b.cols, out))
}

/// `W · x` for a vector `x`.
pub fn matvec(w: &Matrix, x: &[f32]) -> Result<Vec<f64>> {
    if w.cols != x.len() {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by vector of length {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    Ok((0..w.rows).map(|r| dot(w.row(r), x)).collect())
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

/// Seeded, platform-independent random stream.
///
/// Backed by ChaCha8 keyed from the 64-bit seed. Floating-point draws are
/// derived from raw 64-bit words by fixed formulas in this module (53-bit
/// mantissa uniforms, Box–Muller normals, rejection-sampled bounded
/// integers), so the sequence does not depend on any distribution crate.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed from the keystream so far.
    pub fn word_position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box–Muller; the second variate is cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u is in (0, 1], so ln never sees zero.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Unbiased integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            config,
        }
    }

    /// In-place bias-corrected Adam step on `param`.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::Shape(format!(
                "adam: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.m.shape()
            )));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (((p, &g), mi), vi) in param
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = f64::from(g);
            let m_new = beta1 * f64::from(*mi) + (1.0 - beta1) * g;
            let v_new = beta2 * f64::from(*vi) + (1.0 - beta2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            *p = (f64::from(*p) - lr * m_hat / (v_hat.sqrt() + epsilon)) as f32;
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`]: returns the updated parameters
/// and leaves the updated moments in `state`.
pub fn adam_update(param: &Matrix, grad: &Matrix, state: &mut AdamState) -> Result<Matrix> {
    let mut out = param.clone();
    state.step(&mut out, grad)?;
    Ok(out)
}

/// Xavier/Glorot uniform initialization for a `fan_out × fan_in` weight.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound) as f32)
        .collect();
    Matrix::from_raw(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn matmul_column() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_dot_product() {
        let a = m(&[&[1.0, 2.0, 3.0]]);
        let b = m(&[&[4.0], &[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[32.0]]));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_transposed_agrees() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = m(&[&[1.0, -1.0], &[0.5, 2.0]]);
        assert_eq!(
            a.matmul_transposed(&b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
    }

    #[test]
    fn constructors_reject_nonfinite_and_bad_length() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Matrix::from_vec(1, 1, vec![f32::INFINITY]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        let mut z = Matrix::zeros(1, 1);
        assert!(z.set(0, 0, f32::NAN).is_err());
    }

    fn scalar_step(g: f32) -> f32 {
        let p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let grad = Matrix::from_vec(1, 1, vec![g]).unwrap();
        let mut state = AdamState::new(1, 1, AdamConfig::with_lr(0.1));
        let out = adam_update(&p, &grad, &mut state).unwrap();
        assert_eq!(state.t, 1);
        out.get(0, 0)
    }

    #[test]
    fn adam_first_step_closed_form() {
        // At t=1 the bias-corrected step is lr * g / (|g| + eps).
        assert!((scalar_step(0.5) - 0.9).abs() < 1e-6);
        assert!((scalar_step(-2.0) - 1.1).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let p = m(&[&[1.0, -2.0], &[3.5, 0.0]]);
        let mut state = AdamState::new(2, 2, AdamConfig::default());
        let out = adam_update(&p, &Matrix::zeros(2, 2), &mut state).unwrap();
        assert_eq!(out, p);
        assert_eq!(state.m, Matrix::zeros(2, 2));
        assert_eq!(state.v, Matrix::zeros(2, 2));
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut state = AdamState::new(2, 2, AdamConfig::default());
        let r = adam_update(&Matrix::zeros(2, 2), &Matrix::zeros(1, 2), &mut state);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn rng_reproducible() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RngState::new(43);
        assert_ne!(RngState::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_golden_prefix() {
        // Values from an independent ChaCha8 + PCG32 seed-expansion script.
        let mut r = RngState::new(7);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(first, vec![0x2865_5334_23d7_43bb, 0x2b01_59d3_2e9b_293a, 0xb44b_70b9_4524_9531]);
        assert_eq!(r.word_position(), 6);
    }

    #[test]
    fn rng_uniform_and_below_in_range() {
        let mut r = RngState::new(1);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(7) < 7);
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = RngState::new(3);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = RngState::new(9);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn xavier_bounds() {
        let mut r = RngState::new(5);
        let w = xavier_uniform(8, 24, &mut r);
        let bound = (6.0f32 / 32.0).sqrt();
        assert!(w.as_slice().iter().all(|v| v.abs() <= bound));
    }
}
