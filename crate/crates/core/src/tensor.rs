//! Dense numeric kernels used by the decoder.
//!
//! Storage is `f32`; every reduction (dot products, sums of squares,
//! softmax normalizers) accumulates in `f64` and in ascending index order,
//! so results are reproducible bit-for-bit.

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Contract(format!(
                "add: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}

/// Matrix product `a · b` with `f64` accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Contract(format!(
            "matmul: inner dimensions differ ({}x{} · {}x{})",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = a.row(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            let a_ip = a_ip as f64;
            for (slot, &b_pj) in acc.iter_mut().zip(b.row(p)) {
                *slot += a_ip * b_pj as f64;
            }
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    Ok(out)
}

/// Dot product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

/// Softmax with max subtraction.
///
/// Entries far below the maximum (more than ~745 nats) underflow to zero;
/// the output is still a probability vector.
pub fn stable_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log(softmax(v))`, computed without forming the probabilities.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(v)?;
    Ok(v.iter().map(|&x| x - lse).collect())
}

pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Contract("log-sum-exp of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `gain[i] * x[i] / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f64) -> Result<Vec<f32>> {
    let mut out = vec![0.0; x.len()];
    rms_norm_into(x, gain, eps, &mut out)?;
    Ok(out)
}

pub(crate) fn rms_norm_into(x: &[f32], gain: &[f32], eps: f64, out: &mut [f32]) -> Result<()> {
    if x.len() != gain.len() || x.len() != out.len() {
        return Err(Error::Contract(format!(
            "rms_norm: input length {} vs gain length {}",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Ok(());
    }
    let mean_sq = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let denom = (mean_sq + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = if denom == 0.0 {
            0.0
        } else {
            (g as f64 * v as f64 / denom) as f32
        };
    }
    Ok(())
}

/// Rotates consecutive pairs `(x[2j], x[2j+1])` of one head vector by
/// `position * theta^(-2j/head_dim)`.
pub fn rope_apply(x: &[f32], position: usize, theta: f64) -> Result<Vec<f32>> {
    let mut out = x.to_vec();
    rope_in_place(&mut out, position, theta)?;
    Ok(out)
}

pub(crate) fn rope_in_place(x: &mut [f32], position: usize, theta: f64) -> Result<()> {
    let head_dim = x.len();
    if !head_dim.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "rope: head dimension {head_dim} is odd"
        )));
    }
    if position == 0 {
        return Ok(());
    }
    for j in 0..head_dim / 2 {
        let freq = theta.powf(-(2.0 * j as f64) / head_dim as f64);
        let (sin, cos) = (position as f64 * freq).sin_cos();
        let a = x[2 * j] as f64;
        let b = x[2 * j + 1] as f64;
        x[2 * j] = (a * cos - b * sin) as f32;
        x[2 * j + 1] = (a * sin + b * cos) as f32;
    }
    Ok(())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}
