//! Dense linear algebra, activations and the gradient-checking harness the
//! model modules are built on.
//!
//! Everything is `f64`. Parameters of every model are stored as a list of
//! named [`Matrix`] blocks (see [`ParamBlocks`]); gradients use the same type
//! as the parameters they belong to, so optimizers and the finite-difference
//! checker can treat every model uniformly as a flat vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// A `n × 1` zero matrix, used for bias vectors.
    pub fn column(n: usize) -> Self {
        Self::zeros(n, 1)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("matrix data length", rows * cols, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Scaled-uniform initialization in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(rows, cols, a, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, a: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
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

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(v, &mut out);
        out
    }

    /// `out += self · v`
    pub fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, v);
        }
    }

    /// `selfᵀ · v`
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.t_matvec_acc(v, &mut out);
        out
    }

    /// `out += selfᵀ · v`
    pub fn t_matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&s, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            if s != 0.0 {
                axpy(s, row, out);
            }
        }
    }

    /// `self += u · vᵀ`
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (&s, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if s != 0.0 {
                axpy(s, v, row);
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out.row_mut(i));
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(s, &other.data, &mut self.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        dot(&self.data, &self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activation; rejects non-finite input.
pub fn activate(v: &[f64], kind: Activation) -> Result<Vec<f64>> {
    ensure_finite(v)?;
    Ok(v.iter().map(|&x| kind.apply(x)).collect())
}

pub fn ensure_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    ensure_finite(v)?;
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("log_softmax input"));
    }
    ensure_finite(v)?;
    let lse = log_sum_exp(v);
    Ok(v.iter().map(|x| x - lse).collect())
}

pub const SIMPLEX_TOL: f64 = 1e-6;

/// Checks that `z` is a probability vector within `tol`.
pub fn check_simplex(z: &[f64], tol: f64) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Empty("topic distribution"));
    }
    let sum: f64 = z.iter().sum();
    let min = z.iter().copied().fold(f64::INFINITY, f64::min);
    if !sum.is_finite() || (sum - 1.0).abs() > tol || min < -tol {
        return Err(Error::NotOnSimplex { sum, min });
    }
    Ok(())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A model whose parameters are an ordered list of named matrices.
///
/// Gradients are represented by a value of the same type, which lets
/// optimizers, clipping and gradient checking work on any model.
pub trait ParamBlocks: Clone {
    fn named_blocks(&self) -> Vec<(String, &Matrix)>;
    fn blocks_mut(&mut self) -> Vec<&mut Matrix>;

    fn blocks(&self) -> Vec<&Matrix> {
        self.named_blocks().into_iter().map(|(_, m)| m).collect()
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|m| m.data().len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.blocks_mut().into_iter().for_each(|m| m.fill(0.0));
        z
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in self.blocks() {
            out.extend_from_slice(m.data());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.num_params(), flat.len())?;
        let mut offset = 0;
        for m in self.blocks_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Ordered record of per-step forward values, replayed in reverse by a
/// backward pass. Backward passes borrow the tape immutably, so replaying
/// gradients twice yields identical values.
#[derive(Debug, Clone, Default)]
pub struct GradTape<S> {
    steps: Vec<S>,
}

impl<S> GradTape<S> {
    pub fn new() -> Self {
        Self { steps: Vec::new() }
    }

    pub fn record(&mut self, step: S) {
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[S] {
        &self.steps
    }
}

/// Compares analytic gradients with central differences.
///
/// Returns the maximum over all entries of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e−8)`.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_dim("analytic gradient", params.len(), analytic.len())?;
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        let mut eval = |offset: f64| -> Result<f64> {
            p[i] = orig + offset;
            let v = loss_fn(&p)?;
            p[i] = orig;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::GradCheck { index: i })
            }
        };
        // fourth-order central stencil
        let near = eval(eps)? - eval(-eps)?;
        let far = eval(2.0 * eps)? - eval(-2.0 * eps)?;
        let numeric = (8.0 * near - far) / (12.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Convenience wrapper: gradient-check a [`ParamBlocks`] model given a loss
/// closure over the model and its analytic gradient.
pub fn grad_check_params<P, F>(params: &P, analytic: &P, eps: f64, mut loss_fn: F) -> Result<f64>
where
    P: ParamBlocks,
    F: FnMut(&P) -> Result<f64>,
{
    let mut scratch = params.clone();
    grad_check(
        |flat| {
            scratch.assign_flat(flat)?;
            loss_fn(&scratch)
        },
        &params.flatten(),
        &analytic.flatten(),
        eps,
    )
}
