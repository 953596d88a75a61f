//! Dense linear algebra, a reproducible random source and the SGD optimizer.
//!
//! Everything is `f64`. Vectors are plain slices; [`Mat`] is a row-major
//! dense matrix.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: {}x{} matrix against vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(v, 1.0, &mut out);
        Ok(out)
    }

    /// `out += scale · self · v`. Lengths are the caller's responsibility.
    #[inline]
    pub fn matvec_acc(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += scale * dot(row, v);
        }
    }

    /// `out += scale · selfᵀ · v`.
    #[inline]
    pub fn matvec_t_acc(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&vr, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            axpy(scale * vr, row, out);
        }
    }

    /// `self += scale · a bᵀ`.
    #[inline]
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            axpy(scale * ar, b, row);
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Mat) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(scale, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn check_same_shape(&self, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine of the angle between `a` and `b`; 0 when either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Seedable random source.
///
/// The stream is ChaCha8 keyed by `seed_from_u64`, which fixes the output
/// across platforms. Uniforms take the top 53 bits of each 64-bit word;
/// normals use the Box–Muller transform, caching the second deviate of
/// each pair.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        // Multiply-shift; bias is below 2^-64 * n and irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal deviate.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for k in (1..items.len()).rev() {
            let j = self.below(k + 1);
            items.swap(k, j);
        }
    }
}

/// `n` i.i.d. draws from `N(mean, std²)`.
pub fn gaussian_sample(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Vec<f64> {
    (0..n).map(|_| mean + std * rng.normal()).collect()
}

pub fn gaussian_mat(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat {
        rows,
        cols,
        data: gaussian_sample(rng, rows * cols, 0.0, std),
    }
}

/// Hyperparameters of [`SgdState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    /// Multiplicative learning-rate factor applied by [`SgdState::end_epoch`].
    pub decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!(
                "l2 must be non-negative, got {}",
                self.l2
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "learning-rate decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

/// Momentum SGD that *ascends* the supplied direction.
///
/// ```text
/// velocity <- momentum * velocity + (grad - l2 * param)
/// param    <- param + learning_rate * velocity
/// ```
///
/// Callers minimizing a loss pass the negated loss gradient.
#[derive(Debug, Clone)]
pub struct SgdState {
    config: SgdConfig,
    learning_rate: f64,
    velocity: Vec<Mat>,
}

impl SgdState {
    /// One zero velocity per parameter shape.
    pub fn new(
        config: SgdConfig,
        shapes: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(SgdState {
            config,
            learning_rate: config.learning_rate,
            velocity: shapes.into_iter().map(|(r, c)| Mat::zeros(r, c)).collect(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn velocity(&self, slot: usize) -> &Mat {
        &self.velocity[slot]
    }

    pub fn step(&mut self, slot: usize, param: &mut Mat, grad: &Mat) -> Result<()> {
        let v = self
            .velocity
            .get_mut(slot)
            .ok_or_else(|| Error::Shape(format!("no optimizer slot {slot}")))?;
        if param.shape() != grad.shape() || param.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "sgd slot {slot}: param {:?}, grad {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                v.shape()
            )));
        }
        let SgdConfig { momentum, l2, .. } = self.config;
        let lr = self.learning_rate;
        for ((p, g), vel) in param.data.iter_mut().zip(&grad.data).zip(&mut v.data) {
            *vel = momentum * *vel + (g - l2 * *p);
            *p += lr * *vel;
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        self.learning_rate *= self.config.decay;
    }
}
