//! Capsule layers, squash/unsquash, routing by agreement and the
//! product-of-expert-capsules energy.
//!
//! Notation used throughout: a lower layer holds `I` capsules of dimension
//! `d_in`, the upper layer `J` capsules of dimension `d_out`. The weight grid
//! holds one `d_out × d_in` matrix per `(i, j)` pair. For a fixed set of
//! routing coefficients `c`, the upper pre-activation is
//!
//! ```text
//! z_j = Σ_i c_ij W_ij x_i
//! ```
//!
//! and capsule `j` fires with probability `‖z_j‖² / (1 + ‖z_j‖²)`, the norm
//! of `squash(z_j)`. Coefficients are normalized over the *lower* index:
//! `Σ_i c_ij = 1` for every `j`.

use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine, gaussian_mat, norm, Mat, Rng};

/// Largest `J` that [`brute_force_joint`] and [`brute_force_marginal`]
/// will enumerate.
pub const MAX_ENUMERATION: usize = 12;

/// Pre-activations below this norm count as zero in the energy.
const ENERGY_NORM_FLOOR: f64 = 1e-300;

/// Ordered capsules of uniform dimension, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleLayer {
    dim: usize,
    data: Vec<f64>,
}

impl CapsuleLayer {
    pub fn zeros(len: usize, dim: usize) -> Self {
        CapsuleLayer {
            dim,
            data: vec![0.0; len * dim],
        }
    }

    /// Wraps a flat buffer holding `data.len() / dim` capsules back to back.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not split into capsules of dimension {dim}",
                data.len()
            )));
        }
        Ok(CapsuleLayer { dim, data })
    }

    pub fn from_capsules<V: AsRef<[f64]>>(capsules: &[V]) -> Result<Self> {
        let dim = capsules
            .first()
            .map(|c| c.as_ref().len())
            .ok_or_else(|| Error::Shape("empty capsule list".into()))?;
        if capsules.iter().any(|c| c.as_ref().len() != dim) {
            return Err(Error::Shape("capsules differ in dimension".into()));
        }
        let data = capsules
            .iter()
            .flat_map(|c| c.as_ref().iter().copied())
            .collect();
        CapsuleLayer::from_flat(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capsule(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn capsule_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norms(&self) -> Vec<f64> {
        self.iter().map(norm).collect()
    }

    /// Every capsule norm strictly below one.
    pub fn is_squashed(&self) -> bool {
        self.iter().all(|c| norm(c) < 1.0)
    }

    pub fn squashed(&self) -> CapsuleLayer {
        let data = self.iter().flat_map(squash).collect();
        CapsuleLayer {
            dim: self.dim,
            data,
        }
    }

    pub fn unsquashed(&self) -> Result<CapsuleLayer> {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, c) in self.iter().enumerate() {
            data.extend(unsquash(c).map_err(|e| match e {
                Error::Domain(m) => Error::Domain(format!("capsule {i}: {m}")),
                other => other,
            })?);
        }
        Ok(CapsuleLayer {
            dim: self.dim,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `squash(z) = ‖z‖² / (1 + ‖z‖²) · z / ‖z‖`, with `squash(0) = 0`.
pub fn squash(z: &[f64]) -> Vec<f64> {
    let n = norm(z);
    if n == 0.0 {
        return vec![0.0; z.len()];
    }
    // n / (1 + n²), written to stay finite for very small and large n.
    let scale = 1.0 / (n + 1.0 / n);
    z.iter().map(|v| v * scale).collect()
}

/// Inverse of [`squash`] on the open unit ball; `unsquash(0) = 0`.
pub fn unsquash(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    if n.is_nan() || n >= 1.0 {
        return Err(Error::Domain(format!(
            "unsquash needs a norm below 1, got {n}"
        )));
    }
    // sqrt(n / (1 - n)) / n
    let scale = 1.0 / (n * (1.0 - n)).sqrt();
    Ok(x.iter().map(|v| v * scale).collect())
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// The squash magnitude written as `σ(log ‖z‖²)`; 0 for `z = 0`.
pub fn squash_magnitude_as_sigmoid(z: &[f64]) -> f64 {
    let n = norm(z);
    if n == 0.0 {
        return 0.0;
    }
    sigmoid(2.0 * n.ln())
}

/// `‖z‖² / (1 + ‖z‖²)`.
#[inline]
pub fn firing_probability(z: &[f64]) -> f64 {
    let n2 = crate::numerics::dot(z, z);
    n2 / (1.0 + n2)
}

/// Grid of `d_out × d_in` prediction matrices, one per `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionWeights {
    n_in: usize,
    n_out: usize,
    d_in: usize,
    d_out: usize,
    w: Vec<Mat>,
}

impl PredictionWeights {
    pub fn zeros(n_in: usize, n_out: usize, d_in: usize, d_out: usize) -> Self {
        PredictionWeights {
            n_in,
            n_out,
            d_in,
            d_out,
            w: (0..n_in * n_out).map(|_| Mat::zeros(d_out, d_in)).collect(),
        }
    }

    /// Entries i.i.d. `N(0, std²)`, drawn in `(i, j, row, col)` order.
    pub fn gaussian(
        n_in: usize,
        n_out: usize,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        PredictionWeights {
            n_in,
            n_out,
            d_in,
            d_out,
            w: (0..n_in * n_out)
                .map(|_| gaussian_mat(rng, d_out, d_in, std))
                .collect(),
        }
    }

    /// Builds the grid from `f(i, j)`; every matrix must be `d_out × d_in`.
    pub fn from_fn(
        n_in: usize,
        n_out: usize,
        d_in: usize,
        d_out: usize,
        mut f: impl FnMut(usize, usize) -> Mat,
    ) -> Result<Self> {
        let mut w = Vec::with_capacity(n_in * n_out);
        for i in 0..n_in {
            for j in 0..n_out {
                let m = f(i, j);
                if m.shape() != (d_out, d_in) {
                    return Err(Error::Shape(format!(
                        "W[{i}][{j}] is {:?}, expected ({d_out}, {d_in})",
                        m.shape()
                    )));
                }
                w.push(m);
            }
        }
        Ok(PredictionWeights {
            n_in,
            n_out,
            d_in,
            d_out,
            w,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &Mat {
        &self.w[i * self.n_out + j]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut Mat {
        &mut self.w[i * self.n_out + j]
    }

    /// Matrices in `(i, j)` row-major order.
    pub fn mats(&self) -> &[Mat] {
        &self.w
    }

    pub fn mats_mut(&mut self) -> &mut [Mat] {
        &mut self.w
    }

    pub fn same_shape(&self, other: &PredictionWeights) -> bool {
        (self.n_in, self.n_out, self.d_in, self.d_out)
            == (other.n_in, other.n_out, other.d_in, other.d_out)
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(Mat::is_finite)
    }

    fn check_input(&self, x: &CapsuleLayer) -> Result<()> {
        if x.len() != self.n_in || x.dim() != self.d_in {
            return Err(Error::Shape(format!(
                "layer of {} capsules of dim {} against weights expecting {} of dim {}",
                x.len(),
                x.dim(),
                self.n_in,
                self.d_in
            )));
        }
        Ok(())
    }

    fn check_output(&self, x_out: &CapsuleLayer) -> Result<()> {
        if x_out.len() != self.n_out || x_out.dim() != self.d_out {
            return Err(Error::Shape(format!(
                "upper layer of {} capsules of dim {} against weights producing {} of dim {}",
                x_out.len(),
                x_out.dim(),
                self.n_out,
                self.d_out
            )));
        }
        Ok(())
    }
}

/// Routing coefficients and the logits they were normalized from.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    n_in: usize,
    n_out: usize,
    logits: Vec<f64>,
    coeffs: Vec<f64>,
    n_iters: usize,
}

impl RoutingState {
    /// Zero logits, hence `c_ij = 1 / I`.
    pub fn uniform(n_in: usize, n_out: usize) -> Self {
        let logits = vec![0.0; n_in * n_out];
        let coeffs = normalize_over_inputs(&logits, n_in, n_out);
        RoutingState {
            n_in,
            n_out,
            logits,
            coeffs,
            n_iters: 0,
        }
    }

    /// Coefficients given directly, `coeffs[i * J + j]`. Each column must be
    /// non-negative and sum to one.
    pub fn from_coeffs(n_in: usize, n_out: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != n_in * n_out {
            return Err(Error::Shape(format!(
                "{} coefficients for a {n_in}x{n_out} grid",
                coeffs.len()
            )));
        }
        for j in 0..n_out {
            let col = (0..n_in).map(|i| coeffs[i * n_out + j]);
            if col.clone().any(|c| c.is_nan() || c < 0.0) {
                return Err(Error::Domain(format!(
                    "negative coefficient for output {j}"
                )));
            }
            let s: f64 = col.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!(
                    "coefficients for output {j} sum to {s}"
                )));
            }
        }
        let logits = coeffs.iter().map(|c| c.ln()).collect();
        Ok(RoutingState {
            n_in,
            n_out,
            logits,
            coeffs,
            n_iters: 0,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_iters(&self) -> usize {
        self.n_iters
    }

    #[inline]
    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        self.coeffs[i * self.n_out + j]
    }

    #[inline]
    pub fn logit(&self, i: usize, j: usize) -> f64 {
        self.logits[i * self.n_out + j]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    fn check_grid(&self, w: &PredictionWeights) -> Result<()> {
        if (self.n_in, self.n_out) != (w.n_in, w.n_out) {
            return Err(Error::Shape(format!(
                "routing state for a {}x{} grid used with {}x{} weights",
                self.n_in, self.n_out, w.n_in, w.n_out
            )));
        }
        Ok(())
    }
}

/// Softmax over `i` of each column `j`.
fn normalize_over_inputs(logits: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut c = vec![0.0; logits.len()];
    for j in 0..n_out {
        let max = (0..n_in)
            .map(|i| logits[i * n_out + j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..n_in {
            let e = (logits[i * n_out + j] - max).exp();
            c[i * n_out + j] = e;
            sum += e;
        }
        for i in 0..n_in {
            c[i * n_out + j] /= sum;
        }
    }
    c
}

/// Individual predictions `W_ij x_i`, laid out `[(i * J + j) * d_out ..]`.
pub fn predictions(x: &CapsuleLayer, w: &PredictionWeights) -> Result<Vec<f64>> {
    w.check_input(x)?;
    let d_out = w.d_out;
    let mut pred = vec![0.0; w.n_in * w.n_out * d_out];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..w.n_out {
            let k = i * w.n_out + j;
            w.w[k].matvec_acc(xi, 1.0, &mut pred[k * d_out..(k + 1) * d_out]);
        }
    }
    Ok(pred)
}

fn combine(pred: &[f64], coeffs: &[f64], n_in: usize, n_out: usize, d_out: usize) -> CapsuleLayer {
    let mut z = CapsuleLayer::zeros(n_out, d_out);
    for i in 0..n_in {
        for j in 0..n_out {
            let k = i * n_out + j;
            axpy(
                coeffs[k],
                &pred[k * d_out..(k + 1) * d_out],
                z.capsule_mut(j),
            );
        }
    }
    z
}

/// Routing by agreement with cosine agreement.
///
/// Logits start at zero. Each iteration normalizes them over `i`, forms
/// `z_j = Σ_i c_ij ẑ_{j|i}`, then (except after the last iteration) adds
/// `cos(ẑ_{j|i}, z_j)` to logit `(i, j)`. Returns the coefficients that
/// produced the returned pre-activations `z`; no squashing is applied.
pub fn route(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    n_iters: usize,
) -> Result<(RoutingState, CapsuleLayer)> {
    if n_iters == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let pred = predictions(x, w)?;
    let (n_in, n_out, d_out) = (w.n_in, w.n_out, w.d_out);
    let mut logits = vec![0.0; n_in * n_out];
    let mut coeffs = normalize_over_inputs(&logits, n_in, n_out);
    let mut z = combine(&pred, &coeffs, n_in, n_out, d_out);
    for _ in 1..n_iters {
        for i in 0..n_in {
            for j in 0..n_out {
                let k = i * n_out + j;
                logits[k] += cosine(&pred[k * d_out..(k + 1) * d_out], z.capsule(j));
            }
        }
        coeffs = normalize_over_inputs(&logits, n_in, n_out);
        z = combine(&pred, &coeffs, n_in, n_out, d_out);
    }
    Ok((
        RoutingState {
            n_in,
            n_out,
            logits,
            coeffs,
            n_iters,
        },
        z,
    ))
}

/// `z_j = Σ_i c_ij W_ij x_i` with the coefficients held fixed.
pub fn route_forward(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    c: &RoutingState,
) -> Result<CapsuleLayer> {
    w.check_input(x)?;
    c.check_grid(w)?;
    let mut z = CapsuleLayer::zeros(w.n_out, w.d_out);
    for (i, xi) in x.iter().enumerate() {
        for j in 0..w.n_out {
            let cij = c.coeff(i, j);
            if cij != 0.0 {
                w.get(i, j).matvec_acc(xi, cij, z.capsule_mut(j));
            }
        }
    }
    Ok(z)
}

/// Reverse routing `z̃_i = Σ_j c_ij W_ijᵀ x_j` with the forward coefficients.
pub fn route_reverse(
    x_out: &CapsuleLayer,
    w: &PredictionWeights,
    c: &RoutingState,
) -> Result<CapsuleLayer> {
    w.check_output(x_out)?;
    c.check_grid(w)?;
    let mut z = CapsuleLayer::zeros(w.n_in, w.d_in);
    for i in 0..w.n_in {
        let zi = z.capsule_mut(i);
        for (j, xj) in x_out.iter().enumerate() {
            let cij = c.coeff(i, j);
            if cij != 0.0 {
                w.get(i, j).matvec_t_acc(xj, cij, zi);
            }
        }
    }
    Ok(z)
}

/// Binary on/off configuration of the upper capsules.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FiringVector {
    bits: Vec<u8>,
}

impl FiringVector {
    pub fn all_off(n: usize) -> Self {
        FiringVector { bits: vec![0; n] }
    }

    /// Bit `j` of `mask` switches capsule `j`.
    pub fn from_mask(mask: u64, n: usize) -> Self {
        FiringVector {
            bits: (0..n).map(|j| ((mask >> j) & 1) as u8).collect(),
        }
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Domain("firing bits must be 0 or 1".into()));
        }
        Ok(FiringVector { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j] == 1
    }

    pub fn set(&mut self, j: usize, on: bool) {
        self.bits[j] = on as u8;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }
}

/// Energy of an upper configuration given pre-activations `z`:
/// `E = -Σ_j log(‖z_j‖²) · firing_j`.
pub fn energy_of_preactivations(z: &CapsuleLayer, firing: &FiringVector) -> Result<f64> {
    if firing.len() != z.len() {
        return Err(Error::Shape(format!(
            "firing vector of length {} for {} capsules",
            firing.len(),
            z.len()
        )));
    }
    let mut e = 0.0;
    for (j, zj) in z.iter().enumerate() {
        if firing.get(j) {
            let n = norm(zj);
            if n < ENERGY_NORM_FLOOR {
                return Err(Error::SingularEnergy { capsule: j });
            }
            e -= 2.0 * n.ln();
        }
    }
    Ok(e)
}

pub fn energy(
    x: &CapsuleLayer,
    firing: &FiringVector,
    w: &PredictionWeights,
    c: &RoutingState,
) -> Result<f64> {
    let z = route_forward(x, w, c)?;
    energy_of_preactivations(&z, firing)
}

/// `P(capsule j on | x) = ‖z_j‖² / (1 + ‖z_j‖²)`.
pub fn conditional_firing_prob(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    c: &RoutingState,
    j: usize,
) -> Result<f64> {
    if j >= w.n_out {
        return Err(Error::Shape(format!(
            "capsule index {j} out of range for {} outputs",
            w.n_out
        )));
    }
    let z = route_forward(x, w, c)?;
    Ok(firing_probability(z.capsule(j)))
}

/// `log Π_j (1 + ‖z_j‖²)`.
pub fn log_unnormalized_marginal(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    c: &RoutingState,
) -> Result<f64> {
    let z = route_forward(x, w, c)?;
    Ok(log_marginal_of_preactivations(&z))
}

pub fn log_marginal_of_preactivations(z: &CapsuleLayer) -> f64 {
    z.iter()
        .map(|zj| crate::numerics::dot(zj, zj).ln_1p())
        .sum()
}

/// `Π_j (1 + ‖z_j‖²)`, the marginal of `x` up to the partition function.
/// Accumulated in log space; overflows to `inf` only if the true value does.
pub fn unnormalized_marginal(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    c: &RoutingState,
) -> Result<f64> {
    Ok(log_unnormalized_marginal(x, w, c)?.exp())
}

/// Exact distribution over all `2^J` firing vectors for fixed `x`.
#[derive(Debug, Clone)]
pub struct JointTable {
    n: usize,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn n_capsules(&self) -> usize {
        self.n
    }

    /// Probability of the configuration encoded by `mask` (bit `j` = capsule `j`).
    pub fn prob(&self, mask: u64) -> f64 {
        self.probs[mask as usize]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (FiringVector, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(|(m, &p)| (FiringVector::from_mask(m as u64, self.n), p))
    }
}

fn enumerate_neg_energies(z: &CapsuleLayer) -> Result<Vec<f64>> {
    let n = z.len();
    if n > MAX_ENUMERATION {
        return Err(Error::TooManyCapsules(n));
    }
    (0..1u64 << n)
        .map(|mask| energy_of_preactivations(z, &FiringVector::from_mask(mask, n)).map(|e| -e))
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Enumerates `exp(-E(x, f))` over every firing vector and normalizes.
pub fn brute_force_joint(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    c: &RoutingState,
) -> Result<JointTable> {
    let z = route_forward(x, w, c)?;
    let neg = enumerate_neg_energies(&z)?;
    let lse = log_sum_exp(&neg);
    Ok(JointTable {
        n: z.len(),
        probs: neg.iter().map(|v| (v - lse).exp()).collect(),
    })
}

/// `Σ_f exp(-E(x, f))` by enumeration.
pub fn brute_force_marginal(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    c: &RoutingState,
) -> Result<f64> {
    let z = route_forward(x, w, c)?;
    Ok(log_sum_exp(&enumerate_neg_energies(&z)?).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_sample, Rng};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_layer(rng: &mut Rng, n: usize, d: usize, std: f64) -> CapsuleLayer {
        CapsuleLayer::from_flat(d, gaussian_sample(rng, n * d, 0.0, std)).unwrap()
    }

    /// Index-by-index summation, independent of the routing kernels.
    fn naive_forward(x: &CapsuleLayer, w: &PredictionWeights, c: &RoutingState) -> Vec<Vec<f64>> {
        let mut z = vec![vec![0.0; w.d_out()]; w.n_out()];
        for j in 0..w.n_out() {
            for i in 0..w.n_in() {
                for r in 0..w.d_out() {
                    for k in 0..w.d_in() {
                        z[j][r] += c.coeff(i, j) * w.get(i, j).get(r, k) * x.capsule(i)[k];
                    }
                }
            }
        }
        z
    }

    #[test]
    fn squash_examples() {
        let s = squash(&[1.0, 0.0]);
        assert!(close(s[0], 0.5, 1e-15) && s[1] == 0.0);
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
        let s = squash(&[3.0, 4.0]);
        assert!(close(norm(&s), 25.0 / 26.0, 1e-15));
        assert!(close(s[0] / norm(&s), 0.6, 1e-15) && close(s[1] / norm(&s), 0.8, 1e-15));
    }

    #[test]
    fn unsquash_examples() {
        let u = unsquash(&[0.5, 0.0]).unwrap();
        assert!(close(norm(&u), 1.0, 1e-15));
        let x = [0.6 * 25.0 / 26.0, 0.8 * 25.0 / 26.0];
        let u = unsquash(&x).unwrap();
        assert!(close(u[0], 3.0, 1e-12) && close(u[1], 4.0, 1e-12));
        assert_eq!(unsquash(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(unsquash(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(unsquash(&[0.8, 0.8]), Err(Error::Domain(_))));
    }

    #[test]
    fn sigmoid_form_examples() {
        assert!(close(squash_magnitude_as_sigmoid(&[0.0, 1.0]), 0.5, 1e-15));
        assert!(close(
            squash_magnitude_as_sigmoid(&[3.0, 4.0]),
            25.0 / 26.0,
            1e-15
        ));
        assert_eq!(squash_magnitude_as_sigmoid(&[0.0, 0.0]), 0.0);
        let mut prev = 0.0;
        for k in 0..60 {
            let m = squash_magnitude_as_sigmoid(&[1.5f64.powi(k)]);
            assert!(m >= prev && m <= 1.0);
            prev = m;
        }
        assert!(prev > 1.0 - 1e-15);
    }

    #[test]
    fn routing_single_input_is_trivial() {
        let mut rng = Rng::new(5);
        let x = random_layer(&mut rng, 1, 3, 1.0);
        let w = PredictionWeights::gaussian(1, 4, 3, 2, 1.0, &mut rng);
        for iters in 1..5 {
            let (c, z) = route(&x, &w, iters).unwrap();
            for j in 0..4 {
                assert_eq!(c.coeff(0, j), 1.0);
                let expect = w.get(0, j).matvec(x.capsule(0)).unwrap();
                assert_eq!(z.capsule(j), &expect[..]);
            }
        }
    }

    #[test]
    fn one_iteration_gives_uniform_mean() {
        let mut rng = Rng::new(6);
        let x = random_layer(&mut rng, 5, 3, 1.0);
        let w = PredictionWeights::gaussian(5, 2, 3, 4, 1.0, &mut rng);
        let (c, z) = route(&x, &w, 1).unwrap();
        assert!(c.coeffs().iter().all(|&v| close(v, 0.2, 1e-15)));
        let pred = predictions(&x, &w).unwrap();
        for j in 0..2 {
            for r in 0..4 {
                let mean: f64 = (0..5).map(|i| pred[(i * 2 + j) * 4 + r]).sum::<f64>() / 5.0;
                assert!(close(z.capsule(j)[r], mean, 1e-14));
            }
        }
    }

    #[test]
    fn identical_predictions_keep_symmetric_coefficients() {
        let x = CapsuleLayer::from_capsules(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let w = PredictionWeights::from_fn(2, 1, 2, 2, |_, _| Mat::identity(2)).unwrap();
        for iters in 1..8 {
            let (c, _) = route(&x, &w, iters).unwrap();
            assert_eq!(c.coeff(0, 0), 0.5);
            assert_eq!(c.coeff(1, 0), 0.5);
        }
    }

    #[test]
    fn agreement_favours_the_majority() {
        // Two inputs agree, one points the opposite way.
        let x = CapsuleLayer::from_capsules(&[[1.0, 0.1], [1.0, -0.1], [-1.0, 0.0]]).unwrap();
        let w = PredictionWeights::from_fn(3, 1, 2, 2, |_, _| Mat::identity(2)).unwrap();
        let (c, _) = route(&x, &w, 3).unwrap();
        assert!(c.coeff(0, 0) > c.coeff(2, 0));
        assert!(c.coeff(1, 0) > c.coeff(2, 0));
    }

    #[test]
    fn zero_iterations_rejected() {
        let x = CapsuleLayer::zeros(1, 1);
        let w = PredictionWeights::zeros(1, 1, 1, 1);
        assert!(matches!(route(&x, &w, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_predictions_route_without_nan() {
        let x = CapsuleLayer::zeros(3, 2);
        let w = PredictionWeights::zeros(3, 2, 2, 2);
        let (c, z) = route(&x, &w, 3).unwrap();
        assert!(c.coeffs().iter().all(|v| v.is_finite()));
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let x = CapsuleLayer::zeros(3, 2);
        let w = PredictionWeights::zeros(3, 2, 4, 2);
        assert!(matches!(route(&x, &w, 1), Err(Error::Shape(_))));
        let w = PredictionWeights::zeros(3, 2, 2, 2);
        let c = RoutingState::uniform(4, 2);
        assert!(matches!(route_forward(&x, &w, &c), Err(Error::Shape(_))));
        let bad_out = CapsuleLayer::zeros(2, 3);
        let c = RoutingState::uniform(3, 2);
        assert!(matches!(
            route_reverse(&bad_out, &w, &c),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reverse_routing_examples() {
        let w = PredictionWeights::from_fn(1, 1, 3, 3, |_, _| Mat::identity(3)).unwrap();
        let c = RoutingState::uniform(1, 1);
        let x_out = CapsuleLayer::from_capsules(&[[0.1, -0.2, 0.3]]).unwrap();
        assert_eq!(route_reverse(&x_out, &w, &c).unwrap(), x_out);

        let mut rng = Rng::new(11);
        let w = PredictionWeights::gaussian(4, 3, 2, 5, 1.0, &mut rng);
        let c = RoutingState::uniform(4, 3);
        let zero = CapsuleLayer::zeros(3, 5);
        assert!(route_reverse(&zero, &w, &c)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));

        let x = random_layer(&mut rng, 4, 2, 1.0);
        let (c, _) = route(&x, &w, 3).unwrap();
        let x_out = random_layer(&mut rng, 3, 5, 1.0);
        let got = route_reverse(&x_out, &w, &c).unwrap();
        for i in 0..4 {
            for k in 0..2 {
                let mut s = 0.0;
                for j in 0..3 {
                    for r in 0..5 {
                        s += c.coeff(i, j) * w.get(i, j).get(r, k) * x_out.capsule(j)[r];
                    }
                }
                assert!(close(got.capsule(i)[k], s, 1e-13));
            }
        }
    }

    #[test]
    fn forward_matches_naive_sum() {
        let mut rng = Rng::new(12);
        let x = random_layer(&mut rng, 5, 3, 1.0);
        let w = PredictionWeights::gaussian(5, 4, 3, 2, 1.0, &mut rng);
        let (c, z) = route(&x, &w, 3).unwrap();
        let naive = naive_forward(&x, &w, &c);
        for j in 0..4 {
            for r in 0..2 {
                assert!(close(z.capsule(j)[r], naive[j][r], 1e-13));
            }
        }
    }

    fn single_capsule_instance(z: &[f64]) -> (CapsuleLayer, PredictionWeights, RoutingState) {
        let d = z.len();
        let x = CapsuleLayer::from_capsules(&[z]).unwrap();
        let w = PredictionWeights::from_fn(1, 1, d, d, |_, _| Mat::identity(d)).unwrap();
        (x, w, RoutingState::uniform(1, 1))
    }

    #[test]
    fn energy_examples() {
        let (x, w, c) = single_capsule_instance(&[3.0, 4.0]);
        assert_eq!(energy(&x, &FiringVector::all_off(1), &w, &c).unwrap(), 0.0);
        let e = energy(&x, &FiringVector::from_mask(1, 1), &w, &c).unwrap();
        assert!(close(e, -(25f64).ln(), 1e-14));
        let (x, w, c) = single_capsule_instance(&[0.6, 0.8]);
        assert!(close(
            energy(&x, &FiringVector::from_mask(1, 1), &w, &c).unwrap(),
            0.0,
            1e-15
        ));
        let (x, w, c) = single_capsule_instance(&[0.0, 0.0]);
        assert!(matches!(
            energy(&x, &FiringVector::from_mask(1, 1), &w, &c),
            Err(Error::SingularEnergy { capsule: 0 })
        ));
        assert_eq!(energy(&x, &FiringVector::all_off(1), &w, &c).unwrap(), 0.0);
    }

    #[test]
    fn conditional_probability_examples() {
        let (x, w, c) = single_capsule_instance(&[0.0, 0.0]);
        assert_eq!(conditional_firing_prob(&x, &w, &c, 0).unwrap(), 0.0);
        let (x, w, c) = single_capsule_instance(&[0.0, 1.0]);
        assert!(close(
            conditional_firing_prob(&x, &w, &c, 0).unwrap(),
            0.5,
            1e-15
        ));
        assert!(conditional_firing_prob(&x, &w, &c, 1).is_err());
    }

    #[test]
    fn marginal_examples() {
        let (x, w, c) = single_capsule_instance(&[0.0, 0.0]);
        assert_eq!(unnormalized_marginal(&x, &w, &c).unwrap(), 1.0);
        // z_1 = (1, 0), z_2 = (1, sqrt 2): (1 + 1)(1 + 3) = 8.
        let x = CapsuleLayer::from_capsules(&[[1.0, 0.0]]).unwrap();
        let second = Mat::from_rows(&[&[1.0, 0.0], &[2f64.sqrt(), 0.0]]).unwrap();
        let w = PredictionWeights::from_fn(1, 2, 2, 2, |_, j| {
            if j == 0 {
                Mat::identity(2)
            } else {
                second.clone()
            }
        })
        .unwrap();
        let c = RoutingState::uniform(1, 2);
        assert!(close(
            unnormalized_marginal(&x, &w, &c).unwrap(),
            8.0,
            1e-13
        ));
    }

    #[test]
    fn joint_examples() {
        let (x, w, c) = single_capsule_instance(&[1.0, 0.0]);
        let t = brute_force_joint(&x, &w, &c).unwrap();
        assert!(close(t.prob(0), 0.5, 1e-15) && close(t.prob(1), 0.5, 1e-15));

        let x = CapsuleLayer::zeros(1, 1);
        let w = PredictionWeights::zeros(1, 13, 1, 1);
        let c = RoutingState::uniform(1, 13);
        assert!(matches!(
            brute_force_joint(&x, &w, &c),
            Err(Error::TooManyCapsules(13))
        ));
    }

    #[test]
    fn from_coeffs_validates_columns() {
        assert!(RoutingState::from_coeffs(2, 1, vec![0.25, 0.75]).is_ok());
        assert!(RoutingState::from_coeffs(2, 1, vec![0.5, 0.6]).is_err());
        assert!(RoutingState::from_coeffs(2, 1, vec![-0.5, 1.5]).is_err());
        assert!(RoutingState::from_coeffs(2, 2, vec![0.5, 0.5]).is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        (1usize..17, -6.0f64..3.0, any::<u64>()).prop_map(|(d, log_norm, seed)| {
            let mut rng = Rng::new(seed);
            let mut v = gaussian_sample(&mut rng, d, 0.0, 1.0);
            let n = norm(&v);
            let target = 10f64.powf(log_norm);
            v.iter_mut().for_each(|x| *x *= target / n);
            v
        })
    }

    proptest! {
        #[test]
        fn squash_bounded_and_orientation_preserving(z in vec_strategy()) {
            let s = squash(&z);
            prop_assert!(norm(&s) < 1.0);
            prop_assert!((cosine(&z, &s) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn squash_round_trips(z in vec_strategy()) {
            let back = unsquash(&squash(&z)).unwrap();
            let err = back.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-9 * norm(&z));
            prop_assert!((squash_magnitude_as_sigmoid(&z) - norm(&squash(&z))).abs() < 1e-12);
        }

        #[test]
        fn squash_norm_increasing(a in 1e-6f64..1e3, b in 1e-6f64..1e3) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi > lo * (1.0 + 1e-9));
            prop_assert!(norm(&squash(&[lo, 0.0])) < norm(&squash(&[hi, 0.0])));
        }

        #[test]
        fn routing_coefficients_normalized(seed in any::<u64>(), n_in in 1usize..7, n_out in 1usize..5, iters in 1usize..6) {
            let mut rng = Rng::new(seed);
            let x = random_layer(&mut rng, n_in, 3, 1.0).squashed();
            let w = PredictionWeights::gaussian(n_in, n_out, 3, 2, 1.0, &mut rng);
            let (c, _) = route(&x, &w, iters).unwrap();
            for j in 0..n_out {
                let s: f64 = (0..n_in).map(|i| c.coeff(i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            prop_assert!(c.coeffs().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn conditional_matches_boltzmann_ratio(seed in any::<u64>(), n_out in 1usize..6, mask in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let x = random_layer(&mut rng, 3, 2, 1.0).squashed();
            let w = PredictionWeights::gaussian(3, n_out, 2, 3, 2.0, &mut rng);
            let (c, _) = route(&x, &w, 3).unwrap();
            for j in 0..n_out {
                let mut on = FiringVector::from_mask(mask, n_out);
                on.set(j, true);
                let mut off = on.clone();
                off.set(j, false);
                let e_on = energy(&x, &on, &w, &c).unwrap();
                let e_off = energy(&x, &off, &w, &c).unwrap();
                let ratio = 1.0 / (1.0 + (e_on - e_off).exp());
                let p = conditional_firing_prob(&x, &w, &c, j).unwrap();
                let z = route_forward(&x, &w, &c).unwrap();
                prop_assert!((p - ratio).abs() < 1e-12);
                prop_assert!((p - norm(&squash(z.capsule(j)))).abs() < 1e-12);
            }
        }

        #[test]
        fn joint_factorizes(seed in any::<u64>(), n_out in 1usize..7) {
            let mut rng = Rng::new(seed);
            let x = random_layer(&mut rng, 4, 3, 1.0).squashed();
            let w = PredictionWeights::gaussian(4, n_out, 3, 2, 2.0, &mut rng);
            let (c, _) = route(&x, &w, 3).unwrap();
            let t = brute_force_joint(&x, &w, &c).unwrap();
            prop_assert!((t.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let p: Vec<f64> = (0..n_out).map(|j| conditional_firing_prob(&x, &w, &c, j).unwrap()).collect();
            for (f, prob) in t.iter() {
                let prod: f64 = (0..n_out).map(|j| if f.get(j) { p[j] } else { 1.0 - p[j] }).product();
                prop_assert!((prob - prod).abs() < 1e-9);
            }
        }

        #[test]
        fn marginal_matches_enumeration(seed in any::<u64>(), n_out in 1usize..11) {
            let mut rng = Rng::new(seed);
            let x = random_layer(&mut rng, 3, 2, 1.0).squashed();
            let w = PredictionWeights::gaussian(3, n_out, 2, 2, 2.0, &mut rng);
            let (c, _) = route(&x, &w, 3).unwrap();
            let m = unnormalized_marginal(&x, &w, &c).unwrap();
            let b = brute_force_marginal(&x, &w, &c).unwrap();
            prop_assert!((m - b).abs() <= 1e-9 * m);
        }
    }
}
