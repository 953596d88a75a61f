//! Contrastive-divergence training of the capsule encoder and decoder,
//! gradient checking, and generation from the learned capsule space.
//!
//! One CD-1 step for a lower layer `x` is
//!
//! ```text
//! c, z    = route(x, W)                 positive phase
//! x_out   = squash(z)
//! x̃       = squash(Σ_j c_ij W_ijᵀ x_out_j)  reconstruct lower layer
//! z̃_out   = Σ_i c_ij W_ij x̃_i           reconstruct upper layer
//! ΔW_ij   = 2 c_ij [ z_j x_iᵀ / (1 + ‖z_j‖²) − z̃_out_j x̃_iᵀ / (1 + ‖z̃_out_j‖²) ]
//! ```
//!
//! with the same coefficients `c` in all three routing passes. The update
//! ascends the log-likelihood; no gradient flows through routing.

use rayon::prelude::*;

use crate::capsule::{
    route, route_forward, route_reverse, squash, CapsuleLayer, PredictionWeights, RoutingState,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, gaussian_sample, norm, Mat, Rng, SgdConfig, SgdState};

/// Upper capsules above this squashed norm count as visited when collecting
/// orientation statistics.
pub const ACTIVITY_THRESHOLD: f64 = 0.5;

/// Hyperparameters shared by every training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    /// Per-epoch multiplicative learning-rate factor, in `(0, 1]`.
    pub lr_decay: f64,
    pub routing_iters: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            l2: 1e-4,
            lr_decay: 0.98,
            routing_iters: 3,
            seed: 0,
            init_std: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            l2: self.l2,
            decay: self.lr_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.routing_iters == 0 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "init_std must be positive, got {}",
                self.init_std
            )));
        }
        Ok(())
    }
}

/// Grid dimensions: `n_in` capsules of `d_in` map to `n_out` of `d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub n_in: usize,
    pub n_out: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl GridShape {
    /// 576 primary capsules of dimension 8 to 20 capsules of dimension 16.
    pub const DEFAULT: GridShape = GridShape {
        n_in: 576,
        n_out: 20,
        d_in: 8,
        d_out: 16,
    };

    pub fn of(w: &PredictionWeights) -> Self {
        GridShape {
            n_in: w.n_in(),
            n_out: w.n_out(),
            d_in: w.d_in(),
            d_out: w.d_out(),
        }
    }

    /// The same two layers with sender and receiver swapped.
    pub fn mirrored(&self) -> Self {
        GridShape {
            n_in: self.n_out,
            n_out: self.n_in,
            d_in: self.d_out,
            d_out: self.d_in,
        }
    }

    fn gaussian(&self, std: f64, rng: &mut Rng) -> PredictionWeights {
        PredictionWeights::gaussian(self.n_in, self.n_out, self.d_in, self.d_out, std, rng)
    }
}

/// Lower-to-upper capsule map `W_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub w: PredictionWeights,
}

impl EncoderModel {
    /// The initialization [`train_encoder`] starts from.
    pub fn init(shape: GridShape, cfg: &TrainConfig) -> Self {
        EncoderModel {
            w: shape.gaussian(cfg.init_std, &mut Rng::new(cfg.seed)),
        }
    }

    pub fn shape(&self) -> GridShape {
        GridShape::of(&self.w)
    }
}

/// Upper-to-lower capsule map `U_ji`, stored as a grid whose senders are
/// the upper capsules. Routing over it normalizes over `j` for every
/// receiving lower capsule `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub u: PredictionWeights,
}

impl DecoderModel {
    /// The initialization [`train_decoder`] starts from, for a given encoder shape.
    pub fn init(encoder: GridShape, cfg: &TrainConfig) -> Self {
        DecoderModel {
            u: encoder
                .mirrored()
                .gaussian(cfg.init_std, &mut Rng::new(cfg.seed)),
        }
    }

    pub fn shape(&self) -> GridShape {
        GridShape::of(&self.u)
    }
}

/// Per upper capsule: the mean orientation of its visited activations.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationStats {
    dim: usize,
    entries: Vec<OrientationEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationEntry {
    /// Unit vector, or all zeros when nothing was recorded.
    pub direction: Vec<f64>,
    /// Sum of the recorded unit vectors.
    pub resultant: Vec<f64>,
    pub count: u64,
}

impl OrientationStats {
    pub fn new(n_capsules: usize, dim: usize) -> Self {
        OrientationStats {
            dim,
            entries: vec![
                OrientationEntry {
                    direction: vec![0.0; dim],
                    resultant: vec![0.0; dim],
                    count: 0,
                };
                n_capsules
            ],
        }
    }

    pub fn from_entries(dim: usize, entries: Vec<OrientationEntry>) -> Result<Self> {
        for (j, e) in entries.iter().enumerate() {
            if e.direction.len() != dim || e.resultant.len() != dim {
                return Err(Error::Shape(format!(
                    "orientation entry {j} does not have dimension {dim}"
                )));
            }
        }
        Ok(OrientationStats { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[OrientationEntry] {
        &self.entries
    }

    pub fn count(&self, j: usize) -> u64 {
        self.entries[j].count
    }

    /// Mean direction of capsule `j`, if anything was recorded for it.
    pub fn direction(&self, j: usize) -> Option<&[f64]> {
        let e = self.entries.get(j)?;
        (e.count > 0 && norm(&e.direction) > 0.0).then_some(&e.direction[..])
    }

    /// Adds the orientation of `v` (weighted by `weight`) to capsule `j`.
    pub fn record(&mut self, j: usize, v: &[f64], weight: f64) {
        let n = norm(v);
        if n == 0.0 || weight <= 0.0 {
            return;
        }
        let e = &mut self.entries[j];
        for (r, x) in e.resultant.iter_mut().zip(v) {
            *r += weight * x / n;
        }
        e.count += 1;
        let rn = norm(&e.resultant);
        if rn > 0.0 {
            e.direction = e.resultant.iter().map(|r| r / rn).collect();
        }
    }
}

/// Collects the orientation of every upper capsule over `data`.
///
/// A capsule's direction averages the activations whose squashed norm
/// exceeds [`ACTIVITY_THRESHOLD`]. Capsules that never cross it fall back
/// to the activation-weighted mean over all samples.
pub fn collect_orientation_stats(
    encoder: &EncoderModel,
    data: &[CapsuleLayer],
    routing_iters: usize,
) -> Result<OrientationStats> {
    let shape = encoder.shape();
    let outs: Vec<CapsuleLayer> = data
        .par_iter()
        .map(|x| positive_phase(x, &encoder.w, routing_iters).map(|p| p.x_out))
        .collect::<Result<_>>()?;
    let mut visited = OrientationStats::new(shape.n_out, shape.d_out);
    let mut weighted = OrientationStats::new(shape.n_out, shape.d_out);
    for x_out in &outs {
        for (j, v) in x_out.iter().enumerate() {
            let a = norm(v);
            if a > ACTIVITY_THRESHOLD {
                visited.record(j, v, 1.0);
            }
            weighted.record(j, v, a);
        }
    }
    for j in 0..shape.n_out {
        if visited.entries[j].count == 0 {
            visited.entries[j] = weighted.entries[j].clone();
        }
    }
    Ok(visited)
}

/// Positive-phase quantities for one sample.
#[derive(Debug, Clone)]
pub struct PositivePhase {
    pub c: RoutingState,
    pub z: CapsuleLayer,
    pub x_out: CapsuleLayer,
}

/// Negative-phase reconstructions, produced with the positive-phase coefficients.
#[derive(Debug, Clone)]
pub struct NegativePhase {
    pub z_recon: CapsuleLayer,
    pub x_recon: CapsuleLayer,
    pub z_out_recon: CapsuleLayer,
    pub x_out_recon: CapsuleLayer,
}

pub fn positive_phase(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    routing_iters: usize,
) -> Result<PositivePhase> {
    let (c, z) = route(x, w, routing_iters)?;
    let x_out = z.squashed();
    Ok(PositivePhase { c, z, x_out })
}

pub fn negative_phase(
    c: &RoutingState,
    x_out: &CapsuleLayer,
    w: &PredictionWeights,
) -> Result<NegativePhase> {
    let z_recon = route_reverse(x_out, w, c)?;
    let x_recon = z_recon.squashed();
    let z_out_recon = route_forward(&x_recon, w, c)?;
    let x_out_recon = z_out_recon.squashed();
    Ok(NegativePhase {
        z_recon,
        x_recon,
        z_out_recon,
        x_out_recon,
    })
}

/// Per-pair weight gradient, shaped like the weight grid it updates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradUpdate(pub PredictionWeights);

impl GradUpdate {
    pub fn get(&self, i: usize, j: usize) -> &Mat {
        self.0.get(i, j)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.mats().iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Borrowed inputs of one CD gradient term.
///
/// Senders are the layer the grid maps *from*; receivers the layer it maps
/// to. For the encoder that is `(x, z, x̃, z̃_out)`; for the decoder the
/// upper capsules send and the lower pre-activations receive.
#[derive(Debug, Clone, Copy)]
pub struct CdSample<'a> {
    pub senders: &'a CapsuleLayer,
    pub receivers: &'a CapsuleLayer,
    pub senders_recon: &'a CapsuleLayer,
    pub receivers_recon: &'a CapsuleLayer,
    pub c: &'a RoutingState,
}

fn check_cd_shapes(s: &CdSample<'_>) -> Result<()> {
    let (n_in, n_out) = (s.c.n_in(), s.c.n_out());
    let ok = s.senders.len() == n_in
        && s.senders_recon.len() == n_in
        && s.receivers.len() == n_out
        && s.receivers_recon.len() == n_out
        && s.senders.dim() == s.senders_recon.dim()
        && s.receivers.dim() == s.receivers_recon.dim();
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "CD inputs inconsistent with a {n_in}x{n_out} routing grid"
        )))
    }
}

/// Mean of the CD gradients of `samples`, each pair summed in sample order.
pub fn batch_cd_gradient(samples: &[CdSample<'_>]) -> Result<GradUpdate> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    for s in samples {
        check_cd_shapes(s)?;
    }
    let (n_in, n_out) = (first.c.n_in(), first.c.n_out());
    let (d_in, d_out) = (first.senders.dim(), first.receivers.dim());
    // 2 / (1 + ‖z‖²) for data and model receivers.
    let scales: Vec<(Vec<f64>, Vec<f64>)> = samples
        .iter()
        .map(|s| {
            let f = |l: &CapsuleLayer| l.iter().map(|z| 2.0 / (1.0 + dot(z, z))).collect();
            (f(s.receivers), f(s.receivers_recon))
        })
        .collect();
    let inv_b = 1.0 / samples.len() as f64;
    let mut grid = PredictionWeights::zeros(n_in, n_out, d_in, d_out);
    grid.mats_mut()
        .par_iter_mut()
        .enumerate()
        .for_each(|(k, g)| {
            let (i, j) = (k / n_out, k % n_out);
            for (s, (data, model)) in samples.iter().zip(&scales) {
                let cij = s.c.coeff(i, j);
                if cij == 0.0 {
                    continue;
                }
                g.add_outer(
                    cij * data[j] * inv_b,
                    s.receivers.capsule(j),
                    s.senders.capsule(i),
                );
                g.add_outer(
                    -cij * model[j] * inv_b,
                    s.receivers_recon.capsule(j),
                    s.senders_recon.capsule(i),
                );
            }
        });
    Ok(GradUpdate(grid))
}

/// CD-1 gradient for one sample (encoder orientation).
pub fn cd_gradient(
    x: &CapsuleLayer,
    z: &CapsuleLayer,
    x_recon: &CapsuleLayer,
    z_out_recon: &CapsuleLayer,
    c: &RoutingState,
) -> Result<GradUpdate> {
    batch_cd_gradient(&[CdSample {
        senders: x,
        receivers: z,
        senders_recon: x_recon,
        receivers_recon: z_out_recon,
        c,
    }])
}

/// The data term alone: `2 c_ij z_j x_iᵀ / (1 + ‖z_j‖²)`, the exact
/// gradient of `Σ_j log(1 + ‖z_j‖²)` with `c` frozen.
pub fn data_term_gradient(
    x: &CapsuleLayer,
    w: &PredictionWeights,
    c: &RoutingState,
) -> Result<GradUpdate> {
    let z = route_forward(x, w, c)?;
    let zeros_in = CapsuleLayer::zeros(x.len(), x.dim());
    let zeros_out = CapsuleLayer::zeros(z.len(), z.dim());
    cd_gradient(x, &z, &zeros_in, &zeros_out, c)
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Encoder: mean over samples of the largest upper activation.
    /// Decoder: mean reconstruction angle error.
    pub metric: f64,
    pub max_abs_grad: f64,
}

fn sgd_for(w: &PredictionWeights, cfg: &TrainConfig) -> Result<SgdState> {
    SgdState::new(cfg.sgd(), w.mats().iter().map(Mat::shape))
}

fn apply_update(w: &mut PredictionWeights, grad: &GradUpdate, sgd: &mut SgdState) -> Result<()> {
    for (slot, (p, g)) in w.mats_mut().iter_mut().zip(grad.0.mats()).enumerate() {
        sgd.step(slot, p, g)?;
    }
    Ok(())
}

fn check_dataset(data: &[CapsuleLayer]) -> Result<(usize, usize)> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let (n, d) = (first.len(), first.dim());
    if let Some(k) = data.iter().position(|x| x.len() != n || x.dim() != d) {
        return Err(Error::Shape(format!(
            "sample {k} differs from sample 0 ({n} capsules of dim {d})"
        )));
    }
    Ok((n, d))
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Mean over samples of `max_j ‖squash(z_j)‖`.
pub fn mean_best_activation(
    w: &PredictionWeights,
    data: &[CapsuleLayer],
    routing_iters: usize,
) -> Result<f64> {
    let best: Vec<f64> = data
        .par_iter()
        .map(|x| {
            let p = positive_phase(x, w, routing_iters)?;
            Ok(p.x_out.norms().into_iter().fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    Ok(best.iter().sum::<f64>() / best.len().max(1) as f64)
}

/// Trains the encoder grid `W` by CD-1.
///
/// `n_out` and `d_out` size the upper layer; the lower layer is taken from
/// the data. Samples are shuffled every epoch with the config's seed.
/// Returns the model, orientation statistics of the trained encoder on the
/// training data, and per-epoch summaries.
pub fn train_encoder(
    data: &[CapsuleLayer],
    n_out: usize,
    d_out: usize,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, OrientationStats, Vec<EpochStats>)> {
    cfg.validate()?;
    let (n_in, d_in) = check_dataset(data)?;
    let shape = GridShape {
        n_in,
        n_out,
        d_in,
        d_out,
    };
    let mut rng = Rng::new(cfg.seed);
    let mut model = EncoderModel {
        w: shape.gaussian(cfg.init_std, &mut rng),
    };
    let mut sgd = sgd_for(&model.w, cfg)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut best_sum = 0.0;
        let mut max_grad: f64 = 0.0;
        for (batch_idx, batch) in batches(&order, cfg.batch_size).enumerate() {
            let phases: Vec<(PositivePhase, NegativePhase)> = batch
                .par_iter()
                .map(|&k| {
                    let pos = positive_phase(&data[k], &model.w, cfg.routing_iters)?;
                    let neg = negative_phase(&pos.c, &pos.x_out, &model.w)?;
                    Ok((pos, neg))
                })
                .collect::<Result<_>>()?;
            let samples: Vec<CdSample<'_>> = batch
                .iter()
                .zip(&phases)
                .map(|(&k, (pos, neg))| CdSample {
                    senders: &data[k],
                    receivers: &pos.z,
                    senders_recon: &neg.x_recon,
                    receivers_recon: &neg.z_out_recon,
                    c: &pos.c,
                })
                .collect();
            let grad = batch_cd_gradient(&samples)?;
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    what: "encoder gradient".into(),
                });
            }
            max_grad = max_grad.max(grad.max_abs());
            best_sum += phases
                .iter()
                .map(|(p, _)| p.x_out.norms().into_iter().fold(0.0, f64::max))
                .sum::<f64>();
            apply_update(&mut model.w, &grad, &mut sgd)?;
            if !model.w.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    what: "encoder weights".into(),
                });
            }
        }
        history.push(EpochStats {
            epoch,
            learning_rate: sgd.learning_rate(),
            metric: best_sum / data.len() as f64,
            max_abs_grad: max_grad,
        });
        sgd.end_epoch();
    }

    let stats = collect_orientation_stats(&model, data, cfg.routing_iters)?;
    Ok((model, stats, history))
}

/// Data and model quantities for one decoder step.
#[derive(Debug, Clone)]
pub struct DecoderPhase {
    /// Routing coefficients `e` over the decoder grid.
    pub e: RoutingState,
    /// `z̃_i = Σ_j e_ji U_ji x_j`.
    pub z_recon: CapsuleLayer,
    /// `squash(Σ_i e_ji U_jiᵀ squash(z̃_i))`.
    pub x_out_recon: CapsuleLayer,
}

pub fn decoder_phase(
    x_out: &CapsuleLayer,
    u: &PredictionWeights,
    routing_iters: usize,
) -> Result<DecoderPhase> {
    let (e, z_recon) = route(x_out, u, routing_iters)?;
    let x_recon = z_recon.squashed();
    let x_out_recon = route_reverse(&x_recon, u, &e)?.squashed();
    Ok(DecoderPhase {
        e,
        z_recon,
        x_out_recon,
    })
}

/// Data pairs for decoder training: the lower pre-activations
/// `z_i = unsquash(x_i)` and the encoder's upper capsules.
#[derive(Debug, Clone)]
pub struct DecoderTarget {
    pub z: CapsuleLayer,
    pub x_out: CapsuleLayer,
}

pub fn decoder_targets(
    data: &[CapsuleLayer],
    encoder: &EncoderModel,
    routing_iters: usize,
) -> Result<Vec<DecoderTarget>> {
    data.par_iter()
        .map(|x| {
            let pos = positive_phase(x, &encoder.w, routing_iters)?;
            Ok(DecoderTarget {
                z: x.unsquashed()?,
                x_out: pos.x_out,
            })
        })
        .collect()
}

/// Mean over samples and lower capsules of `1 - cos(z_i, z̃_i)`; capsules
/// with a zero target or reconstruction are skipped.
pub fn mean_reconstruction_angle_error(
    decoder: &DecoderModel,
    targets: &[DecoderTarget],
    routing_iters: usize,
) -> Result<f64> {
    let per: Vec<(f64, usize)> = targets
        .par_iter()
        .map(|t| {
            let (_, z_recon) = route(&t.x_out, &decoder.u, routing_iters)?;
            Ok(angle_error_sum(&t.z, &z_recon))
        })
        .collect::<Result<_>>()?;
    let (s, n) = per.iter().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

fn angle_error_sum(z: &CapsuleLayer, z_recon: &CapsuleLayer) -> (f64, usize) {
    let mut s = 0.0;
    let mut n = 0;
    for (a, b) in z.iter().zip(z_recon.iter()) {
        if norm(a) > 0.0 && norm(b) > 0.0 {
            s += 1.0 - cosine(a, b);
            n += 1;
        }
    }
    (s, n)
}

/// Trains the decoder grid `U` with the encoder frozen.
///
/// The data pair per sample is the lower pre-activation `z_i` and the
/// encoder output `x_j`; the model pair is `z̃_i = Σ_j e_ji U_ji x_j` and
/// `x̃_j = squash(Σ_i e_ji U_jiᵀ squash(z̃_i))`, all with one set of
/// coefficients `e` routed over `U`:
///
/// ```text
/// ΔU_ji = 2 e_ji [ z_i x_jᵀ / (1 + ‖z_i‖²) − z̃_i x̃_jᵀ / (1 + ‖z̃_i‖²) ]
/// ```
pub fn train_decoder(
    data: &[CapsuleLayer],
    encoder: &EncoderModel,
    cfg: &TrainConfig,
) -> Result<(DecoderModel, Vec<EpochStats>)> {
    cfg.validate()?;
    let (n_in, d_in) = check_dataset(data)?;
    let enc_shape = encoder.shape();
    if (n_in, d_in) != (enc_shape.n_in, enc_shape.d_in) {
        return Err(Error::Shape(format!(
            "data has {n_in} capsules of dim {d_in}, encoder expects {} of dim {}",
            enc_shape.n_in, enc_shape.d_in
        )));
    }
    let targets = decoder_targets(data, encoder, cfg.routing_iters)?;
    let mut rng = Rng::new(cfg.seed);
    let mut model = DecoderModel {
        u: enc_shape.mirrored().gaussian(cfg.init_std, &mut rng),
    };
    let mut sgd = sgd_for(&model.u, cfg)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut err_sum = 0.0;
        let mut err_n = 0usize;
        let mut max_grad: f64 = 0.0;
        for (batch_idx, batch) in batches(&order, cfg.batch_size).enumerate() {
            let phases: Vec<DecoderPhase> = batch
                .par_iter()
                .map(|&k| decoder_phase(&targets[k].x_out, &model.u, cfg.routing_iters))
                .collect::<Result<_>>()?;
            let samples: Vec<CdSample<'_>> = batch
                .iter()
                .zip(&phases)
                .map(|(&k, ph)| CdSample {
                    senders: &targets[k].x_out,
                    receivers: &targets[k].z,
                    senders_recon: &ph.x_out_recon,
                    receivers_recon: &ph.z_recon,
                    c: &ph.e,
                })
                .collect();
            let grad = batch_cd_gradient(&samples)?;
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    what: "decoder gradient".into(),
                });
            }
            max_grad = max_grad.max(grad.max_abs());
            for (&k, ph) in batch.iter().zip(&phases) {
                let (s, n) = angle_error_sum(&targets[k].z, &ph.z_recon);
                err_sum += s;
                err_n += n;
            }
            apply_update(&mut model.u, &grad, &mut sgd)?;
            if !model.u.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    what: "decoder weights".into(),
                });
            }
        }
        history.push(EpochStats {
            epoch,
            learning_rate: sgd.learning_rate(),
            metric: if err_n == 0 {
                0.0
            } else {
                err_sum / err_n as f64
            },
            max_abs_grad: max_grad,
        });
        sgd.end_epoch();
    }
    Ok((model, history))
}

/// One generated lower layer and the noise it came from.
#[derive(Debug, Clone)]
pub struct Generated {
    /// Upper capsule the noise was placed in.
    pub capsule: usize,
    /// The Gaussian draw after any hemisphere flip.
    pub noise: Vec<f64>,
    /// Squashed lower capsules, ready for [`crate::conv::capsules_to_volume`].
    pub capsules: CapsuleLayer,
}

/// Decodes an upper layer that is zero except for `noise` in capsule `j`.
pub fn decode_noise(
    decoder: &DecoderModel,
    capsule: usize,
    noise: &[f64],
    routing_iters: usize,
) -> Result<CapsuleLayer> {
    let shape = decoder.shape();
    if capsule >= shape.n_in {
        return Err(Error::Shape(format!(
            "capsule {capsule} out of range for {} upper capsules",
            shape.n_in
        )));
    }
    if noise.len() != shape.d_in {
        return Err(Error::Shape(format!(
            "noise of length {} for capsules of dim {}",
            noise.len(),
            shape.d_in
        )));
    }
    let mut upper = CapsuleLayer::zeros(shape.n_in, shape.d_in);
    upper.capsule_mut(capsule).copy_from_slice(&squash(noise));
    let (_, z) = route(&upper, &decoder.u, routing_iters)?;
    Ok(z.squashed())
}

/// Samples `N(0, I)` in capsule `capsule`, optionally flipped into the
/// hemisphere around that capsule's mean training orientation, and decodes
/// it to the lower layer.
pub fn generate(
    decoder: &DecoderModel,
    stats: Option<&OrientationStats>,
    rng: &mut Rng,
    capsule: usize,
    restricted: bool,
    routing_iters: usize,
) -> Result<Generated> {
    let dim = decoder.shape().d_in;
    let mut noise = gaussian_sample(rng, dim, 0.0, 1.0);
    if restricted {
        let mean = stats
            .and_then(|s| s.direction(capsule))
            .ok_or(Error::MissingStats(capsule))?;
        if mean.len() != dim {
            return Err(Error::Shape(format!(
                "orientation of dim {} for capsules of dim {dim}",
                mean.len()
            )));
        }
        if dot(&noise, mean) < 0.0 {
            noise.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let capsules = decode_noise(decoder, capsule, &noise, routing_iters)?;
    Ok(Generated {
        capsule,
        noise,
        capsules,
    })
}

/// Outcome of [`gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(i, j, row, col)` of the worst entry.
    pub worst: (usize, usize, usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries: usize,
}

/// Entries smaller than this in both routes are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Largest `I` or `J` accepted by [`gradcheck`].
pub const GRADCHECK_MAX_CAPSULES: usize = 8;

/// Compares the analytic data-term gradient with central differences of
/// `log Π_j (1 + ‖z_j‖²)` in every weight entry, routing coefficients
/// frozen at their routed values.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn gradcheck(
    w: &PredictionWeights,
    x: &CapsuleLayer,
    eps: f64,
    routing_iters: usize,
) -> Result<GradCheckReport> {
    if w.n_in() > GRADCHECK_MAX_CAPSULES || w.n_out() > GRADCHECK_MAX_CAPSULES {
        return Err(Error::Config(format!(
            "gradcheck is limited to {GRADCHECK_MAX_CAPSULES}x{GRADCHECK_MAX_CAPSULES} grids"
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let (c, z) = route(x, w, routing_iters)?;
    if let Some(j) = z.iter().position(|zj| norm(zj) == 0.0) {
        return Err(Error::SingularEnergy { capsule: j });
    }
    let analytic = data_term_gradient(x, w, &c)?;
    // Perturbing W_ij only moves z_j, so differencing that one term of the
    // objective is exact and carries less rounding noise.
    let objective = |w: &PredictionWeights, j: usize| -> Result<f64> {
        let zj = route_forward(x, w, &c)?;
        Ok(dot(zj.capsule(j), zj.capsule(j)).ln_1p())
    };

    let mut probe = w.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0, 0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries: 0,
    };
    for i in 0..w.n_in() {
        for j in 0..w.n_out() {
            for r in 0..w.d_out() {
                for k in 0..w.d_in() {
                    let orig = w.get(i, j).get(r, k);
                    probe.get_mut(i, j).set(r, k, orig + eps);
                    let up = objective(&probe, j)?;
                    probe.get_mut(i, j).set(r, k, orig - eps);
                    let down = objective(&probe, j)?;
                    probe.get_mut(i, j).set(r, k, orig);
                    let numeric = (up - down) / (2.0 * eps);
                    let a = analytic.get(i, j).get(r, k);
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
                    report.entries += 1;
                    if rel > report.max_rel_error || report.entries == 1 {
                        report.max_rel_error = rel;
                        report.worst = (i, j, r, k);
                        report.worst_analytic = a;
                        report.worst_numeric = numeric;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Random gradcheck instance: squashed lower layer, `N(0, 0.5²)` weights.
pub fn gradcheck_instance(shape: GridShape, rng: &mut Rng) -> (PredictionWeights, CapsuleLayer) {
    let w = shape.gaussian(0.5, rng);
    let x = CapsuleLayer::from_flat(
        shape.d_in,
        gaussian_sample(rng, shape.n_in * shape.d_in, 0.0, 1.0),
    )
    .expect("dimension is positive")
    .squashed();
    (w, x)
}
