//! Convolutional autoencoder front end.
//!
//! Encoder: `conv(k, stride s1) → leaky ReLU → dropout → conv(k, stride s2)
//! → leaky ReLU`, valid padding. The decoder reuses the same filter banks
//! transposed: `convᵀ(filters2) → leaky ReLU → convᵀ(filters1) → sigmoid`,
//! with its own biases. With 9×9 kernels and strides (1, 2) a 28×28 image
//! becomes a 6×6×128 volume, i.e. 576 capsules of dimension 8.
//!
//! Tensors are stored height × width × channels, channels fastest. A filter
//! bank is a matrix with one row per `(ky, kx, c_in)` and one column per
//! output channel.

use rayon::prelude::*;

use crate::capsule::CapsuleLayer;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, gaussian_mat, Mat, Rng, SgdState};
use crate::train::{EpochStats, TrainConfig};

/// Capsule dimension of the primary capsule layer.
pub const CAPSULE_DIM: usize = 8;

/// Image with pixels in `[0, 1]`, stored height × width × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    fn to_volume(&self) -> FeatureVolume {
        FeatureVolume {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.pixels.clone(),
        }
    }
}

/// Activations of one layer, height × width × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureVolume {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} volume needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureVolume {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn at(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    fn channel_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            axpy(1.0, px, &mut s);
        }
        s
    }
}

/// Output size of a valid convolution: `floor((n - k) / s) + 1`.
pub fn conv_output_size(n: usize, kernel: usize, stride: usize) -> Result<usize> {
    if n < kernel || stride == 0 {
        return Err(Error::Shape(format!(
            "extent {n} is too small for kernel {kernel} (stride {stride})"
        )));
    }
    Ok((n - kernel) / stride + 1)
}

/// Valid cross-correlation plus per-channel bias.
fn conv_forward(
    input: &FeatureVolume,
    filters: &Mat,
    bias: Option<&[f64]>,
    kernel: usize,
    stride: usize,
) -> FeatureVolume {
    let oh = (input.height - kernel) / stride + 1;
    let ow = (input.width - kernel) / stride + 1;
    let co = filters.cols();
    let ci = input.channels;
    let mut out = FeatureVolume::zeros(oh, ow, co);
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = out.at_mut(oy, ox);
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let px = input.at(oy * stride + ky, ox * stride + kx);
                    let row0 = (ky * kernel + kx) * ci;
                    for (c, &a) in px.iter().enumerate() {
                        if a != 0.0 {
                            axpy(a, filters.row(row0 + c), acc);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`] (without bias), into an `out_h × out_w` grid,
/// plus an optional per-channel bias on the result.
fn conv_transpose(
    input: &FeatureVolume,
    filters: &Mat,
    bias: Option<&[f64]>,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> FeatureVolume {
    let ci = filters.rows() / (kernel * kernel);
    let mut out = FeatureVolume::zeros(out_h, out_w, ci);
    for oy in 0..input.height {
        for ox in 0..input.width {
            let v = input.at(oy, ox);
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row0 = (ky * kernel + kx) * ci;
                    let px = out.at_mut(oy * stride + ky, ox * stride + kx);
                    for (c, o) in px.iter_mut().enumerate() {
                        *o += dot(filters.row(row0 + c), v);
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for px in out.data.chunks_exact_mut(ci) {
            axpy(1.0, b, px);
        }
    }
    out
}

/// `grad[(ky, kx, c), o] += Σ_{oy, ox} big[oy·s + ky, ox·s + kx, c] · small[oy, ox, o]`.
///
/// The filter gradient of both [`conv_forward`] (big = input, small =
/// output gradient) and [`conv_transpose`] (big = output gradient, small =
/// input).
fn filter_grad(
    big: &FeatureVolume,
    small: &FeatureVolume,
    kernel: usize,
    stride: usize,
    grad: &mut Mat,
) {
    let ci = big.channels;
    for oy in 0..small.height {
        for ox in 0..small.width {
            let v = small.at(oy, ox);
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let px = big.at(oy * stride + ky, ox * stride + kx);
                    let row0 = (ky * kernel + kx) * ci;
                    for (c, &a) in px.iter().enumerate() {
                        if a != 0.0 {
                            axpy(a, v, grad.row_mut(row0 + c));
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| leaky(v, slope)).collect()
}

fn leaky_volume(v: &FeatureVolume, slope: f64) -> FeatureVolume {
    FeatureVolume {
        height: v.height,
        width: v.width,
        channels: v.channels,
        data: leaky_relu(&v.data, slope),
    }
}

fn leaky_backward(grad: &mut FeatureVolume, pre: &FeatureVolume, slope: f64) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p < 0.0 {
            *g *= slope;
        }
    }
}

/// Architecture of a [`ConvStack`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeometry {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub kernel: usize,
    pub hidden_channels: usize,
    pub strides: (usize, usize),
    pub leaky_slope: f64,
    pub dropout_rate: f64,
}

impl ConvGeometry {
    /// 28×28 greyscale, 9×9 kernels, 128 channels, strides (1, 2).
    pub const DEFAULT: ConvGeometry = ConvGeometry {
        input_height: 28,
        input_width: 28,
        input_channels: 1,
        kernel: 9,
        hidden_channels: 128,
        strides: (1, 2),
        leaky_slope: 0.01,
        dropout_rate: 0.25,
    };

    /// Spatial size after the first convolution.
    pub fn mid_dims(&self) -> Result<(usize, usize)> {
        Ok((
            conv_output_size(self.input_height, self.kernel, self.strides.0)?,
            conv_output_size(self.input_width, self.kernel, self.strides.0)?,
        ))
    }

    /// Shape of the encoded volume.
    pub fn code_dims(&self) -> Result<(usize, usize, usize)> {
        let (h1, w1) = self.mid_dims()?;
        Ok((
            conv_output_size(h1, self.kernel, self.strides.1)?,
            conv_output_size(w1, self.kernel, self.strides.1)?,
            self.hidden_channels,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.hidden_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "kernel and channel counts must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        self.code_dims().map(|_| ())
    }
}

/// Two tied filter banks with separate encoder and decoder biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub geometry: ConvGeometry,
    /// `k·k·c_in × hidden`.
    pub filters1: Mat,
    /// `k·k·hidden × hidden`.
    pub filters2: Mat,
    pub enc_bias1: Mat,
    pub enc_bias2: Mat,
    /// Bias after the transposed second bank (hidden channels).
    pub dec_bias2: Mat,
    /// Bias before the output sigmoid (image channels).
    pub dec_bias1: Mat,
}

/// Number of parameter matrices in a [`ConvStack`].
pub const CONV_PARAMS: usize = 6;

impl ConvStack {
    /// Zero biases; filters `N(0, 1/fan_in)`.
    pub fn init(geometry: ConvGeometry, rng: &mut Rng) -> Result<Self> {
        geometry.validate()?;
        let k2 = geometry.kernel * geometry.kernel;
        let (c, h) = (geometry.input_channels, geometry.hidden_channels);
        let filters1 = gaussian_mat(rng, k2 * c, h, 1.0 / ((k2 * c) as f64).sqrt());
        let filters2 = gaussian_mat(rng, k2 * h, h, 1.0 / ((k2 * h) as f64).sqrt());
        Ok(ConvStack {
            geometry,
            filters1,
            filters2,
            enc_bias1: Mat::zeros(1, h),
            enc_bias2: Mat::zeros(1, h),
            dec_bias2: Mat::zeros(1, h),
            dec_bias1: Mat::zeros(1, c),
        })
    }

    /// Checks every parameter against the geometry.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let g = &self.geometry;
        let k2 = g.kernel * g.kernel;
        let expect = [
            (k2 * g.input_channels, g.hidden_channels),
            (k2 * g.hidden_channels, g.hidden_channels),
            (1, g.hidden_channels),
            (1, g.hidden_channels),
            (1, g.hidden_channels),
            (1, g.input_channels),
        ];
        for (k, (p, e)) in self.params().iter().zip(expect).enumerate() {
            if p.shape() != e {
                return Err(Error::Shape(format!(
                    "conv parameter {k} is {:?}, geometry needs {e:?}",
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> [&Mat; CONV_PARAMS] {
        [
            &self.filters1,
            &self.filters2,
            &self.enc_bias1,
            &self.enc_bias2,
            &self.dec_bias2,
            &self.dec_bias1,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Mat; CONV_PARAMS] {
        [
            &mut self.filters1,
            &mut self.filters2,
            &mut self.enc_bias1,
            &mut self.enc_bias2,
            &mut self.dec_bias2,
            &mut self.dec_bias1,
        ]
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let g = &self.geometry;
        if img.dims() != (g.input_height, g.input_width, g.input_channels) {
            return Err(Error::Shape(format!(
                "image is {:?}, stack expects {:?}",
                img.dims(),
                (g.input_height, g.input_width, g.input_channels)
            )));
        }
        Ok(())
    }

    /// Inference encoder (no dropout).
    pub fn encode(&self, img: &Image) -> Result<FeatureVolume> {
        self.check_image(img)?;
        Ok(self.forward(img, None).h2)
    }

    /// Training-mode encoder: inverted dropout after the first activation.
    pub fn encode_train(&self, img: &Image, rng: &mut Rng) -> Result<FeatureVolume> {
        self.check_image(img)?;
        Ok(self.forward(img, Some(rng)).h2)
    }

    pub fn decode(&self, vol: &FeatureVolume) -> Result<Image> {
        let code = self.geometry.code_dims()?;
        if vol.dims() != code {
            return Err(Error::Shape(format!(
                "volume is {:?}, decoder expects {code:?}",
                vol.dims()
            )));
        }
        let (_, _, a4) = self.decode_pre(vol);
        let g = &self.geometry;
        let pixels = a4
            .data
            .iter()
            .map(|&v| crate::capsule::sigmoid(v))
            .collect();
        Image::new(g.input_height, g.input_width, g.input_channels, pixels)
    }

    /// Decoder pre-activations and hidden activations: `(a3, h3, a4)`.
    fn decode_pre(&self, h2: &FeatureVolume) -> (FeatureVolume, FeatureVolume, FeatureVolume) {
        let g = &self.geometry;
        let (h1, w1) = g.mid_dims().expect("validated geometry");
        let a3 = conv_transpose(
            h2,
            &self.filters2,
            Some(self.dec_bias2.as_slice()),
            g.kernel,
            g.strides.1,
            h1,
            w1,
        );
        let h3 = leaky_volume(&a3, g.leaky_slope);
        let a4 = conv_transpose(
            &h3,
            &self.filters1,
            Some(self.dec_bias1.as_slice()),
            g.kernel,
            g.strides.0,
            g.input_height,
            g.input_width,
        );
        (a3, h3, a4)
    }

    fn forward(&self, img: &Image, dropout: Option<&mut Rng>) -> Activations {
        let g = &self.geometry;
        let x0 = img.to_volume();
        let a1 = conv_forward(
            &x0,
            &self.filters1,
            Some(self.enc_bias1.as_slice()),
            g.kernel,
            g.strides.0,
        );
        let h1 = leaky_volume(&a1, g.leaky_slope);
        let (d1, mask) = match dropout {
            Some(rng) if g.dropout_rate > 0.0 => {
                let keep = 1.0 - g.dropout_rate;
                let mask: Vec<f64> = (0..h1.data.len())
                    .map(|_| {
                        if rng.uniform() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let data = h1.data.iter().zip(&mask).map(|(h, m)| h * m).collect();
                (FeatureVolume { data, ..h1 }, Some(mask))
            }
            _ => (h1.clone(), None),
        };
        let a2 = conv_forward(
            &d1,
            &self.filters2,
            Some(self.enc_bias2.as_slice()),
            g.kernel,
            g.strides.1,
        );
        let h2 = leaky_volume(&a2, g.leaky_slope);
        Activations {
            x0,
            a1,
            mask,
            d1,
            a2,
            h2,
        }
    }

    /// Mean squared pixel error and its gradient for one image.
    ///
    /// `dropout` draws the mask; `None` runs the deterministic network.
    pub fn loss_and_grad(
        &self,
        img: &Image,
        dropout: Option<&mut Rng>,
    ) -> Result<(f64, ConvGrads)> {
        self.check_image(img)?;
        let g = &self.geometry;
        let act = self.forward(img, dropout);
        let (a3, h3, a4) = self.decode_pre(&act.h2);
        let y: Vec<f64> = a4
            .data
            .iter()
            .map(|&v| crate::capsule::sigmoid(v))
            .collect();
        let n = y.len() as f64;
        let loss = y
            .iter()
            .zip(&act.x0.data)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / n;

        let mut grads = ConvGrads::zeros(self);
        // Output sigmoid.
        let da4 = FeatureVolume {
            data: y
                .iter()
                .zip(&act.x0.data)
                .map(|(p, t)| 2.0 * (p - t) / n * p * (1.0 - p))
                .collect(),
            ..a4
        };
        filter_grad(&da4, &h3, g.kernel, g.strides.0, &mut grads.0[0]);
        grads.0[5]
            .as_mut_slice()
            .copy_from_slice(&da4.channel_sums());
        // Decoder hidden layer.
        let mut da3 = conv_forward(&da4, &self.filters1, None, g.kernel, g.strides.0);
        leaky_backward(&mut da3, &a3, g.leaky_slope);
        filter_grad(&da3, &act.h2, g.kernel, g.strides.1, &mut grads.0[1]);
        grads.0[4]
            .as_mut_slice()
            .copy_from_slice(&da3.channel_sums());
        // Code layer.
        let mut da2 = conv_forward(&da3, &self.filters2, None, g.kernel, g.strides.1);
        leaky_backward(&mut da2, &act.a2, g.leaky_slope);
        filter_grad(&act.d1, &da2, g.kernel, g.strides.1, &mut grads.0[1]);
        grads.0[3]
            .as_mut_slice()
            .copy_from_slice(&da2.channel_sums());
        // First encoder layer.
        let mut da1 = conv_transpose(
            &da2,
            &self.filters2,
            None,
            g.kernel,
            g.strides.1,
            act.a1.height,
            act.a1.width,
        );
        if let Some(mask) = &act.mask {
            for (d, m) in da1.data.iter_mut().zip(mask) {
                *d *= m;
            }
        }
        leaky_backward(&mut da1, &act.a1, g.leaky_slope);
        filter_grad(&act.x0, &da1, g.kernel, g.strides.0, &mut grads.0[0]);
        grads.0[2]
            .as_mut_slice()
            .copy_from_slice(&da1.channel_sums());
        Ok((loss, grads))
    }
}

struct Activations {
    x0: FeatureVolume,
    a1: FeatureVolume,
    mask: Option<Vec<f64>>,
    d1: FeatureVolume,
    a2: FeatureVolume,
    h2: FeatureVolume,
}

/// Loss gradients in [`ConvStack::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads(pub [Mat; CONV_PARAMS]);

impl ConvGrads {
    fn zeros(stack: &ConvStack) -> Self {
        ConvGrads(stack.params().map(|p| Mat::zeros(p.rows(), p.cols())))
    }

    fn add_scaled(&mut self, s: f64, other: &ConvGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            axpy(s, b.as_slice(), a.as_mut_slice());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Mat::is_finite)
    }
}

/// Mean inference-mode reconstruction MSE over `images`.
pub fn reconstruction_mse(stack: &ConvStack, images: &[Image]) -> Result<f64> {
    let losses: Vec<f64> = images
        .par_iter()
        .map(|img| stack.loss_and_grad_free(img))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

impl ConvStack {
    fn loss_and_grad_free(&self, img: &Image) -> Result<f64> {
        let rec = self.decode(&self.encode(img)?)?;
        let n = rec.pixels.len() as f64;
        Ok(rec
            .pixels
            .iter()
            .zip(&img.pixels)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / n)
    }
}

/// Trains the autoencoder by momentum SGD on the mean squared pixel error.
///
/// Weights are initialized from `cfg.seed`; dropout masks come from
/// per-sample seeds drawn from the same stream, so results do not depend on
/// the thread count. Returns the stack and per-epoch mean training loss.
pub fn train_autoencoder(
    images: &[Image],
    geometry: ConvGeometry,
    cfg: &TrainConfig,
) -> Result<(ConvStack, Vec<EpochStats>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = Rng::new(cfg.seed);
    let mut stack = ConvStack::init(geometry, &mut rng)?;
    for img in images {
        stack.check_image(img)?;
    }
    let mut sgd = SgdState::new(cfg.sgd(), stack.params().map(Mat::shape))?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let chunk = rayon::current_num_threads().max(1);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut max_grad: f64 = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
            let mut total = ConvGrads::zeros(&stack);
            let inv_b = 1.0 / batch.len() as f64;
            // Fixed summation order regardless of how many run at once.
            for (idx, sd) in batch.chunks(chunk).zip(seeds.chunks(chunk)) {
                let parts: Vec<(f64, ConvGrads)> = idx
                    .par_iter()
                    .zip(sd)
                    .map(|(&k, &s)| stack.loss_and_grad(&images[k], Some(&mut Rng::new(s))))
                    .collect::<Result<_>>()?;
                for (loss, g) in &parts {
                    loss_sum += loss;
                    total.add_scaled(inv_b, g);
                }
            }
            if !total.is_finite() || !loss_sum.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    what: "autoencoder loss or gradient".into(),
                });
            }
            // Descend: the optimizer ascends its argument.
            for (slot, (p, g)) in stack
                .params_mut()
                .into_iter()
                .zip(total.0.iter_mut())
                .enumerate()
            {
                max_grad = max_grad.max(g.max_abs());
                g.scale(-1.0);
                sgd.step(slot, p, g)?;
            }
        }
        history.push(EpochStats {
            epoch,
            learning_rate: sgd.learning_rate(),
            metric: loss_sum / images.len() as f64,
            max_abs_grad: max_grad,
        });
        sgd.end_epoch();
    }
    Ok((stack, history))
}

/// Reshapes a volume into capsules of dimension 8 and squashes them.
///
/// Capsule `(y·W + x)·(C/8) + g` holds channels `8g .. 8g+8` at site
/// `(y, x)`, i.e. the flat buffer cut into consecutive groups of eight.
pub fn volume_to_capsules(vol: &FeatureVolume) -> Result<CapsuleLayer> {
    if !vol.channels.is_multiple_of(CAPSULE_DIM) {
        return Err(Error::Shape(format!(
            "{} channels do not group into capsules of dimension {CAPSULE_DIM}",
            vol.channels
        )));
    }
    Ok(CapsuleLayer::from_flat(CAPSULE_DIM, vol.data.clone())?.squashed())
}

/// Inverse of [`volume_to_capsules`]: unsquash, then lay the capsules back
/// out as a `height × width × channels` volume.
pub fn capsules_to_volume(
    x: &CapsuleLayer,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<FeatureVolume> {
    if x.dim() != CAPSULE_DIM || x.len() * CAPSULE_DIM != height * width * channels {
        return Err(Error::Shape(format!(
            "{} capsules of dim {} do not fill a {height}x{width}x{channels} volume",
            x.len(),
            x.dim()
        )));
    }
    FeatureVolume::from_vec(height, width, channels, x.unsquashed()?.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_sample, Rng};
    use proptest::prelude::*;

    fn tiny_geometry(strides: (usize, usize), dropout: f64) -> ConvGeometry {
        ConvGeometry {
            input_height: 4,
            input_width: 4,
            input_channels: 1,
            kernel: 2,
            hidden_channels: 2,
            strides,
            leaky_slope: 0.1,
            dropout_rate: dropout,
        }
    }

    fn random_image(rng: &mut Rng, h: usize, w: usize, c: usize) -> Image {
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn randomize_biases(stack: &mut ConvStack, rng: &mut Rng) {
        for p in stack.params_mut().into_iter().skip(2) {
            for v in p.as_mut_slice() {
                *v = 0.3 * rng.normal();
            }
        }
    }

    #[test]
    fn default_shape_chain() {
        let g = ConvGeometry::DEFAULT;
        assert_eq!(g.mid_dims().unwrap(), (20, 20));
        assert_eq!(g.code_dims().unwrap(), (6, 6, 128));
        let stack = ConvStack::init(g, &mut Rng::new(1)).unwrap();
        let img = random_image(&mut Rng::new(2), 28, 28, 1);
        let vol = stack.encode(&img).unwrap();
        assert_eq!(vol.dims(), (6, 6, 128));
        let caps = volume_to_capsules(&vol).unwrap();
        assert_eq!((caps.len(), caps.dim()), (576, 8));
        let back = capsules_to_volume(&caps, 6, 6, 128).unwrap();
        assert_eq!(back.dims(), (6, 6, 128));
        assert_eq!(stack.decode(&back).unwrap().dims(), (28, 28, 1));
    }

    #[test]
    fn zero_image_and_zero_biases_encode_to_zero() {
        let stack = ConvStack::init(tiny_geometry((1, 2), 0.0), &mut Rng::new(3)).unwrap();
        let vol = stack.encode(&Image::filled(4, 4, 1, 0.0).unwrap()).unwrap();
        assert!(vol.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_volume_decodes_to_half_grey() {
        let stack = ConvStack::init(tiny_geometry((1, 1), 0.0), &mut Rng::new(4)).unwrap();
        let img = stack.decode(&FeatureVolume::zeros(2, 2, 2)).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn impulse_through_single_filter_gives_footprint() {
        // One input channel, one output channel, 3x3 kernel, stride 1.
        let f = Mat::from_vec(9, 1, (1..=9).map(f64::from).collect()).unwrap();
        let mut img = FeatureVolume::zeros(5, 5, 1);
        img.at_mut(2, 2)[0] = 1.0;
        let out = conv_forward(&img, &f, None, 3, 1);
        // out[oy][ox] = f[2 - oy][2 - ox]: the filter, flipped.
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(out.at(oy, ox)[0], f.get((2 - oy) * 3 + (2 - ox), 0));
            }
        }
        // Transposed: an impulse stamps the filter unflipped.
        let mut small = FeatureVolume::zeros(3, 3, 1);
        small.at_mut(1, 1)[0] = 1.0;
        let stamp = conv_transpose(&small, &f, None, 3, 1, 5, 5);
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..4).contains(&y) && (1..4).contains(&x);
                let expect = if inside {
                    f.get((y - 1) * 3 + (x - 1), 0)
                } else {
                    0.0
                };
                assert_eq!(stamp.at(y, x)[0], expect);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        // <conv(x), y> == <x, convT(y)>.
        let mut rng = Rng::new(5);
        for (k, s, n) in [(3, 1, 7), (3, 2, 8), (2, 2, 5)] {
            let x =
                FeatureVolume::from_vec(n, n, 3, gaussian_sample(&mut rng, n * n * 3, 0.0, 1.0))
                    .unwrap();
            let f = gaussian_mat(&mut rng, k * k * 3, 4, 1.0);
            let cx = conv_forward(&x, &f, None, k, s);
            let (oh, ow, _) = cx.dims();
            let y = FeatureVolume::from_vec(
                oh,
                ow,
                4,
                gaussian_sample(&mut rng, oh * ow * 4, 0.0, 1.0),
            )
            .unwrap();
            let ty = conv_transpose(&y, &f, None, k, s, n, n);
            let lhs = dot(cx.as_slice(), y.as_slice());
            let rhs = dot(x.as_slice(), ty.as_slice());
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    fn fd_check(stack: &ConvStack, img: &Image, tol: f64) {
        let (_, grads) = stack.loss_and_grad(img, None).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for p in 0..CONV_PARAMS {
            for e in 0..stack.params()[p].as_slice().len() {
                let mut up = stack.clone();
                up.params_mut()[p].as_mut_slice()[e] += eps;
                let mut down = stack.clone();
                down.params_mut()[p].as_mut_slice()[e] -= eps;
                let fu = up.loss_and_grad(img, None).unwrap().0;
                let fd = down.loss_and_grad(img, None).unwrap().0;
                let numeric = (fu - fd) / (2.0 * eps);
                let a = grads.0[p].as_slice()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        assert!(worst < tol, "worst relative error {worst}");
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = Rng::new(6);
        for strides in [(1, 1), (1, 2)] {
            let mut stack = ConvStack::init(tiny_geometry(strides, 0.0), &mut rng).unwrap();
            randomize_biases(&mut stack, &mut rng);
            let img = random_image(&mut rng, 4, 4, 1);
            fd_check(&stack, &img, 1e-4);
        }
    }

    #[test]
    fn backprop_with_multichannel_input() {
        let mut rng = Rng::new(7);
        let g = ConvGeometry {
            input_height: 6,
            input_width: 5,
            input_channels: 2,
            kernel: 3,
            hidden_channels: 3,
            strides: (1, 2),
            leaky_slope: 0.2,
            dropout_rate: 0.0,
        };
        let mut stack = ConvStack::init(g, &mut rng).unwrap();
        randomize_biases(&mut stack, &mut rng);
        fd_check(&stack, &random_image(&mut rng, 6, 5, 2), 1e-4);
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let mut rng = Rng::new(8);
        let stack = ConvStack::init(tiny_geometry((1, 1), 0.5), &mut rng).unwrap();
        let img = random_image(&mut rng, 4, 4, 1);
        assert_eq!(stack.encode(&img).unwrap(), stack.encode(&img).unwrap());
        let a = stack.encode_train(&img, &mut Rng::new(1)).unwrap();
        let b = stack.encode_train(&img, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        let differs = (2..20).any(|s| stack.encode_train(&img, &mut Rng::new(s)).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn shape_errors() {
        let stack = ConvStack::init(tiny_geometry((1, 2), 0.0), &mut Rng::new(9)).unwrap();
        assert!(stack.encode(&Image::filled(5, 4, 1, 0.0).unwrap()).is_err());
        assert!(stack.decode(&FeatureVolume::zeros(2, 2, 2)).is_err());
        let bad = ConvGeometry {
            input_height: 2,
            ..tiny_geometry((1, 2), 0.0)
        };
        assert!(bad.validate().is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(volume_to_capsules(&FeatureVolume::zeros(1, 1, 12)).is_err());
    }

    #[test]
    fn capsule_reshape_examples() {
        let zero = volume_to_capsules(&FeatureVolume::zeros(6, 6, 128)).unwrap();
        assert_eq!(zero.len(), 576);
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));

        // Site (2, 3), channel group 5.
        let mut vol = FeatureVolume::zeros(6, 6, 128);
        for c in 40..48 {
            vol.at_mut(2, 3)[c] = 0.1 * (c as f64 - 39.0);
        }
        let caps = volume_to_capsules(&vol).unwrap();
        let expect_idx = (2 * 6 + 3) * 16 + 5;
        for (k, c) in caps.iter().enumerate() {
            let nonzero = c.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, k == expect_idx, "capsule {k}");
        }
        let back = capsules_to_volume(&caps, 6, 6, 128).unwrap();
        for (a, b) in back.as_slice().iter().zip(vol.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut big = CapsuleLayer::zeros(576, 8);
        big.capsule_mut(0)[0] = 1.0;
        assert!(matches!(
            capsules_to_volume(&big, 6, 6, 128),
            Err(Error::Domain(_))
        ));
        assert!(capsules_to_volume(&CapsuleLayer::zeros(10, 8), 6, 6, 128).is_err());
    }

    #[test]
    fn autoencoder_zero_lr_and_determinism() {
        let mut rng = Rng::new(10);
        let images: Vec<Image> = (0..6).map(|_| random_image(&mut rng, 4, 4, 1)).collect();
        let g = tiny_geometry((1, 2), 0.25);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (stack, _) = train_autoencoder(&images, g, &cfg).unwrap();
        assert_eq!(stack, ConvStack::init(g, &mut Rng::new(cfg.seed)).unwrap());

        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..cfg
        };
        let a = train_autoencoder(&images, g, &cfg).unwrap();
        let b = train_autoencoder(&images, g, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(train_autoencoder(&[], g, &cfg).is_err());
    }

    #[test]
    fn autoencoder_divergence_is_reported() {
        let mut rng = Rng::new(11);
        let images: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 4, 4, 1)).collect();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            learning_rate: 1e200,
            momentum: 0.0,
            l2: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_autoencoder(&images, tiny_geometry((1, 1), 0.0), &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    proptest! {
        #[test]
        fn leaky_relu_is_piecewise_linear(xs in proptest::collection::vec(-1e3f64..1e3, 1..50), slope in 0.0f64..0.5) {
            for (x, y) in xs.iter().zip(leaky_relu(&xs, slope)) {
                if *x >= 0.0 {
                    prop_assert_eq!(y, *x);
                } else {
                    prop_assert_eq!(y, slope * x);
                }
            }
        }

        #[test]
        fn capsule_reshape_round_trips(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, groups in 1usize..4) {
            let mut rng = Rng::new(seed);
            let c = groups * CAPSULE_DIM;
            let vol = FeatureVolume::from_vec(h, w, c, gaussian_sample(&mut rng, h * w * c, 0.0, 2.0)).unwrap();
            let back = capsules_to_volume(&volume_to_capsules(&vol).unwrap(), h, w, c).unwrap();
            for (a, b) in back.as_slice().iter().zip(vol.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
