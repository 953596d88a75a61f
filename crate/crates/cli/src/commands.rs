use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use poecaps::capsule::CapsuleLayer;
use poecaps::conv::{
    capsules_to_volume, train_autoencoder, volume_to_capsules, ConvGeometry, ConvStack, Image,
};
use poecaps::io::{load_checkpoint, load_idx_images, save_checkpoint, save_image_grid, Checkpoint};
use poecaps::numerics::Rng;
use poecaps::train::{
    generate, gradcheck, gradcheck_instance, train_decoder, train_encoder, EpochStats, GridShape,
    TrainConfig,
};
use rayon::prelude::*;

use crate::config::FileConfig;
use crate::{Command, Common, Failure};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

struct Settings {
    file: FileConfig,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    train: TrainConfig,
    limit: Option<usize>,
    /// Routing depth when set explicitly rather than by default.
    routing_iters: Option<usize>,
}

impl Settings {
    fn new(c: Common) -> Result<Self, Failure> {
        let file = FileConfig::load(c.config.as_deref())?;
        let d = TrainConfig::default();
        let routing_iters = file.pick(c.routing_iters, "routing_iters")?;
        let train = TrainConfig {
            epochs: file.pick(c.epochs, "epochs")?.unwrap_or(d.epochs),
            batch_size: file.pick(c.batch, "batch")?.unwrap_or(d.batch_size),
            learning_rate: file.pick(c.lr, "lr")?.unwrap_or(d.learning_rate),
            momentum: file.pick(c.momentum, "momentum")?.unwrap_or(d.momentum),
            l2: file.pick(c.l2, "l2")?.unwrap_or(d.l2),
            lr_decay: file.pick(c.decay, "decay")?.unwrap_or(d.lr_decay),
            routing_iters: routing_iters.unwrap_or(d.routing_iters),
            seed: file.pick(c.seed, "seed")?.unwrap_or(d.seed),
            init_std: file.pick(c.init_std, "init_std")?.unwrap_or(d.init_std),
        };
        Ok(Settings {
            data: file.pick(c.data, "data")?,
            checkpoint: file.pick(c.checkpoint, "checkpoint")?,
            out: file.pick(c.out, "out")?,
            limit: file.pick(c.limit, "limit")?,
            routing_iters,
            train,
            file,
        })
    }

    fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
        p.as_deref()
            .ok_or_else(|| Failure::usage(format!("--{flag} is required")))
    }

    fn images(&self) -> Result<Vec<Image>, Failure> {
        let ds = load_idx_images(Self::required(&self.data, "data")?)?;
        let mut images = ds.images;
        if let Some(n) = self.limit {
            images.truncate(n);
        }
        if images.is_empty() {
            return Err(poecaps::Error::EmptyDataset.into());
        }
        Ok(images)
    }

    fn load(&self) -> Result<Checkpoint, Failure> {
        Ok(load_checkpoint(Self::required(
            &self.checkpoint,
            "checkpoint",
        )?)?)
    }

    /// `--out`, falling back to the input checkpoint.
    fn out_checkpoint(&self) -> Result<&Path, Failure> {
        match (&self.out, &self.checkpoint) {
            (Some(p), _) | (None, Some(p)) => Ok(p),
            _ => Err(Failure::usage("--out is required")),
        }
    }
}

pub fn run(command: Command) -> Result<(), Failure> {
    let common = match &command {
        Command::TrainConv { common, .. }
        | Command::TrainCaps { common, .. }
        | Command::TrainDecoder { common }
        | Command::Generate { common, .. }
        | Command::Gradcheck { common, .. } => common,
    };
    let threads = FileConfig::load(common.config.as_deref())?.pick(common.threads, "threads")?;
    match threads {
        None => dispatch(command),
        Some(0) => Err(Failure::usage("--threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?
            .install(|| dispatch(command)),
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::TrainConv {
            common,
            kernel,
            hidden_channels,
        } => {
            let s = Settings::new(common)?;
            let kernel = s.file.pick(kernel, "kernel")?;
            let hidden = s.file.pick(hidden_channels, "hidden_channels")?;
            train_conv(&s, kernel, hidden)
        }
        Command::TrainCaps {
            common,
            capsules,
            capsule_dim,
        } => {
            let s = Settings::new(common)?;
            let n_out = s
                .file
                .pick(capsules, "capsules")?
                .unwrap_or(GridShape::DEFAULT.n_out);
            let d_out = s
                .file
                .pick(capsule_dim, "capsule_dim")?
                .unwrap_or(GridShape::DEFAULT.d_out);
            train_caps(&s, n_out, d_out)
        }
        Command::TrainDecoder { common } => train_dec(&Settings::new(common)?),
        Command::Generate {
            common,
            restricted,
            rows,
            capsule,
            noise_out,
        } => {
            let s = Settings::new(common)?;
            let opts = GenerateOptions {
                restricted: s.file.flag(restricted, "restricted")?,
                rows: s.file.pick(rows, "rows")?.unwrap_or(4),
                capsule: s.file.pick(capsule, "capsule")?,
                noise_out: s.file.pick(noise_out, "noise_out")?,
            };
            generate_grid(&s, &opts)
        }
        Command::Gradcheck { common, eps } => {
            let s = Settings::new(common)?;
            let eps = s.file.pick(eps, "eps")?.unwrap_or(1e-6);
            run_gradcheck(&s, eps)
        }
    }
}

fn print_history(stage: &str, metric: &str, history: &[EpochStats]) {
    for h in history {
        println!(
            "{stage} epoch {:>3}  lr {:.6e}  {metric} {:.6}  max|grad| {:.3e}",
            h.epoch + 1,
            h.learning_rate,
            h.metric,
            h.max_abs_grad
        );
    }
}

fn train_conv(s: &Settings, kernel: Option<usize>, hidden: Option<usize>) -> Result<(), Failure> {
    let out = Settings::required(&s.out, "out")?;
    let images = s.images()?;
    let (h, w, c) = images[0].dims();
    let geometry = ConvGeometry {
        input_height: h,
        input_width: w,
        input_channels: c,
        kernel: kernel.unwrap_or(ConvGeometry::DEFAULT.kernel),
        hidden_channels: hidden.unwrap_or(ConvGeometry::DEFAULT.hidden_channels),
        ..ConvGeometry::DEFAULT
    };
    let (code_h, code_w, code_c) = geometry.code_dims()?;
    println!(
        "train-conv: {} images {h}x{w}x{c} -> code {code_h}x{code_w}x{code_c}",
        images.len()
    );
    let (stack, history) = train_autoencoder(&images, geometry, &s.train)?;
    print_history("conv", "mse", &history);
    let ck = Checkpoint {
        conv: Some(stack),
        conv_config: Some(s.train),
        ..Checkpoint::default()
    };
    save_checkpoint(&ck, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Encodes every image with the frozen autoencoder and groups the code into
/// squashed primary capsules.
fn primary_capsules(conv: &ConvStack, images: &[Image]) -> Result<Vec<CapsuleLayer>, Failure> {
    Ok(images
        .par_iter()
        .map(|img| volume_to_capsules(&conv.encode(img)?))
        .collect::<poecaps::Result<_>>()?)
}

fn require<T>(section: Option<T>, name: &str, stage: &str) -> Result<T, Failure> {
    section.ok_or_else(|| {
        Failure::usage(format!(
            "checkpoint has no {name} section; run {stage} first"
        ))
    })
}

fn train_caps(s: &Settings, n_out: usize, d_out: usize) -> Result<(), Failure> {
    if n_out == 0 || d_out == 0 {
        return Err(Failure::usage(
            "--capsules and --capsule-dim must be positive",
        ));
    }
    let ck = s.load()?;
    let conv = require(ck.conv, "conv", "train-conv")?;
    let images = s.images()?;
    let data = primary_capsules(&conv, &images)?;
    println!(
        "train-caps: {} samples, {} primary capsules of dim {} -> {n_out} of dim {d_out}",
        data.len(),
        data[0].len(),
        data[0].dim()
    );
    let (encoder, stats, history) = train_encoder(&data, n_out, d_out, &s.train)?;
    print_history("caps", "best-activation", &history);
    for (j, e) in stats.entries().iter().enumerate() {
        println!("capsule {j:>2}: direction from {} samples", e.count);
    }
    let out = Checkpoint {
        conv: Some(conv),
        conv_config: ck.conv_config,
        encoder: Some(encoder),
        encoder_config: Some(s.train),
        orientation: Some(stats),
        ..Checkpoint::default()
    };
    let path = s.out_checkpoint()?;
    save_checkpoint(&out, path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train_dec(s: &Settings) -> Result<(), Failure> {
    let ck = s.load()?;
    let conv = require(ck.conv.as_ref(), "conv", "train-conv")?;
    let encoder = require(ck.encoder.as_ref(), "encoder", "train-caps")?;
    let images = s.images()?;
    let data = primary_capsules(conv, &images)?;
    println!("train-decoder: {} samples", data.len());
    let (decoder, history) = train_decoder(&data, encoder, &s.train)?;
    print_history("decoder", "angle-error", &history);
    let out = Checkpoint {
        decoder: Some(decoder),
        decoder_config: Some(s.train),
        ..ck
    };
    let path = s.out_checkpoint()?;
    save_checkpoint(&out, path)?;
    println!("wrote {}", path.display());
    Ok(())
}

struct GenerateOptions {
    restricted: bool,
    rows: usize,
    capsule: Option<usize>,
    noise_out: Option<PathBuf>,
}

fn generate_grid(s: &Settings, opts: &GenerateOptions) -> Result<(), Failure> {
    let out = Settings::required(&s.out, "out")?;
    let ck = s.load()?;
    let conv = require(ck.conv.as_ref(), "conv", "train-conv")?;
    let decoder = require(ck.decoder.as_ref(), "decoder", "train-decoder")?;
    let n_caps = decoder.shape().n_in;
    let columns: Vec<usize> = match opts.capsule {
        Some(j) if j >= n_caps => {
            return Err(Failure::usage(format!(
                "--capsule {j} out of range; the decoder has {n_caps} capsules"
            )))
        }
        Some(j) => vec![j],
        None => (0..n_caps).collect(),
    };
    if opts.rows == 0 {
        return Err(Failure::usage("--rows must be positive"));
    }
    // Routing depth: flag or file, else whatever the decoder was trained with.
    let iters = s
        .routing_iters
        .or(ck.decoder_config.map(|c| c.routing_iters))
        .unwrap_or(s.train.routing_iters);
    let (h, w, c) = conv.geometry.code_dims()?;

    let mut rng = Rng::new(s.train.seed);
    let mut samples = Vec::with_capacity(opts.rows * columns.len());
    for _ in 0..opts.rows {
        for &j in &columns {
            samples.push(generate(
                decoder,
                ck.orientation.as_ref(),
                &mut rng,
                j,
                opts.restricted,
                iters,
            )?);
        }
    }
    let images: Vec<Image> = samples
        .par_iter()
        .map(|g| conv.decode(&capsules_to_volume(&g.capsules, h, w, c)?))
        .collect::<poecaps::Result<_>>()?;
    save_image_grid(&images, columns.len(), out)?;
    println!(
        "wrote {} ({} rows x {} columns{})",
        out.display(),
        opts.rows,
        columns.len(),
        if opts.restricted { ", restricted" } else { "" }
    );

    if let Some(path) = &opts.noise_out {
        let mut text = String::new();
        for (k, g) in samples.iter().enumerate() {
            write!(
                text,
                "{} {} {}",
                k / columns.len(),
                k % columns.len(),
                g.capsule
            )
            .unwrap();
            for v in &g.noise {
                write!(text, " {v:?}").unwrap();
            }
            text.push('\n');
        }
        std::fs::write(path, text)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_gradcheck(s: &Settings, eps: f64) -> Result<(), Failure> {
    let shape = GridShape {
        n_in: 8,
        n_out: 4,
        d_in: 4,
        d_out: 4,
    };
    let (w, x) = gradcheck_instance(shape, &mut Rng::new(s.train.seed));
    let r = gradcheck(&w, &x, eps, s.train.routing_iters)?;
    let (i, j, row, col) = r.worst;
    println!(
        "gradcheck I={} J={} d_in={} d_out={} eps={eps:e}: {} entries",
        shape.n_in, shape.n_out, shape.d_in, shape.d_out, r.entries
    );
    println!(
        "max relative error {:.3e} at W[{i}][{j}][{row}][{col}] (analytic {:.9e}, numeric {:.9e})",
        r.max_rel_error, r.worst_analytic, r.worst_numeric
    );
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::numerical(format!(
            "gradcheck failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error
        )))
    }
}
