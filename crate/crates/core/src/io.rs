//! File formats: IDX image sets in, PGM grids out, and the `POEC` checkpoint.
//!
//! Byte layouts are written out in `docs/FORMATS.md`. Every parser works on
//! an in-memory buffer through a bounds-checked cursor, so malformed or
//! truncated input produces an error rather than a panic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::capsule::PredictionWeights;
use crate::conv::{ConvGeometry, ConvStack, Image};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::train::{DecoderModel, EncoderModel, OrientationEntry, OrientationStats, TrainConfig};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"POEC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    fn u16_le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after {what}",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- IDX

/// A greyscale image set read from an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxDataset {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Image>,
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxDataset> {
    parse_idx_images(&read_file(path.as_ref())?)
}

/// Parses an IDX image file (magic `0x00000803`, big-endian `u32` count,
/// rows and cols, then unsigned bytes). Pixels are scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxDataset> {
    let mut cur = Cursor::new(bytes);
    match cur.u32_be()? {
        IDX_IMAGES_MAGIC => {}
        IDX_LABELS_MAGIC => return Err(Error::LabelFile),
        m => return Err(Error::Format(format!("bad IDX magic {m:#010x}"))),
    }
    let count = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("IDX images of size {rows}x{cols}")));
    }
    let per = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("IDX dimension overflow".into()))?;
    let total = per
        .checked_mul(count)
        .ok_or_else(|| Error::Format("IDX dimension overflow".into()))?;
    let body = cur.take(total)?;
    cur.finish("IDX image data")?;
    let images = body
        .chunks_exact(per)
        .map(|px| {
            Image::new(
                rows,
                cols,
                1,
                px.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(IdxDataset {
        count,
        rows,
        cols,
        images,
    })
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_file(path.as_ref())?)
}

/// Parses an IDX label file (magic `0x00000801`). Labels are not used by
/// training but the format is accepted.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = cur.u32_be()? as usize;
    let labels = cur.take(count)?.to_vec();
    cur.finish("IDX labels")?;
    Ok(labels)
}

/// Serializes single-channel images of equal size as an IDX image file,
/// quantizing with [`quantize`].
pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let (h, w) = uniform_grey_dims(images)?;
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(img.pixels().iter().map(|&p| quantize(p)));
    }
    Ok(out)
}

pub fn write_idx_images(images: &[Image], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_idx_images(images)?)
}

fn uniform_grey_dims(images: &[Image]) -> Result<(usize, usize)> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w, _) = first.dims();
    for (k, img) in images.iter().enumerate() {
        if img.dims() != (h, w, 1) {
            return Err(Error::Shape(format!(
                "image {k} is {:?}; expected {h}x{w} greyscale",
                img.dims()
            )));
        }
    }
    Ok((h, w))
}

// ---------------------------------------------------------------- PGM

/// 8-bit greyscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreyImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// `round(255·p)`, with `p` clamped to `[0, 1]`.
pub fn quantize(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}

/// Tiles images row-major into a grid `cols` wide; unused cells stay black.
pub fn image_grid(images: &[Image], cols: usize) -> Result<GreyImage> {
    if cols == 0 {
        return Err(Error::Config("grid needs at least one column".into()));
    }
    let (h, w) = uniform_grey_dims(images)?;
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut pixels = vec![0u8; gw * gh];
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..h {
            let dst = (r * h + y) * gw + c * w;
            for (d, &p) in pixels[dst..dst + w]
                .iter_mut()
                .zip(&img.pixels()[y * w..(y + 1) * w])
            {
                *d = quantize(p);
            }
        }
    }
    Ok(GreyImage {
        width: gw,
        height: gh,
        pixels,
    })
}

/// Binary PGM: `P5\n<width> <height>\n255\n` followed by the raster.
pub fn encode_pgm(img: &GreyImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a binary PGM with maxval 255, including `#` comments in the header.
pub fn parse_pgm(bytes: &[u8]) -> Result<GreyImage> {
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let mut number = || -> Result<usize> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Format(format!(
                    "bad PGM header field {:?}",
                    String::from_utf8_lossy(t)
                ))
            })
    };
    let width = number()?;
    let height = number()?;
    let maxval = number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval {maxval} unsupported")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("PGM dimension overflow".into()))?;
    if start.checked_add(len) != Some(bytes.len()) {
        return Err(Error::Format(format!(
            "PGM raster is {} bytes, header says {len}",
            bytes.len().saturating_sub(start)
        )));
    }
    Ok(GreyImage {
        width,
        height,
        pixels: bytes[start..].to_vec(),
    })
}

pub fn save_image_grid(images: &[Image], cols: usize, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm(&image_grid(images, cols)?))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GreyImage> {
    parse_pgm(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------- checkpoint

/// Everything the pipeline persists. Each stage fills in its own sections
/// and carries the earlier ones forward.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub conv: Option<ConvStack>,
    pub conv_config: Option<TrainConfig>,
    pub encoder: Option<EncoderModel>,
    pub encoder_config: Option<TrainConfig>,
    pub orientation: Option<OrientationStats>,
    pub decoder: Option<DecoderModel>,
    pub decoder_config: Option<TrainConfig>,
}

/// Section names in file order.
pub const SECTIONS: [&str; 7] = [
    "conv",
    "conv_config",
    "encoder",
    "encoder_config",
    "orientation",
    "decoder",
    "decoder_config",
];

#[derive(Debug, Clone, PartialEq)]
enum Value {
    U64(u64),
    F64(f64),
    F64s(Vec<u64>, Vec<f64>),
    U64s(Vec<u64>, Vec<u64>),
}

const KIND_U64: u8 = 0;
const KIND_F64: u8 = 1;
const KIND_F64_ARRAY: u8 = 2;
const KIND_U64_ARRAY: u8 = 3;

type Entries = Vec<(&'static str, Value)>;

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_dims(out: &mut Vec<u8>, dims: &[u64]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
}

fn encode_entries(entries: &Entries) -> Vec<u8> {
    let mut out = (entries.len() as u32).to_le_bytes().to_vec();
    for (name, value) in entries {
        put_name(&mut out, name);
        match value {
            Value::U64(v) => {
                out.push(KIND_U64);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::F64(v) => {
                out.push(KIND_F64);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::F64s(dims, data) => {
                out.push(KIND_F64_ARRAY);
                put_dims(&mut out, dims);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Value::U64s(dims, data) => {
                out.push(KIND_U64_ARRAY);
                put_dims(&mut out, dims);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

fn get_name(cur: &mut Cursor<'_>) -> Result<String> {
    let n = cur.u16_le()? as usize;
    String::from_utf8(cur.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
}

fn get_dims(cur: &mut Cursor<'_>) -> Result<(Vec<u64>, usize)> {
    let rank = cur.u32_le()? as usize;
    // Each dimension takes eight bytes; refuse a rank the buffer cannot hold.
    if rank > cur.remaining() / 8 {
        return Err(Error::Format(format!(
            "array rank {rank} exceeds the section"
        )));
    }
    let dims: Vec<u64> = (0..rank).map(|_| cur.u64_le()).collect::<Result<_>>()?;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
        .filter(|&n| n <= cur.remaining() / 8)
        .ok_or_else(|| Error::Format(format!("array shape {dims:?} exceeds the section")))?;
    Ok((dims, len))
}

fn decode_entries(payload: &[u8]) -> Result<BTreeMap<String, Value>> {
    let mut cur = Cursor::new(payload);
    let n = cur.u32_le()?;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let name = get_name(&mut cur)?;
        let value = match cur.u8()? {
            KIND_U64 => Value::U64(cur.u64_le()?),
            KIND_F64 => Value::F64(f64::from_le_bytes(cur.array()?)),
            KIND_F64_ARRAY => {
                let (dims, len) = get_dims(&mut cur)?;
                let data = (0..len)
                    .map(|_| Ok(f64::from_le_bytes(cur.array()?)))
                    .collect::<Result<_>>()?;
                Value::F64s(dims, data)
            }
            KIND_U64_ARRAY => {
                let (dims, len) = get_dims(&mut cur)?;
                let data = (0..len).map(|_| cur.u64_le()).collect::<Result<_>>()?;
                Value::U64s(dims, data)
            }
            k => {
                return Err(Error::Format(format!(
                    "entry {name:?} has unknown kind {k}"
                )))
            }
        };
        if map.insert(name.clone(), value).is_some() {
            return Err(Error::Format(format!("duplicate entry {name:?}")));
        }
    }
    cur.finish("section entries")?;
    Ok(map)
}

struct Fields {
    section: &'static str,
    map: BTreeMap<String, Value>,
}

impl Fields {
    fn missing(&self, name: &str) -> Error {
        Error::Format(format!(
            "section {} lacks {name:?} of the expected kind",
            self.section
        ))
    }

    fn u64(&mut self, name: &str) -> Result<u64> {
        match self.map.remove(name) {
            Some(Value::U64(v)) => Ok(v),
            _ => Err(self.missing(name)),
        }
    }

    fn usize(&mut self, name: &str) -> Result<usize> {
        let v = self.u64(name)?;
        usize::try_from(v)
            .map_err(|_| Error::Format(format!("{name} = {v} does not fit in memory")))
    }

    fn f64(&mut self, name: &str) -> Result<f64> {
        match self.map.remove(name) {
            Some(Value::F64(v)) => Ok(v),
            _ => Err(self.missing(name)),
        }
    }

    fn f64s(&mut self, name: &str, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.map.remove(name) {
            Some(Value::F64s(dims, data)) if dims.len() == rank => {
                Ok((dims.iter().map(|&d| d as usize).collect(), data))
            }
            _ => Err(self.missing(name)),
        }
    }

    fn u64s(&mut self, name: &str, rank: usize) -> Result<(Vec<usize>, Vec<u64>)> {
        match self.map.remove(name) {
            Some(Value::U64s(dims, data)) if dims.len() == rank => {
                Ok((dims.iter().map(|&d| d as usize).collect(), data))
            }
            _ => Err(self.missing(name)),
        }
    }

    fn mat(&mut self, name: &str) -> Result<Mat> {
        let (dims, data) = self.f64s(name, 2)?;
        Mat::from_vec(dims[0], dims[1], data)
    }

    fn done(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Format(format!(
                "section {} has unknown entry {k:?}",
                self.section
            ))),
            None => Ok(()),
        }
    }
}

fn mat_value(m: &Mat) -> Value {
    Value::F64s(
        vec![m.rows() as u64, m.cols() as u64],
        m.as_slice().to_vec(),
    )
}

fn conv_entries(s: &ConvStack) -> Entries {
    let g = &s.geometry;
    vec![
        ("input_height", Value::U64(g.input_height as u64)),
        ("input_width", Value::U64(g.input_width as u64)),
        ("input_channels", Value::U64(g.input_channels as u64)),
        ("kernel", Value::U64(g.kernel as u64)),
        ("hidden_channels", Value::U64(g.hidden_channels as u64)),
        ("stride1", Value::U64(g.strides.0 as u64)),
        ("stride2", Value::U64(g.strides.1 as u64)),
        ("leaky_slope", Value::F64(g.leaky_slope)),
        ("dropout_rate", Value::F64(g.dropout_rate)),
        ("filters1", mat_value(&s.filters1)),
        ("filters2", mat_value(&s.filters2)),
        ("enc_bias1", mat_value(&s.enc_bias1)),
        ("enc_bias2", mat_value(&s.enc_bias2)),
        ("dec_bias2", mat_value(&s.dec_bias2)),
        ("dec_bias1", mat_value(&s.dec_bias1)),
    ]
}

fn conv_from(f: &mut Fields) -> Result<ConvStack> {
    let geometry = ConvGeometry {
        input_height: f.usize("input_height")?,
        input_width: f.usize("input_width")?,
        input_channels: f.usize("input_channels")?,
        kernel: f.usize("kernel")?,
        hidden_channels: f.usize("hidden_channels")?,
        strides: (f.usize("stride1")?, f.usize("stride2")?),
        leaky_slope: f.f64("leaky_slope")?,
        dropout_rate: f.f64("dropout_rate")?,
    };
    let stack = ConvStack {
        geometry,
        filters1: f.mat("filters1")?,
        filters2: f.mat("filters2")?,
        enc_bias1: f.mat("enc_bias1")?,
        enc_bias2: f.mat("enc_bias2")?,
        dec_bias2: f.mat("dec_bias2")?,
        dec_bias1: f.mat("dec_bias1")?,
    };
    stack.validate()?;
    Ok(stack)
}

fn config_entries(c: &TrainConfig) -> Entries {
    vec![
        ("epochs", Value::U64(c.epochs as u64)),
        ("batch_size", Value::U64(c.batch_size as u64)),
        ("learning_rate", Value::F64(c.learning_rate)),
        ("momentum", Value::F64(c.momentum)),
        ("l2", Value::F64(c.l2)),
        ("lr_decay", Value::F64(c.lr_decay)),
        ("routing_iters", Value::U64(c.routing_iters as u64)),
        ("seed", Value::U64(c.seed)),
        ("init_std", Value::F64(c.init_std)),
    ]
}

fn config_from(f: &mut Fields) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: f.usize("epochs")?,
        batch_size: f.usize("batch_size")?,
        learning_rate: f.f64("learning_rate")?,
        momentum: f.f64("momentum")?,
        l2: f.f64("l2")?,
        lr_decay: f.f64("lr_decay")?,
        routing_iters: f.usize("routing_iters")?,
        seed: f.u64("seed")?,
        init_std: f.f64("init_std")?,
    })
}

/// Grid as a rank-4 array `[n_in, n_out, d_out, d_in]`.
fn grid_entries(name: &'static str, w: &PredictionWeights) -> Entries {
    let dims = [w.n_in(), w.n_out(), w.d_out(), w.d_in()]
        .map(|d| d as u64)
        .to_vec();
    let data = w
        .mats()
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect();
    vec![(name, Value::F64s(dims, data))]
}

fn grid_from(f: &mut Fields, name: &str) -> Result<PredictionWeights> {
    let (dims, data) = f.f64s(name, 4)?;
    let (n_in, n_out, d_out, d_in) = (dims[0], dims[1], dims[2], dims[3]);
    let block = d_out * d_in;
    PredictionWeights::from_fn(n_in, n_out, d_in, d_out, |i, j| {
        let k = (i * n_out + j) * block;
        Mat::from_vec(d_out, d_in, data[k..k + block].to_vec())
            .expect("block has d_out·d_in entries")
    })
}

fn orientation_entries(s: &OrientationStats) -> Entries {
    let dims = vec![s.len() as u64, s.dim() as u64];
    let cat = |f: fn(&OrientationEntry) -> &[f64]| -> Vec<f64> {
        s.entries()
            .iter()
            .flat_map(|e| f(e).iter().copied())
            .collect()
    };
    vec![
        (
            "direction",
            Value::F64s(dims.clone(), cat(|e| &e.direction)),
        ),
        ("resultant", Value::F64s(dims, cat(|e| &e.resultant))),
        (
            "count",
            Value::U64s(
                vec![s.len() as u64],
                s.entries().iter().map(|e| e.count).collect(),
            ),
        ),
    ]
}

fn orientation_from(f: &mut Fields) -> Result<OrientationStats> {
    let (dd, direction) = f.f64s("direction", 2)?;
    let (rd, resultant) = f.f64s("resultant", 2)?;
    let (cd, count) = f.u64s("count", 1)?;
    if dd != rd || cd[0] != dd[0] {
        return Err(Error::Format(format!(
            "orientation arrays disagree: direction {dd:?}, resultant {rd:?}, count {cd:?}"
        )));
    }
    let dim = dd[1];
    let entries = (0..dd[0])
        .map(|j| OrientationEntry {
            direction: direction[j * dim..(j + 1) * dim].to_vec(),
            resultant: resultant[j * dim..(j + 1) * dim].to_vec(),
            count: count[j],
        })
        .collect();
    OrientationStats::from_entries(dim, entries)
}

impl Checkpoint {
    /// Checks that the sections present fit together.
    pub fn validate(&self) -> Result<()> {
        if let Some(conv) = &self.conv {
            conv.validate()?;
        }
        if let (Some(conv), Some(enc)) = (&self.conv, &self.encoder) {
            let (h, w, c) = conv.geometry.code_dims()?;
            let s = enc.shape();
            if s.n_in * s.d_in != h * w * c {
                return Err(Error::Shape(format!(
                    "encoder expects {} capsules of dim {}, conv code is {h}x{w}x{c}",
                    s.n_in, s.d_in
                )));
            }
        }
        if let (Some(enc), Some(stats)) = (&self.encoder, &self.orientation) {
            let s = enc.shape();
            if (stats.len(), stats.dim()) != (s.n_out, s.d_out) {
                return Err(Error::Shape(format!(
                    "orientation stats are {}x{}, encoder has {} capsules of dim {}",
                    stats.len(),
                    stats.dim(),
                    s.n_out,
                    s.d_out
                )));
            }
        }
        if let (Some(enc), Some(dec)) = (&self.encoder, &self.decoder) {
            if dec.shape() != enc.shape().mirrored() {
                return Err(Error::Shape(format!(
                    "decoder {:?} does not mirror encoder {:?}",
                    dec.shape(),
                    enc.shape()
                )));
            }
        }
        Ok(())
    }

    /// Serializes the checkpoint; see `docs/FORMATS.md`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut sections: Vec<(&str, Entries)> = Vec::new();
        if let Some(c) = &self.conv {
            sections.push(("conv", conv_entries(c)));
        }
        if let Some(c) = &self.conv_config {
            sections.push(("conv_config", config_entries(c)));
        }
        if let Some(e) = &self.encoder {
            sections.push(("encoder", grid_entries("w", &e.w)));
        }
        if let Some(c) = &self.encoder_config {
            sections.push(("encoder_config", config_entries(c)));
        }
        if let Some(s) = &self.orientation {
            sections.push(("orientation", orientation_entries(s)));
        }
        if let Some(d) = &self.decoder {
            sections.push(("decoder", grid_entries("u", &d.u)));
        }
        if let Some(c) = &self.decoder_config {
            sections.push(("decoder_config", config_entries(c)));
        }
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, entries) in &sections {
            put_name(&mut out, name);
            let payload = encode_entries(entries);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.array::<4>()? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a POEC checkpoint (bad magic)".into()));
        }
        let version = cur.u32_le()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let n = cur.u32_le()?;
        let mut ck = Checkpoint::default();
        let mut seen = Vec::new();
        for _ in 0..n {
            let name = get_name(&mut cur)?;
            let section = SECTIONS
                .iter()
                .copied()
                .find(|s| *s == name)
                .ok_or_else(|| Error::Format(format!("unknown checkpoint section {name:?}")))?;
            if seen.contains(&section) {
                return Err(Error::Format(format!(
                    "duplicate checkpoint section {name:?}"
                )));
            }
            seen.push(section);
            let len = usize::try_from(cur.u64_le()?)
                .map_err(|_| Error::Format("section length overflow".into()))?;
            let mut f = Fields {
                section,
                map: decode_entries(cur.take(len)?)?,
            };
            match section {
                "conv" => ck.conv = Some(conv_from(&mut f)?),
                "conv_config" => ck.conv_config = Some(config_from(&mut f)?),
                "encoder" => {
                    ck.encoder = Some(EncoderModel {
                        w: grid_from(&mut f, "w")?,
                    })
                }
                "encoder_config" => ck.encoder_config = Some(config_from(&mut f)?),
                "orientation" => ck.orientation = Some(orientation_from(&mut f)?),
                "decoder" => {
                    ck.decoder = Some(DecoderModel {
                        u: grid_from(&mut f, "u")?,
                    })
                }
                _ => ck.decoder_config = Some(config_from(&mut f)?),
            }
            f.done()?;
        }
        cur.finish("checkpoint")?;
        ck.validate()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &ck.encode()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&read_file(path.as_ref())?)
}
