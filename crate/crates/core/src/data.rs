//! Paired high/low-resolution datasets.
//!
//! Low-resolution views are always derived from the high-resolution image by
//! bilinear resampling with half-pixel-aligned sample centers: output pixel
//! `o` reads input coordinate `(o + 0.5)·scale − 0.5`, clamped to the image.
//!
//! On disk a split is a directory of 16-bit PNG files (one subdirectory per
//! class) plus a `manifest.txt`:
//!
//! ```text
//! format: crrcd-dataset v1
//! split: train
//! classes: 10
//! channels: 1
//! hires: 32
//! lowres: 8
//! factor: 4
//! degradation: bilinear
//! student_input: native
//! seed: 5
//! samples: 1000
//! checksum: <sha256 of the file table below>
//! files:
//! <sample_id> <label> <relative path> <sha256 of file>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

/// `C×H×W` image with values in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "image buffer holds {} values, expected {channels}×{height}×{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub x_h: Image,
    pub x_l: Image,
    pub label: usize,
    pub sample_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMethod {
    #[default]
    Bilinear,
}

/// How a student consumes low-resolution images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInput {
    /// Raw low-resolution pixels.
    #[default]
    Native,
    /// Bilinear upsampling back to the teacher resolution.
    BilinearUpsample,
}

impl StudentInput {
    pub fn as_str(self) -> &'static str {
        match self {
            StudentInput::Native => "native",
            StudentInput::BilinearUpsample => "bilinear_upsample",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "native" => Some(StudentInput::Native),
            "bilinear_upsample" => Some(StudentInput::BilinearUpsample),
            _ => None,
        }
    }
}

fn axis_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling to `out_h × out_w` with half-pixel-aligned centers.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let ys = axis_taps(out_h, img.height);
    let xs = axis_taps(out_w, img.width);
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image { channels: img.channels, height: out_h, width: out_w, data }
}

/// Downsamples by an integer factor.
pub fn degrade(x_h: &Image, factor: usize, method: DegradeMethod) -> Result<Image> {
    if factor == 0 || x_h.height % factor != 0 || x_h.width % factor != 0 {
        return Err(Error::contract(format!(
            "{}×{} image is not divisible by factor {factor}",
            x_h.height, x_h.width
        )));
    }
    match method {
        DegradeMethod::Bilinear => Ok(resize_bilinear(x_h, x_h.height / factor, x_h.width / factor)),
    }
}

/// Prepares a low-resolution image for a student network.
pub fn restore_for_student(x_l: &Image, target: (usize, usize), mode: StudentInput) -> Image {
    match mode {
        StudentInput::Native => x_l.clone(),
        StudentInput::BilinearUpsample => resize_bilinear(x_l, target.0, target.1),
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Class-conditional pattern generator. Each class owns a prototype built
/// from smooth blobs plus a fine oriented texture; samples jitter, rescale
/// and add pixel noise to the prototype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub hires: usize,
    pub factor: usize,
    pub channels: usize,
    pub blobs: usize,
    /// Amplitude of the fine texture (largely removed by downsampling).
    pub detail: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Maximum translation in high-resolution pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, hires: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            hires,
            factor: 4,
            channels: 1,
            blobs: 3,
            detail: 0.15,
            noise: 0.3,
            jitter: 2.0,
            seed,
        }
    }

    pub fn lowres(&self) -> usize {
        self.hires / self.factor
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
    channel_gain: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Prototype {
    blobs: Vec<Blob>,
    freq: (f64, f64),
    phase: f64,
}

impl Prototype {
    fn sample(&self, spec: &SyntheticSpec, c: usize, y: f64, x: f64) -> f64 {
        let mut v = 0.0;
        for b in &self.blobs {
            let d2 = (y - b.cy).powi(2) + (x - b.cx).powi(2);
            v += b.amp * b.channel_gain[c] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        let h = spec.hires as f64;
        let t = 2.0 * std::f64::consts::PI * (self.freq.0 * y + self.freq.1 * x) / h + self.phase;
        v + spec.detail * t.sin()
    }
}

fn prototypes(spec: &SyntheticSpec) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = spec.hires as f64;
    (0..spec.classes)
        .map(|_| {
            let blobs = (0..spec.blobs)
                .map(|_| {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    Blob {
                        cy: rng.random_range(0.2 * h..0.8 * h),
                        cx: rng.random_range(0.2 * h..0.8 * h),
                        sigma: rng.random_range(0.08 * h..0.18 * h),
                        amp: sign * rng.random_range(0.2..0.4),
                        channel_gain: (0..spec.channels).map(|_| rng.random_range(0.6..1.0)).collect(),
                    }
                })
                .collect();
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let cycles = rng.random_range(0.25 * h..0.375 * h);
            Prototype {
                blobs,
                freq: (cycles * angle.sin(), cycles * angle.cos()),
                phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
            }
        })
        .collect()
}

/// Which half of the synthetic corpus to draw. Both share class prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Deterministic synthetic corpus, class-major order.
pub fn make_synthetic_split(spec: &SyntheticSpec, split: Split) -> Result<Vec<PairedSample>> {
    if spec.classes < 2 || spec.per_class == 0 {
        return Err(Error::contract("synthetic corpus needs ≥ 2 classes and ≥ 1 sample per class"));
    }
    if spec.channels == 0 || spec.factor == 0 || spec.hires % spec.factor != 0 {
        return Err(Error::contract("synthetic corpus needs channels ≥ 1 and hires divisible by factor"));
    }
    let protos = prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;
    let n = spec.hires;
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for (label, proto) in protos.iter().enumerate() {
        for _ in 0..spec.per_class {
            let dy = rng.random_range(-spec.jitter..=spec.jitter);
            let dx = rng.random_range(-spec.jitter..=spec.jitter);
            let gain = rng.random_range(0.8..1.2);
            let mut data = Vec::with_capacity(spec.channels * n * n);
            for c in 0..spec.channels {
                for y in 0..n {
                    for x in 0..n {
                        let v = 0.5 + gain * proto.sample(spec, c, y as f64 - dy, x as f64 - dx);
                        data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                    }
                }
            }
            let x_h = Image { channels: spec.channels, height: n, width: n, data };
            let x_l = degrade(&x_h, spec.factor, DegradeMethod::Bilinear)?;
            let sample_id = out.len();
            out.push(PairedSample { x_h, x_l, label, sample_id });
        }
    }
    Ok(out)
}

/// Training split of the synthetic corpus.
pub fn make_synthetic(classes: usize, per_class: usize, hires: usize, seed: u64) -> Result<Vec<PairedSample>> {
    make_synthetic_split(&SyntheticSpec::new(classes, per_class, hires, seed), Split::Train)
}

/// Train and test datasets of the synthetic corpus; `spec.per_class` sizes
/// the training split.
pub fn synthetic_datasets(spec: &SyntheticSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    let train = Dataset::new("train", spec.classes, spec.factor, make_synthetic_split(spec, Split::Train)?)?;
    let test_spec = SyntheticSpec { per_class: test_per_class, ..*spec };
    let test = Dataset::new("test", spec.classes, spec.factor, make_synthetic_split(&test_spec, Split::Test)?)?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// CIFAR-style binary batches
// ---------------------------------------------------------------------------

/// Layout of a CIFAR-style binary batch: fixed-size records of
/// `label_bytes` label bytes (the last one is used) followed by a
/// channel-major `channels × side × side` u8 image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryLayout {
    pub label_bytes: usize,
    pub channels: usize,
    pub side: usize,
}

impl BinaryLayout {
    /// CIFAR-10: one label byte, 3×32×32.
    pub const CIFAR10: Self = Self { label_bytes: 1, channels: 3, side: 32 };
    /// CIFAR-100: coarse and fine label bytes, 3×32×32.
    pub const CIFAR100: Self = Self { label_bytes: 2, channels: 3, side: 32 };

    pub fn record_len(&self) -> usize {
        self.label_bytes + self.channels * self.side * self.side
    }
}

/// Paired samples from the bytes of one or more concatenated batches.
/// Sample ids continue from `first_id`.
pub fn parse_binary_batch(bytes: &[u8], layout: BinaryLayout, factor: usize, first_id: usize) -> Result<Vec<PairedSample>> {
    let len = layout.record_len();
    if layout.label_bytes == 0 || layout.channels == 0 || layout.side == 0 {
        return Err(Error::contract("binary layout needs a label byte and a nonempty image"));
    }
    if bytes.len() % len != 0 {
        return Err(Error::contract(format!("{} bytes is not a whole number of {len}-byte records", bytes.len())));
    }
    bytes
        .chunks_exact(len)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[layout.label_bytes - 1] as usize;
            let data = rec[layout.label_bytes..].iter().map(|&b| b as f64 / 255.0).collect();
            let x_h = Image::new(layout.channels, layout.side, layout.side, data)?;
            let x_l = degrade(&x_h, factor, DegradeMethod::Bilinear)?;
            Ok(PairedSample { x_h, x_l, label, sample_id: first_id + i })
        })
        .collect()
}

/// Reads binary batch files in order into one split. `classes` is the
/// label range (10 for CIFAR-10, 100 for CIFAR-100 fine labels).
pub fn import_binary_batches(
    split: &str,
    files: &[PathBuf],
    layout: BinaryLayout,
    classes: usize,
    factor: usize,
) -> Result<Dataset> {
    let mut samples = Vec::new();
    for f in files {
        let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
        samples.extend(parse_binary_batch(&bytes, layout, factor, samples.len())?);
    }
    Dataset::new(split, classes, factor, samples)
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub classes: usize,
    pub channels: usize,
    pub hires: usize,
    pub lowres: usize,
    pub factor: usize,
    pub degradation: DegradeMethod,
    pub student_input: StudentInput,
    pub seed: u64,
    pub checksum: String,
    /// `(sample_id, label, relative path, sha256)`.
    pub files: Vec<(usize, usize, String, String)>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: String,
    pub classes: usize,
    pub factor: usize,
    pub student_input: StudentInput,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn new(split: &str, classes: usize, factor: usize, samples: Vec<PairedSample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= classes) {
            return Err(Error::contract(format!("sample {} has label {} ≥ {classes}", s.sample_id, s.label)));
        }
        if let Some(first) = samples.first() {
            let (c, h, w) = (first.x_h.channels, first.x_h.height, first.x_h.width);
            if samples.iter().any(|s| (s.x_h.channels, s.x_h.height, s.x_h.width) != (c, h, w)) {
                return Err(Error::contract("samples differ in image shape"));
            }
        }
        Ok(Self { split: split.to_string(), classes, factor, student_input: StudentInput::Native, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.sample_id).collect()
    }

    pub fn hires_shape(&self) -> (usize, usize, usize) {
        self.samples.first().map(|s| (s.x_h.channels, s.x_h.height, s.x_h.width)).unwrap_or((0, 0, 0))
    }

    /// Row-per-sample high-resolution pixels.
    pub fn teacher_matrix(&self) -> Matrix {
        rows(self.samples.iter().map(|s| &s.x_h.data))
    }

    /// Row-per-sample student inputs under `mode`.
    pub fn student_matrix(&self, mode: StudentInput) -> Matrix {
        let (_, h, w) = self.hires_shape();
        let imgs: Vec<Image> = self.samples.iter().map(|s| restore_for_student(&s.x_l, (h, w), mode)).collect();
        rows(imgs.iter().map(|i| &i.data))
    }

    pub fn student_input_dim(&self, mode: StudentInput) -> usize {
        let (c, h, w) = self.hires_shape();
        match mode {
            StudentInput::Native => c * (h / self.factor.max(1)) * (w / self.factor.max(1)),
            StudentInput::BilinearUpsample => c * h * w,
        }
    }

    /// Position of a sample id.
    pub fn position(&self, sample_id: usize) -> Option<usize> {
        self.samples.iter().position(|s| s.sample_id == sample_id)
    }
}

fn rows<'a>(it: impl Iterator<Item = &'a Vec<f64>>) -> Matrix {
    let data: Vec<&Vec<f64>> = it.collect();
    let d = data.first().map(|v| v.len()).unwrap_or(0);
    let flat: Vec<f64> = data.iter().flat_map(|v| v.iter().copied()).collect();
    Matrix::from_shape_vec((data.len(), d), flat).expect("uniform rows")
}

const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "crrcd-dataset v1";

fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::contract(format!("cannot store {c}-channel images"))),
    };
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| Error::Serde(e.to_string()))?;
        let plane = img.height * img.width;
        let mut raw = Vec::with_capacity(img.len() * 2);
        for p in 0..plane {
            for c in 0..img.channels {
                let q = (img.data[c * plane + p].clamp(0.0, 1.0) * 65535.0).round() as u16;
                raw.extend_from_slice(&q.to_be_bytes());
            }
        }
        writer.write_image_data(&raw).map_err(|e| Error::Serde(e.to_string()))?;
    }
    Ok(bytes)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |m: String| Error::Parse { path: path.display().to_string(), line: 0, message: m };
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Sixteen {
        return Err(bad("expected 16-bit samples".into()));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let plane = h * w;
    let mut data = vec![0.0; channels * plane];
    for p in 0..plane {
        for c in 0..channels {
            let o = (p * channels + c) * 2;
            data[c * plane + p] = u16::from_be_bytes([buf[o], buf[o + 1]]) as f64 / 65535.0;
        }
    }
    Image::new(channels, h, w, data)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_table(files: &[(usize, usize, String, String)]) -> String {
    let mut s = String::new();
    for (id, label, path, hash) in files {
        let _ = writeln!(s, "{id} {label} {path} {hash}");
    }
    s
}

impl DatasetManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format: {FORMAT}");
        let _ = writeln!(s, "split: {}", self.split);
        let _ = writeln!(s, "classes: {}", self.classes);
        let _ = writeln!(s, "channels: {}", self.channels);
        let _ = writeln!(s, "hires: {}", self.hires);
        let _ = writeln!(s, "lowres: {}", self.lowres);
        let _ = writeln!(s, "factor: {}", self.factor);
        let _ = writeln!(s, "degradation: bilinear");
        let _ = writeln!(s, "student_input: {}", self.student_input.as_str());
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "samples: {}", self.files.len());
        let _ = writeln!(s, "checksum: {}", self.checksum);
        s.push_str("files:\n");
        s.push_str(&file_table(&self.files));
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, m: &str| Error::Parse { path: path.display().to_string(), line, message: m.to_string() };
        let mut kv = std::collections::HashMap::new();
        let mut files = Vec::new();
        let mut in_files = false;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if in_files {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(err(ln, "file entry needs `<id> <label> <path> <sha256>`"));
                }
                let id = parts[0].parse().map_err(|_| err(ln, "bad sample id"))?;
                let label = parts[1].parse().map_err(|_| err(ln, "bad label"))?;
                files.push((id, label, parts[2].to_string(), parts[3].to_string()));
            } else if line.trim() == "files:" {
                in_files = true;
            } else {
                let (k, v) = line.split_once(':').ok_or_else(|| err(ln, "expected `key: value`"))?;
                kv.insert(k.trim().to_string(), (ln, v.trim().to_string()));
            }
        }
        let get = |k: &str| kv.get(k).map(|(_, v)| v.as_str()).ok_or_else(|| err(0, &format!("missing key `{k}`")));
        let num = |k: &str| -> Result<usize> {
            let (ln, v) = kv.get(k).ok_or_else(|| err(0, &format!("missing key `{k}`")))?;
            v.parse().map_err(|_| err(*ln, &format!("`{k}` must be an integer")))
        };
        if get("format")? != FORMAT {
            return Err(err(1, "unsupported dataset format"));
        }
        if get("degradation")? != "bilinear" {
            return Err(err(0, "unsupported degradation"));
        }
        let student_input = StudentInput::parse(get("student_input")?).ok_or_else(|| err(0, "bad student_input"))?;
        let m = Self {
            split: get("split")?.to_string(),
            classes: num("classes")?,
            channels: num("channels")?,
            hires: num("hires")?,
            lowres: num("lowres")?,
            factor: num("factor")?,
            degradation: DegradeMethod::Bilinear,
            student_input,
            seed: num("seed")? as u64,
            checksum: get("checksum")?.to_string(),
            files,
        };
        if num("samples")? != m.files.len() {
            return Err(err(0, "sample count does not match file table"));
        }
        if m.files.iter().any(|f| f.1 >= m.classes) {
            return Err(err(0, "label out of range for class count"));
        }
        Ok(m)
    }
}

/// Writes a split to `dir`, returning its manifest.
pub fn write_dataset(dir: &Path, dataset: &Dataset, seed: u64) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (channels, hires, _) = dataset.hires_shape();
    let mut files = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let rel = format!("class_{:03}/{:06}.png", s.label, s.sample_id);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = encode_png(&s.x_h)?;
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push((s.sample_id, s.label, rel, sha256_hex(&bytes)));
    }
    let manifest = DatasetManifest {
        split: dataset.split.clone(),
        classes: dataset.classes,
        channels,
        hires,
        lowres: hires / dataset.factor.max(1),
        factor: dataset.factor,
        degradation: DegradeMethod::Bilinear,
        student_input: dataset.student_input,
        seed,
        checksum: sha256_hex(file_table(&files).as_bytes()),
        files,
    };
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest.render()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    DatasetManifest::parse(&text, &mpath)
}

/// Loads a split written by [`write_dataset`], verifying every checksum.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if sha256_hex(file_table(&manifest.files).as_bytes()) != manifest.checksum {
        return Err(Error::Checksum(dir.join(MANIFEST).display().to_string()));
    }
    let mut samples = Vec::with_capacity(manifest.files.len());
    for (id, label, rel, hash) in &manifest.files {
        let path: PathBuf = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if &sha256_hex(&bytes) != hash {
            return Err(Error::Checksum(path.display().to_string()));
        }
        let x_h = decode_png(&bytes, &path)?;
        if x_h.height != manifest.hires || x_h.width != manifest.hires || x_h.channels != manifest.channels {
            return Err(Error::contract(format!("{} does not match manifest geometry", path.display())));
        }
        let x_l = degrade(&x_h, manifest.factor, manifest.degradation)?;
        samples.push(PairedSample { x_h, x_l, label: *label, sample_id: *id });
    }
    let mut ds = Dataset::new(&manifest.split, manifest.classes, manifest.factor, samples)?;
    ds.student_input = manifest.student_input;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Verification pairs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub id_a: usize,
    pub id_b: usize,
    pub same: bool,
}

/// Parses `id_a id_b {0,1}` lines. Blank lines are skipped; duplicates are
/// kept in file order.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::Parse { path: origin.to_string(), line: i + 1, message: m.to_string() };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(err("expected `id_a id_b {0,1}`"));
        }
        let id_a = parts[0].parse().map_err(|_| err("bad id_a"))?;
        let id_b = parts[1].parse().map_err(|_| err("bad id_b"))?;
        let same = match parts[2] {
            "1" => true,
            "0" => false,
            _ => return Err(err("same flag must be 0 or 1")),
        };
        out.push(Pair { id_a, id_b, same });
    }
    Ok(out)
}

pub fn load_pairs_protocol(path: &Path) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

pub fn render_pairs(pairs: &[Pair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{} {} {}", p.id_a, p.id_b, u8::from(p.same));
    }
    s
}

/// Balanced same/different pairs over a labelled split.
pub fn make_pairs(labels: &[(usize, usize)], count: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut out = Vec::with_capacity(count);
    if labels.len() < 2 {
        return out;
    }
    let mut attempts = 0usize;
    while out.len() < count && attempts < count * 1000 {
        attempts += 1;
        let want_same = out.len() % 2 == 0;
        let a = labels[rng.random_range(0..labels.len())];
        let b = labels[rng.random_range(0..labels.len())];
        if a.0 == b.0 || (a.1 == b.1) != want_same {
            continue;
        }
        out.push(Pair { id_a: a.0, id_b: b.0, same: want_same });
    }
    out
}
