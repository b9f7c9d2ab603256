//! Datasets: synthetic Gaussian classes, MNIST IDX files, CSV, and the
//! per-agent sample streams that feed the diffusion engine.

use std::ops::Deref;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{Label, LabeledSample};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A nonempty set of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self> {
        let dim = samples.first().ok_or(Error::EmptyDataset)?.dim();
        if let Some(s) = samples.iter().find(|s| s.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.dim(),
            });
        }
        Ok(Self { dim, samples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<LabeledSample> {
        self.samples
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }
}

impl Deref for Dataset {
    type Target = [LabeledSample];

    fn deref(&self) -> &[LabeledSample] {
        &self.samples
    }
}

/// Two Gaussian classes `x = γμ + σ·diag(s)·n` with `n ~ N(0, I)`.
///
/// `μ_i = s_i·m/√M` and `s_i = 1` except on the last `fragile_dims`
/// coordinates, where `s_i = fragile_scale`. Those coordinates carry the
/// same signal-to-noise ratio at a much smaller scale, so a standard
/// classifier leans on them heavily while a small `ℓ2` budget can erase
/// them. `fragile_dims = 0` gives isotropic classes with means `±m·1/√M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub separation: f64,
    pub noise_scale: f64,
    pub fragile_dims: usize,
    pub fragile_scale: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            separation: 1.5,
            noise_scale: 1.0,
            fragile_dims: 5,
            fragile_scale: 0.1,
            n_train: 2000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if self.fragile_dims > self.dim {
            return Err(Error::invalid("fragile_dims", "exceeds dim"));
        }
        if !(self.fragile_scale > 0.0 && self.noise_scale >= 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("synthetic", "scales must be positive and separation finite"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::invalid("synthetic", "train and test sizes must be positive"));
        }
        Ok(())
    }

    /// Per-coordinate scale `s_i`.
    pub fn scales(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| if i >= self.dim - self.fragile_dims { self.fragile_scale } else { 1.0 })
            .collect()
    }

    /// Class mean `μ` of the positive class.
    pub fn class_mean(&self) -> Vec<f64> {
        let m = self.separation / (self.dim as f64).sqrt();
        self.scales().iter().map(|s| s * m).collect()
    }
}

/// Seeded train/test draw from [`SyntheticSpec`].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Purpose::Data, 0);
    let scales = spec.scales();
    let mean = spec.class_mean();
    let mut draw = |n: usize| -> Result<Dataset> {
        let samples = (0..n)
            .map(|_| {
                let label = if rng.random::<bool>() { Label::Pos } else { Label::Neg };
                let g = label.sign();
                let x = mean
                    .iter()
                    .zip(&scales)
                    .map(|(mu, s)| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        g * mu + spec.noise_scale * s * n
                    })
                    .collect();
                LabeledSample::new(x, label)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    };
    let train = draw(spec.n_train)?;
    let test = draw(spec.n_test)?;
    Ok((train, test))
}

/// Raw images from an IDX file, one row-major byte vector per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(path, format!("truncated header: {} bytes", bytes.len())))
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::parse(path, format!("bad magic 0x{found:08x}, expected 0x{expected:08x}")))
    }
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(be_u32(bytes, 0, path)?, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let size = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * size {
        return Err(Error::parse(
            path,
            format!("truncated or oversized: expected {} pixel bytes, found {}", n * size, body.len()),
        ));
    }
    let images = if size == 0 { vec![Vec::new(); n] } else { body.chunks_exact(size).map(<[u8]>::to_vec).collect() };
    Ok(IdxImages { rows, cols, images })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(be_u32(bytes, 0, path)?, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::parse(
            path,
            format!("truncated or oversized: expected {n} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_bytes(path)?, path)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_bytes(path)?, path)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.images.len() * images.rows * images.cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    for img in &images.images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelScale {
    /// Raw byte values `0..=255`.
    Raw,
    /// Divided by 255.
    #[default]
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistOptions {
    /// Digit mapped to `−1`.
    pub negative_digit: u8,
    /// Digit mapped to `+1`.
    pub positive_digit: u8,
    pub pixel_scale: PixelScale,
}

impl Default for MnistOptions {
    fn default() -> Self {
        Self {
            negative_digit: 0,
            positive_digit: 1,
            pixel_scale: PixelScale::Unit,
        }
    }
}

/// Loads an IDX image/label pair, keeping the two configured digits.
pub fn load_mnist_idx(images: &Path, labels: &Path, opts: &MnistOptions) -> Result<Dataset> {
    let imgs = read_idx_images(images)?;
    let labs = read_idx_labels(labels)?;
    if imgs.images.len() != labs.len() {
        return Err(Error::parse(
            images,
            format!(
                "count mismatch: {} images but {} labels in {}",
                imgs.images.len(),
                labs.len(),
                labels.display()
            ),
        ));
    }
    let div = match opts.pixel_scale {
        PixelScale::Raw => 1.0,
        PixelScale::Unit => 255.0,
    };
    let samples = imgs
        .images
        .iter()
        .zip(&labs)
        .filter_map(|(img, &d)| {
            let label = match d {
                _ if d == opts.negative_digit => Label::Neg,
                _ if d == opts.positive_digit => Label::Pos,
                _ => return None,
            };
            Some(LabeledSample::new(img.iter().map(|&p| p as f64 / div).collect(), label))
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::parse(images, "no samples with the selected digits"));
    }
    Dataset::new(samples)
}

/// Loads `label,f1,...,fM` rows. Labels `-1`/`+1`/`1` map directly and `0`
/// maps to `−1`.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        let row = i + 1 + has_header as usize;
        let mut fields = record.iter();
        let label = match fields.next() {
            Some("1" | "+1" | "1.0") => Label::Pos,
            Some("-1" | "0" | "-1.0" | "0.0") => Label::Neg,
            other => return Err(Error::parse(path, format!("row {row}: bad label {other:?}"))),
        };
        let features = fields
            .map(|f| f.parse::<f64>().map_err(|_| Error::parse(path, format!("row {row}: bad feature `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(LabeledSample::new(features, label).map_err(|e| Error::parse(path, format!("row {row}: {e}")))?);
    }
    Dataset::new(samples).map_err(|e| Error::parse(path, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// Per-feature min-max scaling fitted on the training set.
    Scale01,
    /// Per-feature standardization fitted on the training set.
    UnitVariance,
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "scale_0_1" => Ok(Self::Scale01),
            "unit_variance" => Ok(Self::UnitVariance),
            other => Err(format!("unknown normalization `{other}` (none|scale_0_1|unit_variance)")),
        }
    }
}

/// Per-feature affine map `x ↦ (x − shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Normalizer {
    pub fn fit(data: &Dataset, mode: Normalization) -> Self {
        let m = data.dim();
        let n = data.len() as f64;
        let (shift, scale) = match mode {
            Normalization::None => (vec![0.0; m], vec![1.0; m]),
            Normalization::Scale01 => {
                let mut lo = vec![f64::INFINITY; m];
                let mut hi = vec![f64::NEG_INFINITY; m];
                for s in data.iter() {
                    for (j, &x) in s.features.iter().enumerate() {
                        lo[j] = lo[j].min(x);
                        hi[j] = hi[j].max(x);
                    }
                }
                let scale = lo.iter().zip(&hi).map(|(l, h)| if h > l { h - l } else { 1.0 }).collect();
                (lo, scale)
            }
            Normalization::UnitVariance => {
                let mut mean = vec![0.0; m];
                for s in data.iter() {
                    crate::linalg::axpy(1.0 / n, &s.features, &mut mean);
                }
                let mut var = vec![0.0; m];
                for s in data.iter() {
                    for (j, &x) in s.features.iter().enumerate() {
                        var[j] += (x - mean[j]).powi(2) / n;
                    }
                }
                let scale = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
                (mean, scale)
            }
        };
        Self { shift, scale }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let samples = data
            .iter()
            .map(|s| LabeledSample {
                features: s
                    .features
                    .iter()
                    .zip(self.shift.iter().zip(&self.scale))
                    .map(|(x, (a, b))| (x - a) / b)
                    .collect(),
                label: s.label,
            })
            .collect();
        Dataset {
            dim: data.dim,
            samples,
        }
    }
}

/// Seeded shuffle, then the first `fraction` of samples become the
/// training set.
pub fn train_test_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split", format!("{fraction} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let cut = ((data.len() as f64) * fraction).round() as usize;
    if cut == 0 || cut == data.len() {
        return Err(Error::invalid("split", "leaves an empty train or test set"));
    }
    let pick = |idx: &[usize]| Dataset::new(idx.iter().map(|&i| data.samples[i].clone()).collect());
    Ok((pick(&order[..cut])?, pick(&order[cut..])?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    MnistIdx {
        train_images: PathBuf,
        train_labels: PathBuf,
        /// When absent the training files are split.
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        options: MnistOptions,
    },
    Csv {
        path: PathBuf,
        has_header: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub normalization: Normalization,
    /// Train fraction when the source has no separate test set.
    pub split: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            normalization: Normalization::None,
            split: 0.8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Files read by this spec, for hashing.
    pub fn input_files(&self) -> Vec<PathBuf> {
        match &self.source {
            DataSource::Synthetic(_) => Vec::new(),
            DataSource::MnistIdx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => [Some(train_images), Some(train_labels), test_images.as_ref(), test_labels.as_ref()]
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
            DataSource::Csv { path, .. } => vec![path.clone()],
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.source {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::MnistIdx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                options,
            } => {
                let train = load_mnist_idx(train_images, train_labels, options)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => (train, load_mnist_idx(ti, tl, options)?),
                    _ => train_test_split(&train, self.split, self.seed)?,
                }
            }
            DataSource::Csv { path, has_header } => {
                train_test_split(&load_csv(path, *has_header)?, self.split, self.seed)?
            }
        };
        if train.dim() != test.dim() {
            return Err(Error::DimensionMismatch {
                expected: train.dim(),
                got: test.dim(),
            });
        }
        let norm = Normalizer::fit(&train, self.normalization);
        Ok((norm.apply(&train), norm.apply(&test)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Every agent draws uniformly with replacement from the whole set.
    #[default]
    IidShuffle,
    /// Agent `k` owns the samples with index `≡ k (mod K)` and draws
    /// uniformly with replacement from that shard.
    RoundRobin,
    /// Every agent sees the same draws.
    Shared,
}

impl std::str::FromStr for StreamMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iid" | "iid_shuffle" => Ok(Self::IidShuffle),
            "round_robin" => Ok(Self::RoundRobin),
            "shared" => Ok(Self::Shared),
            other => Err(format!("unknown stream mode `{other}` (iid|round_robin|shared)")),
        }
    }
}

/// Endless stream of sample indices for one agent.
#[derive(Debug, Clone)]
pub struct AgentStream {
    pool: Option<Vec<usize>>,
    len: usize,
    rng: rng::Rng,
}

impl AgentStream {
    pub fn next_index(&mut self) -> usize {
        let i = self.rng.random_range(0..self.len);
        match &self.pool {
            Some(pool) => pool[i],
            None => i,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.next_index()).collect()
    }

    /// Indices this stream can produce.
    pub fn support(&self) -> Vec<usize> {
        self.pool.clone().unwrap_or_else(|| (0..self.len).collect())
    }
}

/// One index stream per agent over a dataset of `n` samples.
pub fn partition_streams(n: usize, num_agents: usize, mode: StreamMode, seed: u64) -> Result<Vec<AgentStream>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if num_agents == 0 {
        return Err(Error::invalid("num_agents", "must be at least 1"));
    }
    if mode == StreamMode::RoundRobin && n < num_agents {
        return Err(Error::invalid("round_robin", format!("{n} samples cannot fill {num_agents} shards")));
    }
    Ok((0..num_agents)
        .map(|k| match mode {
            StreamMode::IidShuffle => AgentStream {
                pool: None,
                len: n,
                rng: rng::stream(seed, Purpose::Stream, k),
            },
            StreamMode::Shared => AgentStream {
                pool: None,
                len: n,
                rng: rng::stream(seed, Purpose::Stream, 0),
            },
            StreamMode::RoundRobin => {
                let shard: Vec<usize> = (k..n).step_by(num_agents).collect();
                AgentStream {
                    len: shard.len(),
                    pool: Some(shard),
                    rng: rng::stream(seed, Purpose::Stream, k),
                }
            }
        })
        .collect())
}
