//! Run configuration: flat `key = value` files, overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec};
use crate::data::{DataSource, DatasetSpec, MnistOptions, Normalization, PixelScale, StreamMode, SyntheticSpec};
use crate::diffusion::TrainConfig;
use crate::topology::CombinationRule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSpec {
    Random {
        num_agents: usize,
        edge_probability: f64,
        seed: u64,
    },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Mnist,
    Csv,
}

/// Data settings. Only the fields of the selected `kind` are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    pub dim: usize,
    pub separation: f64,
    pub noise_scale: f64,
    pub fragile_dims: usize,
    pub fragile_scale: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub normalization: Normalization,
    pub split: f64,
    pub mnist_train_images: Option<PathBuf>,
    pub mnist_train_labels: Option<PathBuf>,
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
    pub pixel_scale: PixelScale,
    pub csv_path: Option<PathBuf>,
    pub csv_header: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            kind: DataKind::Synthetic,
            dim: s.dim,
            separation: s.separation,
            noise_scale: s.noise_scale,
            fragile_dims: s.fragile_dims,
            fragile_scale: s.fragile_scale,
            n_train: s.n_train,
            n_test: s.n_test,
            data_seed: s.seed,
            normalization: Normalization::None,
            split: 0.8,
            mnist_train_images: None,
            mnist_train_labels: None,
            mnist_test_images: None,
            mnist_test_labels: None,
            pixel_scale: PixelScale::Unit,
            csv_path: None,
            csv_header: false,
        }
    }
}

impl DataConfig {
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let missing = |field: &str| Error::config(field, format!("required when data = {}", self.kind_name()));
        let source = match self.kind {
            DataKind::Synthetic => DataSource::Synthetic(SyntheticSpec {
                dim: self.dim,
                separation: self.separation,
                noise_scale: self.noise_scale,
                fragile_dims: self.fragile_dims,
                fragile_scale: self.fragile_scale,
                n_train: self.n_train,
                n_test: self.n_test,
                seed: self.data_seed,
            }),
            DataKind::Mnist => DataSource::MnistIdx {
                train_images: self.mnist_train_images.clone().ok_or_else(|| missing("mnist_train_images"))?,
                train_labels: self.mnist_train_labels.clone().ok_or_else(|| missing("mnist_train_labels"))?,
                test_images: self.mnist_test_images.clone(),
                test_labels: self.mnist_test_labels.clone(),
                options: MnistOptions {
                    pixel_scale: self.pixel_scale,
                    ..MnistOptions::default()
                },
            },
            DataKind::Csv => DataSource::Csv {
                path: self.csv_path.clone().ok_or_else(|| missing("csv_path"))?,
                has_header: self.csv_header,
            },
        };
        Ok(DatasetSpec {
            source,
            normalization: self.normalization,
            split: self.split,
            seed: self.data_seed,
        })
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            DataKind::Synthetic => "synthetic",
            DataKind::Mnist => "mnist",
            DataKind::Csv => "csv",
        }
    }
}

/// Every parameter of a run. Defaults describe the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mu: f64,
    pub iters: u64,
    pub batch: usize,
    pub log_stride: u64,
    pub seed: u64,
    /// Seeds for multi-run commands (`sweep`).
    pub seeds: Vec<u64>,
    pub rho: f64,
    /// Training budget `ε`.
    pub eps: f64,
    /// Attack used for evaluation.
    pub attack: AttackKind,
    /// Evaluation budget; defaults to `eps`.
    pub eval_eps: Option<f64>,
    pub overshoot: f64,
    pub max_iters: usize,
    pub intercept: bool,
    pub init_identical: bool,
    pub stream_mode: StreamMode,
    pub combination: CombinationRule,
    pub graph: GraphSpec,
    pub data: DataConfig,
    pub eps_grid: Vec<f64>,
    /// Non-empty turns `sweep` into a step-size sweep.
    pub mu_grid: Vec<f64>,
    pub tail_fraction: f64,
    /// Solve for the robust minimizer and log MSD.
    pub track_msd: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mu: 0.01,
            iters: 2000,
            batch: 1,
            log_stride: 10,
            seed: 0,
            seeds: (0..5).collect(),
            rho: 0.0,
            eps: 0.3,
            attack: AttackKind::Exact,
            eval_eps: None,
            overshoot: 0.02,
            max_iters: 50,
            intercept: false,
            init_identical: false,
            stream_mode: StreamMode::IidShuffle,
            combination: CombinationRule::Metropolis,
            graph: GraphSpec::Random {
                num_agents: 20,
                edge_probability: 0.2,
                seed: 7,
            },
            data: DataConfig::default(),
            eps_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            mu_grid: Vec::new(),
            tail_fraction: 0.2,
            track_msd: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_with<T, E: std::fmt::Display>(key: &str, value: &str, f: impl FnOnce(&str) -> std::result::Result<T, E>) -> Result<T> {
    f(value).map_err(|e| Error::config(key, e.to_string()))
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), "expected `key = value`"))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}", i + 1), e.to_string()))?;
        }
        Ok(())
    }

    /// Sets one field by its key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        match key {
            "mu" => self.mu = parse_num(key, value)?,
            "iters" => self.iters = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "log_stride" => self.log_stride = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "rho" => self.rho = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "attack" => self.attack = parse_with(key, value, str::parse::<AttackKind>)?,
            "eval_eps" => self.eval_eps = Some(parse_num(key, value)?),
            "overshoot" => self.overshoot = parse_num(key, value)?,
            "max_iters" => self.max_iters = parse_num(key, value)?,
            "intercept" => self.intercept = parse_bool(key, value)?,
            "init_identical" => self.init_identical = parse_bool(key, value)?,
            "stream_mode" => self.stream_mode = parse_with(key, value, str::parse::<StreamMode>)?,
            "combination" => self.combination = parse_with(key, value, str::parse::<CombinationRule>)?,
            "graph_random" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::config(key, "expected `K p seed`"));
                }
                self.graph = GraphSpec::Random {
                    num_agents: parse_num(key, parts[0])?,
                    edge_probability: parse_num(key, parts[1])?,
                    seed: parse_num(key, parts[2])?,
                };
            }
            "graph_file" => self.graph = GraphSpec::File(PathBuf::from(value)),
            "eps_grid" => self.eps_grid = parse_list(key, value)?,
            "mu_grid" => self.mu_grid = parse_list(key, value)?,
            "tail_fraction" => self.tail_fraction = parse_num(key, value)?,
            "track_msd" => self.track_msd = parse_bool(key, value)?,
            "data" => {
                d.kind = match value {
                    "synthetic" => DataKind::Synthetic,
                    "mnist" => DataKind::Mnist,
                    "csv" => DataKind::Csv,
                    _ => return Err(Error::config(key, format!("unknown source `{value}` (synthetic|mnist|csv)"))),
                }
            }
            "dim" => d.dim = parse_num(key, value)?,
            "separation" => d.separation = parse_num(key, value)?,
            "noise_scale" => d.noise_scale = parse_num(key, value)?,
            "fragile_dims" => d.fragile_dims = parse_num(key, value)?,
            "fragile_scale" => d.fragile_scale = parse_num(key, value)?,
            "n_train" => d.n_train = parse_num(key, value)?,
            "n_test" => d.n_test = parse_num(key, value)?,
            "data_seed" => d.data_seed = parse_num(key, value)?,
            "normalization" => d.normalization = parse_with(key, value, str::parse::<Normalization>)?,
            "split" => d.split = parse_num(key, value)?,
            "mnist_train_images" => d.mnist_train_images = Some(value.into()),
            "mnist_train_labels" => d.mnist_train_labels = Some(value.into()),
            "mnist_test_images" => d.mnist_test_images = Some(value.into()),
            "mnist_test_labels" => d.mnist_test_labels = Some(value.into()),
            "pixel_scale" => {
                d.pixel_scale = match value {
                    "unit" | "scale_0_1" => PixelScale::Unit,
                    "raw" => PixelScale::Raw,
                    _ => return Err(Error::config(key, format!("unknown pixel scale `{value}` (unit|raw)"))),
                }
            }
            "csv_path" => d.csv_path = Some(value.into()),
            "csv_header" => d.csv_header = parse_bool(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Checks every field; the first offending field is named in the error.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(field, reason));
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad("mu", format!("{} must be positive and finite", self.mu));
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1".into());
        }
        if self.log_stride == 0 {
            return bad("log_stride", "must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must list at least one seed".into());
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad("rho", format!("{} must be nonnegative and finite", self.rho));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad("eps", format!("{} must be nonnegative and finite", self.eps));
        }
        if let Some(e) = self.eval_eps {
            if !(e >= 0.0 && e.is_finite()) {
                return bad("eval_eps", format!("{e} must be nonnegative and finite"));
            }
        }
        if !(self.overshoot >= 0.0 && self.overshoot.is_finite()) {
            return bad("overshoot", format!("{} must be nonnegative and finite", self.overshoot));
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be at least 1".into());
        }
        match &self.graph {
            GraphSpec::Random {
                num_agents,
                edge_probability,
                ..
            } => {
                if *num_agents == 0 {
                    return bad("graph_random", "K must be at least 1".into());
                }
                if !(*edge_probability > 0.0 && *edge_probability <= 1.0) {
                    return bad("graph_random", format!("p = {edge_probability} not in (0, 1]"));
                }
            }
            GraphSpec::File(p) => {
                if p.as_os_str().is_empty() {
                    return bad("graph_file", "empty path".into());
                }
            }
        }
        if self.eps_grid.is_empty() {
            return bad("eps_grid", "must list at least one budget".into());
        }
        if self.eps_grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) || self.eps_grid.windows(2).any(|p| p[1] < p[0]) {
            return bad("eps_grid", "budgets must be nonnegative and ascending".into());
        }
        if self.mu_grid.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return bad("mu_grid", "step sizes must be positive".into());
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return bad("tail_fraction", format!("{} not in (0, 1]", self.tail_fraction));
        }
        let d = &self.data;
        if !(d.split > 0.0 && d.split < 1.0) {
            return bad("split", format!("{} not in (0, 1)", d.split));
        }
        if d.kind == DataKind::Synthetic {
            if d.dim == 0 {
                return bad("dim", "must be at least 1".into());
            }
            if d.fragile_dims > d.dim {
                return bad("fragile_dims", format!("{} exceeds dim {}", d.fragile_dims, d.dim));
            }
            if !(d.fragile_scale > 0.0 && d.fragile_scale.is_finite()) {
                return bad("fragile_scale", "must be positive".into());
            }
            if !(d.noise_scale >= 0.0 && d.noise_scale.is_finite()) {
                return bad("noise_scale", "must be nonnegative".into());
            }
            if !d.separation.is_finite() {
                return bad("separation", "must be finite".into());
            }
            if d.n_train == 0 {
                return bad("n_train", "must be at least 1".into());
            }
            if d.n_test == 0 {
                return bad("n_test", "must be at least 1".into());
            }
        }
        d.dataset_spec()?;
        Ok(())
    }

    pub fn num_agents_hint(&self) -> Option<usize> {
        match self.graph {
            GraphSpec::Random { num_agents, .. } => Some(num_agents),
            GraphSpec::File(_) => None,
        }
    }

    /// Training attack: the exact maximizer at budget `eps`.
    pub fn train_attack(&self, eps: f64) -> AttackSpec {
        AttackSpec {
            kind: AttackKind::Exact,
            epsilon: eps,
            deepfool_overshoot: self.overshoot,
            deepfool_max_iters: self.max_iters,
        }
    }

    pub fn eval_attack(&self) -> AttackSpec {
        AttackSpec {
            kind: self.attack,
            epsilon: self.eval_eps.unwrap_or(self.eps),
            deepfool_overshoot: self.overshoot,
            deepfool_max_iters: self.max_iters,
        }
    }

    pub fn train_config(&self, mu: f64, eps: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            mu,
            iters: self.iters,
            batch: self.batch,
            log_stride: self.log_stride,
            seed,
            rho: self.rho,
            attack: self.train_attack(eps),
            intercept: self.intercept,
            init_identical: self.init_identical,
            stream_mode: self.stream_mode,
            record_noise: false,
        }
    }
}
