//! End-to-end experiments behind the command-line runner: training runs,
//! robustness and step-size sweeps, evaluation, and run manifests.
//!
//! Every artifact is a deterministic function of the configuration and the
//! input files, so a manifest is enough to reproduce a run byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{msd_curve, solve_robust_minimizer, ConvergenceReport, SolverOptions, SweepRow};
use crate::attacks::{AttackKind, AttackSpec};
use crate::config::{GraphSpec, RunConfig};
use crate::data::Dataset;
use crate::diffusion::{adversarial_error, run_training, Evaluation, RoundTrace};
use crate::model::RobustLogistic;
use crate::topology::{build_combination_matrix, generate_random_graph, CombinationMatrix, Graph};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    /// SHA-256 over the canonical config and every input file.
    pub input_hash: String,
    /// SHA-256 of every artifact written next to the manifest.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::parse(path, format!("unsupported schema_version {}", m.schema_version)));
        }
        Ok(m)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn input_files(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut files = cfg.data.dataset_spec()?.input_files();
    if let GraphSpec::File(p) = &cfg.graph {
        files.push(p.clone());
    }
    Ok(files)
}

/// Content hash of the configuration and all input files.
pub fn input_hash(cfg: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(b"config\0");
    h.update(serde_json::to_vec(cfg)?);
    for path in input_files(cfg)? {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(b"\0file\0");
        h.update(path.to_string_lossy().as_bytes());
        h.update(b"\0");
        h.update((bytes.len() as u64).to_be_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

pub fn load_graph(cfg: &RunConfig) -> Result<Graph> {
    match &cfg.graph {
        GraphSpec::Random {
            num_agents,
            edge_probability,
            seed,
        } => generate_random_graph(*num_agents, *edge_probability, *seed),
        GraphSpec::File(p) => Graph::read(p),
    }
}

pub fn build_network(cfg: &RunConfig) -> Result<CombinationMatrix> {
    build_combination_matrix(&load_graph(cfg)?, cfg.combination)
}

/// Solves for the robust minimizer of the training risk.
pub fn oracle_minimizer(cfg: &RunConfig, train: &Dataset, eps: f64) -> Result<Vec<f64>> {
    let objective = RobustLogistic::new(eps, cfg.rho)?;
    solve_robust_minimizer(train, &objective, train.dim() + cfg.intercept as usize, &SolverOptions::default())
}

struct Output {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(self, command: &str, cfg: &RunConfig) -> Result<Manifest> {
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config: cfg.clone(),
            seed: cfg.seed,
            input_hash: input_hash(cfg)?,
            artifacts: self.artifacts,
        };
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Per-agent weights and the Perron-weighted network model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub eps: f64,
    pub rho: f64,
    pub intercept: bool,
    pub agents: Vec<Vec<f64>>,
    pub network: Vec<f64>,
    pub wstar: Option<Vec<f64>>,
}

impl ModelFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

pub fn train_csv(traces: &[RoundTrace]) -> String {
    let with_msd = traces.first().is_some_and(|t| t.msd_per_agent.is_some());
    let mut s = String::from("iter,avg_adv_error,avg_loss,disagreement");
    if with_msd {
        s.push_str(",msd");
    }
    s.push('\n');
    for t in traces {
        let err = t.adv_error.map(|e| e.to_string()).unwrap_or_default();
        let _ = write!(s, "{},{},{},{}", t.iteration, err, t.avg_loss(), t.disagreement);
        if let Some(m) = t.msd() {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub manifest: Manifest,
    pub traces: Vec<RoundTrace>,
    pub model: ModelFile,
}

/// Trains one network with `cfg.seed` and writes `train.csv`, `model.json`
/// and `manifest.json` to `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let a = build_network(cfg)?;
    let (train, test) = cfg.data.dataset_spec()?.load()?;
    let wstar = if cfg.track_msd { Some(oracle_minimizer(cfg, &train, cfg.eps)?) } else { None };
    let tc = cfg.train_config(cfg.mu, cfg.eps, cfg.seed);
    let eval = Evaluation {
        data: &test,
        attack: cfg.eval_attack(),
    };
    let run = run_training(&tc, &a, &train, wstar.as_deref(), Some(eval))?;
    let model = ModelFile {
        schema_version: SCHEMA_VERSION,
        eps: cfg.eps,
        rho: cfg.rho,
        intercept: cfg.intercept,
        agents: run.state.weights().to_rows(),
        network: run.state.centroid(a.perron()),
        wstar,
    };
    let mut o = Output::create(out)?;
    o.write("train.csv", train_csv(&run.traces).as_bytes())?;
    let mut model_json = serde_json::to_string_pretty(&model)?;
    model_json.push('\n');
    o.write("model.json", model_json.as_bytes())?;
    let manifest = o.finish("train", cfg)?;
    Ok(TrainSummary {
        manifest,
        traces: run.traces,
        model,
    })
}

/// Curves of the robustness sweep: the nonrobust model under FGM and the
/// robust model under FGM and DeepFool.
pub const SWEEP_CURVES: [(&str, AttackKind); 3] = [
    ("nonrobust", AttackKind::Fgm),
    ("robust", AttackKind::Fgm),
    ("robust", AttackKind::DeepFool),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

/// Trains the nonrobust (`ε = 0`) and robust (`ε = eps`) networks for one
/// seed and sweeps the budget grid. Errors are averaged over agents.
pub fn robustness_for_seed(
    cfg: &RunConfig,
    a: &CombinationMatrix,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<SeedSweep> {
    let nonrobust = run_training(&cfg.train_config(cfg.mu, 0.0, seed), a, train, None, None)?.state;
    let robust = run_training(&cfg.train_config(cfg.mu, cfg.eps, seed), a, train, None, None)?.state;
    let mut rows = Vec::new();
    for (name, kind) in SWEEP_CURVES {
        let state = if name == "robust" { &robust } else { &nonrobust };
        let attack = AttackSpec {
            kind,
            ..cfg.train_attack(0.0)
        };
        for &eps in &cfg.eps_grid {
            let spec = attack.with_epsilon(eps);
            let mut total = 0.0;
            for w in state.weights().iter_rows() {
                total += adversarial_error(w, test, &spec)?;
            }
            rows.push(SweepRow {
                model: name.to_string(),
                attack: kind,
                eps,
                error: total / state.num_agents() as f64,
            });
        }
    }
    Ok(SeedSweep { seed, rows })
}

/// Mean error per (model, attack, eps) cell across seeds.
pub fn average_sweeps(per_seed: &[SeedSweep]) -> Vec<SweepRow> {
    let Some(first) = per_seed.first() else {
        return Vec::new();
    };
    first
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| SweepRow {
            error: per_seed.iter().map(|s| s.rows[i].error).sum::<f64>() / per_seed.len() as f64,
            ..r.clone()
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("model,attack,eps,error\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.model, r.attack, r.eps, r.error);
    }
    s
}

fn seed_sweep_csv(per_seed: &[SeedSweep]) -> String {
    let mut s = String::from("seed,model,attack,eps,error\n");
    for ps in per_seed {
        for r in &ps.rows {
            let _ = writeln!(s, "{},{},{},{},{}", ps.seed, r.model, r.attack, r.eps, r.error);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepSummary {
    Robustness { rows: Vec<SweepRow>, per_seed: Vec<SeedSweep> },
    StepSize(Vec<ConvergenceReport>),
}

/// Step-size sweep: one MSD report per `μ`, all seeds, against the oracle.
pub fn convergence_reports(
    cfg: &RunConfig,
    a: &CombinationMatrix,
    train: &Dataset,
    wstar: &[f64],
) -> Result<Vec<ConvergenceReport>> {
    let cells: Vec<(f64, u64)> = cfg
        .mu_grid
        .iter()
        .flat_map(|&mu| cfg.seeds.iter().map(move |&s| (mu, s)))
        .collect();
    let runs: Vec<Vec<RoundTrace>> = cells
        .par_iter()
        .map(|&(mu, seed)| run_training(&cfg.train_config(mu, cfg.eps, seed), a, train, Some(wstar), None).map(|o| o.traces))
        .collect::<Result<_>>()?;
    let mut it = runs.into_iter();
    cfg.mu_grid
        .iter()
        .map(|&mu| {
            let seeded: Vec<(u64, Vec<RoundTrace>)> = cfg.seeds.iter().map(|&s| (s, it.next().unwrap_or_default())).collect();
            msd_curve(mu, &seeded, cfg.tail_fraction)
        })
        .collect()
}

/// Runs the robustness sweep, or the step-size sweep when `mu_grid` is set.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<SweepSummary> {
    cfg.validate()?;
    let a = build_network(cfg)?;
    let (train, test) = cfg.data.dataset_spec()?.load()?;
    let mut o = Output::create(out)?;
    let summary = if cfg.mu_grid.is_empty() {
        let per_seed: Vec<SeedSweep> = cfg
            .seeds
            .par_iter()
            .map(|&seed| robustness_for_seed(cfg, &a, &train, &test, seed))
            .collect::<Result<_>>()?;
        let rows = average_sweeps(&per_seed);
        o.write("sweep.csv", sweep_csv(&rows).as_bytes())?;
        o.write("sweep_seeds.csv", seed_sweep_csv(&per_seed).as_bytes())?;
        SweepSummary::Robustness { rows, per_seed }
    } else {
        let wstar = oracle_minimizer(cfg, &train, cfg.eps)?;
        let reports = convergence_reports(cfg, &a, &train, &wstar)?;
        let mut table = String::from("mu,steady_state_msd,tail_std\n");
        for r in &reports {
            let _ = writeln!(table, "{},{},{}", r.mu, r.steady_state_msd, r.tail_std);
            let mut json = serde_json::to_string_pretty(r)?;
            json.push('\n');
            o.write(&format!("convergence_mu_{}.json", r.mu), json.as_bytes())?;
        }
        o.write("convergence.csv", table.as_bytes())?;
        SweepSummary::StepSize(reports)
    };
    o.finish("sweep", cfg)?;
    Ok(summary)
}

/// Error of a saved network model on the configured test set for every
/// budget in `eps_grid`, under `cfg.attack`. Writes `eval.csv` if `out` is
/// given.
pub fn eval(cfg: &RunConfig, model_path: &Path, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let model = ModelFile::read(model_path)?;
    let (_, test) = cfg.data.dataset_spec()?.load()?;
    let attack = cfg.eval_attack();
    let rows = cfg
        .eps_grid
        .iter()
        .map(|&eps| {
            Ok(SweepRow {
                model: "network".to_string(),
                attack: attack.kind,
                eps,
                error: adversarial_error(&model.network, &test, &attack.with_epsilon(eps))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        let mut o = Output::create(dir)?;
        o.write("eval.csv", sweep_csv(&rows).as_bytes())?;
        o.finish("eval", cfg)?;
    }
    Ok(rows)
}
