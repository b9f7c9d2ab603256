//! `advdiff`: train, sweep, evaluate and self-check adversarial diffusion
//! networks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use advdiff_core::experiment::{self, Manifest, SweepSummary};
use advdiff_core::verify::{self, VerifyOptions};
use advdiff_core::RunConfig;

#[derive(Parser)]
#[command(name = "advdiff", version, about = "Adversarial diffusion learning over graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write train.csv, model.json and manifest.json.
    Train(RunArgs),
    /// Robustness sweep over eps_grid, or step-size sweep over --mu-grid.
    Sweep(RunArgs),
    /// Evaluate a saved model on the configured test set.
    Eval {
        /// model.json written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the self-check suites and print a pass/fail table.
    Verify {
        /// Reduced probe counts.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Reuse the configuration recorded in a run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    /// Training budget.
    #[arg(long)]
    eps: Option<String>,
    /// Evaluation budget (defaults to --eps).
    #[arg(long)]
    eval_eps: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated seeds for sweeps.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    log_stride: Option<String>,
    /// metropolis | uniform
    #[arg(long)]
    combination: Option<String>,
    /// exact | fgm | deepfool
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    overshoot: Option<String>,
    /// DeepFool iteration cap.
    #[arg(long)]
    max_iters: Option<String>,
    /// Edge-list file: first line K, then `u v` pairs (1-based).
    #[arg(long, conflicts_with = "graph_random")]
    graph_file: Option<String>,
    #[arg(long, num_args = 3, value_names = ["K", "P", "SEED"])]
    graph_random: Option<Vec<String>>,
    /// synthetic | mnist | csv
    #[arg(long)]
    data: Option<String>,
    /// Comma-separated budgets.
    #[arg(long)]
    eps_grid: Option<String>,
    /// Comma-separated step sizes.
    #[arg(long)]
    mu_grid: Option<String>,
    /// Log the distance to the robust minimizer.
    #[arg(long)]
    track_msd: bool,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    /// Defaults, then the config file or manifest, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.manifest) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(path)) => Manifest::read(path)?.config,
            (None, None) => RunConfig::default(),
        };
        let flags = [
            ("mu", &self.mu),
            ("iters", &self.iters),
            ("eps", &self.eps),
            ("eval_eps", &self.eval_eps),
            ("rho", &self.rho),
            ("batch", &self.batch),
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("log_stride", &self.log_stride),
            ("combination", &self.combination),
            ("attack", &self.attack),
            ("overshoot", &self.overshoot),
            ("max_iters", &self.max_iters),
            ("graph_file", &self.graph_file),
            ("data", &self.data),
            ("eps_grid", &self.eps_grid),
            ("mu_grid", &self.mu_grid),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(parts) = &self.graph_random {
            cfg.set("graph_random", &parts.join(" "))?;
        }
        if self.track_msd {
            cfg.track_msd = true;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = args.out_dir("runs/train");
            let s = experiment::train(&cfg, &out).context("training failed")?;
            if let Some(last) = s.traces.last() {
                let err = last.adv_error.map_or_else(|| "-".to_string(), |e| format!("{e:.4}"));
                println!(
                    "iter {}  adv_error {}  loss {:.4}  disagreement {:.3e}",
                    last.iteration,
                    err,
                    last.avg_loss(),
                    last.disagreement
                );
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Sweep(args) => {
            let cfg = args.resolve()?;
            let out = args.out_dir("runs/sweep");
            match experiment::sweep(&cfg, &out).context("sweep failed")? {
                SweepSummary::Robustness { rows, .. } => {
                    print!("{}", experiment::sweep_csv(&rows));
                }
                SweepSummary::StepSize(reports) => {
                    println!("mu,steady_state_msd,tail_std");
                    for r in &reports {
                        println!("{},{:.6e},{:.3e}", r.mu, r.steady_state_msd, r.tail_std);
                    }
                    for pair in reports.windows(2) {
                        println!("ratio mu={} / mu={}: {:.3}", pair[0].mu, pair[1].mu, pair[0].steady_state_msd / pair[1].steady_state_msd);
                    }
                }
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Eval { model, run } => {
            let cfg = run.resolve()?;
            let rows = experiment::eval(&cfg, &model, run.out.as_deref())?;
            print!("{}", experiment::sweep_csv(&rows));
            Ok(true)
        }
        Command::Verify { quick, seed } => {
            let opts = VerifyOptions {
                seed,
                ..if quick { VerifyOptions::quick() } else { VerifyOptions::full() }
            };
            let results = verify::run_all(&opts);
            print!("{}", verify::format_table(&results));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.suite.as_str()).collect();
            if failed.is_empty() {
                println!("all suites passed");
                Ok(true)
            } else {
                println!("failed suites: {}", failed.join(", "));
                Ok(false)
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
