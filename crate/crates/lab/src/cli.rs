//! The `ldar` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ldar_core::environ::{self, generate, AnswerOracle, Instance, RewardKind};
use ldar_core::eval::EvalOptions;
use ldar_core::strategies::StrategySpec;

use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{LabError, Result};
use crate::harness;
use crate::oracle::SubprocessOracle;
use crate::train::{self, TrainSpec};

#[derive(Debug, Parser)]
#[command(name = "ldar", version, about = "Learned banded retrieval: environments, training and evaluation")]
struct Cli {
    /// Seed for generation, training and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (gen, eval, compare) or run directory (train).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Judge selections with this program instead of the synthetic reward.
    #[arg(long, global = true)]
    oracle_cmd: Option<String>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        n_instances: Option<usize>,
    },
    /// Train a policy.
    Train {
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// `band` or `bernoulli`.
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        held_out: Option<usize>,
    },
    /// Evaluate one strategy.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// `top_<k>`, `lc`, `adaptive_k`, `ldar:<checkpoint>` or `bernoulli:<checkpoint>`.
        #[arg(long)]
        strategy: String,
        /// Act at distribution means instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
    /// Compare strategies and sweep top-k.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "top_1,top_5,top_10,top_25,lc,adaptive_k")]
        strategies: Vec<String>,
        /// k values for the sweep file.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
        #[arg(long)]
        greedy: bool,
    },
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    Ok(cfg)
}

fn spawn_oracle(cli: &Cli) -> Result<Option<SubprocessOracle>> {
    Ok(cli.oracle_cmd.as_deref().map(SubprocessOracle::spawn).transpose()?)
}

fn load_data(path: &Path, external: bool) -> Result<Vec<Instance>> {
    let mut data = load_dataset(path)?;
    if external {
        for inst in &mut data {
            inst.reward_model.kind = RewardKind::External;
        }
    }
    Ok(data)
}

fn as_dyn(o: &mut Option<SubprocessOracle>) -> Option<&mut dyn AnswerOracle> {
    o.as_mut().map(|o| o as &mut dyn AnswerOracle)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let mut oracle = spawn_oracle(&cli)?;
    let external = oracle.is_some();
    match &cli.command {
        Command::Gen { preset, n_instances } => {
            if preset.is_some() {
                cfg.preset = preset.clone();
            }
            if n_instances.is_some() {
                cfg.n_instances = *n_instances;
            }
            let out = cli.out.as_deref().ok_or_else(|| LabError::usage("gen needs --out <path>"))?;
            let data = generate(&cfg.generator()?)?;
            save_dataset(out, &data)?;
            if !cli.quiet {
                eprintln!("wrote {} instances to {}", data.len(), out.display());
            }
        }
        Command::Train { data, steps, head, held_out } => {
            if steps.is_some() {
                cfg.total_steps = *steps;
            }
            if head.is_some() {
                cfg.head = head.clone();
            }
            if held_out.is_some() {
                cfg.held_out = *held_out;
            }
            let mut all = match data {
                Some(p) => load_data(p, external)?,
                None => generate(&cfg.generator()?)?,
            };
            if external {
                for inst in &mut all {
                    inst.reward_model.kind = RewardKind::External;
                }
            }
            let h = cfg.held_out_for(all.len());
            let (train_set, test) = if h == 0 { (all, Vec::new()) } else { environ::split(all, h)? };
            let spec = TrainSpec {
                policy: cfg.policy()?,
                trainer: cfg.trainer()?,
                out_dir: cli.out.clone().unwrap_or_else(|| PathBuf::from("run")),
                greedy_eval: cfg.greedy.unwrap_or(false),
                quiet: cli.quiet,
            };
            let summary = train::train(&spec, &train_set, &test, as_dyn(&mut oracle))?;
            if !cli.quiet {
                eprintln!("wrote {}", summary.checkpoint.display());
            }
        }
        Command::Eval { data, strategy, greedy } => {
            let data = load_data(data, external)?;
            let spec = StrategySpec::parse(strategy)?;
            let opts = eval_options(&cfg, *greedy);
            let report = harness::evaluate_strategy(&spec, &data, &opts, as_dyn(&mut oracle))?;
            println!("{}", harness::render_table(std::slice::from_ref(&report)).trim_end());
            if let Some(out) = &cli.out {
                harness::write_rows_csv(out, &report)?;
            }
        }
        Command::Compare { data, strategies, sweep, greedy } => {
            let data = load_data(data, external)?;
            let specs = strategies.iter().map(|s| StrategySpec::parse(s)).collect::<ldar_core::Result<Vec<_>>>()?;
            let opts = eval_options(&cfg, *greedy);
            let reports = harness::compare(&specs, &data, &opts, as_dyn(&mut oracle))?;
            let table = harness::render_table(&reports);
            print!("{table}");
            if let Some(out) = &cli.out {
                let ks = harness::sweep_ks(&data, sweep.as_deref());
                let points = harness::sweep(&ks, &data, &opts, as_dyn(&mut oracle))?;
                harness::write_table_csv(out, &reports)?;
                let txt = out.with_extension("txt");
                std::fs::write(&txt, &table).map_err(|e| LabError::io(&txt, e))?;
                harness::write_sweep_csv(&sweep_path(out), &points)?;
            }
        }
    }
    Ok(())
}

fn eval_options(cfg: &RunConfig, greedy: bool) -> EvalOptions {
    EvalOptions { seed: cfg.seed.unwrap_or(0), greedy: greedy || cfg.greedy.unwrap_or(false), ..EvalOptions::default() }
}

/// `table.csv` → `table_sweep.csv`.
pub fn sweep_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_sweep.csv"))
}
