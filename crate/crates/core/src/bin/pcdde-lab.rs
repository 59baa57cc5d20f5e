use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde::de::DeserializeOwned;

use pcdde::experiments::{
    annuli::AnnuliConfig, fig1::Fig1Config, gradcheck::GradcheckConfig, load_config, map::MapConfig,
    population::PopulationConfig, Report,
};
use pcdde::train::TrainConfig;
use pcdde::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Gradcheck,
    Fig1,
    Annuli,
    Population,
    Map,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Fig1 => "fig1",
            Command::Annuli => "annuli",
            Command::Population => "population",
            Command::Map => "map",
        }
    }
}

/// Experiments with neural piecewise-constant delay differential equations.
#[derive(Debug, Parser)]
#[command(name = "pcdde-lab", version)]
struct Cli {
    command: Command,
    /// JSON config, or a manifest.json from an earlier run. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: out/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// gradcheck: number of random cases.
    #[arg(long)]
    cases: Option<usize>,
    /// gradcheck: drop the delay jumps from the adjoint (negative control).
    #[arg(long)]
    sabotage: bool,
    /// Training commands: optimiser steps per run.
    #[arg(long)]
    iterations: Option<usize>,
    /// Training commands: number of seeds.
    #[arg(long)]
    n_seeds: Option<usize>,
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> pcdde::Result<T> {
    match path {
        Some(p) => load_config(p, command),
        None => Ok(T::default()),
    }
}

fn training_overrides(cli: &Cli, train: &mut TrainConfig, n_seeds: &mut usize, seed: &mut u64) {
    if let Some(i) = cli.iterations {
        train.iterations = i;
    }
    if let Some(n) = cli.n_seeds {
        *n_seeds = n;
    }
    if let Some(s) = cli.seed {
        *seed = s;
    }
}

fn reject(cli: &Cli, flags: &[(&str, bool)]) -> pcdde::Result<()> {
    for (name, set) in flags {
        if *set {
            return Err(Error::Config(format!("--{name} does not apply to `{}`", cli.command.name())));
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> pcdde::Result<Report> {
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));
    let cfg_path = cli.config.as_deref();
    let name = cli.command.name();
    let train_flags = [("iterations", cli.iterations.is_some()), ("n-seeds", cli.n_seeds.is_some())];
    let grad_flags = [("cases", cli.cases.is_some()), ("sabotage", cli.sabotage)];
    match cli.command {
        Command::Gradcheck => {
            reject(cli, &train_flags)?;
            let mut cfg: GradcheckConfig = load(cfg_path, name)?;
            if let Some(c) = cli.cases {
                cfg.cases = c;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.sabotage |= cli.sabotage;
            let o = pcdde::experiments::gradcheck::run(&cfg, Some(&out))?;
            Ok(o.report)
        }
        Command::Fig1 => {
            reject(cli, &grad_flags)?;
            let mut cfg: Fig1Config = load(cfg_path, name)?;
            training_overrides(cli, &mut cfg.train, &mut cfg.n_seeds, &mut cfg.seed);
            Ok(pcdde::experiments::fig1::run(&cfg, Some(&out))?.report)
        }
        Command::Annuli => {
            reject(cli, &grad_flags)?;
            let mut cfg: AnnuliConfig = load(cfg_path, name)?;
            training_overrides(cli, &mut cfg.train, &mut cfg.n_seeds, &mut cfg.seed);
            Ok(pcdde::experiments::annuli::run(&cfg, Some(&out))?.report)
        }
        Command::Population => {
            reject(cli, &grad_flags)?;
            let mut cfg: PopulationConfig = load(cfg_path, name)?;
            training_overrides(cli, &mut cfg.train, &mut cfg.n_seeds, &mut cfg.seed);
            Ok(pcdde::experiments::population::run(&cfg, Some(&out))?.report)
        }
        Command::Map => {
            reject(cli, &grad_flags)?;
            reject(cli, &train_flags)?;
            reject(cli, &[("seed", cli.seed.is_some())])?;
            let cfg: MapConfig = load(cfg_path, name)?;
            Ok(pcdde::experiments::map::run(&cfg, Some(&out))?.report)
        }
    }
}

fn init_threads() -> pcdde::Result<()> {
    let Ok(v) = std::env::var("PCDDE_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("PCDDE_LAB_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(&cli));
    match result {
        Ok(report) => {
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ (Error::Config(_) | Error::Json(_))) => {
            eprintln!("pcdde-lab: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("pcdde-lab: {e}");
            ExitCode::from(1)
        }
    }
}
