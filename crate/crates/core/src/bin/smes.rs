use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smes_core::bench::{cmd_bench, cmd_generate, cmd_pathology, cmd_profile_workspace, cmd_train};
use smes_core::config::Config;
use smes_core::{Error, Result};

/// Sparse multi-task mixture-of-experts harness.
#[derive(Parser, Debug)]
#[command(name = "smes", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path (a directory for `train`)
    #[arg(long)]
    out: PathBuf,
    /// Overrides the `seed` key
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; overrides the `workers` key
    #[arg(long)]
    workers: Option<usize>,
    /// Extra key=value overrides, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic interaction log
    Generate(Common),
    /// Train a model on a log; writes model.ckpt and metrics.csv
    Train {
        #[command(flatten)]
        common: Common,
        /// Interaction log (TSV) to train on
        #[arg(long)]
        data: PathBuf,
    },
    /// Dense vs sparse cost sweep over the expert count
    Bench(Common),
    /// Union size and load skew of naive vs progressive routing
    Pathology(Common),
    /// Profile N_act, provision the workspace pool and replay
    ProfileWorkspace(Common),
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", seed.to_string());
    }
    if let Some(w) = common.workers {
        cfg.set("workers", w.to_string());
    }
    let workers: usize = cfg.get("workers", 0)?;
    if workers > 0 {
        // Ignore the error if a pool already exists; only the first call wins.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(c) => {
            let log = cmd_generate(&load_config(&c)?, &c.out)?;
            Ok(format!(
                "wrote {} records to {}",
                log.len(),
                c.out.display()
            ))
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            if !Path::new(&data).exists() {
                return Err(Error::io(
                    &data,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "data file not found"),
                ));
            }
            let log = cmd_train(&cfg, &data, &common.out)?;
            Ok(format!(
                "trained {} epochs into {}",
                log.len(),
                common.out.display()
            ))
        }
        Command::Bench(c) => {
            let rows = cmd_bench(&load_config(&c)?, &c.out)?;
            Ok(format!("wrote {} rows to {}", rows.len(), c.out.display()))
        }
        Command::Pathology(c) => {
            let rows = cmd_pathology(&load_config(&c)?, &c.out)?;
            Ok(format!("wrote {} rows to {}", rows.len(), c.out.display()))
        }
        Command::ProfileWorkspace(c) => {
            let rows = cmd_profile_workspace(&load_config(&c)?, &c.out)?;
            Ok(format!("wrote {} rows to {}", rows.len(), c.out.display()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let validation = e.is_validation()
                || matches!(
                    e,
                    Error::Workspace(smes_core::workspace::WorkspaceError::EmptyProfile)
                        | Error::Workspace(
                            smes_core::workspace::WorkspaceError::ProfileParse { .. }
                        )
                );
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
