use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ofcl::config::ExperimentConfig;
use ofcl::runner::{emit_report, Simulation};
use ofcl::Error;

#[derive(Parser)]
#[command(name = "ofcl", version, about = "Online federated class-incremental learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Run client workers in parallel (same results as serial).
        #[arg(long)]
        parallel: bool,
    },
    /// Run every `*.toml` config in a directory; reports go to `<dir>/results/<name>`.
    Grid {
        config_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        parallel: bool,
    },
    /// Run an experiment and print each client's final replay memory as CSV.
    DumpMemory {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        client: Option<usize>,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig { .. } | Error::ConfigParse { .. } => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::from_file(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Config(e),
        other => Failure::from(other),
    })?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run_one(config: ExperimentConfig, out: &Path, force: bool, parallel: bool) -> Result<(), Failure> {
    let result = Simulation::new(config)?.with_parallel(parallel).run()?;
    emit_report(&result, out, force)?;
    println!(
        "A = {:.4}  F = {}  rounds = {}  ({:.2}s) -> {}",
        result.accuracy,
        result.forgetting.map_or("n/a".to_string(), |f| format!("{f:.4}")),
        result.rounds.len(),
        result.wall_clock_secs,
        out.display()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, seed, out, force, parallel } => {
            let cfg = load(&config, seed)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("ofcl-out"));
            run_one(cfg, &out, force, parallel)
        }
        Command::Grid { config_dir, seed, force, parallel } => {
            let mut configs: Vec<PathBuf> = fs::read_dir(&config_dir)
                .map_err(|e| Failure::Config(Error::Io {
                    context: "reading config dir",
                    path: config_dir.clone(),
                    source: e,
                }))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
                .collect();
            configs.sort();
            for path in configs {
                let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                println!("[{name}]");
                let cfg = load(&path, seed)?;
                run_one(cfg, &config_dir.join("results").join(name), force, parallel)?;
            }
            Ok(())
        }
        Command::DumpMemory { config, seed, client } => {
            let cfg = load(&config, seed)?;
            let clients = cfg.federation.clients;
            let mut sim = Simulation::new(cfg)?;
            sim.run()?;
            let stdout = std::io::stdout();
            for k in (0..clients).filter(|k| client.is_none_or(|c| c == *k)) {
                println!("# client {k}");
                sim.memory(k)
                    .expect("client index in range")
                    .write_csv(stdout.lock())
                    .map_err(|e| Failure::Runtime(Error::Io {
                        context: "writing memory dump",
                        path: PathBuf::from("<stdout>"),
                        source: e,
                    }))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
