use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;
use hhg_core::experiments::{self, Config};

/// Runs one experiment and writes its tables as CSV.
#[derive(Parser, Debug)]
#[command(name = "hhg-scale", version, about)]
struct Args {
    /// conv2d, conv3d_scalar, conv3d_tensor, eigen2d, repro3d, cost, cylinder or `stencil dump`;
    /// an optional leading `run` is ignored
    #[arg(required = true)]
    words: Vec<String>,
    /// File with key=value lines; command-line pairs override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for `<table>.csv`; without it the tables go to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: multigrid diverged");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<bool> {
    let args = Args::parse();
    let mut words = args.words.iter().map(String::as_str).peekable();
    if words.peek() == Some(&"run") {
        words.next();
    }
    let Some(name) = words.next() else { bail!("missing experiment name") };
    let mut pairs: Vec<&str> = words.collect();
    if name == "stencil" {
        if pairs.first() != Some(&"dump") {
            bail!("usage: hhg-scale stencil dump [key=value ...]");
        }
        pairs.remove(0);
    }
    let mut cfg = match &args.config {
        Some(p) => Config::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Config::default(),
    };
    for kv in pairs {
        cfg.set(kv)?;
    }
    let report = experiments::run(name, &cfg)?;
    match &args.out {
        Some(dir) => report.write_dir(dir)?,
        None => {
            let stdout = std::io::stdout();
            for (k, t) in report.tables.iter().enumerate() {
                if report.tables.len() > 1 {
                    if k > 0 {
                        println!();
                    }
                    println!("# {}", t.name);
                }
                t.write_csv(stdout.lock())?;
            }
        }
    }
    Ok(!report.diverged)
}
