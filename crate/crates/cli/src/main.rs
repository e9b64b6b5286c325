use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hris_otfs::harness::{run_experiment, write_results, ExperimentConfig, OutputFormat, Scale};
use hris_otfs::oracle::run_suite;

#[derive(Parser)]
#[command(name = "hris-otfs", version, about = "HRIS-aided OTFS link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo sweep and write metrics plus meta.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated SNR points in dB.
        #[arg(long)]
        snr: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// desk or paper; replaces the defaults under the config file.
        #[arg(long)]
        scale: Option<Scale>,
        #[arg(long)]
        pattern: Option<String>,
        /// bpsk, 4qam or 16qam.
        #[arg(long = "mod")]
        modulation: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: OutputFormat,
    },
    /// Print pilot and guard overhead against an OFDM reference.
    Overhead {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cross-check the fast models against the brute-force references.
    Selftest,
}

fn load(path: &PathBuf, scale: Option<Scale>) -> hris_otfs::Result<ExperimentConfig> {
    let mut text = std::fs::read_to_string(path)?;
    if let Some(scale) = scale {
        text = text
            .lines()
            .filter(|l| l.split('#').next().and_then(|s| s.split_once('=')).is_none_or(|(k, _)| k.trim() != "scale"))
            .map(|l| format!("{l}\n"))
            .collect();
        text.push_str(&format!("scale = {scale}\n"));
    }
    ExperimentConfig::parse(&text)
}

fn execute(cli: Cli) -> hris_otfs::Result<bool> {
    match cli.command {
        Command::Run { config, snr, trials, seed, scale, pattern, modulation, out, format } => {
            let mut cfg = load(&config, scale)?;
            let overrides = [
                ("snr_list", snr),
                ("trials", trials.map(|t| t.to_string())),
                ("seed", seed.map(|s| s.to_string())),
                ("pattern", pattern),
                ("modulation", modulation),
            ];
            for (key, value) in overrides {
                if let Some(v) = value {
                    cfg.set(key, &v)?;
                }
            }
            cfg.validate()?;
            let rows = run_experiment(&cfg)?;
            let path = write_results(&out, &cfg, &rows, format)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(true)
        }
        Command::Overhead { config } => {
            let cfg = load(&config, None)?;
            let o = cfg.overhead()?;
            println!("pattern     {}", cfg.pattern);
            println!("otfs_cost   {}", o.otfs_cost);
            println!("ofdm_cost   {}", o.ofdm_cost);
            Ok(true)
        }
        Command::Selftest => {
            let checks = run_suite();
            for c in &checks {
                println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
