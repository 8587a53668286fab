use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedtier::config::SyntheticConfig;
use fedtier::dataset::synth_raw;
use fedtier::{ExperimentConfig, Strategy};
use fedtier_cli::runner::sha256_hex;
use fedtier_cli::{compare, parse_config_str, run, run_suite, FinalReport, RunSpec, Suite};

#[derive(Parser)]
#[command(
    name = "fedtier",
    version,
    about = "Federated recommender simulator with tiered model sizes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment or a sweep.
    Run {
        /// TOML config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Sweep: ablation, division, model-size or alpha.
        #[arg(long)]
        suite: Option<Suite>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare final_report.json files from runs on the same dataset.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic interaction file in TSV format.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 0.8)]
        skew: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_command(
    config: Option<PathBuf>,
    strategy: Option<Strategy>,
    seed: Option<u64>,
    epochs: Option<usize>,
    workers: Option<usize>,
    suite: Option<Suite>,
    out: PathBuf,
) -> Result<()> {
    let (mut cfg, digest) = match &config {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let text = String::from_utf8(bytes.clone())
                .with_context(|| format!("{} is not UTF-8", path.display()))?;
            let cfg = parse_config_str(&text).with_context(|| format!("in {}", path.display()))?;
            (cfg, Some(sha256_hex(&bytes)))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(s) = strategy {
        cfg.run.strategy = s;
    }
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(e) = epochs {
        cfg.run.epochs = e;
    }
    if let Some(w) = workers {
        cfg.run.workers = w;
    }
    cfg.validate()?;
    match suite {
        Some(suite) => {
            let table = run_suite(suite, &cfg, digest, &out)?;
            print!("{}", table.to_markdown());
        }
        None => {
            let spec = RunSpec {
                name: cfg.run.strategy.name().to_string(),
                config: cfg,
                config_digest: digest,
            };
            let output = run(&spec, &out)?;
            let last = output.last();
            println!(
                "{} epoch {}: recall@{k} {:.5} ndcg@{k} {:.5}",
                last.strategy,
                last.epoch,
                last.overall.recall,
                last.overall.ndcg,
                k = last.k
            );
        }
    }
    Ok(())
}

fn main_inner() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            strategy,
            seed,
            epochs,
            workers,
            suite,
            out,
        } => run_command(config, strategy, seed, epochs, workers, suite, out),
        Command::Compare { reports, csv } => {
            let loaded = reports
                .iter()
                .map(|p| FinalReport::load(p))
                .collect::<Result<Vec<_>>>()?;
            let table = compare(&loaded)?;
            print!("{}", table.to_markdown());
            if let Some(path) = csv {
                fs::write(&path, table.to_csv())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Synth {
            users,
            items,
            dim,
            skew,
            seed,
            out,
        } => {
            let spec = SyntheticConfig {
                num_users: users,
                num_items: items,
                latent_dim: dim,
                density_skew: skew,
            }
            .spec(seed);
            let raw = synth_raw(&spec)?;
            let file = File::create(&out).with_context(|| format!("writing {}", out.display()))?;
            raw.write_tsv(BufWriter::new(file))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
