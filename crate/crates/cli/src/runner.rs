//! Config loading and single-run execution with file outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use fedtier::orchestrator::{run_experiment_with, RunOutput};
use fedtier::{checkpoint, ExperimentConfig, MetricsReport, TieredPublicParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const METRICS_HEADER: &str = "epoch,strategy,group,metric,value";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "final_report.json";
pub const FAILURE_FILE: &str = "failure.json";

/// Parse and validate a TOML config. Unknown keys are rejected.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text)?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in {}", path.display()))
}

pub fn config_to_toml(config: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string(config)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// What is needed to reconstruct a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    /// SHA-256 of the config file, when the run came from one.
    pub config_digest: Option<String>,
    pub code_version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
}

/// Contents of `final_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub name: String,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub report: MetricsReport,
}

impl FinalReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// One run request: the resolved config plus where it came from.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub name: String,
    pub config: ExperimentConfig,
    pub config_digest: Option<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn metrics_lines(report: &MetricsReport) -> Vec<String> {
    report
        .rows()
        .into_iter()
        .map(|(group, metric, value)| {
            format!(
                "{},{},{group},{metric},{value}",
                report.epoch, report.strategy
            )
        })
        .collect()
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("checkpoint_epoch{epoch}.ftck"))
}

/// Run one experiment and write manifest, metrics, report and checkpoints
/// into `out`. On a mid-run failure, `failure.json` and the last good
/// parameters are dumped before the error is returned.
pub fn run(spec: &RunSpec, out: &Path) -> Result<RunOutput> {
    let config = &spec.config;
    config.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest {
        config: config.clone(),
        config_digest: spec.config_digest.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.run.seed,
        started_at: now(),
        finished_at: None,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(
        File::create(&metrics_path)
            .with_context(|| format!("writing {}", metrics_path.display()))?,
    );
    writeln!(metrics, "{METRICS_HEADER}")?;

    let mut last_good: Option<(usize, TieredPublicParams)> = None;
    let result = run_experiment_with(config, |report, params| {
        let io = |e: std::io::Error| fedtier::Error::Io {
            path: metrics_path.clone(),
            source: e,
        };
        for line in metrics_lines(report) {
            writeln!(metrics, "{line}").map_err(io)?;
        }
        metrics.flush().map_err(io)?;
        if config.output.checkpoint_epochs.contains(&report.epoch) {
            checkpoint::save(params, &checkpoint_path(out, report.epoch))?;
        }
        last_good = Some((report.epoch, params.clone()));
        Ok(())
    });
    drop(metrics);

    let output = match result {
        Ok(o) => o,
        Err(e) => {
            let last_epoch = last_good.as_ref().map(|(ep, _)| *ep);
            if let Some((_, params)) = &last_good {
                checkpoint::save(params, &out.join("failure_params.ftck"))?;
            }
            write_json(
                &out.join(FAILURE_FILE),
                &serde_json::json!({
                    "error": e.to_string(),
                    "last_good_epoch": last_epoch,
                    "failed_at": now(),
                }),
            )?;
            return Err(anyhow::Error::new(e).context(format!("run {} aborted", spec.name)));
        }
    };

    write_json(
        &out.join(REPORT_FILE),
        &FinalReport {
            name: spec.name.clone(),
            seed: config.run.seed,
            dataset_fingerprint: output.dataset_fingerprint.clone(),
            report: output.last().clone(),
        },
    )?;
    manifest.finished_at = Some(now());
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(parse_config_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse_config_str("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(format!("{e:#}").contains("learning_rate"), "{e:#}");
        assert!(parse_config_str("[nope]\n").is_err());
    }

    #[test]
    fn validation_runs_after_parsing() {
        let e = parse_config_str("[model]\nwidths = [16, 8, 32]\n").unwrap_err();
        assert!(format!("{e:#}").contains("tier widths must be strictly increasing"));
    }
}
