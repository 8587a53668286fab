//! Parameter sweeps built on a base config.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use fedtier::{ExperimentConfig, Strategy};

use crate::compare::{compare, Comparison};
use crate::runner::{run, FinalReport, RunSpec, REPORT_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Remove distillation, decorrelation and dual-task learning in turn.
    Ablation,
    /// Vary the small:medium:large population ratio.
    Division,
    /// Vary the three tier widths.
    ModelSize,
    /// Vary the decorrelation weight.
    Alpha,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Ablation,
        Suite::Division,
        Suite::ModelSize,
        Suite::Alpha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ablation => "ablation",
            Suite::Division => "division",
            Suite::ModelSize => "model-size",
            Suite::Alpha => "alpha",
        }
    }
}

impl FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .with_context(|| format!("unknown suite {s:?}"))
    }
}

fn with(base: &ExperimentConfig, f: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut c = base.clone();
    f(&mut c);
    c
}

/// Ablation variants in order: full, -KD, -KD-DDR, -KD-DDR-UDL.
pub fn ablation_variants(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let full = with(base, |c| c.run.strategy = Strategy::Hetero);
    let no_kd = with(&full, |c| c.distill.enabled = false);
    let no_ddr = with(&no_kd, |c| c.train.alpha = 0.0);
    let no_udl = with(&no_ddr, |c| c.train.dual_task = false);
    vec![
        ("full".into(), full),
        ("no-kd".into(), no_kd),
        ("no-kd-ddr".into(), no_ddr),
        ("no-kd-ddr-udl".into(), no_udl),
    ]
}

pub fn variants(suite: Suite, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let hetero = |c: &mut ExperimentConfig| c.run.strategy = Strategy::Hetero;
    match suite {
        Suite::Ablation => ablation_variants(base),
        Suite::Division => {
            let mut v = vec![(
                "all-small".to_string(),
                with(base, |c| c.run.strategy = Strategy::AllSmall),
            )];
            for (name, q) in [
                ("5-3-2", [0.5, 0.8]),
                ("1-1-1", [1.0 / 3.0, 2.0 / 3.0]),
                ("2-3-5", [0.2, 0.5]),
            ] {
                v.push((
                    name.to_string(),
                    with(base, |c| {
                        hetero(c);
                        c.partition.quantiles = q;
                    }),
                ));
            }
            v.push((
                "all-large".to_string(),
                with(base, |c| c.run.strategy = Strategy::AllLarge),
            ));
            v
        }
        Suite::ModelSize => {
            let mut v = Vec::new();
            for w in [[2, 4, 8], [8, 16, 32], [32, 64, 128]] {
                for s in [Strategy::AllSmall, Strategy::AllLarge, Strategy::Hetero] {
                    v.push((
                        format!("w{}-{}-{}-{}", w[0], w[1], w[2], s.name()),
                        with(base, |c| {
                            c.model.widths = w;
                            c.run.strategy = s;
                        }),
                    ));
                }
            }
            v
        }
        Suite::Alpha => [0.5, 1.0, 1.5, 2.0]
            .into_iter()
            .map(|a| {
                (
                    format!("alpha-{a}"),
                    with(base, |c| {
                        hetero(c);
                        c.train.alpha = a;
                    }),
                )
            })
            .collect(),
    }
}

/// Run every variant into `out/<name>/` and write `comparison.md` and
/// `comparison.csv` into `out`.
pub fn run_suite(
    suite: Suite,
    base: &ExperimentConfig,
    config_digest: Option<String>,
    out: &Path,
) -> Result<Comparison> {
    let vs = variants(suite, base);
    if vs.len() < 2 {
        bail!("suite {} produced fewer than two variants", suite.name());
    }
    let mut reports = Vec::with_capacity(vs.len());
    for (name, config) in vs {
        let dir = out.join(&name);
        log::info!("suite {}: running {name}", suite.name());
        run(
            &RunSpec {
                name,
                config,
                config_digest: config_digest.clone(),
            },
            &dir,
        )?;
        reports.push(FinalReport::load(&dir.join(REPORT_FILE))?);
    }
    let table = compare(&reports)?;
    fs::write(out.join("comparison.md"), table.to_markdown())?;
    fs::write(out.join("comparison.csv"), table.to_csv())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn ablation_removes_one_component_per_step() {
        let v = ablation_variants(&ExperimentConfig::default());
        let flags: Vec<_> = v
            .iter()
            .map(|(_, c)| (c.distill.enabled, c.train.alpha > 0.0, c.train.dual_task))
            .collect();
        assert_eq!(
            flags,
            vec![
                (true, true, true),
                (false, true, true),
                (false, false, true),
                (false, false, false)
            ]
        );
        assert!(v.iter().all(|(_, c)| c.run.strategy == Strategy::Hetero));
    }

    #[test]
    fn every_variant_validates() {
        let base = ExperimentConfig::default();
        for s in Suite::ALL {
            for (name, c) in variants(s, &base) {
                c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            }
        }
        assert_eq!(variants(Suite::ModelSize, &base).len(), 9);
        assert_eq!(variants(Suite::Division, &base).len(), 5);
    }
}
