//! Experiment configuration.
//!
//! Every section has defaults, so an empty document is a valid config.
//! Unknown keys are rejected when deserializing.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregateMode;
use crate::dataset::{Format, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{BaseModel, TierWidths};
use crate::orchestrator::{ExclusiveSet, Strategy};
use crate::training::RegScope;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub seed: u64,
    /// Global epochs; 0 evaluates the initial model only.
    pub epochs: usize,
    /// Worker threads for client training and evaluation; 0 uses all cores.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Hetero,
            seed: 0,
            epochs: 30,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Interaction file; when absent a synthetic dataset is generated.
    pub path: Option<PathBuf>,
    /// Overrides detection from the file extension.
    pub format: Option<Format>,
    pub train_frac: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: None,
            train_frac: 0.8,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub density_skew: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 100,
            latent_dim: 4,
            density_skew: 0.8,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            num_users: self.num_users,
            num_items: self.num_items,
            latent_dim: self.latent_dim,
            density_skew: self.density_skew,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base: BaseModel,
    /// Item-embedding widths of the small, medium and large tiers.
    pub widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base: BaseModel::Ncf,
            widths: TierWidths::default().0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Train-count quantiles splitting small|medium and medium|large.
    pub quantiles: [f64; 2],
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            quantiles: [0.5, 0.8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub lr: f64,
    /// Decorrelation weight for medium and large clients.
    pub alpha: f64,
    /// Rows the decorrelation penalty covers.
    pub reg_scope: RegScope,
    /// Train every narrower prefix alongside the client's own width.
    pub dual_task: bool,
    pub round_size: usize,
    pub neg_ratio: usize,
    /// 0 means one full-batch step per local epoch.
    pub batch_size: usize,
    pub val_frac: f64,
    pub aggregate: AggregateMode,
    /// Tiers whose packets the exclusive large-model baseline keeps.
    pub exclusive: ExclusiveSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            lr: 0.001,
            alpha: 1.0,
            reg_scope: RegScope::Batch,
            dual_task: true,
            round_size: 256,
            neg_ratio: 4,
            batch_size: 0,
            val_frac: 0.0,
            aggregate: AggregateMode::Sum,
            exclusive: ExclusiveSet::MediumLarge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub enabled: bool,
    /// Items sampled per round; clamped to the catalog size.
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 256,
            steps: 1,
            lr: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Ranking cutoff for Recall@K and NDCG@K.
    pub k: usize,
    /// Epochs after which a parameter checkpoint is written.
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            k: 20,
            checkpoint_epochs: Vec::new(),
        }
    }
}

fn invalid(key: &str, constraint: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        constraint: constraint.into(),
    }
}

fn positive_finite(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            key,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn widths(&self) -> Result<TierWidths> {
        let [s, m, l] = self.model.widths;
        TierWidths::new(s, m, l)
            .map_err(|_| invalid("model.widths", "tier widths must be strictly increasing"))
    }

    pub fn validate(&self) -> Result<()> {
        self.widths()?;
        if self.model.widths[0] == 0 {
            return Err(invalid("model.widths", "widths must be at least 1"));
        }
        let [q0, q1] = self.partition.quantiles;
        if !(q0 > 0.0 && q0 < q1 && q1 < 1.0) {
            return Err(invalid(
                "partition.quantiles",
                "must satisfy 0 < low < high < 1",
            ));
        }
        if !(self.data.train_frac > 0.0 && self.data.train_frac < 1.0) {
            return Err(invalid("data.train_frac", "must lie in (0, 1)"));
        }
        let syn = &self.data.synthetic;
        if self.data.path.is_none() {
            if syn.num_users == 0 || syn.num_items < 2 || syn.latent_dim == 0 {
                return Err(invalid(
                    "data.synthetic",
                    "needs num_users >= 1, num_items >= 2 and latent_dim >= 1",
                ));
            }
            if !(syn.density_skew >= 0.0 && syn.density_skew.is_finite()) {
                return Err(invalid(
                    "data.synthetic.density_skew",
                    "must be finite and >= 0",
                ));
            }
        }
        positive_finite("train.lr", self.train.lr)?;
        if !(self.train.alpha >= 0.0 && self.train.alpha.is_finite()) {
            return Err(invalid("train.alpha", "must be finite and >= 0"));
        }
        if self.train.round_size == 0 {
            return Err(invalid("train.round_size", "must be >= 1"));
        }
        if self.train.neg_ratio == 0 {
            return Err(invalid("train.neg_ratio", "must be >= 1"));
        }
        if !(self.train.val_frac >= 0.0 && self.train.val_frac < 1.0) {
            return Err(invalid("train.val_frac", "must lie in [0, 1)"));
        }
        if self.distill.k < 2 {
            return Err(invalid("distill.k", "must be >= 2"));
        }
        positive_finite("distill.lr", self.distill.lr)?;
        if self.output.k == 0 {
            return Err(invalid("output.k", "must be >= 1"));
        }
        Ok(())
    }

    /// The configuration a strategy actually runs with: baselines train a
    /// single width without decorrelation or distillation.
    pub fn effective(&self) -> ExperimentConfig {
        let mut c = self.clone();
        if self.run.strategy != Strategy::Hetero {
            c.train.dual_task = false;
            c.train.alpha = 0.0;
            c.distill.enabled = false;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model.widths, [8, 16, 32]);
        assert_eq!(c.partition.quantiles, [0.5, 0.8]);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.alpha, 1.0);
        assert_eq!(c.train.local_epochs, 2);
        assert_eq!(c.train.round_size, 256);
        assert_eq!(c.output.k, 20);
    }

    #[test]
    fn errors_name_key_and_constraint() {
        let mut c = ExperimentConfig::default();
        c.model.widths = [16, 8, 32];
        let e = c.validate().unwrap_err().to_string();
        assert!(
            e.contains("model.widths") && e.contains("tier widths must be strictly increasing"),
            "{e}"
        );

        let mut c = ExperimentConfig::default();
        c.train.round_size = 0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("train.round_size"));

        let mut c = ExperimentConfig::default();
        c.partition.quantiles = [0.8, 0.5];
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("partition.quantiles"));

        let mut c = ExperimentConfig::default();
        c.train.lr = f64::NAN;
        assert!(c.validate().unwrap_err().to_string().contains("train.lr"));
    }

    #[test]
    fn baselines_drop_hetero_components() {
        let mut c = ExperimentConfig::default();
        c.run.strategy = Strategy::DirectAggregate;
        let e = c.effective();
        assert!(!e.train.dual_task && e.train.alpha == 0.0 && !e.distill.enabled);
        c.run.strategy = Strategy::Hetero;
        assert_eq!(c.effective(), c);
    }
}
