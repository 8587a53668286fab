//! Simulator for federated recommendation with heterogeneous item-embedding
//! widths.
//!
//! Clients are bucketed into small, medium and large tiers by how much data
//! they hold and train item tables of matching width. The server merges the
//! tables by zero-padding narrower updates, and can align the tables further
//! with an ensemble distillation step over item similarity structure.

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distillation;
mod error;
pub mod eval;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod training;

pub use aggregation::TieredPublicParams;
pub use config::ExperimentConfig;
pub use dataset::{GroupAssignment, InteractionDataset};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use model::{BaseModel, EmbeddingTable, ScorerParams, Tier, TierWidths, UserEmbedding};
pub use orchestrator::{run_experiment, Strategy};
pub use training::{ClientState, UpdatePacket};
