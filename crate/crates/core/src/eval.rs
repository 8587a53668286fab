//! Full-catalog top-K ranking metrics and embedding diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroupAssignment, InteractionDataset};
use crate::error::Result;
use crate::model::{
    lightgcn_propagate, off_graph_item, BaseModel, EmbeddingTable, ScorerParams, Tier,
};
use crate::training::{decorrelation_reg, singular_variance};

/// Cutoff used throughout reporting.
pub const DEFAULT_K: usize = 20;

/// Parameters one user is scored with.
#[derive(Debug, Clone, Copy)]
pub struct UserModel<'a> {
    pub user: &'a [f64],
    pub table: &'a EmbeddingTable,
    pub theta: &'a ScorerParams,
}

/// Pre-sigmoid score for every item in the catalog.
///
/// Logits are used so that clamping of the output probability cannot create
/// artificial ties. With LightGCN the user is propagated over `train_items`;
/// every rankable item is off that graph.
pub fn score_items(
    model: &UserModel<'_>,
    base: BaseModel,
    train_items: &[usize],
) -> Result<Vec<f64>> {
    let table = model.table;
    match base {
        BaseModel::Ncf => Ok((0..table.rows())
            .map(|i| model.theta.forward(model.user, table.row(i)).logit)
            .collect()),
        BaseModel::LightGcn => {
            let (user, on_graph) = if train_items.is_empty() {
                (off_graph_item(model.user), Vec::new())
            } else {
                let p = lightgcn_propagate(model.user, table, train_items)?;
                (p.user, p.items)
            };
            let mut scores = Vec::with_capacity(table.rows());
            for i in 0..table.rows() {
                let item = match train_items.binary_search(&i) {
                    Ok(k) => on_graph[k].clone(),
                    Err(_) => off_graph_item(table.row(i)),
                };
                scores.push(model.theta.forward(&user, &item).logit);
            }
            Ok(scores)
        }
    }
}

/// Items not in `excluded` (sorted), by descending score then ascending id.
pub fn rank_items(scores: &[f64], excluded: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len())
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// Share of `test` (sorted) found in the first `k` entries of `ranked`.
pub fn recall_at_k(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| test.binary_search(i).is_ok())
        .count();
    hits as f64 / test.len() as f64
}

/// Binary-relevance NDCG with a `log2(rank + 1)` discount.
pub fn ndcg_at_k(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| test.binary_search(i).is_ok())
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..test.len().min(k))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Rank the catalog for every user that has test items. `score` returns one
/// score per item for a user. Returns per-user metrics in user order and the
/// number of users skipped for lacking test items.
pub fn evaluate_users<F>(
    ds: &InteractionDataset,
    k: usize,
    score: F,
) -> Result<(Vec<UserMetrics>, usize)>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let users: Vec<usize> = (0..ds.num_users)
        .filter(|&u| !ds.test[u].is_empty())
        .collect();
    let skipped = ds.num_users - users.len();
    let metrics = users
        .par_iter()
        .map(|&u| {
            let scores = score(u)?;
            let ranked = rank_items(&scores, &ds.train[u]);
            Ok(UserMetrics {
                user: u,
                recall: recall_at_k(&ranked, &ds.test[u], k),
                ndcg: ndcg_at_k(&ranked, &ds.test[u], k),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((metrics, skipped))
}

/// Macro averages over a set of users.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub users: usize,
    pub recall: f64,
    pub ndcg: f64,
}

impl GroupMetrics {
    fn from_iter<'a>(it: impl Iterator<Item = &'a UserMetrics>) -> Self {
        let mut g = GroupMetrics::default();
        for m in it {
            g.users += 1;
            g.recall += m.recall;
            g.ndcg += m.ndcg;
        }
        if g.users > 0 {
            g.recall /= g.users as f64;
            g.ndcg /= g.users as f64;
        }
        g
    }
}

/// Embedding-health numbers for one tier.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TierDiagnostics {
    pub singular_variance: f64,
    pub decorrelation: f64,
}

impl TierDiagnostics {
    /// Mean over the given tables (one public table, or one per client).
    pub fn of_tables<'a>(tables: impl IntoIterator<Item = &'a EmbeddingTable>) -> Result<Self> {
        let mut d = TierDiagnostics::default();
        let mut n = 0usize;
        for t in tables {
            d.singular_variance += singular_variance(t.values().view())?;
            d.decorrelation += decorrelation_reg(t.values().view())?;
            n += 1;
        }
        if n > 0 {
            d.singular_variance /= n as f64;
            d.decorrelation /= n as f64;
        }
        Ok(d)
    }
}

/// Evaluation of one strategy at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub strategy: String,
    pub k: usize,
    pub overall: GroupMetrics,
    /// Indexed by tier.
    pub groups: [GroupMetrics; 3],
    /// Indexed by tier.
    pub diagnostics: [TierDiagnostics; 3],
    pub skipped_users: usize,
    /// Mean final local-epoch loss per example over the epoch's clients.
    pub train_loss: Option<f64>,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn assemble(
        epoch: usize,
        strategy: &str,
        k: usize,
        users: &[UserMetrics],
        groups: &GroupAssignment,
        diagnostics: [TierDiagnostics; 3],
        skipped_users: usize,
    ) -> Self {
        let per_group = Tier::ALL
            .map(|t| GroupMetrics::from_iter(users.iter().filter(|m| groups.tier(m.user) == t)));
        MetricsReport {
            epoch,
            strategy: strategy.to_string(),
            k,
            overall: GroupMetrics::from_iter(users.iter()),
            groups: per_group,
            diagnostics,
            skipped_users,
            train_loss: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn group(&self, tier: Tier) -> &GroupMetrics {
        &self.groups[tier.index()]
    }

    /// `(group, metric, value)` rows in a fixed order. Empty groups are
    /// omitted; wall-clock time is left out so rows are reproducible.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        let recall = format!("recall@{}", self.k);
        let ndcg = format!("ndcg@{}", self.k);
        out.push(("overall".to_string(), recall.clone(), self.overall.recall));
        out.push(("overall".to_string(), ndcg.clone(), self.overall.ndcg));
        for t in Tier::ALL {
            let g = self.group(t);
            if g.users > 0 {
                out.push((t.name().to_string(), recall.clone(), g.recall));
                out.push((t.name().to_string(), ndcg.clone(), g.ndcg));
            }
        }
        if let Some(l) = self.train_loss {
            out.push(("overall".to_string(), "train_loss".to_string(), l));
        }
        for t in Tier::ALL {
            let d = &self.diagnostics[t.index()];
            out.push((
                t.name().to_string(),
                "singular_variance".to_string(),
                d.singular_variance,
            ));
            out.push((
                t.name().to_string(),
                "decorrelation".to_string(),
                d.decorrelation,
            ));
        }
        out
    }
}
