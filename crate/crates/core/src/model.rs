//! Base recommenders over tiered embeddings: the feedforward scorer and
//! one-layer LightGCN propagation on a user's local star graph.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Hidden layer width of the scorer.
pub const HIDDEN: usize = 8;
/// Output clamp for predicted probabilities.
pub const PROB_EPS: f64 = 1e-7;
/// Standard deviation of embedding initialization.
pub const EMBED_INIT_STD: f64 = 0.01;

/// Model-size class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Small,
    Medium,
    Large,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Small, Tier::Medium, Tier::Large];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Tier {
        Tier::ALL[i]
    }

    /// This tier and every smaller one, ascending.
    pub fn nested(self) -> &'static [Tier] {
        &Tier::ALL[..=self.index()]
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Small => "small",
            Tier::Medium => "medium",
            Tier::Large => "large",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Embedding widths `N_s < N_m < N_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierWidths(pub [usize; 3]);

impl TierWidths {
    pub fn new(small: usize, medium: usize, large: usize) -> Result<Self> {
        if !(small >= 1 && small < medium && medium < large) {
            return Err(Error::Config {
                key: "model.widths".into(),
                constraint: "tier widths must be strictly increasing".into(),
            });
        }
        Ok(Self([small, medium, large]))
    }

    pub fn of(&self, tier: Tier) -> usize {
        self.0[tier.index()]
    }

    pub fn largest(&self) -> usize {
        self.0[2]
    }
}

impl Default for TierWidths {
    fn default() -> Self {
        Self([8, 16, 32])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseModel {
    #[default]
    Ncf,
    LightGcn,
}

impl FromStr for BaseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncf" => Ok(BaseModel::Ncf),
            "lightgcn" => Ok(BaseModel::LightGcn),
            other => Err(Error::Config {
                key: "model.base".into(),
                constraint: format!("unknown base model {other:?}"),
            }),
        }
    }
}

/// |V| x N item embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    values: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self::new(Array2::zeros((rows, dim)))
    }

    pub fn random(rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, EMBED_INIT_STD).unwrap();
        Self::new(Array2::from_shape_simple_fn((rows, dim), || {
            normal.sample(rng)
        }))
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, item: usize) -> &[f64] {
        let dim = self.dim();
        &self.values.as_slice().expect("standard layout")[item * dim..(item + 1) * dim]
    }

    pub fn row_mut(&mut self, item: usize) -> &mut [f64] {
        let dim = self.dim();
        &mut self.values.as_slice_mut().expect("standard layout")[item * dim..(item + 1) * dim]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.values.as_slice_mut().expect("standard layout")
    }

    /// View of the first `n` columns.
    pub fn truncate(&self, n: usize) -> Result<ArrayView2<'_, f64>> {
        if n > self.dim() {
            return Err(contract(format!(
                "cannot truncate width {} to {n}",
                self.dim()
            )));
        }
        Ok(self.values.slice(s![.., ..n]))
    }

    /// Owned copy of the first `n` columns.
    pub fn prefix(&self, n: usize) -> Result<EmbeddingTable> {
        Ok(EmbeddingTable::new(self.truncate(n)?.to_owned()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Private per-user embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding(pub Vec<f64>);

impl UserEmbedding {
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, EMBED_INIT_STD).unwrap();
        Self((0..dim).map(|_| normal.sample(rng)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn truncate(&self, n: usize) -> Result<&[f64]> {
        if n > self.dim() {
            return Err(contract(format!(
                "cannot truncate width {} to {n}",
                self.dim()
            )));
        }
        Ok(&self.0[..n])
    }
}

/// Feedforward scorer `[2N -> 8 -> 8 -> 1]` with ReLU hidden activations.
///
/// Parameters live in one flat buffer: `w1 (8 x 2N)`, `b1`, `w2 (8 x 8)`,
/// `b2`, `w3 (8)`, `b3`, weights row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    input: usize,
    data: Vec<f64>,
}

impl ScorerParams {
    pub fn param_count(input: usize) -> usize {
        HIDDEN * input + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1
    }

    pub fn zeros(embed_dim: usize) -> Self {
        let input = 2 * embed_dim;
        Self {
            input,
            data: vec![0.0; Self::param_count(input)],
        }
    }

    pub fn from_flat(embed_dim: usize, data: Vec<f64>) -> Result<Self> {
        let input = 2 * embed_dim;
        if data.len() != Self::param_count(input) {
            return Err(contract(format!(
                "scorer for width {embed_dim} needs {} parameters, got {}",
                Self::param_count(input),
                data.len()
            )));
        }
        Ok(Self { input, data })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(embed_dim);
        let input = p.input;
        let fill = |buf: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).unwrap();
            for w in buf {
                *w = dist.sample(rng);
            }
        };
        let (o1, o2, o3) = p.offsets();
        fill(&mut p.data[..o1.0], input, HIDDEN, rng);
        fill(&mut p.data[o1.1..o2.0], HIDDEN, HIDDEN, rng);
        fill(&mut p.data[o2.1..o3.0], HIDDEN, 1, rng);
        p
    }

    /// `(w_end, b_end)` offsets for each layer.
    fn offsets(&self) -> ((usize, usize), (usize, usize), (usize, usize)) {
        let w1 = HIDDEN * self.input;
        let b1 = w1 + HIDDEN;
        let w2 = b1 + HIDDEN * HIDDEN;
        let b2 = w2 + HIDDEN;
        let w3 = b2 + HIDDEN;
        let b3 = w3 + 1;
        ((w1, b1), (w2, b2), (w3, b3))
    }

    pub fn embed_dim(&self) -> usize {
        self.input / 2
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Forward pass on the concatenation `[user, item]`.
    pub fn forward(&self, user: &[f64], item: &[f64]) -> ScorerTrace {
        debug_assert_eq!(user.len() + item.len(), self.input);
        let ((w1e, b1e), (w2e, b2e), (w3e, _)) = self.offsets();
        let d = &self.data;
        let half = user.len();
        let mut h1 = [0.0; HIDDEN];
        for (k, h) in h1.iter_mut().enumerate() {
            let w = &d[k * self.input..(k + 1) * self.input];
            let mut acc = d[w1e + k];
            for (wi, xi) in w[..half].iter().zip(user) {
                acc += wi * xi;
            }
            for (wi, xi) in w[half..].iter().zip(item) {
                acc += wi * xi;
            }
            *h = acc.max(0.0);
        }
        let mut h2 = [0.0; HIDDEN];
        for (k, h) in h2.iter_mut().enumerate() {
            let w = &d[b1e + k * HIDDEN..b1e + (k + 1) * HIDDEN];
            let acc = d[w2e + k] + w.iter().zip(&h1).map(|(a, b)| a * b).sum::<f64>();
            *h = acc.max(0.0);
        }
        let w3 = &d[b2e..w3e];
        let logit = d[w3e] + w3.iter().zip(&h2).map(|(a, b)| a * b).sum::<f64>();
        let raw = sigmoid(logit);
        let prob = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        ScorerTrace {
            h1,
            h2,
            logit,
            prob,
            clamped: prob != raw,
        }
    }

    /// Accumulate gradients of a loss with `dloss/dlogit = dlogit` into
    /// `grad` (same layout as the parameters) and the two input halves.
    pub fn backward(
        &self,
        user: &[f64],
        item: &[f64],
        trace: &ScorerTrace,
        dlogit: f64,
        grad: &mut [f64],
        grad_user: &mut [f64],
        grad_item: &mut [f64],
    ) {
        let ((w1e, b1e), (w2e, b2e), (w3e, _)) = self.offsets();
        let d = &self.data;
        let half = user.len();
        // layer 3
        grad[w3e] += dlogit;
        let mut g_h2 = [0.0; HIDDEN];
        for k in 0..HIDDEN {
            grad[b2e + k] += dlogit * trace.h2[k];
            g_h2[k] = if trace.h2[k] > 0.0 {
                dlogit * d[b2e + k]
            } else {
                0.0
            };
        }
        // layer 2
        let mut g_h1 = [0.0; HIDDEN];
        for k in 0..HIDDEN {
            let g = g_h2[k];
            if g == 0.0 {
                continue;
            }
            grad[w2e + k] += g;
            let row = b1e + k * HIDDEN;
            for j in 0..HIDDEN {
                grad[row + j] += g * trace.h1[j];
                g_h1[j] += g * d[row + j];
            }
        }
        // layer 1
        for k in 0..HIDDEN {
            let g = if trace.h1[k] > 0.0 { g_h1[k] } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            grad[w1e + k] += g;
            let row = k * self.input;
            for j in 0..half {
                grad[row + j] += g * user[j];
                grad_user[j] += g * d[row + j];
            }
            for j in 0..item.len() {
                grad[row + half + j] += g * item[j];
                grad_item[j] += g * d[row + half + j];
            }
        }
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ScorerTrace {
    pub h1: [f64; HIDDEN],
    pub h2: [f64; HIDDEN],
    pub logit: f64,
    /// Sigmoid output clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub prob: f64,
    pub clamped: bool,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability that `user` interacts with `item`, both of the scorer's width.
pub fn ncf_predict(user: &[f64], item: &[f64], theta: &ScorerParams) -> Result<f64> {
    if user.len() != item.len() || user.len() != theta.embed_dim() {
        return Err(contract(format!(
            "scorer expects width {}, got user {} and item {}",
            theta.embed_dim(),
            user.len(),
            item.len()
        )));
    }
    Ok(theta.forward(user, item).prob)
}

/// Output of one-layer propagation on a local star graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    pub user: Vec<f64>,
    /// One row per entry of `local_items`, in the same order.
    pub items: Vec<Vec<f64>>,
    /// `1 / sqrt(deg_user * deg_item)` with `deg_item = 1`.
    pub norm: f64,
}

/// One LightGCN layer on the star `{user} ∪ local_items`, normalized with
/// local degrees, final representation = mean of layers 0 and 1.
pub fn lightgcn_propagate(
    user: &[f64],
    table: &EmbeddingTable,
    local_items: &[usize],
) -> Result<Propagated> {
    if local_items.is_empty() {
        return Err(Error::EmptyLocalGraph);
    }
    if user.len() != table.dim() {
        return Err(contract(format!(
            "user width {} does not match table width {}",
            user.len(),
            table.dim()
        )));
    }
    let norm = 1.0 / (local_items.len() as f64).sqrt();
    let mut layer1 = vec![0.0; user.len()];
    for &i in local_items {
        for (a, v) in layer1.iter_mut().zip(table.row(i)) {
            *a += v;
        }
    }
    let user_out = user
        .iter()
        .zip(&layer1)
        .map(|(u, l)| 0.5 * (u + norm * l))
        .collect();
    let items = local_items
        .iter()
        .map(|&i| {
            table
                .row(i)
                .iter()
                .zip(user)
                .map(|(v, u)| 0.5 * (v + norm * u))
                .collect()
        })
        .collect();
    Ok(Propagated {
        user: user_out,
        items,
        norm,
    })
}

/// Representation of an item outside the local graph: its layer-1 embedding
/// is zero, so the layer mean halves it.
pub fn off_graph_item(row: &[f64]) -> Vec<f64> {
    row.iter().map(|v| 0.5 * v).collect()
}
