//! Interaction data: loading, binarization, per-user splits, negative
//! sampling, client partitioning and synthetic generation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::Tier;
use crate::rng::{self, SimRng};

/// Source file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    /// `user::item::rating::timestamp`
    #[serde(rename = "dat")]
    MovielensDat,
    Tsv,
    Csv,
}

impl Format {
    fn separator(self) -> &'static str {
        match self {
            Format::MovielensDat => "::",
            Format::Tsv => "\t",
            Format::Csv => ",",
        }
    }

    /// Guess from a file extension; `.dat` is MovieLens, `.csv` is CSV,
    /// anything else is TSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("dat") => Format::MovielensDat,
            Some("csv") => Format::Csv,
            _ => Format::Tsv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-dat" | "dat" => Ok(Format::MovielensDat),
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config {
                key: "data.format".into(),
                constraint: format!("unknown format {other:?}"),
            }),
        }
    }
}

/// Bijection between raw string ids and dense 0-based indices.
///
/// Dense indices follow the sorted order of raw ids: numeric order when every
/// raw id parses as an integer, lexicographic otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    fn from_raw(mut raw: Vec<String>) -> Self {
        raw.sort();
        raw.dedup();
        if raw.iter().all(|r| r.parse::<u64>().is_ok()) {
            raw.sort_by_key(|r| r.parse::<u64>().unwrap());
        }
        let index = raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        Self { raw, index }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn encode(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.raw.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// Parsed, reindexed and deduplicated interaction log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawInteractions {
    pub users: IdMap,
    pub items: IdMap,
    pub records: Vec<RawRecord>,
}

struct RawLine {
    user: String,
    item: String,
    rating: f64,
    timestamp: Option<i64>,
}

impl RawInteractions {
    fn from_lines(lines: Vec<RawLine>) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let users = IdMap::from_raw(lines.iter().map(|l| l.user.clone()).collect());
        let items = IdMap::from_raw(lines.iter().map(|l| l.item.clone()).collect());
        let mut seen = HashSet::with_capacity(lines.len());
        let mut records = Vec::with_capacity(lines.len());
        for line in lines {
            let user = users.encode(&line.user).unwrap();
            let item = items.encode(&line.item).unwrap();
            // first occurrence wins
            if seen.insert((user, item)) {
                records.push(RawRecord {
                    user,
                    item,
                    rating: line.rating,
                    timestamp: line.timestamp,
                });
            }
        }
        Ok(Self {
            users,
            items,
            records,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Write as TSV (`user<TAB>item<TAB>rating[<TAB>timestamp]`) using raw ids.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            let user = self.users.decode(r.user).unwrap();
            let item = self.items.decode(r.item).unwrap();
            match r.timestamp {
                Some(ts) => writeln!(out, "{user}\t{item}\t{}\t{ts}", r.rating)?,
                None => writeln!(out, "{user}\t{item}\t{}", r.rating)?,
            }
        }
        Ok(())
    }
}

/// Parse interaction text. Blank lines are skipped; for TSV/CSV a first line
/// whose rating field is not numeric is treated as a header.
pub fn parse_interactions(text: &str, format: Format) -> Result<RawInteractions> {
    let sep = format.separator();
    let mut lines = Vec::new();
    let mut first = true;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
        let is_first = std::mem::take(&mut first);
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        let rating = match fields[2].parse::<f64>() {
            Ok(r) if r.is_finite() => r,
            _ if is_first && format != Format::MovielensDat => continue,
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("rating {:?} is not a number", fields[2]),
                })
            }
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item id".into(),
            });
        }
        let timestamp = match fields.get(3) {
            Some(ts) => Some(ts.parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("timestamp {ts:?} is not an integer"),
            })?),
            None => None,
        };
        lines.push(RawLine {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    RawInteractions::from_lines(lines)
}

pub fn load_interactions(path: &Path, format: Format) -> Result<RawInteractions> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_interactions(&text, format)
}

/// Binarized implicit feedback with a per-user train/test split.
///
/// Item lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl InteractionDataset {
    pub fn train_count(&self, user: usize) -> usize {
        self.train[user].len()
    }

    pub fn num_interactions(&self) -> usize {
        self.train.iter().chain(&self.test).map(Vec::len).sum()
    }

    pub fn is_train_positive(&self, user: usize, item: usize) -> bool {
        self.train[user].binary_search(&item).is_ok()
    }

    /// Stable content fingerprint, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = rng::mix(self.num_users as u64 ^ ((self.num_items as u64) << 32));
        for (split, lists) in [(1u64, &self.train), (2u64, &self.test)] {
            for (u, items) in lists.iter().enumerate() {
                h = rng::mix(h ^ split ^ ((u as u64) << 8));
                for &i in items {
                    h = rng::mix(h ^ i as u64);
                }
            }
        }
        format!("{h:016x}")
    }
}

/// Binarize every rating to 1 and split each user's items at `train_frac`.
/// Users with fewer than two interactions keep everything in train.
pub fn binarize_and_split(
    raw: &RawInteractions,
    train_frac: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(contract(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let num_users = raw.num_users();
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); num_users];
    for r in &raw.records {
        per_user[r.user].push(r.item);
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(num_users);
    let mut test = Vec::with_capacity(num_users);
    for mut items in per_user {
        let n = items.len();
        items.shuffle(&mut rng);
        let n_train = if n < 2 {
            n
        } else {
            ((train_frac * n as f64).round() as usize).clamp(1, n - 1)
        };
        let mut tr = items[..n_train].to_vec();
        let mut te = items[n_train..].to_vec();
        tr.sort_unstable();
        te.sort_unstable();
        train.push(tr);
        test.push(te);
    }
    Ok(InteractionDataset {
        num_users,
        num_items: raw.num_items(),
        train,
        test,
    })
}

/// One training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub label: u8,
}

/// Each positive is followed by `ratio` negatives drawn uniformly (with
/// replacement) from the items outside `positives`. `positives` must be sorted.
pub fn sample_negatives_for(
    user: usize,
    positives: &[usize],
    excluded: &[usize],
    num_items: usize,
    ratio: usize,
    rng: &mut impl Rng,
) -> Vec<Interaction> {
    let eligible = num_items - excluded.len();
    let per_positive = if eligible == 0 { 0 } else { ratio };
    let mut batch = Vec::with_capacity(positives.len() * (1 + per_positive));
    for &item in positives {
        batch.push(Interaction {
            user,
            item,
            label: 1,
        });
        for _ in 0..per_positive {
            let mut neg = rng.random_range(0..eligible);
            // k-th item not in the excluded set
            for &p in excluded {
                if p <= neg {
                    neg += 1;
                } else {
                    break;
                }
            }
            batch.push(Interaction {
                user,
                item: neg,
                label: 0,
            });
        }
    }
    batch
}

pub fn sample_negatives(
    user: usize,
    ds: &InteractionDataset,
    ratio: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Interaction>> {
    if ratio < 1 {
        return Err(contract("negative ratio must be at least 1"));
    }
    let positives = &ds.train[user];
    if positives.is_empty() {
        return Err(contract(format!("user {user} has no train positives")));
    }
    Ok(sample_negatives_for(
        user,
        positives,
        positives,
        ds.num_items,
        ratio,
        rng,
    ))
}

/// Client tier per user, from train-interaction-count quantiles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupAssignment {
    pub tiers: Vec<Tier>,
    pub low_cutoff: usize,
    pub high_cutoff: usize,
}

impl GroupAssignment {
    /// Assign every user the same tier.
    pub fn uniform(num_users: usize, tier: Tier) -> Self {
        Self {
            tiers: vec![tier; num_users],
            low_cutoff: 0,
            high_cutoff: 0,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for t in &self.tiers {
            c[t.index()] += 1;
        }
        c
    }

    pub fn tier(&self, user: usize) -> Tier {
        self.tiers[user]
    }
}

impl fmt::Display for GroupAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [s, m, l] = self.counts();
        write!(
            f,
            "small={s} medium={m} large={l} (cutoffs {} / {})",
            self.low_cutoff, self.high_cutoff
        )
    }
}

/// Empirical lower quantile: the value at sorted position `floor(q * n)`.
fn quantile(sorted: &[usize], q: f64) -> usize {
    let pos = ((q * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[pos]
}

pub fn partition_clients(
    ds: &InteractionDataset,
    quantiles: (f64, f64),
) -> Result<GroupAssignment> {
    let (q_low, q_high) = quantiles;
    if !(q_low > 0.0 && q_low < q_high && q_high < 1.0) {
        return Err(contract(format!(
            "quantiles must be strictly increasing in (0, 1), got ({q_low}, {q_high})"
        )));
    }
    if ds.num_users == 0 {
        return Err(Error::EmptyDataset);
    }
    let counts: Vec<usize> = (0..ds.num_users).map(|u| ds.train_count(u)).collect();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let low_cutoff = quantile(&sorted, q_low);
    let high_cutoff = quantile(&sorted, q_high);
    let tiers = counts
        .iter()
        .map(|&c| {
            if c < low_cutoff {
                Tier::Small
            } else if c < high_cutoff {
                Tier::Medium
            } else {
                Tier::Large
            }
        })
        .collect();
    let groups = GroupAssignment {
        tiers,
        low_cutoff,
        high_cutoff,
    };
    if sorted.first() == sorted.last() && ds.num_users > 1 {
        warn!("all users have the same interaction count; partition is degenerate: {groups}");
    }
    Ok(groups)
}

/// Parameters of the planted low-rank synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    /// Log-scale standard deviation of per-user interaction counts; 0 gives
    /// every user the same count.
    pub density_skew: f64,
    pub seed: u64,
}

/// Mean per-user interaction count for a catalog size.
fn base_count(num_items: usize) -> f64 {
    (num_items as f64 / 8.0).clamp(2.0, 120.0)
}

/// Planted preference model: users pick items by Gumbel-top-k over
/// `2·<p_u, q_i>/sqrt(d) + 0.5·b_i` with standard normal factors and item
/// biases. Per-user counts are log-normal with log-scale `density_skew`.
pub fn synth_raw(spec: &SynthSpec) -> Result<RawInteractions> {
    let SynthSpec {
        num_users,
        num_items,
        latent_dim,
        density_skew,
        seed,
    } = *spec;
    if num_users == 0 || num_items == 0 || latent_dim == 0 {
        return Err(contract("synthetic sizes must be at least 1"));
    }
    if !(density_skew >= 0.0 && density_skew.is_finite()) {
        return Err(contract("density_skew must be finite and non-negative"));
    }
    let mut rng = rng::stream_rng(seed, rng::stream::DATA, &[0]);
    let normal = |rng: &mut SimRng| -> f64 { StandardNormal.sample(rng) };
    let users: Vec<Vec<f64>> = (0..num_users)
        .map(|_| (0..latent_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let items: Vec<Vec<f64>> = (0..num_items)
        .map(|_| (0..latent_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let bias: Vec<f64> = (0..num_items).map(|_| normal(&mut rng)).collect();
    let scale = 2.0 / (latent_dim as f64).sqrt();
    let gumbel = Gumbel::new(0.0, 1.0).unwrap();
    let base = base_count(num_items);
    let max_count = (num_items * 3 / 4).max(1);
    let min_count = 2.min(num_items);

    let mut lines = Vec::new();
    for (u, pu) in users.iter().enumerate() {
        let z = normal(&mut rng);
        let n = (base * (density_skew * z).exp()).round() as usize;
        let n = n.clamp(min_count, max_count);
        let mut keyed: Vec<(f64, usize)> = items
            .iter()
            .enumerate()
            .map(|(i, qi)| {
                let dot: f64 = pu.iter().zip(qi).map(|(a, b)| a * b).sum();
                (scale * dot + 0.5 * bias[i] + gumbel.sample(&mut rng), i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(n) {
            lines.push(RawLine {
                user: u.to_string(),
                item: i.to_string(),
                rating: 1.0,
                timestamp: None,
            });
        }
    }
    RawInteractions::from_lines(lines)
}

/// Synthetic dataset split 80/20 with a seed derived from `spec.seed`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<InteractionDataset> {
    let raw = synth_raw(spec)?;
    binarize_and_split(
        &raw,
        0.8,
        rng::derive_seed(spec.seed, rng::stream::DATA, &[1]),
    )
}
