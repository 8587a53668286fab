//! Relation-based ensemble self-distillation across the tier tables.
//!
//! For a random subset of items the server compares the pairwise cosine
//! similarity structure of every tier table with the tier-average structure
//! and nudges each table toward the average.

use log::warn;
use ndarray::Array2;
use rand::Rng;

use crate::aggregation::TieredPublicParams;
use crate::error::{contract, Result};
use crate::model::EmbeddingTable;

/// Added to the norm product in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Distinct item ids selected for one distillation round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KdSubset {
    pub items: Vec<usize>,
}

impl KdSubset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Uniform sample of `k` items without replacement; `k` is clamped to the
/// catalog size.
pub fn select_kd_items(num_items: usize, k: usize, rng: &mut impl Rng) -> Result<KdSubset> {
    if k < 2 {
        return Err(contract(format!(
            "distillation subset needs k >= 2, got {k}"
        )));
    }
    if num_items < 2 {
        return Err(contract("distillation needs at least two items"));
    }
    let k = if k > num_items {
        warn!("distillation subset size {k} exceeds {num_items} items; clamping");
        num_items
    } else {
        k
    };
    let items = rand::seq::index::sample(rng, num_items, k).into_vec();
    Ok(KdSubset { items })
}

/// k x k matrix of pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(pub Array2<f64>);

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.0.nrows()
    }
}

fn norms(table: &EmbeddingTable, subset: &KdSubset) -> Vec<f64> {
    subset
        .items
        .iter()
        .map(|&i| table.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn pairwise_cosine(table: &EmbeddingTable, subset: &KdSubset) -> DistanceMatrix {
    let k = subset.len();
    let norms = norms(table, subset);
    let mut m = Array2::zeros((k, k));
    for a in 0..k {
        let ra = table.row(subset.items[a]);
        for b in a..k {
            let c = dot(ra, table.row(subset.items[b])) / (norms[a] * norms[b] + COSINE_EPS);
            m[[a, b]] = c;
            m[[b, a]] = c;
        }
    }
    DistanceMatrix(m)
}

/// Elementwise mean of the per-tier similarity matrices.
pub fn ensemble_distance(matrices: &[DistanceMatrix]) -> Result<DistanceMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| contract("ensemble of zero matrices"))?;
    let mut sum = Array2::zeros(first.0.raw_dim());
    for m in matrices {
        if m.0.dim() != first.0.dim() {
            return Err(contract("similarity matrices differ in shape"));
        }
        sum += &m.0;
    }
    Ok(DistanceMatrix(sum / matrices.len() as f64))
}

/// Squared Frobenius distance between the table's similarity matrix and the
/// target.
pub fn kd_loss(table: &EmbeddingTable, subset: &KdSubset, target: &DistanceMatrix) -> Result<f64> {
    if target.size() != subset.len() {
        return Err(contract("target size does not match the subset"));
    }
    let own = pairwise_cosine(table, subset);
    Ok(own
        .0
        .iter()
        .zip(target.0.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// [`kd_loss`] and its gradient with respect to the subset rows (one row per
/// subset entry, in subset order). The target is held constant.
pub fn kd_loss_grad(
    table: &EmbeddingTable,
    subset: &KdSubset,
    target: &DistanceMatrix,
) -> Result<(f64, Array2<f64>)> {
    let k = subset.len();
    if target.size() != k {
        return Err(contract("target size does not match the subset"));
    }
    let dim = table.dim();
    let own = pairwise_cosine(table, subset);
    let norms = norms(table, subset);
    let resid = &own.0 - &target.0;
    let loss = resid.iter().map(|r| r * r).sum();
    let mut grad = Array2::zeros((k, dim));
    for a in 0..k {
        let xa = table.row(subset.items[a]);
        let na = norms[a];
        let mut g = vec![0.0; dim];
        for b in 0..k {
            let xb = table.row(subset.items[b]);
            let nb = norms[b];
            let denom = na * nb + COSINE_EPS;
            let s = dot(xa, xb);
            if a == b {
                // C = |x|^2 / (|x|^2 + eps)
                let coef = 2.0 * resid[[a, a]] * 2.0 * COSINE_EPS / (denom * denom);
                for c in 0..dim {
                    g[c] += coef * xa[c];
                }
            } else {
                // both (a,b) and (b,a) depend on x_a identically
                let w = 2.0 * (resid[[a, b]] + resid[[b, a]]);
                let radial = if na > 0.0 {
                    s * nb / (na * denom * denom)
                } else {
                    0.0
                };
                for c in 0..dim {
                    g[c] += w * (xb[c] / denom - radial * xa[c]);
                }
            }
        }
        grad.row_mut(a).assign(&ndarray::Array1::from(g));
    }
    Ok((loss, grad))
}

/// Per-step distillation losses summed over tiers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistillTrace {
    pub subset: Vec<usize>,
    /// `steps + 1` entries: before each step and after the last.
    pub losses: Vec<f64>,
}

/// Sample a subset, freeze the tier-average similarity target, and run
/// `steps` gradient-descent steps on each table independently.
pub fn distill_step(
    params: &mut TieredPublicParams,
    k: usize,
    steps: usize,
    kd_lr: f64,
    rng: &mut impl Rng,
) -> Result<DistillTrace> {
    if steps == 0 {
        return Ok(DistillTrace::default());
    }
    let subset = select_kd_items(params.num_items(), k.min(params.num_items()), rng)?;
    let per_tier: Vec<DistanceMatrix> = params
        .tables
        .iter()
        .map(|t| pairwise_cosine(t, &subset))
        .collect();
    let target = ensemble_distance(&per_tier)?;
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let mut total = 0.0;
        for table in params.tables.iter_mut() {
            let (loss, grad) = kd_loss_grad(table, &subset, &target)?;
            total += loss;
            for (r, &item) in subset.items.iter().enumerate() {
                let row = table.row_mut(item);
                for (v, g) in row.iter_mut().zip(grad.row(r)) {
                    *v -= kd_lr * g;
                }
            }
        }
        losses.push(total);
    }
    let mut total = 0.0;
    for table in &params.tables {
        total += kd_loss(table, &subset, &target)?;
    }
    losses.push(total);
    Ok(DistillTrace {
        subset: subset.items,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    use crate::model::TierWidths;
    use crate::rng::SimRng;

    fn rand_table(rows: usize, cols: usize, rng: &mut SimRng) -> EmbeddingTable {
        EmbeddingTable::new(Array2::from_shape_simple_fn((rows, cols), || {
            rng.random_range(-1.0..1.0)
        }))
    }

    #[test]
    fn full_subset_and_determinism() {
        let mut rng = SimRng::seed_from_u64(1);
        let mut s = select_kd_items(7, 7, &mut rng).unwrap().items;
        s.sort_unstable();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
        let a = select_kd_items(50, 10, &mut SimRng::seed_from_u64(3)).unwrap();
        let b = select_kd_items(50, 10, &mut SimRng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(select_kd_items(5, 9, &mut rng).unwrap().len(), 5);
        assert!(select_kd_items(5, 1, &mut rng).is_err());
    }

    #[test]
    fn inclusion_is_uniform() {
        let mut rng = SimRng::seed_from_u64(2);
        let (n, k, draws) = (20, 5, 10_000);
        let mut hits = vec![0usize; n];
        for _ in 0..draws {
            let s = select_kd_items(n, k, &mut rng).unwrap();
            let mut sorted = s.items.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), k);
            for i in s.items {
                hits[i] += 1;
            }
        }
        let expected = k as f64 / n as f64;
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((f - expected).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn cosine_closed_forms() {
        let same = EmbeddingTable::new(Array2::from_elem((3, 4), 2.0));
        let all = KdSubset {
            items: vec![0, 1, 2],
        };
        let m = pairwise_cosine(&same, &all);
        assert!(m.0.iter().all(|&c| (c - 1.0).abs() < 1e-12));
        let eye = EmbeddingTable::new(Array2::eye(3));
        let m = pairwise_cosine(&eye, &all);
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((m.0[[a, b]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cosine_matches_scalar_oracle() {
        let mut rng = SimRng::seed_from_u64(4);
        let t = rand_table(6, 8, &mut rng);
        let subset = KdSubset {
            items: vec![5, 0, 3, 1, 4, 2],
        };
        let m = pairwise_cosine(&t, &subset);
        for a in 0..6 {
            for b in 0..6 {
                let (ra, rb) = (t.row(subset.items[a]), t.row(subset.items[b]));
                let mut d = 0.0;
                let (mut na, mut nb) = (0.0, 0.0);
                for c in 0..8 {
                    d += ra[c] * rb[c];
                    na += ra[c] * ra[c];
                    nb += rb[c] * rb[c];
                }
                let want = d / (na.sqrt() * nb.sqrt() + COSINE_EPS);
                assert!((m.0[[a, b]] - want).abs() < 1e-12);
                assert!(m.0[[a, b]] >= -1.0 - 1e-12 && m.0[[a, b]] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_mean() {
        let c = |v: f64| DistanceMatrix(Array2::from_elem((3, 3), v));
        let e = ensemble_distance(&[c(0.0), c(0.5), c(1.0)]).unwrap();
        assert!(e.0.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let same = ensemble_distance(&[c(0.3), c(0.3), c(0.3)]).unwrap();
        assert!(same.0.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let bad = DistanceMatrix(Array2::zeros((2, 2)));
        assert!(ensemble_distance(&[c(0.0), bad]).is_err());

        let mut rng = SimRng::seed_from_u64(8);
        let r: Vec<DistanceMatrix> = (0..3)
            .map(|_| {
                DistanceMatrix(Array2::from_shape_simple_fn((4, 4), || {
                    rng.random_range(-1.0..1.0)
                }))
            })
            .collect();
        let e = ensemble_distance(&r).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let want = (r[0].0[[a, b]] + r[1].0[[a, b]] + r[2].0[[a, b]]) / 3.0;
                assert!((e.0[[a, b]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kd_loss_closed_forms() {
        let mut rng = SimRng::seed_from_u64(5);
        let t = rand_table(4, 3, &mut rng);
        let subset = KdSubset { items: vec![1, 3] };
        let own = pairwise_cosine(&t, &subset);
        assert_eq!(kd_loss(&t, &subset, &own).unwrap(), 0.0);
        let shifted = DistanceMatrix(&own.0 + 0.1);
        assert!((kd_loss(&t, &subset, &shifted).unwrap() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SimRng::seed_from_u64(9);
        let t = rand_table(7, 5, &mut rng);
        let subset = KdSubset {
            items: vec![6, 2, 0, 4],
        };
        let target = DistanceMatrix(Array2::from_shape_fn((4, 4), |(a, b)| {
            if a == b {
                1.0
            } else {
                0.1 * (a + b) as f64 - 0.3
            }
        }));
        let (_, grad) = kd_loss_grad(&t, &subset, &target).unwrap();
        let h = 1e-6;
        for (r, &item) in subset.items.iter().enumerate() {
            for c in 0..5 {
                let mut plus = t.clone();
                plus.row_mut(item)[c] += h;
                let mut minus = t.clone();
                minus.row_mut(item)[c] -= h;
                let fd = (kd_loss(&plus, &subset, &target).unwrap()
                    - kd_loss(&minus, &subset, &target).unwrap())
                    / (2.0 * h);
                let an = grad[[r, c]];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn only_subset_rows_change_and_loss_falls() {
        let mut rng = SimRng::seed_from_u64(10);
        let mut params = TieredPublicParams::init_aligned(TierWidths::default(), 40, &mut rng);
        for t in params.tables.iter_mut() {
            *t = rand_table(40, t.dim(), &mut rng);
        }
        let before = params.clone();
        let trace = distill_step(&mut params, 8, 20, 0.01, &mut rng).unwrap();
        assert_eq!(trace.losses.len(), 21);
        for w in trace.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", trace.losses);
        }
        for (a, b) in params.tables.iter().zip(&before.tables) {
            for i in 0..40 {
                if !trace.subset.contains(&i) {
                    assert_eq!(a.row(i), b.row(i));
                }
            }
        }
    }

    #[test]
    fn consistent_tables_do_not_move() {
        let mut rng = SimRng::seed_from_u64(6);
        let mut params =
            TieredPublicParams::init_aligned(TierWidths::new(2, 3, 4).unwrap(), 10, &mut rng);
        // make every table an identical-direction copy
        let base = rand_table(10, 2, &mut rng);
        for t in params.tables.iter_mut() {
            let dim = t.dim();
            let mut v = Array2::zeros((10, dim));
            v.slice_mut(ndarray::s![.., ..2]).assign(base.values());
            *t = EmbeddingTable::new(v);
        }
        let before = params.clone();
        distill_step(&mut params, 10, 3, 0.1, &mut rng).unwrap();
        for (a, b) in params.tables.iter().zip(&before.tables) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let mut rng = SimRng::seed_from_u64(7);
        let mut params = TieredPublicParams::init_aligned(TierWidths::default(), 12, &mut rng);
        let before = params.clone();
        distill_step(&mut params, 5, 0, 0.1, &mut rng).unwrap();
        assert_eq!(params, before);
    }
}
