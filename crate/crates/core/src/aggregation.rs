//! Server-side merging of client deltas.
//!
//! Narrower item-table deltas are zero-padded to the widest tier and summed;
//! each tier's table then takes the prefix of the sum that matches its width.
//! Scorers are merged only with scorers of the same width.

use log::warn;
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{EmbeddingTable, ScorerParams, Tier, TierWidths};
use crate::training::UpdatePacket;

/// Item tables and scorers for all three tiers.
#[derive(Debug, Clone, PartialEq)]
pub struct TieredPublicParams {
    pub widths: TierWidths,
    pub tables: [EmbeddingTable; 3],
    pub thetas: [ScorerParams; 3],
}

impl TieredPublicParams {
    /// Random init with aligned prefixes: the small table is the first `N_s`
    /// columns of the medium one, which is the first `N_m` columns of the
    /// large one. Scorers are independent.
    pub fn init_aligned(widths: TierWidths, num_items: usize, rng: &mut impl Rng) -> Self {
        let large = EmbeddingTable::random(num_items, widths.largest(), rng);
        let tables = Tier::ALL.map(|t| large.prefix(widths.of(t)).unwrap());
        let thetas = Tier::ALL.map(|t| ScorerParams::random(widths.of(t), rng));
        Self {
            widths,
            tables,
            thetas,
        }
    }

    pub fn num_items(&self) -> usize {
        self.tables[0].rows()
    }

    pub fn table(&self, tier: Tier) -> &EmbeddingTable {
        &self.tables[tier.index()]
    }

    pub fn theta(&self, tier: Tier) -> &ScorerParams {
        &self.thetas[tier.index()]
    }

    /// Largest absolute difference between each narrower table and the
    /// matching prefix of every wider one.
    pub fn tier_consistency_gap(&self) -> f64 {
        let mut gap = 0.0f64;
        for narrow in 0..3 {
            for wide in narrow + 1..3 {
                let n = self.tables[narrow].dim();
                let prefix = self.tables[wide].truncate(n).unwrap();
                for (a, b) in self.tables[narrow].values().iter().zip(prefix.iter()) {
                    gap = gap.max((a - b).abs());
                }
            }
        }
        gap
    }
}

/// How packet sums are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    /// Plain sum of deltas.
    #[default]
    Sum,
    /// Divide each block by the number of packets contributing to it.
    Mean,
}

/// Which scorer deltas a packet must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaContract {
    /// Its own tier and every narrower tier.
    Nested,
    /// Its own tier only.
    OwnTier,
}

impl ThetaContract {
    fn required(self, tier: Tier) -> &'static [Tier] {
        match self {
            ThetaContract::Nested => tier.nested(),
            ThetaContract::OwnTier => &Tier::ALL[tier.index()..=tier.index()],
        }
    }
}

/// Shape and content checks for one packet.
pub fn validate_packet(
    packet: &UpdatePacket,
    widths: &TierWidths,
    rows: usize,
    thetas: ThetaContract,
) -> Result<()> {
    let want = (rows, widths.of(packet.tier));
    if packet.delta_v.dim() != want {
        return Err(contract(format!(
            "client {}: {} packet has item delta {:?}, expected {:?}",
            packet.client,
            packet.tier,
            packet.delta_v.dim(),
            want
        )));
    }
    for &t in thetas.required(packet.tier) {
        match &packet.delta_thetas[t.index()] {
            Some(d) if d.len() == ScorerParams::param_count(2 * widths.of(t)) => {}
            Some(_) => {
                return Err(contract(format!(
                    "client {}: {t} scorer delta has the wrong length",
                    packet.client
                )))
            }
            None => {
                return Err(contract(format!(
                    "client {}: missing {t} scorer delta",
                    packet.client
                )))
            }
        }
    }
    if !packet.is_finite() {
        return Err(contract(format!(
            "client {}: non-finite delta",
            packet.client
        )));
    }
    Ok(())
}

/// Keep packets that pass [`validate_packet`], in ascending client order.
pub fn accept_packets<'a>(
    packets: &'a [UpdatePacket],
    widths: &TierWidths,
    rows: usize,
    thetas: ThetaContract,
) -> Vec<&'a UpdatePacket> {
    let mut ok: Vec<&UpdatePacket> = packets
        .iter()
        .filter(|p| match validate_packet(p, widths, rows, thetas) {
            Ok(()) => true,
            Err(e) => {
                warn!("rejecting packet: {e}");
                false
            }
        })
        .collect();
    ok.sort_by_key(|p| p.client);
    ok
}

/// Zero-fill columns `[N, target)`.
pub fn pad_update(delta: ArrayView2<'_, f64>, target: usize) -> Result<Array2<f64>> {
    if delta.ncols() > target {
        return Err(contract(format!(
            "cannot pad width {} to {target}",
            delta.ncols()
        )));
    }
    let mut out = Array2::zeros((delta.nrows(), target));
    out.slice_mut(s![.., ..delta.ncols()]).assign(&delta);
    Ok(out)
}

/// Padded sum of item deltas at the largest width.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemAggregate {
    pub widths: TierWidths,
    pub full: Array2<f64>,
    /// Accepted packets per tier.
    pub counts: [usize; 3],
}

impl ItemAggregate {
    /// Update for `tier`: the first `N_tier` columns of the full sum.
    pub fn slice(&self, tier: Tier) -> ArrayView2<'_, f64> {
        self.full.slice(s![.., ..self.widths.of(tier)])
    }
}

/// Sum of padded item deltas in ascending client order. Malformed packets
/// are logged and skipped.
pub fn aggregate_item_updates(
    packets: &[UpdatePacket],
    widths: &TierWidths,
    rows: usize,
    mode: AggregateMode,
) -> ItemAggregate {
    let mut full = Array2::zeros((rows, widths.largest()));
    let mut counts = [0usize; 3];
    for p in accept_packets(packets, widths, rows, ThetaContract::OwnTier) {
        // same result as adding pad_update(delta), without the allocation
        let n = p.delta_v.ncols();
        full.slice_mut(s![.., ..n])
            .zip_mut_with(&p.delta_v, |a, d| *a += d);
        counts[p.tier.index()] += 1;
    }
    if mode == AggregateMode::Mean {
        let mut lo = 0;
        for t in Tier::ALL {
            let hi = widths.of(t);
            let contributors: usize = counts[t.index()..].iter().sum();
            if contributors > 0 {
                full.slice_mut(s![.., lo..hi])
                    .mapv_inplace(|v| v / contributors as f64);
            }
            lo = hi;
        }
    }
    ItemAggregate {
        widths: *widths,
        full,
        counts,
    }
}

/// `V_t <- V_t - agg[:, :N_t]` for every tier.
pub fn apply_item_updates(params: &mut TieredPublicParams, agg: &ItemAggregate) -> Result<()> {
    if agg.full.dim() != (params.num_items(), params.widths.largest()) {
        return Err(contract("aggregate shape does not match the parameters"));
    }
    for t in Tier::ALL {
        let slice = agg.slice(t);
        params.tables[t.index()]
            .values_mut()
            .zip_mut_with(&slice, |v, d| *v -= d);
    }
    Ok(())
}

/// Merge scorer deltas width by width. Under [`ThetaContract::Nested`] the
/// scorer of tier `t` collects deltas from every packet of tier `>= t`.
/// Returns the number of rejected packets.
pub fn aggregate_theta(
    packets: &[UpdatePacket],
    params: &mut TieredPublicParams,
    thetas: ThetaContract,
    mode: AggregateMode,
) -> usize {
    let rows = params.num_items();
    let accepted = accept_packets(packets, &params.widths, rows, thetas);
    for t in Tier::ALL {
        let mut sum = vec![0.0; params.thetas[t.index()].len()];
        let mut count = 0usize;
        for p in &accepted {
            if !thetas.required(p.tier).contains(&t) {
                continue;
            }
            let d = p.delta_thetas[t.index()].as_ref().unwrap();
            for (s, v) in sum.iter_mut().zip(d) {
                *s += v;
            }
            count += 1;
        }
        if count == 0 {
            continue;
        }
        let scale = match mode {
            AggregateMode::Sum => 1.0,
            AggregateMode::Mean => 1.0 / count as f64,
        };
        for (p, s) in params.thetas[t.index()].as_mut_slice().iter_mut().zip(&sum) {
            *p -= scale * s;
        }
    }
    packets.len() - accepted.len()
}

/// Single-width sum-and-apply on the `tier` table and scorer. Every packet
/// must belong to `tier`.
pub fn homogeneous_aggregate(
    packets: &[UpdatePacket],
    params: &mut TieredPublicParams,
    tier: Tier,
    mode: AggregateMode,
) -> Result<()> {
    if let Some(p) = packets.iter().find(|p| p.tier != tier) {
        return Err(contract(format!(
            "homogeneous {tier} aggregation received a {} packet from client {}",
            p.tier, p.client
        )));
    }
    let rows = params.num_items();
    let accepted = accept_packets(packets, &params.widths, rows, ThetaContract::OwnTier);
    if accepted.is_empty() {
        return Ok(());
    }
    let mut table_sum = Array2::zeros((rows, params.widths.of(tier)));
    let mut theta_sum = vec![0.0; params.thetas[tier.index()].len()];
    for p in &accepted {
        table_sum += &p.delta_v;
        for (s, v) in theta_sum
            .iter_mut()
            .zip(p.delta_thetas[tier.index()].as_ref().unwrap())
        {
            *s += v;
        }
    }
    let scale = match mode {
        AggregateMode::Sum => 1.0,
        AggregateMode::Mean => 1.0 / accepted.len() as f64,
    };
    params.tables[tier.index()]
        .values_mut()
        .zip_mut_with(&table_sum, |v, d| *v -= scale * d);
    for (p, s) in params.thetas[tier.index()]
        .as_mut_slice()
        .iter_mut()
        .zip(&theta_sum)
    {
        *p -= scale * s;
    }
    Ok(())
}

/// Independent homogeneous aggregation within each tier.
pub fn clustered_aggregate(
    packets: &[UpdatePacket],
    params: &mut TieredPublicParams,
    mode: AggregateMode,
) -> Result<()> {
    for t in Tier::ALL {
        let group: Vec<UpdatePacket> = packets.iter().filter(|p| p.tier == t).cloned().collect();
        homogeneous_aggregate(&group, params, t, mode)?;
    }
    Ok(())
}
