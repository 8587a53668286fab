//! The federated loop: client selection, local training, aggregation and
//! distillation, dispatched by strategy.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_item_updates, aggregate_theta, apply_item_updates, clustered_aggregate,
    homogeneous_aggregate, ThetaContract, TieredPublicParams,
};
use crate::config::ExperimentConfig;
use crate::dataset::{
    binarize_and_split, load_interactions, partition_clients, synth_raw, Format, GroupAssignment,
    InteractionDataset,
};
use crate::distillation::distill_step;
use crate::error::{Error, Result};
use crate::eval::{evaluate_users, score_items, MetricsReport, TierDiagnostics, UserModel};
use crate::model::{EmbeddingTable, ScorerParams, Tier, TierWidths, UserEmbedding};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::training::{
    local_train, ClientOutcome, ClientState, LossPlan, Received, TrainSettings, UpdatePacket,
};

/// How clients are sized and how their updates are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Tiered widths, padded aggregation, multi-width loss, decorrelation and
    /// distillation.
    Hetero,
    /// Everyone trains the small width.
    AllSmall,
    /// Everyone trains the large width.
    AllLarge,
    /// Large width for everyone, but small-group updates are discarded.
    AllLargeExclusive,
    /// No collaboration; every client keeps its own model.
    Standalone,
    /// One independent federation per tier.
    Clustered,
    /// Tiered widths with padded aggregation only.
    DirectAggregate,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Hetero,
        Strategy::AllSmall,
        Strategy::AllLarge,
        Strategy::AllLargeExclusive,
        Strategy::Standalone,
        Strategy::Clustered,
        Strategy::DirectAggregate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Hetero => "hetero",
            Strategy::AllSmall => "all-small",
            Strategy::AllLarge => "all-large",
            Strategy::AllLargeExclusive => "all-large-exclusive",
            Strategy::Standalone => "standalone",
            Strategy::Clustered => "clustered",
            Strategy::DirectAggregate => "direct-aggregate",
        }
    }

    /// Width a client of `group` trains and is evaluated at.
    pub fn train_tier(self, group: Tier) -> Tier {
        match self {
            Strategy::AllSmall => Tier::Small,
            Strategy::AllLarge | Strategy::AllLargeExclusive => Tier::Large,
            _ => group,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config {
                key: "run.strategy".into(),
                constraint: format!(
                    "unknown strategy {s:?}; expected one of {}",
                    Strategy::ALL.map(|s| s.name()).join(", ")
                ),
            })
    }
}

/// Groups whose packets the exclusive large-width baseline keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusiveSet {
    #[default]
    MediumLarge,
    Large,
}

impl ExclusiveSet {
    pub fn keeps(self, group: Tier) -> bool {
        match self {
            ExclusiveSet::MediumLarge => group != Tier::Small,
            ExclusiveSet::Large => group == Tier::Large,
        }
    }
}

/// A standalone client's private copy of its tier model, stored as the rows
/// that differ from the initial public table.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModelStore {
    pub rows: Vec<(usize, Vec<f64>)>,
    pub theta: ScorerParams,
}

impl LocalModelStore {
    pub fn materialize(&self, base: &EmbeddingTable) -> EmbeddingTable {
        let mut t = base.clone();
        for (i, row) in &self.rows {
            t.row_mut(*i).copy_from_slice(row);
        }
        t
    }

    fn capture(base: &EmbeddingTable, table: &EmbeddingTable, theta: ScorerParams) -> Self {
        let rows = (0..table.rows())
            .filter(|&i| table.row(i) != base.row(i))
            .map(|i| (i, table.row(i).to_vec()))
            .collect();
        Self { rows, theta }
    }
}

/// Load or generate the interactions named by the config and split them.
pub fn load_dataset(config: &ExperimentConfig) -> Result<InteractionDataset> {
    let seed = config.run.seed;
    let raw = match &config.data.path {
        Some(path) => {
            let format = match config.data.format {
                Some(f) => f,
                None => Format::from_path(path),
            };
            load_interactions(path, format)?
        }
        None => synth_raw(&config.data.synthetic.spec(seed))?,
    };
    binarize_and_split(
        &raw,
        config.data.train_frac,
        derive_seed(seed, stream::DATA, &[1]),
    )
}

/// Server and client state of one experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: ExperimentConfig,
    pub strategy: Strategy,
    pub dataset: InteractionDataset,
    pub groups: GroupAssignment,
    pub params: TieredPublicParams,
    /// Public parameters at initialization; standalone clients start here.
    pub initial: TieredPublicParams,
    pub clients: Vec<ClientState>,
    pub standalone: Vec<Option<LocalModelStore>>,
    /// Permutation of client ids for the current epoch.
    pub queue: Vec<usize>,
    pub cursor: usize,
    pub epoch: usize,
    pub round: u64,
    epoch_losses: Vec<f64>,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig, dataset: InteractionDataset) -> Result<Self> {
        config.validate()?;
        let config = config.effective();
        let widths = config.widths()?;
        let seed = config.run.seed;
        let [q0, q1] = config.partition.quantiles;
        let groups = partition_clients(&dataset, (q0, q1))?;
        info!("client groups: {groups}");
        let strategy = config.run.strategy;
        let params = TieredPublicParams::init_aligned(
            widths,
            dataset.num_items,
            &mut stream_rng(seed, stream::INIT, &[]),
        );
        let clients = (0..dataset.num_users)
            .map(|u| {
                let tier = strategy.train_tier(groups.tier(u));
                let mut rng = stream_rng(seed, stream::USER_INIT, &[u as u64]);
                ClientState {
                    user: u,
                    tier,
                    embedding: UserEmbedding::random(widths.of(tier), &mut rng),
                }
            })
            .collect();
        Ok(Self {
            strategy,
            standalone: vec![None; dataset.num_users],
            queue: (0..dataset.num_users).collect(),
            cursor: dataset.num_users,
            epoch: 0,
            round: 0,
            initial: params.clone(),
            params,
            groups,
            clients,
            dataset,
            config,
            epoch_losses: Vec::new(),
        })
    }

    pub fn widths(&self) -> TierWidths {
        self.params.widths
    }

    fn settings(&self) -> TrainSettings {
        let t = &self.config.train;
        TrainSettings {
            local_epochs: t.local_epochs,
            lr: t.lr,
            neg_ratio: t.neg_ratio,
            batch_size: t.batch_size,
            val_frac: t.val_frac,
            base: self.config.model.base,
            widths: self.widths(),
        }
    }

    fn plan(&self, tier: Tier) -> LossPlan {
        LossPlan {
            scope: self.config.train.reg_scope,
            tier,
            nested: self.config.train.dual_task,
            alpha: self.config.train.alpha,
        }
    }

    fn round_size(&self) -> usize {
        self.config
            .train
            .round_size
            .min(self.dataset.num_users)
            .max(1)
    }

    /// Reshuffle the queue and start the next epoch.
    pub fn begin_epoch(&mut self) {
        self.epoch += 1;
        let mut rng = stream_rng(self.config.run.seed, stream::SELECT, &[self.epoch as u64]);
        self.queue = (0..self.dataset.num_users).collect();
        self.queue.shuffle(&mut rng);
        self.cursor = 0;
        self.epoch_losses.clear();
    }

    pub fn epoch_done(&self) -> bool {
        self.cursor >= self.queue.len()
    }

    /// Next slice of the shuffled queue; the last round of an epoch may be
    /// short.
    pub fn select_clients(&mut self) -> Vec<usize> {
        let end = (self.cursor + self.round_size()).min(self.queue.len());
        let ids = self.queue[self.cursor..end].to_vec();
        self.cursor = end;
        ids
    }

    /// Parameters handed to a client before local training.
    pub fn received(&self, client: usize) -> Received {
        let tier = self.clients[client].tier;
        let plan = self.plan(tier);
        let mut thetas: [Option<ScorerParams>; 3] = [None, None, None];
        if self.strategy == Strategy::Standalone {
            let base = self.initial.table(tier);
            let (table, theta) = match &self.standalone[client] {
                Some(store) => (store.materialize(base), store.theta.clone()),
                None => (base.clone(), self.initial.theta(tier).clone()),
            };
            thetas[tier.index()] = Some(theta);
            return Received { table, thetas };
        }
        for &t in plan.terms() {
            thetas[t.index()] = Some(self.params.theta(t).clone());
        }
        Received {
            table: self.params.table(tier).clone(),
            thetas,
        }
    }

    /// Train the given clients against the current parameters. Client
    /// embeddings are updated; public parameters are not touched. Outcomes
    /// come back in the order of `ids`, each with the parameters it received.
    pub fn train_clients(&mut self, ids: &[usize]) -> Result<Vec<(Received, ClientOutcome)>> {
        let settings = self.settings();
        let seed = self.config.run.seed;
        let round = self.round;
        let this = &*self;
        let results: Vec<Result<(ClientState, Option<(Received, ClientOutcome)>)>> = ids
            .par_iter()
            .map(|&id| {
                let mut client = this.clients[id].clone();
                let received = this.received(id);
                let plan = this.plan(client.tier);
                let mut rng = stream_rng(seed, stream::CLIENT, &[id as u64, round]);
                let outcome = local_train(
                    &mut client,
                    &this.dataset.train[id],
                    this.dataset.num_items,
                    &received,
                    &plan,
                    &settings,
                    round,
                    &mut rng,
                )?;
                Ok((client, outcome.map(|o| (received, o))))
            })
            .collect();
        let mut out = Vec::with_capacity(ids.len());
        for r in results {
            let (client, outcome) = r?;
            let id = client.user;
            self.clients[id] = client;
            match outcome {
                Some(o) => out.push(o),
                None => debug!("client {id} has no training data; skipped"),
            }
        }
        Ok(out)
    }

    /// Server-side merge of one round's packets.
    pub fn aggregate(&mut self, packets: &[UpdatePacket]) -> Result<()> {
        let mode = self.config.train.aggregate;
        match self.strategy {
            Strategy::Hetero | Strategy::DirectAggregate => {
                let agg = aggregate_item_updates(
                    packets,
                    &self.params.widths,
                    self.params.num_items(),
                    mode,
                );
                apply_item_updates(&mut self.params, &agg)?;
                let contract = if self.config.train.dual_task {
                    ThetaContract::Nested
                } else {
                    ThetaContract::OwnTier
                };
                aggregate_theta(packets, &mut self.params, contract, mode);
            }
            Strategy::AllSmall => {
                homogeneous_aggregate(packets, &mut self.params, Tier::Small, mode)?
            }
            Strategy::AllLarge => {
                homogeneous_aggregate(packets, &mut self.params, Tier::Large, mode)?
            }
            Strategy::AllLargeExclusive => {
                let kept = self.exclusive_filter(packets);
                homogeneous_aggregate(&kept, &mut self.params, Tier::Large, mode)?;
            }
            Strategy::Clustered => clustered_aggregate(packets, &mut self.params, mode)?,
            Strategy::Standalone => {}
        }
        Ok(())
    }

    /// Packets the exclusive baseline keeps, by the sender's data group.
    pub fn exclusive_filter(&self, packets: &[UpdatePacket]) -> Vec<UpdatePacket> {
        let set = self.config.train.exclusive;
        packets
            .iter()
            .filter(|p| set.keeps(self.groups.tier(p.client)))
            .cloned()
            .collect()
    }

    /// One full round: select, train, aggregate, distill.
    pub fn run_round(&mut self) -> Result<Vec<usize>> {
        let ids = self.select_clients();
        let outcomes = self.train_clients(&ids)?;
        for (_, o) in &outcomes {
            if let Some(&l) = o.loss_trace.last() {
                self.epoch_losses.push(l);
            }
        }
        if self.strategy == Strategy::Standalone {
            for (received, o) in &outcomes {
                let p = &o.packet;
                let tier = p.tier;
                let mut table = received.table.clone();
                table.values_mut().zip_mut_with(&p.delta_v, |v, d| *v -= d);
                let mut theta = received.thetas[tier.index()].clone().unwrap();
                let dt = p.delta_thetas[tier.index()].as_ref().unwrap();
                for (v, d) in theta.as_mut_slice().iter_mut().zip(dt) {
                    *v -= d;
                }
                self.standalone[p.client] = Some(LocalModelStore::capture(
                    self.initial.table(tier),
                    &table,
                    theta,
                ));
            }
        } else {
            let packets: Vec<UpdatePacket> = outcomes.into_iter().map(|(_, o)| o.packet).collect();
            self.aggregate(&packets)?;
        }
        if self.config.distill.enabled {
            let d = &self.config.distill;
            let mut rng = stream_rng(self.config.run.seed, stream::DISTILL, &[self.round]);
            let trace = distill_step(&mut self.params, d.k, d.steps, d.lr, &mut rng)?;
            debug!("round {} distillation loss {:?}", self.round, trace.losses);
        }
        if self.params.tables.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                client: usize::MAX,
                round: self.round,
                what: "public item table",
            });
        }
        self.round += 1;
        Ok(ids)
    }

    /// Run every round of the next epoch.
    pub fn run_epoch(&mut self) -> Result<()> {
        self.begin_epoch();
        while !self.epoch_done() {
            self.run_round()?;
        }
        Ok(())
    }

    fn standalone_table(&self, user: usize) -> (EmbeddingTable, ScorerParams) {
        let tier = self.clients[user].tier;
        match &self.standalone[user] {
            Some(s) => (s.materialize(self.initial.table(tier)), s.theta.clone()),
            None => (
                self.initial.table(tier).clone(),
                self.initial.theta(tier).clone(),
            ),
        }
    }

    fn diagnostics(&self) -> Result<[TierDiagnostics; 3]> {
        let mut out = [TierDiagnostics::default(); 3];
        for t in Tier::ALL {
            out[t.index()] = if self.strategy == Strategy::Standalone {
                let tables: Vec<EmbeddingTable> = (0..self.clients.len())
                    .filter(|&u| self.clients[u].tier == t)
                    .map(|u| self.standalone_table(u).0)
                    .collect();
                TierDiagnostics::of_tables(tables.iter())?
            } else {
                TierDiagnostics::of_tables([self.params.table(t)])?
            };
        }
        Ok(out)
    }

    /// Metrics for the current state, labelled with the current epoch.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let base = self.config.model.base;
        let k = self.config.output.k;
        let (users, skipped) = evaluate_users(&self.dataset, k, |u| {
            let client = &self.clients[u];
            let train = &self.dataset.train[u];
            if self.strategy == Strategy::Standalone {
                let (table, theta) = self.standalone_table(u);
                let m = UserModel {
                    user: &client.embedding.0,
                    table: &table,
                    theta: &theta,
                };
                return score_items(&m, base, train);
            }
            let m = UserModel {
                user: &client.embedding.0,
                table: self.params.table(client.tier),
                theta: self.params.theta(client.tier),
            };
            score_items(&m, base, train)
        })?;
        let mut report = MetricsReport::assemble(
            self.epoch,
            self.strategy.name(),
            k,
            &users,
            &self.groups,
            self.diagnostics()?,
            skipped,
        );
        if !self.epoch_losses.is_empty() {
            report.train_loss =
                Some(self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64);
        }
        Ok(report)
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// One report per evaluation, starting with the untrained model.
    pub reports: Vec<MetricsReport>,
    pub params: TieredPublicParams,
    pub groups: GroupAssignment,
    pub dataset_fingerprint: String,
}

impl RunOutput {
    pub fn last(&self) -> &MetricsReport {
        self.reports
            .last()
            .expect("at least the initial evaluation")
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Contract(format!("cannot build worker pool: {e}")))
}

/// Run `epochs` of the configured strategy on the configured data.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_with(config, |_, _| Ok(()))
}

/// [`run_experiment`] with a hook called after every evaluation.
pub fn run_experiment_with<F>(config: &ExperimentConfig, on_epoch: F) -> Result<RunOutput>
where
    F: FnMut(&MetricsReport, &TieredPublicParams) -> Result<()> + Send,
{
    config.validate()?;
    let dataset = load_dataset(config)?;
    run_on_dataset(config, dataset, on_epoch)
}

/// [`run_experiment_with`] on an already loaded dataset.
pub fn run_on_dataset<F>(
    config: &ExperimentConfig,
    dataset: InteractionDataset,
    mut on_epoch: F,
) -> Result<RunOutput>
where
    F: FnMut(&MetricsReport, &TieredPublicParams) -> Result<()> + Send,
{
    let start = Instant::now();
    let fingerprint = dataset.fingerprint();
    pool(config.run.workers)?.install(|| {
        let mut sim = Simulation::new(config, dataset)?;
        let mut reports = Vec::with_capacity(config.run.epochs + 1);
        let mut record = |sim: &Simulation, reports: &mut Vec<MetricsReport>| -> Result<()> {
            let mut r = sim.evaluate()?;
            r.wall_clock_secs = start.elapsed().as_secs_f64();
            info!(
                "{} epoch {}: recall@{} {:.5} ndcg@{} {:.5}",
                r.strategy, r.epoch, r.k, r.overall.recall, r.k, r.overall.ndcg
            );
            on_epoch(&r, &sim.params)?;
            reports.push(r);
            Ok(())
        };
        record(&sim, &mut reports)?;
        for _ in 0..config.run.epochs {
            sim.run_epoch()?;
            record(&sim, &mut reports)?;
        }
        Ok(RunOutput {
            reports,
            params: sim.params,
            groups: sim.groups,
            dataset_fingerprint: fingerprint,
        })
    })
}
