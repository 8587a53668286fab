//! Client-side objectives, Adam, and the local training loop.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_negatives_for, Interaction};
use crate::error::{contract, Error, Result};
use crate::model::{
    lightgcn_propagate, BaseModel, EmbeddingTable, ScorerParams, Tier, TierWidths, UserEmbedding,
};

/// Added to column variances before standardizing.
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// One client: a user with a private embedding and a model tier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub user: usize,
    pub tier: Tier,
    /// Private; never leaves the client.
    pub embedding: UserEmbedding,
}

/// Parameter deltas uploaded by one client (`received - trained`).
#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePacket {
    pub client: usize,
    pub tier: Tier,
    pub delta_v: Array2<f64>,
    /// Indexed by tier; present for every scorer the client trained.
    pub delta_thetas: [Option<Vec<f64>>; 3],
}

impl UpdatePacket {
    pub fn is_finite(&self) -> bool {
        self.delta_v.iter().all(|v| v.is_finite())
            && self
                .delta_thetas
                .iter()
                .flatten()
                .all(|d| d.iter().all(|v| v.is_finite()))
    }
}

/// Which objective terms a client optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPlan {
    pub tier: Tier,
    /// Also train every narrower prefix against the narrower scorer.
    pub nested: bool,
    /// Decorrelation weight; ignored for the small tier.
    pub alpha: f64,
    pub scope: RegScope,
}

/// Rows the decorrelation penalty is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegScope {
    /// Distinct items of the current batch, so the penalty only moves rows
    /// the batch already touches.
    #[default]
    Batch,
    /// Every row of the received table.
    Table,
}

impl LossPlan {
    pub fn terms(&self) -> &'static [Tier] {
        if self.nested {
            self.tier.nested()
        } else {
            &Tier::ALL[self.tier.index()..=self.tier.index()]
        }
    }

    fn reg_weight(&self) -> f64 {
        if self.tier == Tier::Small {
            0.0
        } else {
            self.alpha
        }
    }
}

/// Parameters a client trains against. `thetas` is indexed by tier.
#[derive(Debug, Clone, Copy)]
pub struct LocalModel<'a> {
    pub user: &'a [f64],
    pub table: &'a EmbeddingTable,
    pub thetas: [Option<&'a ScorerParams>; 3],
    pub widths: TierWidths,
    pub base: BaseModel,
    /// Local graph for LightGCN (the client's train positives, sorted).
    pub local_items: &'a [usize],
}

/// Gradients matching a [`LocalModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrads {
    pub user: Vec<f64>,
    pub table: Array2<f64>,
    pub thetas: [Option<Vec<f64>>; 3],
}

#[inline]
fn bce_term(pred: f64, label: f64) -> f64 {
    -(label * pred.ln() + (1.0 - label) * (1.0 - pred).ln())
}

/// Summed binary cross-entropy.
pub fn bce_loss(preds: &[f64], labels: &[u8]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != labels.len() {
        return Err(contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(&p, &r)| bce_term(p, r as f64))
        .sum())
}

fn standardize(table: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let n = table.nrows() as f64;
    let mean = table.mean_axis(Axis(0)).expect("non-empty");
    let centered = &table - &mean;
    let scale: Vec<f64> = centered
        .axis_iter(Axis(1))
        .map(|c| (c.dot(&c) / n + STANDARDIZE_EPS).sqrt())
        .collect();
    let mut z = centered.clone();
    for (mut col, s) in z.axis_iter_mut(Axis(1)).zip(&scale) {
        col /= *s;
    }
    (centered, z, scale)
}

/// `(1/N) * ||corr||_F` of the column-standardized table.
pub fn decorrelation_reg(table: ArrayView2<'_, f64>) -> Result<f64> {
    if table.nrows() < 2 {
        return Err(contract("decorrelation needs at least two rows"));
    }
    let (_, z, _) = standardize(table);
    let corr = z.t().dot(&z) / table.nrows() as f64;
    let fro = corr.iter().map(|c| c * c).sum::<f64>().sqrt();
    Ok(fro / table.ncols() as f64)
}

/// Value and gradient of [`decorrelation_reg`].
pub fn decorrelation_reg_grad(table: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let rows = table.nrows();
    if rows < 2 {
        return Err(contract("decorrelation needs at least two rows"));
    }
    let n = rows as f64;
    let dim = table.ncols() as f64;
    let (centered, z, scale) = standardize(table);
    let corr = z.t().dot(&z) / n;
    let fro = corr.iter().map(|c| c * c).sum::<f64>().sqrt();
    let value = fro / dim;
    if fro == 0.0 {
        return Ok((value, Array2::zeros(table.raw_dim())));
    }
    let g_corr = &corr / (dim * fro);
    let g_z = z.dot(&g_corr) * (2.0 / n);
    let mut grad = Array2::zeros(table.raw_dim());
    for (j, s) in scale.iter().enumerate() {
        let c = centered.column(j);
        let gz = g_z.column(j);
        let proj = gz.dot(&c) / (s * s * s * n);
        let g_c = &gz / *s - &(&c * proj);
        let mean_g = g_c.mean().unwrap();
        grad.column_mut(j).assign(&(g_c - mean_g));
    }
    Ok((value, grad))
}

/// Sample covariance (`n - 1` normalization) of the table's columns.
pub fn column_covariance(table: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = table.mean_axis(Axis(0)).expect("non-empty");
    let centered = &table - &mean;
    centered.t().dot(&centered) / (table.nrows() as f64 - 1.0)
}

/// Population variance of the covariance eigenvalues.
pub fn singular_variance(table: ArrayView2<'_, f64>) -> Result<f64> {
    if table.nrows() < 2 {
        return Err(contract("covariance needs at least two rows"));
    }
    Ok(spectrum_variance(&column_covariance(table)))
}

/// Population variance of the eigenvalues of a symmetric matrix.
pub fn spectrum_variance(sym: &Array2<f64>) -> f64 {
    let dim = sym.nrows();
    let m = DMatrix::from_fn(dim, dim, |i, j| sym[[i, j]]);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let mean = eig.iter().sum::<f64>() / dim as f64;
    eig.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / dim as f64
}

/// Loss and gradients of the plan's objective on one batch.
///
/// Each term scores the batch with the prefix of the user and item
/// representations at the term's width against that width's scorer; the
/// decorrelation penalty over the plan's [`RegScope`] rows is added for
/// medium and large plans.
pub fn loss_and_grad(
    model: &LocalModel<'_>,
    plan: &LossPlan,
    batch: &[Interaction],
) -> Result<(f64, LocalGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let width = model.table.dim();
    if width != model.widths.of(plan.tier) || model.user.len() != width {
        return Err(contract(format!(
            "{} plan expects width {}, got table {} and user {}",
            plan.tier,
            model.widths.of(plan.tier),
            width,
            model.user.len()
        )));
    }
    let terms = plan.terms();
    let mut thetas = Vec::with_capacity(terms.len());
    for &t in terms {
        let theta = model.thetas[t.index()]
            .ok_or_else(|| contract(format!("missing {t} scorer for {} plan", plan.tier)))?;
        if theta.embed_dim() != model.widths.of(t) {
            return Err(contract(format!(
                "{t} scorer has width {}",
                theta.embed_dim()
            )));
        }
        thetas.push((t, theta));
    }

    let mut grads = LocalGrads {
        user: vec![0.0; width],
        table: Array2::zeros((model.table.rows(), width)),
        thetas: [None, None, None],
    };
    for &(t, theta) in &thetas {
        grads.thetas[t.index()] = Some(vec![0.0; theta.len()]);
    }

    let propagated = match model.base {
        BaseModel::Ncf => None,
        BaseModel::LightGcn => Some(lightgcn_propagate(
            model.user,
            model.table,
            model.local_items,
        )?),
    };
    let user_rep: &[f64] = propagated.as_ref().map_or(model.user, |p| &p.user);
    let mut g_user_rep = vec![0.0; width];
    let mut item_rep = vec![0.0; width];
    let mut g_item_rep = vec![0.0; width];
    let mut loss = 0.0;

    for x in batch {
        let local_pos = propagated
            .as_ref()
            .and_then(|_| model.local_items.binary_search(&x.item).ok());
        match (&propagated, local_pos) {
            (Some(p), Some(k)) => item_rep.copy_from_slice(&p.items[k]),
            (Some(_), None) => {
                for (r, v) in item_rep.iter_mut().zip(model.table.row(x.item)) {
                    *r = 0.5 * v;
                }
            }
            (None, _) => item_rep.copy_from_slice(model.table.row(x.item)),
        }
        g_item_rep.iter_mut().for_each(|g| *g = 0.0);
        let label = x.label as f64;
        for &(t, theta) in &thetas {
            let n = model.widths.of(t);
            let trace = theta.forward(&user_rep[..n], &item_rep[..n]);
            loss += bce_term(trace.prob, label);
            let dlogit = if trace.clamped {
                0.0
            } else {
                trace.prob - label
            };
            theta.backward(
                &user_rep[..n],
                &item_rep[..n],
                &trace,
                dlogit,
                grads.thetas[t.index()].as_mut().unwrap(),
                &mut g_user_rep[..n],
                &mut g_item_rep[..n],
            );
        }
        let row = grads.table.row_mut(x.item).into_slice().unwrap();
        match (&propagated, local_pos) {
            (Some(p), Some(_)) => {
                // v' = (v + norm * u) / 2
                for c in 0..width {
                    row[c] += 0.5 * g_item_rep[c];
                    grads.user[c] += 0.5 * p.norm * g_item_rep[c];
                }
            }
            (Some(_), None) => {
                for c in 0..width {
                    row[c] += 0.5 * g_item_rep[c];
                }
            }
            (None, _) => {
                for c in 0..width {
                    row[c] += g_item_rep[c];
                }
            }
        }
    }

    match &propagated {
        Some(p) => {
            // u' = (u + norm * sum_i v_i) / 2
            for c in 0..width {
                grads.user[c] += 0.5 * g_user_rep[c];
            }
            for &i in model.local_items {
                let row = grads.table.row_mut(i).into_slice().unwrap();
                for c in 0..width {
                    row[c] += 0.5 * p.norm * g_user_rep[c];
                }
            }
        }
        None => {
            for c in 0..width {
                grads.user[c] += g_user_rep[c];
            }
        }
    }

    let alpha = plan.reg_weight();
    if alpha > 0.0 {
        match plan.scope {
            RegScope::Table => {
                let (reg, g) = decorrelation_reg_grad(model.table.values().view())?;
                loss += alpha * reg;
                grads.table.scaled_add(alpha, &g);
            }
            RegScope::Batch => {
                let rows = batch_rows(batch);
                if rows.len() >= 2 {
                    let sub = model.table.values().select(Axis(0), &rows);
                    let (reg, g) = decorrelation_reg_grad(sub.view())?;
                    loss += alpha * reg;
                    for (k, &i) in rows.iter().enumerate() {
                        grads.table.row_mut(i).scaled_add(alpha, &g.row(k));
                    }
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Distinct items of a batch, ascending.
pub fn batch_rows(batch: &[Interaction]) -> Vec<usize> {
    let mut rows: Vec<usize> = batch.iter().map(|x| x.item).collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

/// Unified multi-width loss without the decorrelation penalty.
pub fn dual_task_loss(model: &LocalModel<'_>, tier: Tier, batch: &[Interaction]) -> Result<f64> {
    let plan = LossPlan {
        scope: RegScope::Batch,
        tier,
        nested: true,
        alpha: 0.0,
    };
    Ok(loss_and_grad(model, &plan, batch)?.0)
}

/// [`dual_task_loss`] plus `alpha` times the whole-table decorrelation penalty for medium
/// and large clients.
pub fn client_loss(
    model: &LocalModel<'_>,
    tier: Tier,
    batch: &[Interaction],
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(contract("alpha must be non-negative"));
    }
    let plan = LossPlan {
        scope: RegScope::Table,
        tier,
        nested: true,
        alpha,
    };
    Ok(loss_and_grad(model, &plan, batch)?.0)
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
        if params.len() != grads.len() || state.m.len() != params.len() {
            return Err(contract("Adam shapes do not match"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(contract("non-finite gradient"));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut state.m)
            .zip(&mut state.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Client-side hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub local_epochs: usize,
    pub lr: f64,
    pub neg_ratio: usize,
    /// Examples per Adam step; 0 means one full-batch step per local epoch.
    pub batch_size: usize,
    /// Fraction of positives held out per round for a logged validation loss.
    pub val_frac: f64,
    pub base: BaseModel,
    pub widths: TierWidths,
}

/// What a client hands back after a round.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub packet: UpdatePacket,
    /// Mean per-example training loss of each local epoch.
    pub loss_trace: Vec<f64>,
    /// Mean per-example loss on held-out positives and their negatives.
    pub val_loss: Option<f64>,
}

/// Received public parameters; `thetas` indexed by tier.
#[derive(Debug, Clone)]
pub struct Received {
    pub table: EmbeddingTable,
    pub thetas: [Option<ScorerParams>; 3],
}

/// Run local epochs of Adam on the plan's objective and return the deltas.
///
/// The private embedding is updated in place. Returns `None` for a client
/// without training data.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    client: &mut ClientState,
    positives: &[usize],
    num_items: usize,
    received: &Received,
    plan: &LossPlan,
    settings: &TrainSettings,
    round: u64,
    rng: &mut impl Rng,
) -> Result<Option<ClientOutcome>> {
    if positives.is_empty() {
        return Ok(None);
    }
    let mut table = received.table.clone();
    let mut thetas: [Option<ScorerParams>; 3] = [None, None, None];
    for &t in plan.terms() {
        let theta = received.thetas[t.index()].as_ref().ok_or_else(|| {
            contract(format!(
                "client {} did not receive the {t} scorer",
                client.user
            ))
        })?;
        thetas[t.index()] = Some(theta.clone());
    }

    // optional validation holdout
    let (train_pos, val_pos) = if settings.val_frac > 0.0 && positives.len() >= 2 {
        let n_val = ((settings.val_frac * positives.len() as f64).round() as usize)
            .clamp(1, positives.len() - 1);
        let mut shuffled = positives.to_vec();
        shuffled.shuffle(rng);
        let mut val = shuffled.split_off(positives.len() - n_val);
        shuffled.sort_unstable();
        val.sort_unstable();
        (shuffled, val)
    } else {
        (positives.to_vec(), Vec::new())
    };

    let adam = Adam::new(settings.lr);
    let mut user_state = AdamState::new(client.embedding.dim());
    let mut table_state = AdamState::new(table.as_slice().len());
    let mut theta_states: [Option<AdamState>; 3] = [None, None, None];
    for &t in plan.terms() {
        theta_states[t.index()] = Some(AdamState::new(thetas[t.index()].as_ref().unwrap().len()));
    }
    let non_finite = |what| Error::NonFinite {
        client: client.user,
        round,
        what,
    };

    let mut loss_trace = Vec::with_capacity(settings.local_epochs);
    for _ in 0..settings.local_epochs {
        let mut batch = sample_negatives_for(
            client.user,
            &train_pos,
            positives,
            num_items,
            settings.neg_ratio,
            rng,
        );
        let chunk = if settings.batch_size == 0 {
            batch.len()
        } else {
            batch.shuffle(rng);
            settings.batch_size
        };
        let mut epoch_loss = 0.0;
        for mb in batch.chunks(chunk) {
            let model = LocalModel {
                user: &client.embedding.0,
                table: &table,
                thetas: [thetas[0].as_ref(), thetas[1].as_ref(), thetas[2].as_ref()],
                widths: settings.widths,
                base: settings.base,
                local_items: &train_pos,
            };
            let (loss, grads) = loss_and_grad(&model, plan, mb)?;
            if !loss.is_finite() {
                return Err(non_finite("loss"));
            }
            epoch_loss += loss;
            if grads.user.iter().any(|g| !g.is_finite()) {
                return Err(non_finite("user embedding"));
            }
            if grads.table.iter().any(|g| !g.is_finite()) {
                return Err(non_finite("item table"));
            }
            adam.step(&mut client.embedding.0, &grads.user, &mut user_state)?;
            adam.step(
                table.as_slice_mut(),
                grads.table.as_slice().unwrap(),
                &mut table_state,
            )?;
            for &t in plan.terms() {
                let g = grads.thetas[t.index()].as_ref().unwrap();
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(non_finite("scorer"));
                }
                adam.step(
                    thetas[t.index()].as_mut().unwrap().as_mut_slice(),
                    g,
                    theta_states[t.index()].as_mut().unwrap(),
                )?;
            }
        }
        loss_trace.push(epoch_loss / batch.len() as f64);
    }

    let val_loss = if val_pos.is_empty() {
        None
    } else {
        let batch = sample_negatives_for(
            client.user,
            &val_pos,
            positives,
            num_items,
            settings.neg_ratio,
            rng,
        );
        let model = LocalModel {
            user: &client.embedding.0,
            table: &table,
            thetas: [thetas[0].as_ref(), thetas[1].as_ref(), thetas[2].as_ref()],
            widths: settings.widths,
            base: settings.base,
            local_items: &train_pos,
        };
        let eval_plan = LossPlan {
            alpha: 0.0,
            ..*plan
        };
        Some(loss_and_grad(&model, &eval_plan, &batch)?.0 / batch.len() as f64)
    };

    let delta_v = received.table.values() - table.values();
    let mut delta_thetas: [Option<Vec<f64>>; 3] = [None, None, None];
    for &t in plan.terms() {
        let before = received.thetas[t.index()].as_ref().unwrap().as_slice();
        let after = thetas[t.index()].as_ref().unwrap().as_slice();
        delta_thetas[t.index()] = Some(before.iter().zip(after).map(|(b, a)| b - a).collect());
    }
    Ok(Some(ClientOutcome {
        packet: UpdatePacket {
            client: client.user,
            tier: plan.tier,
            delta_v,
            delta_thetas,
        },
        loss_trace,
        val_loss,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    use crate::rng::SimRng;

    fn rand_table(rows: usize, cols: usize, rng: &mut SimRng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn bce_closed_forms() {
        let l = bce_loss(&[0.5], &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_loss(&[1.0 - 1e-7], &[1]).unwrap();
        assert!((l - 1e-7).abs() < 1e-12);
        assert!(matches!(bce_loss(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn bce_matches_termwise_sum() {
        let mut rng = SimRng::seed_from_u64(1);
        let preds: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
        let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
        let mut want = 0.0;
        for i in 0..64 {
            want += if labels[i] == 1 {
                -preds[i].ln()
            } else {
                -(1.0 - preds[i]).ln()
            };
        }
        assert!((bce_loss(&preds, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn decorrelation_closed_forms() {
        // orthogonal centered columns: +-1 Walsh patterns
        let t = ndarray::array![
            [1.0, 1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, -1.0, 1.0],
        ];
        let walsh = t.slice(ndarray::s![.., 1..]).to_owned();
        let mut four = Array2::zeros((8, 4));
        for r in 0..4 {
            for c in 0..3 {
                four[[r, c]] = walsh[[r, c]];
                four[[r + 4, c]] = walsh[[r, c]];
            }
            four[[r, 3]] = 1.0;
            four[[r + 4, 3]] = -1.0;
        }
        let v = decorrelation_reg(four.view()).unwrap();
        assert!((v - 0.5).abs() < 1e-6, "{v}");

        let col = ndarray::array![1.0, 3.0, -2.0, 0.5, 4.0];
        let mut same = Array2::zeros((5, 6));
        for mut c in same.axis_iter_mut(Axis(1)) {
            c.assign(&col);
        }
        assert!((decorrelation_reg(same.view()).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn decorrelation_matches_explicit_correlation() {
        let mut rng = SimRng::seed_from_u64(2);
        let t = rand_table(50, 8, &mut rng);
        let (n, d) = (50usize, 8usize);
        let mut corr = vec![vec![0.0; d]; d];
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| t[[i, j]]).sum::<f64>() / n as f64)
            .collect();
        let sd: Vec<f64> = (0..d)
            .map(|j| {
                ((0..n).map(|i| (t[[i, j]] - mean[j]).powi(2)).sum::<f64>() / n as f64
                    + STANDARDIZE_EPS)
                    .sqrt()
            })
            .collect();
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for i in 0..n {
                    s += (t[[i, a]] - mean[a]) / sd[a] * (t[[i, b]] - mean[b]) / sd[b];
                }
                corr[a][b] = s / n as f64;
            }
        }
        let fro: f64 = corr.iter().flatten().map(|c| c * c).sum::<f64>().sqrt();
        let got = decorrelation_reg(t.view()).unwrap();
        assert!((got - fro / d as f64).abs() < 1e-10);
        assert!(got >= 1.0 / (d as f64).sqrt() - 1e-9 && got <= 1.0 + 1e-9);
    }

    #[test]
    fn singular_variance_closed_forms() {
        // covariance diag(2, 0): x = (+-sqrt2 pattern), y = 0
        let s = 2f64.sqrt();
        let t = ndarray::array![[s, 0.0], [-s, 0.0], [s, 0.0], [-s, 0.0]];
        // sample covariance of +-sqrt2 over 4 rows = 4*2/3
        let cov = column_covariance(t.view());
        assert!((cov[[0, 0]] - 8.0 / 3.0).abs() < 1e-12);
        let diag = ndarray::array![[2.0, 0.0], [0.0, 0.0]];
        assert!((spectrum_variance(&diag) - 1.0).abs() < 1e-12);
        let eye = Array2::<f64>::eye(5);
        assert!(spectrum_variance(&eye).abs() < 1e-12);
        assert!(singular_variance(ndarray::array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let adam = Adam::new(0.001);
        let mut p = [1.0];
        let mut st = AdamState::new(1);
        adam.step(&mut p, &[1.0], &mut st).unwrap();
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-10);
        let mut q = [3.0, -2.0];
        let mut st = AdamState::new(2);
        adam.step(&mut q, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(q, [3.0, -2.0]);
        assert_eq!(st.step, 1);
        assert!(adam.step(&mut q, &[f64::NAN, 0.0], &mut st).is_err());
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // hand-rolled scalar Adam on f(x) = (x - 3)^2
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            reference.push(x);
        }
        let adam = Adam::new(lr);
        let mut p = [0.5];
        let mut st = AdamState::new(1);
        for want in reference {
            let g = [2.0 * (p[0] - 3.0)];
            adam.step(&mut p, &g, &mut st).unwrap();
            assert!((p[0] - want).abs() < 1e-12);
        }
    }

    struct Fixture {
        user: Vec<f64>,
        table: EmbeddingTable,
        thetas: [ScorerParams; 3],
        local: Vec<usize>,
        batch: Vec<Interaction>,
        widths: TierWidths,
    }

    impl Fixture {
        fn new(tier: Tier, rng: &mut SimRng) -> Self {
            let widths = TierWidths::new(2, 3, 5).unwrap();
            let rows = 7;
            let n = widths.of(tier);
            let user = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let table = EmbeddingTable::new(rand_table(rows, n, rng));
            let thetas = Tier::ALL.map(|t| {
                let mut th = ScorerParams::random(widths.of(t), rng);
                // nonzero biases keep ReLUs away from exact kinks
                th.as_mut_slice().iter_mut().for_each(|v| *v += 0.05);
                th
            });
            let local = vec![1, 4];
            let batch = (0..6)
                .map(|k| Interaction {
                    user: 0,
                    item: [1, 0, 4, 2, 6, 3][k],
                    label: (k % 3 == 0) as u8,
                })
                .collect();
            Fixture {
                user,
                table,
                thetas,
                local,
                batch,
                widths,
            }
        }

        fn model(&self, base: BaseModel) -> LocalModel<'_> {
            LocalModel {
                user: &self.user,
                table: &self.table,
                thetas: [
                    Some(&self.thetas[0]),
                    Some(&self.thetas[1]),
                    Some(&self.thetas[2]),
                ],
                widths: self.widths,
                base,
                local_items: &self.local,
            }
        }
    }

    fn close(analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-7
    }

    /// Central differences over every user, table and scorer coordinate.
    fn check_fd(fx: &mut Fixture, base: BaseModel, plan: LossPlan) {
        let h = 1e-5;
        let (_, g) = loss_and_grad(&fx.model(base), &plan, &fx.batch).unwrap();
        let loss = |fx: &Fixture| loss_and_grad(&fx.model(base), &plan, &fx.batch).unwrap().0;
        for c in 0..fx.user.len() {
            let x = fx.user[c];
            fx.user[c] = x + h;
            let lp = loss(fx);
            fx.user[c] = x - h;
            let lm = loss(fx);
            fx.user[c] = x;
            let fd = (lp - lm) / (2.0 * h);
            assert!(close(g.user[c], fd), "user {c}: {} vs {fd}", g.user[c]);
        }
        for i in 0..fx.table.rows() {
            for c in 0..fx.table.dim() {
                let x = fx.table.row(i)[c];
                fx.table.row_mut(i)[c] = x + h;
                let lp = loss(fx);
                fx.table.row_mut(i)[c] = x - h;
                let lm = loss(fx);
                fx.table.row_mut(i)[c] = x;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    close(g.table[[i, c]], fd),
                    "item {i},{c}: {} vs {fd}",
                    g.table[[i, c]]
                );
            }
        }
        for &t in plan.terms() {
            let gt = g.thetas[t.index()].as_ref().unwrap();
            for k in 0..fx.thetas[t.index()].len() {
                let x = fx.thetas[t.index()].as_slice()[k];
                fx.thetas[t.index()].as_mut_slice()[k] = x + h;
                let lp = loss(fx);
                fx.thetas[t.index()].as_mut_slice()[k] = x - h;
                let lm = loss(fx);
                fx.thetas[t.index()].as_mut_slice()[k] = x;
                let fd = (lp - lm) / (2.0 * h);
                assert!(close(gt[k], fd), "{t} scorer {k}: {} vs {fd}", gt[k]);
            }
        }
    }

    #[test]
    fn single_width_gradient_matches_finite_differences() {
        let mut rng = SimRng::seed_from_u64(11);
        for tier in Tier::ALL {
            let mut fx = Fixture::new(tier, &mut rng);
            let plan = LossPlan {
                scope: RegScope::Batch,
                tier,
                nested: false,
                alpha: 0.0,
            };
            check_fd(&mut fx, BaseModel::Ncf, plan);
        }
    }

    #[test]
    fn nested_gradient_matches_finite_differences() {
        let mut rng = SimRng::seed_from_u64(12);
        for tier in Tier::ALL {
            for base in [BaseModel::Ncf, BaseModel::LightGcn] {
                for scope in [RegScope::Batch, RegScope::Table] {
                    let mut fx = Fixture::new(tier, &mut rng);
                    check_fd(
                        &mut fx,
                        base,
                        LossPlan {
                            scope,
                            tier,
                            nested: true,
                            alpha: 0.7,
                        },
                    );
                }
            }
        }
    }

    #[test]
    fn decorrelation_gradient_matches_finite_differences() {
        let mut rng = SimRng::seed_from_u64(13);
        let h = 1e-5;
        for _ in 0..10 {
            let mut t = rand_table(9, 4, &mut rng);
            let (_, g) = decorrelation_reg_grad(t.view()).unwrap();
            for i in 0..9 {
                for c in 0..4 {
                    let x = t[[i, c]];
                    t[[i, c]] = x + h;
                    let lp = decorrelation_reg(t.view()).unwrap();
                    t[[i, c]] = x - h;
                    let lm = decorrelation_reg(t.view()).unwrap();
                    t[[i, c]] = x;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(close(g[[i, c]], fd), "{} vs {fd}", g[[i, c]]);
                }
            }
        }
    }

    #[test]
    fn narrow_terms_only_touch_their_prefix() {
        // a nested large plan minus the single-width large plan leaves the
        // narrower terms, whose table gradient must vanish past width N_m
        let mut rng = SimRng::seed_from_u64(14);
        let fx = Fixture::new(Tier::Large, &mut rng);
        let m = fx.model(BaseModel::Ncf);
        let nested = loss_and_grad(
            &m,
            &LossPlan {
                scope: RegScope::Batch,
                tier: Tier::Large,
                nested: true,
                alpha: 0.0,
            },
            &fx.batch,
        )
        .unwrap()
        .1;
        let single = loss_and_grad(
            &m,
            &LossPlan {
                scope: RegScope::Batch,
                tier: Tier::Large,
                nested: false,
                alpha: 0.0,
            },
            &fx.batch,
        )
        .unwrap()
        .1;
        let diff = &nested.table - &single.table;
        let nm = fx.widths.of(Tier::Medium);
        assert!(diff
            .slice(ndarray::s![.., nm..])
            .iter()
            .all(|&v| v.abs() < 1e-15));
        assert!(diff
            .slice(ndarray::s![.., ..nm])
            .iter()
            .any(|&v| v.abs() > 1e-9));
    }

    #[test]
    fn client_loss_is_sum_of_components() {
        let mut rng = SimRng::seed_from_u64(15);
        for tier in Tier::ALL {
            let fx = Fixture::new(tier, &mut rng);
            let m = fx.model(BaseModel::Ncf);
            let dual = dual_task_loss(&m, tier, &fx.batch).unwrap();
            let reg = decorrelation_reg(fx.table.values().view()).unwrap();
            let full = client_loss(&m, tier, &fx.batch, 2.0).unwrap();
            let want = if tier == Tier::Small {
                dual
            } else {
                dual + 2.0 * reg
            };
            assert!((full - want).abs() < 1e-12);
            // dual-task loss is the sum of single-width terms on prefixes
            let mut terms = 0.0;
            for &t in tier.nested() {
                let n = fx.widths.of(t);
                let preds: Vec<f64> = fx
                    .batch
                    .iter()
                    .map(|x| {
                        fx.thetas[t.index()]
                            .forward(&fx.user[..n], &fx.table.row(x.item)[..n])
                            .prob
                    })
                    .collect();
                let labels: Vec<u8> = fx.batch.iter().map(|x| x.label).collect();
                terms += bce_loss(&preds, &labels).unwrap();
            }
            assert!((dual - terms).abs() < 1e-12);
        }
        let fx = Fixture::new(Tier::Small, &mut rng);
        assert!(client_loss(&fx.model(BaseModel::Ncf), Tier::Small, &fx.batch, -1.0).is_err());
    }

    #[test]
    fn local_loss_falls_on_a_two_item_catalog() {
        let mut rng = SimRng::seed_from_u64(16);
        let widths = TierWidths::default();
        let mut client = ClientState {
            user: 0,
            tier: Tier::Medium,
            embedding: UserEmbedding::random(16, &mut rng),
        };
        let received = Received {
            table: EmbeddingTable::random(2, 16, &mut rng),
            thetas: Tier::ALL
                .map(|t| (t <= Tier::Medium).then(|| ScorerParams::random(widths.of(t), &mut rng))),
        };
        let settings = TrainSettings {
            local_epochs: 40,
            lr: 0.01,
            neg_ratio: 1,
            batch_size: 0,
            val_frac: 0.0,
            base: BaseModel::Ncf,
            widths,
        };
        let plan = LossPlan {
            scope: RegScope::Batch,
            tier: Tier::Medium,
            nested: true,
            alpha: 0.0,
        };
        let out = local_train(
            &mut client,
            &[0],
            2,
            &received,
            &plan,
            &settings,
            0,
            &mut rng,
        )
        .unwrap()
        .unwrap();
        for w in out.loss_trace.windows(2) {
            assert!(w[1] <= w[0], "{:?}", out.loss_trace);
        }
        // delta is received minus trained
        assert_eq!(out.packet.delta_v.dim(), (2, 16));
        assert!(out.packet.delta_thetas[Tier::Large.index()].is_none());
        assert!(out.packet.delta_thetas[Tier::Small.index()].is_some());
    }

    #[test]
    fn empty_client_is_skipped() {
        let mut rng = SimRng::seed_from_u64(17);
        let widths = TierWidths::default();
        let mut client = ClientState {
            user: 0,
            tier: Tier::Small,
            embedding: UserEmbedding::random(8, &mut rng),
        };
        let received = Received {
            table: EmbeddingTable::random(3, 8, &mut rng),
            thetas: [Some(ScorerParams::random(8, &mut rng)), None, None],
        };
        let settings = TrainSettings {
            local_epochs: 1,
            lr: 0.01,
            neg_ratio: 1,
            batch_size: 0,
            val_frac: 0.0,
            base: BaseModel::Ncf,
            widths,
        };
        let plan = LossPlan {
            scope: RegScope::Batch,
            tier: Tier::Small,
            nested: true,
            alpha: 0.0,
        };
        let out = local_train(
            &mut client,
            &[],
            3,
            &received,
            &plan,
            &settings,
            0,
            &mut rng,
        )
        .unwrap();
        assert!(out.is_none());
    }
}
