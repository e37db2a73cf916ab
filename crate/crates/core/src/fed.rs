//! Federated averaging across simulated sites, optionally with DP-SGD as the
//! local optimizer.
//!
//! Each round every site trains from the shared weights, the server averages
//! the results and every site scores the synchronized model on its own
//! validation partition. Site work within a round runs on the rayon pool;
//! every random draw comes from a stream keyed by `(seed, tag, site, epoch)`,
//! so results do not depend on scheduling.

use rayon::prelude::*;
use serde::Deserialize;

use crate::data::{SiteCohort, SplitAssignment, Task};
use crate::metrics::{self, ScoredSet};
use crate::models::{Batch, ModelSpec, ParamVector};
use crate::optim::{dp_aggregate, AdamState, DpConfig};
use crate::privacy::{AccountantParams, PrivacyLedger};
use crate::rng::{self, Stream};
use crate::{Adam, Dp, Error, Ledger, ParamVec, Result, Scalar};
use rand::seq::SliceRandom;
use rand::Rng;

/// Stream tag shared by federated rounds and plain local training, so that a
/// single-site federation replays local training exactly.
pub const TRAIN_TAG: &str = "train";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Uniform,
    SizeWeighted,
}

/// One site's partitions for one task.
#[derive(Debug, Clone)]
pub struct SiteData {
    pub site_id: String,
    /// Admissions at the site across all partitions.
    pub admissions: usize,
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

impl SiteData {
    pub fn from_split(cohort: &SiteCohort, split: &SplitAssignment, task: Task) -> Self {
        Self {
            site_id: cohort.site_id().to_string(),
            admissions: cohort.len(),
            train: cohort.batch(task, &split.train),
            val: cohort.batch(task, &split.val),
            test: cohort.batch(task, &split.test),
        }
    }
}

/// Average parameter vectors, uniformly or weighted by `sizes`.
pub fn average<T: Scalar>(
    params: &[ParamVector<T>],
    mode: Averaging,
    sizes: &[usize],
) -> Result<ParamVector<T>> {
    let first = params
        .first()
        .ok_or_else(|| Error::Empty("nothing to average".into()))?;
    for p in params {
        first.check_layout(p)?;
    }
    if params.len() == 1 {
        return Ok(first.clone());
    }
    let mut out = first.zeros_like();
    match mode {
        Averaging::Uniform => {
            for p in params {
                out.add_assign(p)?;
            }
            let k = T::of_usize(params.len());
            for v in out.values_mut() {
                *v = *v / k;
            }
        }
        Averaging::SizeWeighted => {
            if sizes.len() != params.len() {
                return Err(Error::Dimension(format!(
                    "{} sizes for {} parameter vectors",
                    sizes.len(),
                    params.len()
                )));
            }
            let total: usize = sizes.iter().sum();
            if total == 0 {
                return Err(Error::InvalidParam("site sizes sum to zero".into()));
            }
            let total = T::of_usize(total);
            for (p, &n) in params.iter().zip(sizes) {
                out.add_scaled(T::of_usize(n) / total, p)?;
            }
        }
    }
    Ok(out)
}

/// DP-SGD batches per epoch under Poisson sampling at rate `q`: ceil(1/q).
pub fn dp_steps_per_epoch(q: f64) -> u64 {
    // 1/q is N/B up to rounding; the slack keeps an exact ratio from
    // rounding up to the next integer
    ((1.0 / q) - 1e-9).ceil().max(1.0) as u64
}

/// Sampling ratio for a requested batch size on `n` training records.
pub fn sampling_ratio(batch_size: usize, n: usize) -> f64 {
    (batch_size as f64 / n as f64).min(1.0)
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: ParamVec,
    pub adam: Adam,
    pub steps: u64,
}

/// Local optimizer for one site.
#[derive(Debug, Clone, Copy)]
pub struct LocalTrainer<'a> {
    pub model: ModelSpec,
    pub train: &'a Batch,
    pub batch_size: usize,
    pub dp: Option<Dp>,
    pub seed: u64,
    pub tag: &'a str,
    pub site_id: &'a str,
}

impl LocalTrainer<'_> {
    fn epoch_stream(&self, epoch: usize) -> Stream {
        rng::stream(self.seed, &[self.tag, self.site_id, &epoch.to_string()])
    }

    /// Train `epochs` passes starting at global epoch index `first_epoch`.
    ///
    /// Without DP: shuffled minibatches of `batch_size`. With DP: ceil(1/q)
    /// Poisson batches per epoch, each privatized by `dp_aggregate` before the
    /// Adam step.
    pub fn run(
        &self,
        params: &ParamVec,
        adam: &Adam,
        first_epoch: usize,
        epochs: usize,
    ) -> Result<LocalUpdate> {
        let n = self.train.len();
        if n == 0 {
            return Err(Error::Empty(format!("site {} has no training records", self.site_id)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be positive".into()));
        }
        let mut params = params.clone();
        let mut adam = adam.clone();
        let mut steps = 0u64;
        for epoch in first_epoch..first_epoch + epochs {
            let mut stream = self.epoch_stream(epoch);
            match &self.dp {
                None => {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut stream);
                    for chunk in order.chunks(self.batch_size) {
                        let g = self.model.grad(&params, &self.train.select(chunk))?;
                        (params, adam) = adam.step(&params, &g)?;
                        steps += 1;
                    }
                }
                Some(dp) => {
                    dp.validate()?;
                    let q = dp.sampling_ratio;
                    let expected = q * n as f64;
                    for _ in 0..dp_steps_per_epoch(q) {
                        let chosen: Vec<usize> = (0..n).filter(|_| stream.random::<f64>() < q).collect();
                        let grads = if chosen.is_empty() {
                            vec![params.zeros_like()]
                        } else {
                            self.model.per_example_grads(&params, &self.train.select(&chosen))?
                        };
                        let g = dp_aggregate(&grads, dp.clip_norm, dp.noise_multiplier, expected, &mut stream)?;
                        (params, adam) = adam.step(&params, &g)?;
                        steps += 1;
                    }
                }
            }
        }
        Ok(LocalUpdate { params, adam, steps })
    }
}

/// AUC of the model's logits on a labelled partition.
pub fn evaluate_auc(model: &ModelSpec, params: &ParamVec, batch: &Batch) -> Result<f64> {
    let scores = model.logits(params, batch)?;
    metrics::auc(&ScoredSet::new(scores, batch.labels().to_vec())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub averaging: Averaging,
    pub model: ModelSpec,
    pub lr: f64,
    pub batch_size: usize,
    /// Per-site DP settings, aligned with the site list. `None` trains
    /// without privacy.
    pub dp: Option<Vec<Dp>>,
    pub seed: u64,
}

impl FederationConfig {
    pub fn new(model: ModelSpec, lr: f64, batch_size: usize, rounds: usize, seed: u64) -> Self {
        Self {
            rounds,
            local_epochs: 1,
            averaging: Averaging::Uniform,
            model,
            lr,
            batch_size,
            dp: None,
            seed,
        }
    }
}

/// Seed of the shared initial weights.
pub fn init_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &["init"])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundEntry {
    /// 1-based round index.
    pub round: usize,
    pub site_id: String,
    /// AUC of the synchronized model on the site's validation partition.
    pub val_auc: f64,
    /// Loss of the synchronized model on the site's training partition.
    pub train_loss: f64,
    /// Cumulative ε through this round (DP runs only).
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub site_id: String,
    pub val_auc: f64,
    /// Round the best AUC was first reached; 0 for the initial model.
    pub round: usize,
    pub params: ParamVec,
    /// DP steps spent through `round`.
    pub steps_at_best: u64,
    /// ε spent through `round` (DP runs only).
    pub epsilon_at_best: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub snapshots: Vec<BestSnapshot>,
    /// Entries ordered by round, then by site in input order.
    pub log: Vec<RoundEntry>,
    /// Final per-site ledgers (DP runs only).
    pub ledgers: Option<Vec<Ledger>>,
    pub final_params: ParamVec,
}

impl FederatedRun {
    pub fn mean_best_val_auc(&self) -> f64 {
        self.snapshots.iter().map(|s| s.val_auc).sum::<f64>() / self.snapshots.len() as f64
    }
}

/// Non-private federated averaging.
pub fn run_federated(config: &FederationConfig, sites: &[SiteData]) -> Result<FederatedRun> {
    if config.dp.is_some() {
        return Err(Error::InvalidParam(
            "run_federated takes no DP settings; use run_federated_dp".into(),
        ));
    }
    federate(config, sites)
}

/// Federated averaging with DP-SGD at every site. Each site's ledger composes
/// its own (q, z) over the steps it actually took.
pub fn run_federated_dp(config: &FederationConfig, sites: &[SiteData]) -> Result<FederatedRun> {
    match &config.dp {
        Some(dp) if dp.len() == sites.len() => federate(config, sites),
        Some(dp) => Err(Error::Dimension(format!(
            "{} DP configs for {} sites",
            dp.len(),
            sites.len()
        ))),
        None => Err(Error::InvalidParam("every site needs a DP config".into())),
    }
}

fn federate(config: &FederationConfig, sites: &[SiteData]) -> Result<FederatedRun> {
    if sites.is_empty() {
        return Err(Error::Empty("no sites to federate".into()));
    }
    config.model.validate()?;
    if config.local_epochs == 0 {
        return Err(Error::InvalidParam("local_epochs must be >= 1".into()));
    }
    let model = config.model;
    let mut global: ParamVec = model.init_params(init_seed(config.seed));
    let mut adams: Vec<Adam> = sites
        .iter()
        .map(|_| AdamState::new(model.layout(), config.lr))
        .collect();
    let mut ledgers: Option<Vec<Ledger>> = match &config.dp {
        Some(dps) => Some(
            sites
                .iter()
                .zip(dps)
                .map(|(s, dp)| {
                    PrivacyLedger::open(
                        s.site_id.clone(),
                        AccountantParams::new(dp.sampling_ratio, dp.noise_multiplier, 0, dp.delta),
                    )
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let sizes: Vec<usize> = sites.iter().map(|s| s.train.len()).collect();

    let evaluate = |params: &ParamVec| -> Result<Vec<(f64, f64)>> {
        sites
            .par_iter()
            .map(|s| {
                let auc = evaluate_auc(&model, params, &s.val)
                    .map_err(|e| Error::InvalidParam(format!("site {} validation: {e}", s.site_id)))?;
                Ok((auc, model.batch_loss(params, &s.train)?))
            })
            .collect()
    };

    let initial = evaluate(&global)?;
    let mut snapshots: Vec<BestSnapshot> = sites
        .iter()
        .zip(&initial)
        .map(|(s, &(auc, _))| BestSnapshot {
            site_id: s.site_id.clone(),
            val_auc: auc,
            round: 0,
            params: global.clone(),
            steps_at_best: 0,
            epsilon_at_best: None,
        })
        .collect();
    if let Some(ls) = &ledgers {
        for (snap, l) in snapshots.iter_mut().zip(ls) {
            snap.epsilon_at_best = Some(l.epsilon);
        }
    }

    let mut log = Vec::with_capacity(config.rounds * sites.len());
    for round in 1..=config.rounds {
        let updates: Vec<LocalUpdate> = sites
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                LocalTrainer {
                    model,
                    train: &s.train,
                    batch_size: config.batch_size,
                    dp: config.dp.as_ref().map(|d| d[i]),
                    seed: config.seed,
                    tag: TRAIN_TAG,
                    site_id: &s.site_id,
                }
                .run(&global, &adams[i], (round - 1) * config.local_epochs, config.local_epochs)
            })
            .collect::<Result<_>>()?;

        let locals: Vec<ParamVec> = updates.iter().map(|u| u.params.clone()).collect();
        global = average(&locals, config.averaging, &sizes)?;
        for (adam, u) in adams.iter_mut().zip(&updates) {
            *adam = u.adam.clone();
        }
        if let Some(ls) = &mut ledgers {
            for (l, u) in ls.iter_mut().zip(&updates) {
                l.advance(u.steps)?;
            }
        }

        let scores = evaluate(&global)?;
        for (i, (s, &(auc, loss))) in sites.iter().zip(&scores).enumerate() {
            let epsilon = ledgers.as_ref().map(|ls| ls[i].epsilon);
            log.push(RoundEntry {
                round,
                site_id: s.site_id.clone(),
                val_auc: auc,
                train_loss: loss,
                epsilon,
            });
            let snap = &mut snapshots[i];
            if round == 1 || auc > snap.val_auc {
                snap.val_auc = auc;
                snap.round = round;
                snap.params = global.clone();
                snap.steps_at_best = ledgers.as_ref().map_or(0, |ls| ls[i].steps());
                snap.epsilon_at_best = epsilon;
            }
        }
    }

    Ok(FederatedRun {
        snapshots,
        log,
        ledgers,
        final_params: global,
    })
}

pub const LOCAL_DP_CLIP_GRID: [f64; 3] = [0.1, 1.0, 10.0];
pub const LOCAL_DP_NOISE: f64 = 1.0;
pub const LOCAL_DP_DELTA: f64 = 1e-5;
pub const LOCAL_DP_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct DpSelection {
    pub config: Dp,
    /// (clip norm, validation AUC) for every candidate, in evaluation order.
    pub scores: Vec<(f64, f64)>,
}

/// Pick a site's clipping threshold by training `epochs` local DP epochs per
/// candidate (noise multiplier `z`) and keeping the best validation AUC.
/// Ties go to the smallest clip norm.
#[allow(clippy::too_many_arguments)]
pub fn select_local_dp_hparams_with(
    site: &SiteData,
    model: ModelSpec,
    lr: f64,
    batch_size: usize,
    seed: u64,
    clip_grid: &[f64],
    z: f64,
    delta: f64,
    epochs: usize,
) -> Result<DpSelection> {
    if site.train.is_empty() || site.val.is_empty() {
        return Err(Error::Empty(format!(
            "site {} needs train and validation records",
            site.site_id
        )));
    }
    let mut grid = clip_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite clip norms"));
    let q = sampling_ratio(batch_size, site.train.len());
    let init: ParamVec = model.init_params(init_seed(seed));
    let scores = grid
        .par_iter()
        .map(|&clip| {
            let dp = DpConfig { clip_norm: clip, noise_multiplier: z, sampling_ratio: q, delta };
            let tag = format!("select-dp-{clip}");
            let out = LocalTrainer {
                model,
                train: &site.train,
                batch_size,
                dp: Some(dp),
                seed,
                tag: &tag,
                site_id: &site.site_id,
            }
            .run(&init, &AdamState::new(model.layout(), lr), 0, epochs)?;
            Ok((clip, evaluate_auc(&model, &out.params, &site.val)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let mut best = scores[0];
    for &(clip, auc) in &scores[1..] {
        if auc > best.1 {
            best = (clip, auc);
        }
    }
    Ok(DpSelection {
        config: DpConfig { clip_norm: best.0, noise_multiplier: z, sampling_ratio: q, delta },
        scores,
    })
}

/// The fixed local search: z = 1, δ = 1e-5, S ∈ {0.1, 1, 10}, ten epochs.
pub fn select_local_dp_hparams(
    site: &SiteData,
    model: ModelSpec,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<DpSelection> {
    select_local_dp_hparams_with(
        site,
        model,
        lr,
        batch_size,
        seed,
        &LOCAL_DP_CLIP_GRID,
        LOCAL_DP_NOISE,
        LOCAL_DP_DELTA,
        LOCAL_DP_EPOCHS,
    )
}
