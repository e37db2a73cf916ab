use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::config::{Candidate, Condition, ExperimentConfig};
use super::grid::grid_search;
use super::report::{emit_reports, ReportRow, TrajectoryRow};
use crate::data::{self, SiteCohort, SplitAssignment, Task};
use crate::fed::{self, FederationConfig, LocalTrainer, SiteData, TRAIN_TAG};
use crate::metrics;
use crate::models::{Batch, ModelSpec};
use crate::optim::DpConfig;
use crate::privacy::{self, AccountantParams};
use crate::{Adam, Dp, Error, Ledger, ParamVec, Result, Scores};

/// Site id used for the pooled model in trajectories.
pub const CENTRAL_SITE: &str = "central";

/// A retained site with its patient-level split.
#[derive(Debug, Clone)]
pub struct PreparedSite {
    pub cohort: SiteCohort,
    pub split: SplitAssignment,
}

/// Load or generate the cohort, split every site by patient and keep the
/// sites whose training partition exceeds `min_train`.
pub fn prepare_sites(config: &ExperimentConfig) -> Result<Vec<PreparedSite>> {
    let cohorts = match &config.csv {
        Some(path) => data::load_csv(path, config.width)?,
        None => data::generate_synthetic(&config.synthetic_spec())?,
    };
    let splits = cohorts
        .iter()
        .map(|c| data::split_by_patient(c, config.split, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let keep: BTreeSet<String> = data::filter_min_train_size(&splits, config.min_train)
        .into_iter()
        .collect();
    let sites: Vec<PreparedSite> = cohorts
        .into_iter()
        .zip(splits)
        .filter(|(c, _)| keep.contains(c.site_id()))
        .map(|(cohort, split)| PreparedSite { cohort, split })
        .collect();
    if sites.is_empty() {
        return Err(Error::Empty(format!(
            "no site has more than {} training admissions",
            config.min_train
        )));
    }
    Ok(sites)
}

/// ε after `steps` DP-SGD steps at sampling ratio `q` and noise multiplier `z`.
pub fn accountant_query(q: f64, z: f64, steps: u64, delta: f64) -> Result<Ledger> {
    privacy::epsilon_for_training(&AccountantParams::new(q, z, steps, delta))
}

/// Rows, trajectory and free-text notes of one condition.
#[derive(Debug, Clone, Default)]
pub struct ConditionOutput {
    pub rows: Vec<ReportRow>,
    pub trajectory: Vec<TrajectoryRow>,
    pub notes: Vec<String>,
}

/// Per-epoch validation trace of a single training run.
#[derive(Debug, Clone)]
struct Trace {
    val_aucs: Vec<f64>,
    /// Cumulative optimizer steps after each epoch.
    steps: Vec<u64>,
    best_epoch: usize,
    best_params: ParamVec,
    final_params: ParamVec,
}

impl Trace {
    fn best_auc(&self) -> f64 {
        self.val_aucs[self.best_epoch - 1]
    }

    fn final_auc(&self) -> f64 {
        *self.val_aucs.last().expect("at least one epoch")
    }
}

/// Train from the shared initial weights for `epochs` epochs, scoring the
/// validation partition after each one. The best epoch is the earliest with
/// the highest AUC.
#[allow(clippy::too_many_arguments)]
fn train_traced(
    model: ModelSpec,
    lr: f64,
    batch_size: usize,
    dp: Option<Dp>,
    seed: u64,
    site_id: &str,
    train: &Batch,
    val: &Batch,
    epochs: usize,
) -> Result<Trace> {
    let trainer = LocalTrainer {
        model,
        train,
        batch_size,
        dp,
        seed,
        tag: TRAIN_TAG,
        site_id,
    };
    let mut params: ParamVec = model.init_params(fed::init_seed(seed));
    let mut adam = Adam::new(model.layout(), lr);
    let mut trace = Trace {
        val_aucs: Vec::with_capacity(epochs),
        steps: Vec::with_capacity(epochs),
        best_epoch: 0,
        best_params: params.clone(),
        final_params: params.clone(),
    };
    let mut total = 0u64;
    for epoch in 0..epochs {
        let update = trainer.run(&params, &adam, epoch, 1)?;
        params = update.params;
        adam = update.adam;
        total += update.steps;
        let auc = fed::evaluate_auc(&model, &params, val)
            .map_err(|e| Error::InvalidParam(format!("site {site_id} validation: {e}")))?;
        if trace.best_epoch == 0 || auc > trace.best_auc() {
            trace.best_epoch = epoch + 1;
            trace.best_params = params.clone();
        }
        trace.val_aucs.push(auc);
        trace.steps.push(total);
    }
    trace.final_params = params;
    Ok(trace)
}

fn test_scores(model: &ModelSpec, params: &ParamVec, site: &SiteData) -> Result<Scores> {
    Scores::new(model.logits(params, &site.test)?, site.test.labels().to_vec())
}

#[derive(Debug, Clone, Default)]
struct PrivacyColumns {
    epsilon: f64,
    epsilon_at_best: Option<f64>,
    sampling_ratio: f64,
    noise_multiplier: f64,
    clip_norm: f64,
    steps: u64,
    steps_at_best: Option<u64>,
    delta: f64,
}

/// Test-set scores of the model a condition selected for one site.
#[derive(Debug, Clone)]
struct SiteEval {
    test: Scores,
    privacy: Option<PrivacyColumns>,
}

#[derive(Debug, Clone, Default)]
struct TaskOutput {
    evals: Vec<SiteEval>,
    trajectory: Vec<TrajectoryRow>,
    notes: Vec<String>,
}

fn trace_rows(trace: &Trace, site_id: &str, task: Task, epsilons: Option<&[f64]>) -> Vec<TrajectoryRow> {
    trace
        .val_aucs
        .iter()
        .enumerate()
        .map(|(i, &val_auc)| TrajectoryRow {
            epoch_or_round: i + 1,
            epsilon: epsilons.map(|e| e[i]),
            val_auc,
            site_id: site_id.to_string(),
            task: task.name().to_string(),
        })
        .collect()
}

fn run_local(config: &ExperimentConfig, sites: &[SiteData], candidates: &[Candidate], task: Task) -> Result<TaskOutput> {
    let mut out = TaskOutput::default();
    for site in sites {
        let grid = grid_search(candidates, |c| {
            let t = train_traced(
                c.model,
                c.lr,
                c.batch_size,
                None,
                config.seed,
                &site.site_id,
                &site.train,
                &site.val,
                config.epochs,
            )?;
            Ok((t.best_auc(), t))
        })?;
        let chosen = candidates[grid.best];
        let trace = grid.into_best();
        out.notes.push(format!(
            "{} {}: {} (best epoch {})",
            task.name(),
            site.site_id,
            chosen.describe(),
            trace.best_epoch
        ));
        out.trajectory.extend(trace_rows(&trace, &site.site_id, task, None));
        out.evals.push(SiteEval {
            test: test_scores(&chosen.model, &trace.best_params, site)?,
            privacy: None,
        });
    }
    Ok(out)
}

fn pooled(sites: &[SiteData]) -> Result<(Batch, Batch)> {
    let train: Vec<&Batch> = sites.iter().map(|s| &s.train).collect();
    let val: Vec<&Batch> = sites.iter().map(|s| &s.val).collect();
    Ok((Batch::concat(&train)?, Batch::concat(&val)?))
}

fn run_central(config: &ExperimentConfig, sites: &[SiteData], candidates: &[Candidate], task: Task) -> Result<TaskOutput> {
    let (train, val) = pooled(sites)?;
    let grid = grid_search(candidates, |c| {
        let t = train_traced(c.model, c.lr, c.batch_size, None, config.seed, CENTRAL_SITE, &train, &val, config.epochs)?;
        Ok((t.best_auc(), t))
    })?;
    let chosen = candidates[grid.best];
    let trace = grid.into_best();
    let evals = sites
        .iter()
        .map(|s| {
            Ok(SiteEval {
                test: test_scores(&chosen.model, &trace.best_params, s)?,
                privacy: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskOutput {
        evals,
        trajectory: trace_rows(&trace, CENTRAL_SITE, task, None),
        notes: vec![format!(
            "{}: {} (best epoch {}, pooled validation AUC {:.4})",
            task.name(),
            chosen.describe(),
            trace.best_epoch,
            trace.best_auc()
        )],
    })
}

#[derive(Debug, Clone, Copy)]
struct DpCandidate {
    base: Candidate,
    noise_multiplier: f64,
    clip_norm: f64,
}

fn run_central_dp(config: &ExperimentConfig, sites: &[SiteData], candidates: &[Candidate], task: Task) -> Result<TaskOutput> {
    let (train, val) = pooled(sites)?;
    let mut grid = Vec::new();
    for &base in candidates {
        for &noise_multiplier in &config.noise_multipliers() {
            for &clip_norm in &config.clip_norms() {
                grid.push(DpCandidate { base, noise_multiplier, clip_norm });
            }
        }
    }
    let n = train.len();
    let dp_of = |c: &DpCandidate| DpConfig {
        clip_norm: c.clip_norm,
        noise_multiplier: c.noise_multiplier,
        sampling_ratio: fed::sampling_ratio(c.base.batch_size, n),
        delta: config.delta,
    };
    // DP runs are compared on the model they end with: stopping early on
    // validation AUC would not reduce the privacy cost.
    let outcome = grid_search(&grid, |c| {
        let t = train_traced(
            c.base.model,
            c.base.lr,
            c.base.batch_size,
            Some(dp_of(c)),
            config.seed,
            CENTRAL_SITE,
            &train,
            &val,
            config.dp_epochs(),
        )?;
        Ok((t.final_auc(), t))
    })?;
    let chosen = grid[outcome.best];
    let dp = dp_of(&chosen);
    let trace = outcome.into_best();
    let epsilons = trace
        .steps
        .iter()
        .map(|&s| Ok(accountant_query(dp.sampling_ratio, dp.noise_multiplier, s, dp.delta)?.epsilon))
        .collect::<Result<Vec<f64>>>()?;
    let columns = PrivacyColumns {
        epsilon: *epsilons.last().expect("at least one epoch"),
        epsilon_at_best: None,
        sampling_ratio: dp.sampling_ratio,
        noise_multiplier: dp.noise_multiplier,
        clip_norm: dp.clip_norm,
        steps: *trace.steps.last().expect("at least one epoch"),
        steps_at_best: None,
        delta: dp.delta,
    };
    let evals = sites
        .iter()
        .map(|s| {
            Ok(SiteEval {
                test: test_scores(&chosen.base.model, &trace.final_params, s)?,
                privacy: Some(columns.clone()),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskOutput {
        evals,
        trajectory: trace_rows(&trace, CENTRAL_SITE, task, Some(&epsilons)),
        notes: vec![format!(
            "{}: {} z={} S={} (final pooled validation AUC {:.4}, epsilon {:.4})",
            task.name(),
            chosen.base.describe(),
            chosen.noise_multiplier,
            chosen.clip_norm,
            trace.final_auc(),
            columns.epsilon
        )],
    })
}

fn federation_config(config: &ExperimentConfig, c: &Candidate) -> FederationConfig {
    FederationConfig {
        local_epochs: config.local_epochs,
        averaging: config.averaging,
        ..FederationConfig::new(c.model, c.lr, c.batch_size, config.rounds, config.seed)
    }
}

fn round_rows(run: &fed::FederatedRun, task: Task) -> Vec<TrajectoryRow> {
    run.log
        .iter()
        .map(|e| TrajectoryRow {
            epoch_or_round: e.round,
            epsilon: e.epsilon,
            val_auc: e.val_auc,
            site_id: e.site_id.clone(),
            task: task.name().to_string(),
        })
        .collect()
}

fn run_federated(config: &ExperimentConfig, sites: &[SiteData], candidates: &[Candidate], task: Task) -> Result<TaskOutput> {
    let grid = grid_search(candidates, |c| {
        let run = fed::run_federated(&federation_config(config, c), sites)?;
        Ok((run.mean_best_val_auc(), run))
    })?;
    let chosen = candidates[grid.best];
    let score = grid.best_score();
    let run = grid.into_best();
    let evals = sites
        .iter()
        .zip(&run.snapshots)
        .map(|(s, snap)| {
            Ok(SiteEval {
                test: test_scores(&chosen.model, &snap.params, s)?,
                privacy: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskOutput {
        evals,
        trajectory: round_rows(&run, task),
        notes: vec![format!(
            "{}: {} (mean best validation AUC {score:.4})",
            task.name(),
            chosen.describe()
        )],
    })
}

fn run_federated_dp(config: &ExperimentConfig, sites: &[SiteData], candidates: &[Candidate], task: Task) -> Result<TaskOutput> {
    let z = config.noise_multipliers()[0];
    let clips = config.clip_norms();
    let grid = grid_search(candidates, |c| {
        let dps = sites
            .iter()
            .map(|s| {
                Ok(fed::select_local_dp_hparams_with(
                    s,
                    c.model,
                    c.lr,
                    c.batch_size,
                    config.seed,
                    &clips,
                    z,
                    config.delta,
                    config.dp_select_epochs(),
                )?
                .config)
            })
            .collect::<Result<Vec<Dp>>>()?;
        let fc = FederationConfig {
            dp: Some(dps.clone()),
            ..federation_config(config, c)
        };
        let run = fed::run_federated_dp(&fc, sites)?;
        Ok((run.mean_best_val_auc(), (dps, run)))
    })?;
    let chosen = candidates[grid.best];
    let score = grid.best_score();
    let (dps, run) = grid.into_best();
    let ledgers = run.ledgers.as_ref().expect("DP federation keeps ledgers");
    let evals = sites
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let snap = &run.snapshots[i];
            Ok(SiteEval {
                test: test_scores(&chosen.model, &snap.params, s)?,
                privacy: Some(PrivacyColumns {
                    epsilon: ledgers[i].epsilon,
                    epsilon_at_best: snap.epsilon_at_best,
                    sampling_ratio: dps[i].sampling_ratio,
                    noise_multiplier: dps[i].noise_multiplier,
                    clip_norm: dps[i].clip_norm,
                    steps: ledgers[i].steps(),
                    steps_at_best: Some(snap.steps_at_best),
                    delta: dps[i].delta,
                }),
            })
        })
        .collect::<Result<_>>()?;
    let mut notes = vec![format!(
        "{}: {} (mean best validation AUC {score:.4})",
        task.name(),
        chosen.describe()
    )];
    for (s, dp) in sites.iter().zip(&dps) {
        notes.push(format!("{} {}: local DP selection S={}", task.name(), s.site_id, dp.clip_norm));
    }
    Ok(TaskOutput {
        evals,
        trajectory: round_rows(&run, task),
        notes,
    })
}

fn build_rows(
    condition: Condition,
    task: Task,
    sites: &[SiteData],
    evals: &[SiteEval],
    baseline: Option<&[SiteEval]>,
) -> Result<Vec<ReportRow>> {
    sites
        .iter()
        .zip(evals)
        .enumerate()
        .map(|(i, (site, eval))| {
            let est = metrics::delong_estimate(&eval.test)
                .map_err(|e| Error::InvalidParam(format!("site {} test set: {e}", site.site_id)))?;
            let rel = baseline
                .map(|b| metrics::delong_diff(&eval.test, &b[i].test))
                .transpose()?;
            let p = eval.privacy.as_ref();
            Ok(ReportRow {
                site_id: site.site_id.clone(),
                n: site.admissions,
                task: task.name().to_string(),
                condition: condition.name().to_string(),
                auc: est.auc,
                ci_low: est.ci_low,
                ci_high: est.ci_high,
                rel_auc: rel.map(|r| r.delta),
                rel_ci_low: rel.map(|r| r.ci_low),
                rel_ci_high: rel.map(|r| r.ci_high),
                significant: rel.map(|r| r.significant),
                epsilon: p.map(|p| p.epsilon),
                epsilon_at_best: p.and_then(|p| p.epsilon_at_best),
                sampling_ratio: p.map(|p| p.sampling_ratio),
                noise_multiplier: p.map(|p| p.noise_multiplier),
                clip_norm: p.map(|p| p.clip_norm),
                steps: p.map(|p| p.steps),
                steps_at_best: p.and_then(|p| p.steps_at_best),
                delta: p.map(|p| p.delta),
            })
        })
        .collect()
}

/// Run one experimental condition end to end. Every non-local condition also
/// trains the local baseline under the same seed and reports its test AUC
/// relative to it on the same records.
pub fn run_condition(config: &ExperimentConfig) -> Result<ConditionOutput> {
    config.validate()?;
    let prepared = prepare_sites(config)?;
    let width = prepared[0].cohort.width();
    let candidates = config.candidates(width);
    let condition = config.condition;
    let mut out = ConditionOutput {
        notes: vec![
            format!("condition {}", condition.name()),
            format!("seed {}", config.seed),
            format!(
                "sites {}",
                prepared.iter().map(|p| p.cohort.site_id()).collect::<Vec<_>>().join(",")
            ),
        ],
        ..Default::default()
    };
    for task in config.sorted_tasks() {
        let sites: Vec<SiteData> = prepared
            .iter()
            .map(|p| SiteData::from_split(&p.cohort, &p.split, task))
            .collect();
        let local = run_local(config, &sites, &candidates, task)?;
        let (result, baseline) = match condition {
            Condition::Local => (local, None),
            Condition::Central => (run_central(config, &sites, &candidates, task)?, Some(local)),
            Condition::CentralDp => (run_central_dp(config, &sites, &candidates, task)?, Some(local)),
            Condition::Federated => (run_federated(config, &sites, &candidates, task)?, Some(local)),
            Condition::FederatedDp => (run_federated_dp(config, &sites, &candidates, task)?, Some(local)),
        };
        out.rows.extend(build_rows(
            condition,
            task,
            &sites,
            &result.evals,
            baseline.as_ref().map(|b| b.evals.as_slice()),
        )?);
        out.trajectory.extend(result.trajectory);
        out.notes.extend(result.notes);
    }
    Ok(out)
}

/// Output directory: `out` from the config, or `results`.
pub fn output_dir(config: &ExperimentConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("results"))
}

/// Run a condition and write its reports under `outdir`.
pub fn run_and_emit(config: &ExperimentConfig, outdir: &Path) -> Result<(ConditionOutput, [PathBuf; 3])> {
    let out = run_condition(config)?;
    let paths = emit_reports(&out.rows, &out.trajectory, &out.notes, outdir)?;
    Ok((out, paths))
}
