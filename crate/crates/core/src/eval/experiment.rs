//! Drivers for the three evaluation protocols.
//!
//! 1. L1-RBP on every test window.
//! 2. L1-MFRBP with sampled egos, repeated over several full passes and
//!    averaged by sample count.
//! 3. As 2, with each ego's level-0 slot pinned to its ground-truth future.
//!
//! In experiments 2 and 3 only non-ego targets are scored; out-of-range agents
//! never appear in an ego's scene and are therefore never scored by it.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_egos, Dataset, SceneWindow};
use crate::error::{Error, Result};
use crate::eval::{horizon_errors, RmseTable, DEFAULT_HORIZONS_S};
use crate::policy::PolicyModels;
use crate::recursion::{make_l1_mfrbp, make_l1_rbp, make_planning_aware, run_mfrbp, LevelTrace, SensorConfig};
use crate::scene::{AgentId, ScenePrediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    L1Rbp,
    L1Mfrbp,
    Planning,
}

impl Experiment {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Experiment::L1Rbp),
            2 => Ok(Experiment::L1Mfrbp),
            3 => Ok(Experiment::Planning),
            other => Err(Error::InvalidArgument(format!("experiment must be 1, 2 or 3, got {other}"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Experiment::L1Rbp => 1,
            Experiment::L1Mfrbp => 2,
            Experiment::Planning => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::L1Rbp => "l1rbp",
            Experiment::L1Mfrbp => "l1mfrbp",
            Experiment::Planning => "planning",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Full passes over the test set with freshly sampled egos (experiments 2 and 3).
    pub passes: usize,
    pub horizons_s: Vec<f64>,
    /// Scenes rendered as trajectory plots.
    pub plot_count: usize,
    /// Ellipse radii are this many standard deviations along each principal axis.
    pub ellipse_confidence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { passes: 10, horizons_s: DEFAULT_HORIZONS_S.to_vec(), plot_count: 4, ellipse_confidence: 2.0 }
    }
}

/// Errors of one scored prediction, meters per horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentError {
    pub pass: usize,
    pub window: usize,
    pub target: AgentId,
    pub ego: Option<AgentId>,
    /// Level of the scored (final) prediction.
    pub level: usize,
    pub errors: Vec<f64>,
    /// Errors of the same agent's level-0 prediction.
    pub level0_errors: Vec<f64>,
}

/// One recursion run kept for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub window: usize,
    pub ego: Option<AgentId>,
    pub targets: Vec<AgentId>,
    pub trace: LevelTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub experiment: Experiment,
    pub seed: u64,
    /// Headline table: pooled for experiment 1, count-weighted over passes otherwise.
    pub table: RmseTable,
    pub level0_table: RmseTable,
    pub pass_tables: Vec<RmseTable>,
    pub segments: Vec<SegmentError>,
    pub runs: Vec<RunRecord>,
}

struct Job {
    window: usize,
    ego: Option<AgentId>,
    targets: Vec<AgentId>,
}

fn predict_job(
    job: &Job,
    w: &SceneWindow,
    experiment: Experiment,
    models: &Arc<PolicyModels>,
    sensor: &SensorConfig,
    horizon: usize,
) -> Result<(ScenePrediction, LevelTrace)> {
    match (experiment, job.ego) {
        (Experiment::L1Rbp, _) => run_mfrbp(&w.history, &make_l1_rbp(&w.history, models)?),
        (Experiment::L1Mfrbp, Some(ego)) => {
            let (scene, a) = make_l1_mfrbp(&w.history, &sensor.for_ego(ego), models)?;
            run_mfrbp(&scene, &a)
        }
        (Experiment::Planning, Some(ego)) => {
            let (scene, a) = make_planning_aware(&w.history, &sensor.for_ego(ego), w.future(ego, horizon)?, models)?;
            run_mfrbp(&scene, &a)
        }
        _ => Err(Error::InvalidArgument("ego-based experiment without an ego".into())),
    }
}

fn score(
    dataset: &Dataset,
    jobs: &[Job],
    pass: usize,
    experiment: Experiment,
    models: &Arc<PolicyModels>,
    sensor: &SensorConfig,
    config: &EvalConfig,
) -> Result<(Vec<SegmentError>, Vec<RunRecord>)> {
    let horizon = dataset.horizon_steps();
    let rate = dataset.sample_rate;
    let outputs: Vec<(Vec<SegmentError>, RunRecord)> = jobs
        .par_iter()
        .map(|job| {
            let w = &dataset.windows[job.window];
            let (pred, trace) = predict_job(job, w, experiment, models, sensor, horizon)?;
            let mut rows = Vec::with_capacity(job.targets.len());
            for &t in &job.targets {
                let truth = w.future(t, horizon)?;
                let final_pred = pred.get(&t).ok_or(Error::UnknownAgent(t))?;
                let level0 = trace.get(t, 0).ok_or(Error::MissingLevel { agent: t, level: 0 })?;
                rows.push(SegmentError {
                    pass,
                    window: job.window,
                    target: t,
                    ego: job.ego,
                    level: trace.levels(t).len() - 1,
                    errors: horizon_errors(final_pred, truth, rate, &config.horizons_s)?,
                    level0_errors: horizon_errors(level0, truth, rate, &config.horizons_s)?,
                });
            }
            Ok((rows, RunRecord { window: job.window, ego: job.ego, targets: job.targets.clone(), trace }))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (r, run) in outputs {
        rows.extend(r);
        runs.push(run);
    }
    Ok((rows, runs))
}

fn tables(rows: &[SegmentError], horizons: &[f64]) -> Result<(RmseTable, RmseTable)> {
    Ok((
        RmseTable::from_errors(horizons, rows.iter().map(|r| r.errors.as_slice()))?,
        RmseTable::from_errors(horizons, rows.iter().map(|r| r.level0_errors.as_slice()))?,
    ))
}

/// Runs one experiment over every segment of `dataset`.
pub fn run_experiment(
    experiment: Experiment,
    dataset: &Dataset,
    models: &Arc<PolicyModels>,
    sensor: &SensorConfig,
    config: &EvalConfig,
    seed: u64,
) -> Result<ExperimentResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.sample_rate != models.config.sample_rate || dataset.horizon_steps() != models.config.horizon_steps {
        return Err(Error::RateMismatch { dataset: dataset.sample_rate, config: models.config.sample_rate });
    }
    sensor.validate()?;
    let by_window = dataset.segments_by_window();

    if experiment == Experiment::L1Rbp {
        let jobs: Vec<Job> = by_window
            .iter()
            .map(|(w, segs)| Job { window: *w, ego: None, targets: segs.iter().map(|&i| dataset.segments[i].target).collect() })
            .collect();
        let (rows, runs) = score(dataset, &jobs, 0, experiment, models, sensor, config)?;
        let (table, level0_table) = tables(&rows, &config.horizons_s)?;
        return Ok(ExperimentResult {
            experiment,
            seed,
            pass_tables: vec![table.clone()],
            table,
            level0_table,
            segments: rows,
            runs,
        });
    }

    if config.passes == 0 {
        return Err(Error::InvalidArgument("at least one pass is required".into()));
    }
    let mut all_rows = Vec::new();
    let mut all_runs = Vec::new();
    let mut pass_tables = Vec::new();
    let mut pass_level0 = Vec::new();
    for pass in 0..config.passes {
        let egos = sample_egos(dataset, sensor, seed.wrapping_add(pass as u64))?;
        let jobs: Vec<Job> = egos
            .into_iter()
            .filter_map(|e| {
                let targets: Vec<AgentId> = e.covered.iter().copied().filter(|t| *t != e.ego).collect();
                (!targets.is_empty()).then_some(Job { window: e.window, ego: Some(e.ego), targets })
            })
            .collect();
        let (rows, runs) = score(dataset, &jobs, pass, experiment, models, sensor, config)?;
        let (t, t0) = tables(&rows, &config.horizons_s)?;
        pass_tables.push(t);
        pass_level0.push(t0);
        all_rows.extend(rows);
        if pass == 0 {
            all_runs = runs;
        }
    }
    Ok(ExperimentResult {
        experiment,
        seed,
        table: RmseTable::count_weighted_mean(&pass_tables)?,
        level0_table: RmseTable::count_weighted_mean(&pass_level0)?,
        pass_tables,
        segments: all_rows,
        runs: all_runs,
    })
}
