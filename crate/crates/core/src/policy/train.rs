//! Joint training of the level-0 (CSP) and level-1 (FC-CSP) networks.
//!
//! Batches are made of whole scene windows. At the start of each batch the
//! current CSP weights produce level-0 futures (top mode) for every grid
//! neighbor of the batch's targets; FC-CSP is then trained on those futures
//! while CSP is trained on the history alone. Both losses are Gaussian NLL of
//! the ground-truth maneuver's mode plus maneuver cross-entropy. The neighbor
//! futures are treated as constants.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{cover_window, Dataset, Segment};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Gradients, Graph};
use crate::policy::config::{CspConfig, TrainConfig};
use crate::policy::cv::cv_predict;
use crate::policy::grid::assign_cells;
use crate::policy::maneuver::maneuver_label;
use crate::policy::net::{init_params, top_mode_forward, PolicyNet};
use crate::policy::PolicyModels;
use crate::recursion::{SensorConfig, Zone};
use crate::scene::{AgentId, SceneHistory, TrajectoryGaussian};

/// How level-0 conditioning futures are produced during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainingScheme {
    /// Every neighbor's future comes from CSP.
    #[default]
    L1Rbp,
    /// Randomly drawn egos, covering every target with their core zones,
    /// delimit the scene; peripheral neighbors get constant-velocity futures.
    L1Mfrbp { sensor: SensorConfig },
    /// As `L1Mfrbp`, with the ego's future taken from the ground truth.
    Planning { sensor: SensorConfig },
}

impl TrainingScheme {
    pub fn name(&self) -> &'static str {
        match self {
            TrainingScheme::L1Rbp => "l1rbp",
            TrainingScheme::L1Mfrbp { .. } => "l1mfrbp",
            TrainingScheme::Planning { .. } => "planning",
        }
    }

    fn sensor(&self) -> Option<SensorConfig> {
        match self {
            TrainingScheme::L1Rbp => None,
            TrainingScheme::L1Mfrbp { sensor } | TrainingScheme::Planning { sensor } => Some(*sensor),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPolicies {
    pub models: PolicyModels,
    /// Entry 0 is the mean loss of the untrained networks over the dataset;
    /// entry `e` the mean training loss of epoch `e`.
    pub loss_curve: Vec<f64>,
}

/// Fresh CSP and FC-CSP stores; the history branches start identical.
pub fn init_models(config: &CspConfig, train: &TrainConfig, seed: u64) -> Result<PolicyModels> {
    Ok(PolicyModels {
        config: config.clone(),
        csp: init_params(config, false, false, seed)?,
        fccsp: init_params(config, true, train.zero_init_future_gates, seed)?,
        cv_sigma: train.cv_sigma,
    })
}

/// Targets of one window that share a scene (and ego) during training.
struct Group<'d> {
    scene: Cow<'d, SceneHistory>,
    ego: Option<AgentId>,
    segments: Vec<usize>,
}

/// Splits a window's targets into groups. Sensor schemes cover the targets
/// with randomly drawn egos the same way evaluation does.
fn groups_for_window<'d>(
    dataset: &'d Dataset,
    window: usize,
    segments: &[usize],
    scheme: &TrainingScheme,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Group<'d>>> {
    let w = &dataset.windows[window];
    let Some(sensor) = scheme.sensor() else {
        return Ok(vec![Group { scene: Cow::Borrowed(&w.history), ego: None, segments: segments.to_vec() }]);
    };
    let by_target: BTreeMap<AgentId, usize> = segments.iter().map(|&i| (dataset.segments[i].target, i)).collect();
    let targets: BTreeSet<AgentId> = by_target.keys().copied().collect();
    cover_window(w, &targets, &sensor, dataset.horizon_steps(), rng)?
        .into_iter()
        .map(|(ego, covered)| {
            Ok(Group {
                scene: Cow::Owned(sensor.for_ego(ego).visible_scene(&w.history)?),
                ego: Some(ego),
                segments: covered.iter().map(|t| by_target[t]).collect(),
            })
        })
        .collect()
}

/// Level-0 futures of every grid neighbor of the group's targets, from the
/// current CSP weights.
fn level0_futures(
    dataset: &Dataset,
    window: usize,
    group: &Group<'_>,
    models: &PolicyModels,
    scheme: &TrainingScheme,
) -> Result<BTreeMap<AgentId, TrajectoryGaussian>> {
    let scene = group.scene.as_ref();
    let config = &models.config;
    let mut needed = BTreeSet::new();
    for &i in &group.segments {
        let target = dataset.segments[i].target;
        let origin = scene.current_position(target)?;
        let neighbors = scene.tracks().filter(|t| t.agent_id() != target).map(|t| (t.agent_id(), t.last_position()));
        needed.extend(assign_cells(origin, neighbors, config).into_values());
    }
    let sensor = scheme.sensor().zip(group.ego).map(|(s, ego)| s.for_ego(ego));
    let planning = matches!(scheme, TrainingScheme::Planning { .. });
    needed
        .into_par_iter()
        .map(|id| {
            let future = if planning && group.ego == Some(id) {
                TrajectoryGaussian::deterministic(id, dataset.windows[window].future(id, config.horizon_steps)?.to_vec())?
            } else if sensor.as_ref().map(|s| s.zone(scene, id)).transpose()? == Some(Zone::Periphery) {
                cv_predict(scene.track(id)?, config.horizon_steps, config.sample_rate, models.cv_sigma)?
            } else {
                top_mode_forward(scene, id, None, &models.csp, config)?
            };
            Ok((id, future))
        })
        .collect()
}

struct ExampleResult {
    loss: f64,
    grads: Option<(Gradients, Gradients)>,
}

fn example(
    dataset: &Dataset,
    seg: &Segment,
    scene: &SceneHistory,
    futures: &BTreeMap<AgentId, TrajectoryGaussian>,
    models: &PolicyModels,
    train: &TrainConfig,
    with_grads: bool,
) -> Result<ExampleResult> {
    let config = &models.config;
    let truth = dataset.target_future(seg)?;
    let label = maneuver_label(scene.track(seg.target)?, truth, config)?;
    let net = PolicyNet::new(config);

    let mut g0 = Graph::new(&models.csp);
    let l0 = net.loss(&mut g0, scene, seg.target, truth, label, None)?;
    let mut g1 = Graph::new(&models.fccsp);
    let l1 = net.loss(&mut g1, scene, seg.target, truth, label, Some(futures))?;
    let loss = train.csp_loss_weight * g0.value(l0)[0] + train.fccsp_loss_weight * g1.value(l1)[0];
    let grads = with_grads.then(|| {
        let mut a = g0.backward(l0);
        a.scale(train.csp_loss_weight);
        let mut b = g1.backward(l1);
        b.scale(train.fccsp_loss_weight);
        (a, b)
    });
    Ok(ExampleResult { loss, grads })
}

/// Jointly trains CSP and FC-CSP from scratch on `dataset`.
pub fn train_policies(
    dataset: &Dataset,
    config: &CspConfig,
    train: &TrainConfig,
    scheme: TrainingScheme,
    seed: u64,
) -> Result<TrainedPolicies> {
    train_policies_with(dataset, config, train, scheme, seed, |_, _| {})
}

/// As [`train_policies`], calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_policies_with(
    dataset: &Dataset,
    config: &CspConfig,
    train: &TrainConfig,
    scheme: TrainingScheme,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainedPolicies> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate()?;
    if dataset.sample_rate != config.sample_rate || dataset.horizon_steps() != config.horizon_steps {
        return Err(Error::RateMismatch { dataset: dataset.sample_rate, config: config.sample_rate });
    }
    if train.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if let Some(s) = scheme.sensor() {
        s.validate()?;
    }
    let mut models = init_models(config, train, seed)?;
    let mut adam_csp = AdamState::new(&models.csp, train.adam);
    let mut adam_fc = AdamState::new(&models.fccsp, train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut curve = Vec::with_capacity(train.epochs + 1);
    let by_window: Vec<(usize, Vec<usize>)> = dataset.segments_by_window().into_iter().collect();

    let all: Vec<usize> = (0..by_window.len()).collect();
    let initial = run_batch(dataset, &by_window, &all, &models, train, &scheme, &mut rng, false)?;
    curve.push(initial.0 / dataset.len() as f64);
    on_epoch(0, curve[0]);

    for epoch in 1..=train.epochs {
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in window_batches(&by_window, &order, train.batch_size) {
            let (loss, grads) = run_batch(dataset, &by_window, &batch, &models, train, &scheme, &mut rng, true)?;
            total += loss;
            let (mut g_csp, mut g_fc) = grads.expect("gradients requested");
            let inv = 1.0 / batch.iter().map(|&w| by_window[w].1.len()).sum::<usize>() as f64;
            g_csp.scale(inv);
            g_fc.scale(inv);
            models.csp.set_grads(&g_csp)?;
            models.fccsp.set_grads(&g_fc)?;
            adam_step(&mut models.csp, &mut adam_csp)?;
            adam_step(&mut models.fccsp, &mut adam_fc)?;
        }
        let mean = total / dataset.len() as f64;
        curve.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainedPolicies { models, loss_curve: curve })
}

/// Consecutive whole windows from `order`, closing a batch once it holds at
/// least `batch_size` segments.
fn window_batches(by_window: &[(usize, Vec<usize>)], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut n = 0;
    for &w in order {
        current.push(w);
        n += by_window[w].1.len();
        if n >= batch_size {
            batches.push(std::mem::take(&mut current));
            n = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

type BatchOutput = (f64, Option<(Gradients, Gradients)>);

/// Summed loss (and gradients) over the segments of the windows in `batch`.
/// Ego draws happen sequentially so the result does not depend on thread
/// scheduling.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    dataset: &Dataset,
    by_window: &[(usize, Vec<usize>)],
    batch: &[usize],
    models: &PolicyModels,
    train: &TrainConfig,
    scheme: &TrainingScheme,
    rng: &mut ChaCha8Rng,
    with_grads: bool,
) -> Result<BatchOutput> {
    let mut groups = Vec::new();
    for &b in batch {
        let (window, segs) = &by_window[b];
        for g in groups_for_window(dataset, *window, segs, scheme, rng)? {
            groups.push((*window, g));
        }
    }
    let futures: Vec<BTreeMap<AgentId, TrajectoryGaussian>> = groups
        .par_iter()
        .map(|(w, g)| level0_futures(dataset, *w, g, models, scheme))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = groups.iter().enumerate().flat_map(|(gi, (_, g))| g.segments.iter().map(move |&s| (gi, s))).collect();
    let results: Vec<ExampleResult> = jobs
        .par_iter()
        .map(|&(gi, s)| example(dataset, &dataset.segments[s], groups[gi].1.scene.as_ref(), &futures[gi], models, train, with_grads))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut sums: Option<(Gradients, Gradients)> = with_grads.then(|| (Gradients::zeros_like(&models.csp), Gradients::zeros_like(&models.fccsp)));
    for r in results {
        loss += r.loss;
        if let (Some((a, b)), Some((ga, gb))) = (sums.as_mut(), r.grads) {
            a.accumulate(&ga);
            b.accumulate(&gb);
        }
    }
    Ok((loss, sums))
}

/// Mean joint loss of `models` over `dataset` without updating anything.
pub fn evaluate_loss(dataset: &Dataset, models: &PolicyModels, train: &TrainConfig, scheme: TrainingScheme, seed: u64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let by_window: Vec<(usize, Vec<usize>)> = dataset.segments_by_window().into_iter().collect();
    let all: Vec<usize> = (0..by_window.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(run_batch(dataset, &by_window, &all, models, train, &scheme, &mut rng, false)?.0 / dataset.len() as f64)
}
