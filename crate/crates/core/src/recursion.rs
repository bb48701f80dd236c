//! Multi-fidelity recursive behavior prediction.
//!
//! Every agent gets a reasoning level `k_i` and a ladder of policies, one per
//! level. Level 0 runs on histories only. At level `k`, agent `i` (with
//! `k <= k_i`) is conditioned on every other agent `j`'s prediction from level
//! `min(k_j, k - 1)`. The prediction returned for each agent is its level-`k_i`
//! one; every intermediate prediction is kept in a [`LevelTrace`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{CspPolicy, CvPolicy, FcCspPolicy, PinnedPolicy, PolicyInput, PolicyModels, PolicyRef};
use crate::scene::{AgentId, Point, SceneHistory, ScenePrediction, TrajectoryGaussian};

/// Per-agent policy ladders; an agent's level is its ladder length minus one.
#[derive(Clone, Default)]
pub struct ReasoningAssignment {
    ladders: BTreeMap<AgentId, Vec<PolicyRef>>,
}

impl std::fmt::Debug for ReasoningAssignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut m = f.debug_map();
        for (id, ladder) in &self.ladders {
            m.entry(id, &ladder.iter().map(|p| p.name()).collect::<Vec<_>>());
        }
        m.finish()
    }
}

impl ReasoningAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `agent`'s ladder. Level 0 must be history-only and every higher
    /// level future-conditional.
    pub fn assign(&mut self, agent: AgentId, ladder: Vec<PolicyRef>) -> Result<()> {
        let Some(first) = ladder.first() else {
            return Err(Error::InvalidAssignment(format!("agent {agent} has an empty ladder")));
        };
        if first.future_conditional() {
            return Err(Error::InvalidAssignment(format!("agent {agent}: level-0 policy {} conditions on futures", first.name())));
        }
        if let Some((k, p)) = ladder.iter().enumerate().skip(1).find(|(_, p)| !p.future_conditional()) {
            return Err(Error::InvalidAssignment(format!("agent {agent}: level-{k} policy {} is history-only", p.name())));
        }
        self.ladders.insert(agent, ladder);
        Ok(())
    }

    pub fn with(mut self, agent: AgentId, ladder: Vec<PolicyRef>) -> Result<Self> {
        self.assign(agent, ladder)?;
        Ok(self)
    }

    pub fn level(&self, agent: AgentId) -> Option<usize> {
        self.ladders.get(&agent).map(|l| l.len() - 1)
    }

    pub fn ladder(&self, agent: AgentId) -> Option<&[PolicyRef]> {
        self.ladders.get(&agent).map(Vec::as_slice)
    }

    pub fn levels(&self) -> BTreeMap<AgentId, usize> {
        self.ladders.iter().map(|(id, l)| (*id, l.len() - 1)).collect()
    }

    pub fn max_level(&self) -> usize {
        self.ladders.values().map(|l| l.len() - 1).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.ladders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ladders.is_empty()
    }
}

/// Every prediction made while running the recursion, by agent and level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTrace {
    entries: BTreeMap<AgentId, Vec<TrajectoryGaussian>>,
}

impl LevelTrace {
    pub fn get(&self, agent: AgentId, level: usize) -> Option<&TrajectoryGaussian> {
        self.entries.get(&agent).and_then(|l| l.get(level))
    }

    /// Predictions of `agent` at levels `0..=k_i`.
    pub fn levels(&self, agent: AgentId) -> &[TrajectoryGaussian] {
        self.entries.get(&agent).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.entries.keys().copied()
    }

    /// All agents' predictions at exactly `level` (agents below it are absent).
    pub fn at_level(&self, level: usize) -> ScenePrediction {
        self.entries.iter().filter_map(|(id, l)| l.get(level).map(|p| (*id, p.clone()))).collect()
    }
}

fn wrap(agent: AgentId, level: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Policy { agent, level, source: Box::new(e) }
}

/// Runs the recursion over `scene`; `assignment` must cover exactly its agents.
pub fn run_mfrbp(scene: &SceneHistory, assignment: &ReasoningAssignment) -> Result<(ScenePrediction, LevelTrace)> {
    for id in scene.agent_ids() {
        if !assignment.ladders.contains_key(&id) {
            return Err(Error::MissingLevel { agent: id, level: 0 });
        }
    }
    if let Some(extra) = assignment.ladders.keys().find(|id| !scene.contains(**id)) {
        return Err(Error::InvalidAssignment(format!("agent {extra} is assigned but not in the scene")));
    }
    let agents: Vec<(AgentId, &[PolicyRef])> = assignment.ladders.iter().map(|(id, l)| (*id, l.as_slice())).collect();

    let level0: Vec<TrajectoryGaussian> = agents
        .par_iter()
        .map(|(id, ladder)| {
            let input = PolicyInput { scene, target: *id, level: 0, others: None };
            ladder[0].predict(&input).map_err(wrap(*id, 0))
        })
        .collect::<Result<_>>()?;
    let mut trace = LevelTrace { entries: agents.iter().map(|(id, _)| *id).zip(level0.into_iter().map(|p| vec![p])).collect() };

    for k in 1..=assignment.max_level() {
        let active: Vec<&(AgentId, &[PolicyRef])> = agents.iter().filter(|(_, l)| l.len() > k).collect();
        let results: Vec<TrajectoryGaussian> = active
            .par_iter()
            .map(|(id, ladder)| {
                let others: BTreeMap<AgentId, TrajectoryGaussian> = trace
                    .entries
                    .iter()
                    .filter(|(j, _)| *j != id)
                    .map(|(j, levels)| {
                        let kj = assignment.ladders[j].len() - 1;
                        (*j, levels[kj.min(k - 1)].clone())
                    })
                    .collect();
                let input = PolicyInput { scene, target: *id, level: k, others: Some(&others) };
                ladder[k].predict(&input).map_err(wrap(*id, k))
            })
            .collect::<Result<_>>()?;
        for ((id, _), p) in active.into_iter().zip(results) {
            trace.entries.get_mut(id).expect("agent traced at level 0").push(p);
        }
    }

    let predictions = trace.entries.iter().map(|(id, l)| (*id, l[l.len() - 1].clone())).collect();
    Ok((predictions, trace))
}

/// Range and periphery band of an ego's sensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Meters.
    pub range: f64,
    /// Outer fraction of the range treated as periphery.
    pub periphery_fraction: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { range: 60.0, periphery_fraction: 0.25 }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) || !(self.periphery_fraction > 0.0 && self.periphery_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sensor range must be positive and periphery fraction in (0, 1), got {} and {}",
                self.range, self.periphery_fraction
            )));
        }
        Ok(())
    }

    /// Radius of the non-peripheral zone.
    pub fn core_radius(&self) -> f64 {
        (1.0 - self.periphery_fraction) * self.range
    }

    pub fn for_ego(self, ego: AgentId) -> SensorModel {
        SensorModel { ego, config: self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub ego: AgentId,
    pub config: SensorConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Zone {
    Core,
    Periphery,
    OutOfRange,
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl SensorModel {
    pub fn zone_at(&self, d: f64) -> Zone {
        if d > self.config.range {
            Zone::OutOfRange
        } else if d > self.config.core_radius() {
            Zone::Periphery
        } else {
            Zone::Core
        }
    }

    pub fn zone(&self, scene: &SceneHistory, agent: AgentId) -> Result<Zone> {
        let ego = scene.current_position(self.ego)?;
        Ok(self.zone_at(distance(ego, scene.current_position(agent)?)))
    }

    /// The scene as seen by the ego: agents beyond range removed.
    pub fn visible_scene(&self, scene: &SceneHistory) -> Result<SceneHistory> {
        self.config.validate()?;
        let ego = scene.current_position(self.ego)?;
        scene.filtered(|t| self.zone_at(distance(ego, t.last_position())) != Zone::OutOfRange)
    }
}

fn cv(models: &PolicyModels) -> PolicyRef {
    Arc::new(CvPolicy { horizon_steps: models.config.horizon_steps, sigma: models.cv_sigma })
}

fn csp_ladder(models: &Arc<PolicyModels>) -> Vec<PolicyRef> {
    vec![Arc::new(CspPolicy { models: models.clone() }), Arc::new(FcCspPolicy { models: models.clone() })]
}

/// Level 1 for everyone: (CSP, FC-CSP).
pub fn make_l1_rbp(scene: &SceneHistory, models: &Arc<PolicyModels>) -> Result<ReasoningAssignment> {
    let mut a = ReasoningAssignment::new();
    for id in scene.agent_ids() {
        a.assign(id, csp_ladder(models))?;
    }
    Ok(a)
}

/// Removes agents beyond sensor range; peripheral agents get (CV), everyone
/// else including the ego (CSP, FC-CSP).
pub fn make_l1_mfrbp(
    scene: &SceneHistory,
    sensor: &SensorModel,
    models: &Arc<PolicyModels>,
) -> Result<(SceneHistory, ReasoningAssignment)> {
    let visible = sensor.visible_scene(scene)?;
    let mut a = ReasoningAssignment::new();
    for id in visible.agent_ids() {
        let ladder = match sensor.zone(&visible, id)? {
            Zone::Periphery => vec![cv(models)],
            _ => csp_ladder(models),
        };
        a.assign(id, ladder)?;
    }
    Ok((visible, a))
}

/// As [`make_l1_mfrbp`], with the ego's level-0 slot pinned to `ego_future`
/// (zero covariance).
pub fn make_planning_aware(
    scene: &SceneHistory,
    sensor: &SensorModel,
    ego_future: &[Point],
    models: &Arc<PolicyModels>,
) -> Result<(SceneHistory, ReasoningAssignment)> {
    if ego_future.len() != models.config.horizon_steps {
        return Err(Error::HorizonMismatch { expected: models.config.horizon_steps, got: ego_future.len() });
    }
    let (visible, mut a) = make_l1_mfrbp(scene, sensor, models)?;
    let plan = TrajectoryGaussian::deterministic(sensor.ego, ego_future.to_vec())?;
    a.assign(sensor.ego, vec![Arc::new(PinnedPolicy { trajectory: plan }), Arc::new(FcCspPolicy { models: models.clone() })])?;
    Ok((visible, a))
}
