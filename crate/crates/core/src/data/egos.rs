//! Greedy seeded ego sampling so every test vehicle is covered once per pass.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SceneWindow};
use crate::error::Result;
use crate::recursion::{distance, SensorConfig};
use crate::scene::AgentId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgoAssignment {
    pub window: usize,
    pub ego: AgentId,
    /// Test targets whose level-1 prediction comes from this ego's run.
    pub covered: Vec<AgentId>,
}

/// For every window, samples egos until each test target lies in the core
/// zone of one of them.
///
/// Repeatedly picks a random uncovered target, then a random ego among the
/// agents (with a full recorded future) whose core zone contains it. A target
/// no other agent can cover becomes its own ego. Each target is assigned to
/// the first ego that covers it.
pub fn sample_egos(dataset: &Dataset, sensor: &SensorConfig, seed: u64) -> Result<Vec<EgoAssignment>> {
    sensor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (window, segments) in dataset.segments_by_window() {
        let targets: BTreeSet<AgentId> = segments.iter().map(|&i| dataset.segments[i].target).collect();
        for (ego, covered) in cover_window(&dataset.windows[window], &targets, sensor, dataset.horizon_steps(), &mut rng)? {
            out.push(EgoAssignment { window, ego, covered });
        }
    }
    Ok(out)
}

/// The per-window step of [`sample_egos`]: `(ego, covered targets)` pairs.
pub fn cover_window(
    w: &SceneWindow,
    targets: &BTreeSet<AgentId>,
    sensor: &SensorConfig,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(AgentId, Vec<AgentId>)>> {
    let core = sensor.core_radius();
    let mut uncovered = targets.clone();
    let mut out = Vec::new();
    while !uncovered.is_empty() {
        let pick: Vec<AgentId> = uncovered.iter().copied().collect();
        let u = pick[rng.random_range(0..pick.len())];
        let pu = w.history.current_position(u)?;
        let mut candidates = Vec::new();
        for t in w.history.tracks() {
            let id = t.agent_id();
            if id != u && w.has_full_future(id, horizon) && distance(pu, t.last_position()) <= core {
                candidates.push(id);
            }
        }
        let ego = if candidates.is_empty() { u } else { candidates[rng.random_range(0..candidates.len())] };
        let pe = w.history.current_position(ego)?;
        let mut covered = Vec::new();
        for id in &pick {
            if *id == u || distance(pe, w.history.current_position(*id)?) <= core {
                covered.push(*id);
                uncovered.remove(id);
            }
        }
        out.push((ego, covered));
    }
    Ok(out)
}
