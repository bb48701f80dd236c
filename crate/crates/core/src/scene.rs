//! Scene-level domain types: agent tracks on a shared clock and the Gaussian
//! trajectory predictions produced for them.
//!
//! Positions are meters; `x` is longitudinal (direction of travel) and `y`
//! lateral. Frames are integer ticks of duration `1 / sample_rate` seconds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u64);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A 2D position `[x, y]` in meters.
pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub frame: u64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, frame: u64) -> Self {
        Self { x, y, frame }
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }
}

/// Ordered states of one agent with consecutive frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrack")]
pub struct TrackHistory {
    agent_id: AgentId,
    states: Vec<AgentState>,
}

#[derive(Deserialize)]
struct RawTrack {
    agent_id: AgentId,
    states: Vec<AgentState>,
}

impl TryFrom<RawTrack> for TrackHistory {
    type Error = Error;

    fn try_from(raw: RawTrack) -> Result<Self> {
        TrackHistory::new(raw.agent_id, raw.states)
    }
}

impl TrackHistory {
    pub fn new(agent_id: AgentId, states: Vec<AgentState>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidTrack { agent: agent_id, reason: "empty track".into() });
        }
        for pair in states.windows(2) {
            if pair[1].frame != pair[0].frame + 1 {
                return Err(Error::InvalidTrack {
                    agent: agent_id,
                    reason: format!("frame {} follows frame {}", pair[1].frame, pair[0].frame),
                });
            }
        }
        if let Some(bad) = states.iter().find(|s| !s.x.is_finite() || !s.y.is_finite()) {
            return Err(Error::InvalidTrack {
                agent: agent_id,
                reason: format!("non-finite position at frame {}", bad.frame),
            });
        }
        Ok(Self { agent_id, states })
    }

    /// Track starting at `start_frame` with one state per position.
    pub fn from_positions(agent_id: AgentId, start_frame: u64, positions: &[Point]) -> Result<Self> {
        let states = positions
            .iter()
            .enumerate()
            .map(|(i, p)| AgentState::new(p[0], p[1], start_frame + i as u64))
            .collect();
        Self::new(agent_id, states)
    }

    pub fn agent_id(&self) -> AgentId {
        self.agent_id
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first_frame(&self) -> u64 {
        self.states[0].frame
    }

    pub fn last_frame(&self) -> u64 {
        self.states[self.states.len() - 1].frame
    }

    pub fn last_position(&self) -> Point {
        self.states[self.states.len() - 1].position()
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = Point> + '_ {
        self.states.iter().map(AgentState::position)
    }

    pub fn position_at(&self, frame: u64) -> Option<Point> {
        let offset = frame.checked_sub(self.first_frame())? as usize;
        self.states.get(offset).map(AgentState::position)
    }

    /// Drops states after `frame`. `None` if nothing remains.
    pub fn truncated_to(&self, frame: u64) -> Option<TrackHistory> {
        if frame < self.first_frame() {
            return None;
        }
        let keep = ((frame - self.first_frame()) as usize + 1).min(self.states.len());
        Some(TrackHistory { agent_id: self.agent_id, states: self.states[..keep].to_vec() })
    }

    /// The last `n` states (or the whole track if shorter).
    pub fn tail(&self, n: usize) -> &[AgentState] {
        &self.states[self.states.len().saturating_sub(n)..]
    }
}

/// Histories of all agents in a scene, aligned on a common current frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScene")]
pub struct SceneHistory {
    tracks: BTreeMap<AgentId, TrackHistory>,
    current_frame: u64,
    sample_rate: f64,
}

#[derive(Deserialize)]
struct RawScene {
    tracks: BTreeMap<AgentId, TrackHistory>,
    current_frame: u64,
    sample_rate: f64,
}

impl TryFrom<RawScene> for SceneHistory {
    type Error = Error;

    fn try_from(raw: RawScene) -> Result<Self> {
        if raw.tracks.is_empty() {
            return Err(Error::InvalidArgument("scene has no tracks".into()));
        }
        for (id, track) in &raw.tracks {
            if *id != track.agent_id() {
                return Err(Error::InvalidArgument(format!("track keyed {id} holds agent {}", track.agent_id())));
            }
            if track.last_frame() != raw.current_frame {
                return Err(Error::InvalidTrack {
                    agent: *id,
                    reason: format!("ends at {} instead of {}", track.last_frame(), raw.current_frame),
                });
            }
        }
        check_rate(raw.sample_rate)?;
        Ok(SceneHistory { tracks: raw.tracks, current_frame: raw.current_frame, sample_rate: raw.sample_rate })
    }
}

fn check_rate(sample_rate: f64) -> Result<()> {
    if sample_rate.is_finite() && sample_rate > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sample rate must be positive, got {sample_rate}")))
    }
}

/// Aligns tracks on their latest common frame, truncating the rest.
pub fn build_scene(tracks: impl IntoIterator<Item = TrackHistory>, sample_rate: f64) -> Result<SceneHistory> {
    check_rate(sample_rate)?;
    let mut by_id = BTreeMap::new();
    for track in tracks {
        let id = track.agent_id();
        if by_id.insert(id, track).is_some() {
            return Err(Error::DuplicateAgent(id));
        }
    }
    if by_id.is_empty() {
        return Err(Error::InvalidArgument("no tracks".into()));
    }
    let current = by_id.values().map(TrackHistory::last_frame).min().unwrap_or(0);
    if by_id.values().any(|t| t.first_frame() > current) {
        return Err(Error::NoCommonFrame);
    }
    let tracks = by_id
        .into_iter()
        .map(|(id, t)| (id, t.truncated_to(current).expect("overlap checked above")))
        .collect();
    Ok(SceneHistory { tracks, current_frame: current, sample_rate })
}

impl SceneHistory {
    pub fn current_frame(&self) -> u64 {
        self.current_frame
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Tick duration in seconds.
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn tracks(&self) -> impl Iterator<Item = &TrackHistory> {
        self.tracks.values()
    }

    pub fn track(&self, id: AgentId) -> Result<&TrackHistory> {
        self.tracks.get(&id).ok_or(Error::UnknownAgent(id))
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.tracks.contains_key(&id)
    }

    pub fn agent_ids(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.tracks.keys().copied()
    }

    pub fn agent_set(&self) -> BTreeSet<AgentId> {
        self.tracks.keys().copied().collect()
    }

    /// Position of `id` at the current frame.
    pub fn current_position(&self, id: AgentId) -> Result<Point> {
        self.track(id).map(TrackHistory::last_position)
    }

    /// Sub-scene holding only the agents accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&TrackHistory) -> bool) -> Result<SceneHistory> {
        let tracks: BTreeMap<_, _> =
            self.tracks.iter().filter(|(_, t)| keep(t)).map(|(id, t)| (*id, t.clone())).collect();
        if tracks.is_empty() {
            return Err(Error::InvalidArgument("filter removed every agent".into()));
        }
        Ok(SceneHistory { tracks, current_frame: self.current_frame, sample_rate: self.sample_rate })
    }
}

/// Average velocity over the trailing `window_s` seconds of `track`.
///
/// The window is clipped to the available history. Returns `[vx, vy]` in m/s.
pub fn velocity_estimate(track: &TrackHistory, sample_rate: f64, window_s: f64) -> Result<Point> {
    if track.len() < 2 {
        return Err(Error::InsufficientHistory { agent: track.agent_id(), have: track.len(), need: 2 });
    }
    if !(window_s > 0.0) {
        return Err(Error::InvalidArgument(format!("velocity window must be positive, got {window_s}")));
    }
    check_rate(sample_rate)?;
    let frames = ((window_s * sample_rate).round() as usize).clamp(1, track.len() - 1);
    let states = track.states();
    let last = states[states.len() - 1];
    let first = states[states.len() - 1 - frames];
    let elapsed = frames as f64 / sample_rate;
    Ok([(last.x - first.x) / elapsed, (last.y - first.y) / elapsed])
}

/// Symmetric 2x2 covariance `[[xx, xy], [xy, yy]]` in m².
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub const ZERO: Cov2 = Cov2 { xx: 0.0, xy: 0.0, yy: 0.0 };

    pub fn diagonal(xx: f64, yy: f64) -> Self {
        Self { xx, xy: 0.0, yy }
    }

    /// Covariance from standard deviations and correlation coefficient.
    pub fn from_sigma_rho(sigma_x: f64, sigma_y: f64, rho: f64) -> Self {
        Self { xx: sigma_x * sigma_x, xy: rho * sigma_x * sigma_y, yy: sigma_y * sigma_y }
    }

    pub fn determinant(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn as_matrix(&self) -> [[f64; 2]; 2] {
        [[self.xx, self.xy], [self.xy, self.yy]]
    }

    /// Eigenvalues in descending order with the unit eigenvector of the larger one.
    pub fn eigen(&self) -> ([f64; 2], Point) {
        let mean = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        let radius = (half_diff * half_diff + self.xy * self.xy).sqrt();
        let major = mean + radius;
        let minor = mean - radius;
        let dir = if self.xy == 0.0 {
            if self.xx >= self.yy { [1.0, 0.0] } else { [0.0, 1.0] }
        } else {
            let v = [major - self.yy, self.xy];
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        };
        ([major, minor.max(0.0)], dir)
    }

    fn is_valid(&self) -> bool {
        // small negative determinants arise from rounding when |rho| -> 1
        let tol = 1e-12 * (self.xx * self.yy).abs().max(1.0);
        [self.xx, self.xy, self.yy].iter().all(|v| v.is_finite())
            && self.xx >= 0.0
            && self.yy >= 0.0
            && self.determinant() >= -tol
    }
}

/// Mean future trajectory of one agent with per-step covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGaussian {
    agent_id: AgentId,
    means: Vec<Point>,
    covariances: Vec<Cov2>,
}

impl TrajectoryGaussian {
    pub fn new(agent_id: AgentId, means: Vec<Point>, covariances: Vec<Cov2>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidPrediction("empty trajectory".into()));
        }
        if means.len() != covariances.len() {
            return Err(Error::InvalidPrediction(format!(
                "{} means but {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if let Some(step) = covariances.iter().position(|c| !c.is_valid()) {
            return Err(Error::InvalidPrediction(format!("invalid covariance at step {step}")));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPrediction("non-finite mean".into()));
        }
        Ok(Self { agent_id, means, covariances })
    }

    /// Trajectory with zero covariance at every step.
    pub fn deterministic(agent_id: AgentId, means: Vec<Point>) -> Result<Self> {
        let covariances = vec![Cov2::ZERO; means.len()];
        Self::new(agent_id, means, covariances)
    }

    pub fn agent_id(&self) -> AgentId {
        self.agent_id
    }

    pub fn means(&self) -> &[Point] {
        &self.means
    }

    pub fn covariances(&self) -> &[Cov2] {
        &self.covariances
    }

    pub fn horizon(&self) -> usize {
        self.means.len()
    }

    pub fn with_agent(mut self, agent_id: AgentId) -> Self {
        self.agent_id = agent_id;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureMode {
    pub weight: f64,
    pub trajectory: TrajectoryGaussian,
}

pub const MAX_MODES: usize = 6;

/// Weighted set of Gaussian trajectory modes for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePrediction {
    modes: Vec<MixtureMode>,
}

impl MixturePrediction {
    pub fn new(modes: Vec<MixtureMode>) -> Result<Self> {
        if modes.is_empty() || modes.len() > MAX_MODES {
            return Err(Error::InvalidPrediction(format!("{} modes, expected 1..={MAX_MODES}", modes.len())));
        }
        if modes.iter().any(|m| !(m.weight >= 0.0) || !m.weight.is_finite()) {
            return Err(Error::InvalidPrediction("mode weights must be finite and non-negative".into()));
        }
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidPrediction(format!("mode weights sum to {total}")));
        }
        Ok(Self { modes })
    }

    pub fn modes(&self) -> &[MixtureMode] {
        &self.modes
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.modes.iter().map(|m| m.weight)
    }

    pub fn top_mode_index(&self) -> usize {
        let mut best = 0;
        for (i, m) in self.modes.iter().enumerate().skip(1) {
            if m.weight > self.modes[best].weight {
                best = i;
            }
        }
        best
    }
}

/// Trajectory of the highest-weight mode; ties go to the lowest index.
pub fn select_top_mode(pred: &MixturePrediction) -> TrajectoryGaussian {
    pred.modes[pred.top_mode_index()].trajectory.clone()
}

/// Final prediction for every agent of a scene.
pub type ScenePrediction = BTreeMap<AgentId, TrajectoryGaussian>;
