//! Track ingestion, train/test splitting, segmentation, synthetic traffic,
//! and ego sampling.

pub mod egos;
pub mod ngsim;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::config::{HISTORY_SECONDS, HORIZON_SECONDS};
use crate::scene::{AgentId, Point, SceneHistory, TrackHistory};

pub use egos::{cover_window, sample_egos, EgoAssignment};
pub use ngsim::{parse_trajectories, read_trajectories, write_trajectories, ParsedTrack, RawTrajectoryRecord};
pub use synth::{synthesize_scenes, SynthConfig};

/// Contiguous tracks of one recording (dataset subset) on a shared clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub subset: String,
    pub sample_rate: f64,
    pub tracks: BTreeMap<AgentId, TrackHistory>,
}

impl TrackSet {
    pub fn new(subset: impl Into<String>, sample_rate: f64, tracks: impl IntoIterator<Item = TrackHistory>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in tracks {
            let id = t.agent_id();
            if map.insert(id, t).is_some() {
                return Err(Error::DuplicateAgent(id));
            }
        }
        Ok(Self { subset: subset.into(), sample_rate, tracks: map })
    }

    pub fn vehicle_ids(&self) -> BTreeSet<AgentId> {
        self.tracks.keys().copied().collect()
    }

    /// Keeps every `factor`-th frame (frames divisible by `factor`), renumbered to the coarser clock.
    pub fn downsampled(&self, factor: u64) -> Result<TrackSet> {
        if factor == 0 {
            return Err(Error::InvalidArgument("downsampling factor must be at least 1".into()));
        }
        let mut tracks = BTreeMap::new();
        for (id, t) in &self.tracks {
            let kept: Vec<_> = t
                .states()
                .iter()
                .filter(|s| s.frame % factor == 0)
                .map(|s| crate::scene::AgentState::new(s.x, s.y, s.frame / factor))
                .collect();
            if !kept.is_empty() {
                tracks.insert(*id, TrackHistory::new(*id, kept)?);
            }
        }
        Ok(TrackSet { subset: self.subset.clone(), sample_rate: self.sample_rate / factor as f64, tracks })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub history_steps: usize,
    pub horizon_steps: usize,
    pub stride_steps: usize,
}

impl SegmentConfig {
    /// 3 s history, 5 s horizon, 1 s stride.
    pub fn at_rate(sample_rate: f64) -> Self {
        Self {
            history_steps: (HISTORY_SECONDS * sample_rate).round() as usize,
            horizon_steps: (HORIZON_SECONDS * sample_rate).round() as usize,
            stride_steps: sample_rate.round().max(1.0) as usize,
        }
    }

    pub fn window_steps(&self) -> usize {
        self.history_steps + self.horizon_steps
    }

    /// Number of full windows a contiguous track of `len` frames yields.
    pub fn window_count(&self, len: usize) -> usize {
        if len < self.window_steps() || self.stride_steps == 0 {
            0
        } else {
            (len - self.window_steps()) / self.stride_steps + 1
        }
    }
}

/// Histories of every agent observed over a full history window, plus
/// whatever part of their futures the recording contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneWindow {
    pub subset: String,
    pub history: SceneHistory,
    /// Future positions from the frame after the current one, clipped to the
    /// recording; full length only for agents observed over the whole horizon.
    pub futures: BTreeMap<AgentId, Vec<Point>>,
}

impl SceneWindow {
    pub fn has_full_future(&self, id: AgentId, horizon_steps: usize) -> bool {
        self.futures.get(&id).is_some_and(|f| f.len() >= horizon_steps)
    }

    pub fn future(&self, id: AgentId, horizon_steps: usize) -> Result<&[Point]> {
        match self.futures.get(&id) {
            Some(f) if f.len() >= horizon_steps => Ok(&f[..horizon_steps]),
            Some(f) => Err(Error::HorizonMismatch { expected: horizon_steps, got: f.len() }),
            None => Err(Error::UnknownAgent(id)),
        }
    }
}

/// One prediction target in one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub window: usize,
    pub target: AgentId,
}

pub const DATASET_FORMAT: &str = "mfrbp-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format: String,
    pub version: u32,
    pub sample_rate: f64,
    pub segment_config: SegmentConfig,
    pub windows: Vec<SceneWindow>,
    pub segments: Vec<Segment>,
}

impl Dataset {
    pub fn empty(sample_rate: f64, segment_config: SegmentConfig) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            sample_rate,
            segment_config,
            windows: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn horizon_steps(&self) -> usize {
        self.segment_config.horizon_steps
    }

    pub fn window_of(&self, segment: &Segment) -> &SceneWindow {
        &self.windows[segment.window]
    }

    /// Ground-truth future of a segment's target.
    pub fn target_future(&self, segment: &Segment) -> Result<&[Point]> {
        self.windows[segment.window].future(segment.target, self.horizon_steps())
    }

    /// Segments grouped by window, in window order.
    pub fn segments_by_window(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.segments.iter().enumerate() {
            out.entry(s.window).or_default().push(i);
        }
        out
    }

    /// Concatenates `other`, re-indexing its windows.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if other.sample_rate != self.sample_rate || other.segment_config != self.segment_config {
            return Err(Error::RateMismatch { dataset: other.sample_rate, config: self.sample_rate });
        }
        let offset = self.windows.len();
        self.windows.extend(other.windows);
        self.segments.extend(other.segments.into_iter().map(|s| Segment { window: s.window + offset, target: s.target }));
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if d.format != DATASET_FORMAT || d.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
                d.format, d.version
            )));
        }
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks the frame-count invariants of every segment.
    pub fn validate(&self) -> Result<()> {
        let c = self.segment_config;
        for s in &self.segments {
            let w = self.windows.get(s.window).ok_or_else(|| Error::Format(format!("segment refers to missing window {}", s.window)))?;
            let track = w.history.track(s.target)?;
            if track.len() != c.history_steps {
                return Err(Error::InvalidTrack {
                    agent: s.target,
                    reason: format!("history has {} frames, expected {}", track.len(), c.history_steps),
                });
            }
            w.future(s.target, c.horizon_steps)?;
        }
        Ok(())
    }
}

/// Cuts windows of `history + horizon` frames from each target's track,
/// starting at its first frame and advancing by the stride.
///
/// Only targets in `targets` (all vehicles when `None`) yield segments. Every
/// vehicle observed over a window's full history is part of that window's
/// scene; vehicles entering mid-history are left out.
pub fn segment_dataset(set: &TrackSet, targets: Option<&BTreeSet<AgentId>>, config: SegmentConfig) -> Result<Dataset> {
    if config.history_steps == 0 || config.horizon_steps == 0 || config.stride_steps == 0 {
        return Err(Error::InvalidArgument("segment lengths and stride must be positive".into()));
    }
    let mut dataset = Dataset::empty(set.sample_rate, config);
    let mut window_index: BTreeMap<u64, usize> = BTreeMap::new();
    let h = config.history_steps as u64;
    let f = config.horizon_steps as u64;
    for (id, track) in &set.tracks {
        if targets.is_some_and(|t| !t.contains(id)) {
            continue;
        }
        for m in 0..config.window_count(track.len()) {
            let current = track.first_frame() + (m * config.stride_steps) as u64 + h - 1;
            let window = match window_index.get(&current) {
                Some(&w) => w,
                None => {
                    let w = build_window(set, current, h, f)?;
                    dataset.windows.push(w);
                    window_index.insert(current, dataset.windows.len() - 1);
                    dataset.windows.len() - 1
                }
            };
            dataset.segments.push(Segment { window, target: *id });
        }
    }
    // deterministic order independent of insertion: by window then target
    dataset.segments.sort_by_key(|s| (s.window, s.target));
    Ok(dataset)
}

fn build_window(set: &TrackSet, current: u64, h: u64, f: u64) -> Result<SceneWindow> {
    let start = current + 1 - h;
    let mut histories = Vec::new();
    let mut futures = BTreeMap::new();
    for (id, t) in &set.tracks {
        if t.first_frame() > start || t.last_frame() < current {
            continue;
        }
        let offset = (start - t.first_frame()) as usize;
        let states = t.states()[offset..offset + h as usize].to_vec();
        histories.push(TrackHistory::new(*id, states)?);
        let future: Vec<Point> = t.states()[offset + h as usize..].iter().take(f as usize).map(|s| s.position()).collect();
        futures.insert(*id, future);
    }
    let history = crate::scene::build_scene(histories, set.sample_rate)?;
    Ok(SceneWindow { subset: set.subset.clone(), history, futures })
}

/// Per-subset vehicle split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeMap<String, BTreeSet<AgentId>>,
    pub test: BTreeMap<String, BTreeSet<AgentId>>,
}

/// Sends a seeded random quarter (rounded) of each subset's vehicles to test.
pub fn split_train_test(sets: &[TrackSet], seed: u64) -> Split {
    let mut split = Split::default();
    for set in sets {
        let mut ids: Vec<AgentId> = set.tracks.keys().copied().collect();
        let subset_seed = seed ^ subset_hash(&set.subset);
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(subset_seed));
        let n_test = (ids.len() as f64 / 4.0).round() as usize;
        let (test, train) = ids.split_at(n_test);
        split.test.entry(set.subset.clone()).or_default().extend(test.iter().copied());
        split.train.entry(set.subset.clone()).or_default().extend(train.iter().copied());
    }
    split
}

// FNV-1a, stable across platforms and releases
fn subset_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Segments every set, restricting targets to `split`'s train and test ids.
pub fn build_split_datasets(sets: &[TrackSet], split: &Split, config: SegmentConfig) -> Result<(Dataset, Dataset)> {
    let rate = sets.first().map(|s| s.sample_rate).ok_or(Error::EmptyDataset)?;
    let mut train = Dataset::empty(rate, config);
    let mut test = Dataset::empty(rate, config);
    let none = BTreeSet::new();
    for set in sets {
        if set.sample_rate != rate {
            return Err(Error::RateMismatch { dataset: set.sample_rate, config: rate });
        }
        train.extend(segment_dataset(set, Some(split.train.get(&set.subset).unwrap_or(&none)), config)?)?;
        test.extend(segment_dataset(set, Some(split.test.get(&set.subset).unwrap_or(&none)), config)?)?;
    }
    Ok((train, test))
}
