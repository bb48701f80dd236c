//! Synthetic multi-lane car-following traffic.
//!
//! Each lane holds a platoon. The platoon leader cruises at a constant speed
//! and, with a seeded per-second probability, brakes for a while and then
//! recovers. Every follower copies its leader's trajectory delayed by the
//! reaction gap and shifted back by the jam spacing (a Newell-style follower), unless
//! its own desired speed is lower:
//!
//! ```text
//! x_f(t) = min(x_f(t-1) + v_desired * dt, x_leader(t - gap) - jam_spacing)
//! ```
//!
//! so a follower's future is a delayed copy of its leader's. Lateral positions
//! stay on the lane centre. Gaussian observation noise is added to both axes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{segment_dataset, Dataset, SegmentConfig, TrackSet};
use crate::error::{Error, Result};
use crate::scene::{AgentId, Point, TrackHistory};

pub const SYNTH_SUBSET: &str = "synth";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub episodes: usize,
    pub frames_per_episode: usize,
    pub sample_rate: f64,
    pub lanes: usize,
    pub vehicles_per_lane: usize,
    pub lane_width: f64,
    /// Cruise speeds of platoon leaders are drawn from this range, m/s.
    pub speed_range: (f64, f64),
    /// Chance per second that a cruising platoon leader starts braking.
    pub braking_probability: f64,
    /// Deceleration range of braking events, m/s².
    pub braking_decel: (f64, f64),
    /// Duration range of braking events, seconds.
    pub braking_duration_s: (f64, f64),
    /// Acceleration back to cruise speed after a braking event, m/s².
    pub recovery_accel: f64,
    /// Delay with which a follower reproduces its leader's motion, seconds.
    pub reaction_gap_s: f64,
    /// Bumper-to-bumper standstill spacing, meters.
    pub jam_spacing: f64,
    /// Followers want to drive this much faster than their leader's cruise speed, m/s.
    pub follower_speed_margin: f64,
    /// Observation noise standard deviation on both axes, meters.
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 30,
            frames_per_episode: 120,
            sample_rate: 10.0,
            lanes: 3,
            vehicles_per_lane: 6,
            lane_width: 3.66,
            speed_range: (15.0, 30.0),
            braking_probability: 0.15,
            braking_decel: (2.0, 5.0),
            braking_duration_s: (1.0, 3.0),
            recovery_accel: 1.5,
            reaction_gap_s: 0.7,
            jam_spacing: 6.0,
            follower_speed_margin: 3.0,
            noise_sigma: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth: {m}")));
        if self.episodes == 0 || self.frames_per_episode == 0 || self.lanes == 0 || self.vehicles_per_lane == 0 {
            return bad("counts must be positive");
        }
        if self.lanes * self.vehicles_per_lane >= 1000 {
            return bad("at most 999 vehicles per episode");
        }
        if !(self.sample_rate > 0.0 && self.lane_width > 0.0 && self.reaction_gap_s > 0.0 && self.jam_spacing > 0.0) {
            return bad("rate, lane width, reaction gap, and spacing must be positive");
        }
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("speed range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.braking_probability) {
            return bad("braking probability must lie in [0, 1]");
        }
        let ordered = |(a, b): (f64, f64)| a > 0.0 && b >= a;
        if !ordered(self.braking_decel) || !ordered(self.braking_duration_s) || !(self.recovery_accel > 0.0) {
            return bad("braking parameters must be positive and ordered");
        }
        if !(self.noise_sigma >= 0.0 && self.follower_speed_margin >= 0.0) {
            return bad("noise and margin must be non-negative");
        }
        Ok(())
    }

    pub fn reaction_frames(&self) -> usize {
        ((self.reaction_gap_s * self.sample_rate).round() as usize).max(1)
    }

    fn frame_offset(&self, episode: usize) -> u64 {
        (episode * self.frames_per_episode * 2) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrakingEvent {
    pub vehicle: AgentId,
    /// First frame with reduced speed.
    pub start_frame: u64,
    pub end_frame: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTraffic {
    pub tracks: TrackSet,
    /// Vehicle ids of each platoon, front to back.
    pub platoons: Vec<Vec<AgentId>>,
    pub braking_events: Vec<BrakingEvent>,
    /// Noise-free positions, keyed like `tracks`.
    pub clean: std::collections::BTreeMap<AgentId, Vec<Point>>,
}

impl SyntheticTraffic {
    /// Segments every vehicle.
    pub fn dataset(&self, config: SegmentConfig) -> Result<Dataset> {
        segment_dataset(&self.tracks, None, config)
    }
}

/// Generates traffic; a pure function of `config`.
pub fn synthesize_scenes(config: &SynthConfig) -> Result<SyntheticTraffic> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let dt = 1.0 / config.sample_rate;
    let gap = config.reaction_frames();
    let burn = gap * config.vehicles_per_lane + 1;
    let total = burn + config.frames_per_episode;

    let mut tracks = Vec::new();
    let mut platoons = Vec::new();
    let mut events = Vec::new();
    let mut clean = std::collections::BTreeMap::new();

    for episode in 0..config.episodes {
        let offset = config.frame_offset(episode);
        for lane in 0..config.lanes {
            let v0 = rng.random_range(config.speed_range.0..=config.speed_range.1);
            let x0 = rng.random_range(0.0..40.0);
            let y = lane as f64 * config.lane_width;
            let spacing = config.jam_spacing;
            let ids: Vec<AgentId> =
                (0..config.vehicles_per_lane).map(|j| AgentId((episode * 1000 + lane * config.vehicles_per_lane + j) as u64)).collect();

            // leader speed profile
            let mut speed = vec![v0; total];
            let mut t = burn;
            while t < total {
                if rng.random_bool((config.braking_probability * dt).min(1.0)) {
                    let a = rng.random_range(config.braking_decel.0..=config.braking_decel.1);
                    let d = rng.random_range(config.braking_duration_s.0..=config.braking_duration_s.1);
                    let frames = ((d * config.sample_rate).round() as usize).max(1);
                    let start = t;
                    let mut v = speed[t - 1];
                    for _ in 0..frames {
                        if t >= total {
                            break;
                        }
                        v = (v - a * dt).max(0.0);
                        speed[t] = v;
                        t += 1;
                    }
                    let end = t;
                    while t < total && v < v0 {
                        v = (v + config.recovery_accel * dt).min(v0);
                        speed[t] = v;
                        t += 1;
                    }
                    if start >= burn {
                        events.push(BrakingEvent {
                            vehicle: ids[0],
                            start_frame: offset + (start - burn) as u64,
                            end_frame: offset + (end - burn) as u64,
                        });
                    }
                } else {
                    t += 1;
                }
            }
            let mut lead = vec![x0; total];
            for k in 1..total {
                lead[k] = lead[k - 1] + speed[k] * dt;
            }

            let mut positions = vec![lead];
            for j in 1..config.vehicles_per_lane {
                let desired = v0 + config.follower_speed_margin * rng.random_range(0.5..=1.0);
                let ahead = &positions[j - 1];
                let mut x = vec![0.0; total];
                // steady state: the leader's position one gap earlier at cruise speed
                x[0] = ahead[0] - v0 * gap as f64 * dt - spacing;
                for k in 1..total {
                    let free = x[k - 1] + desired * dt;
                    let constrained = if k >= gap { ahead[k - gap] - spacing } else { x[0] + v0 * k as f64 * dt };
                    x[k] = free.min(constrained);
                }
                positions.push(x);
            }

            for (j, xs) in positions.iter().enumerate() {
                let kept = &xs[burn..];
                let clean_pts: Vec<Point> = kept.iter().map(|&x| [x, y]).collect();
                let noisy: Vec<Point> = if config.noise_sigma > 0.0 {
                    clean_pts.iter().map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]).collect()
                } else {
                    clean_pts.clone()
                };
                tracks.push(TrackHistory::from_positions(ids[j], offset, &noisy)?);
                clean.insert(ids[j], clean_pts);
            }
            platoons.push(ids);
        }
    }
    Ok(SyntheticTraffic {
        tracks: TrackSet::new(SYNTH_SUBSET, config.sample_rate, tracks)?,
        platoons,
        braking_events: events,
        clean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::cv::cv_predict;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { seed, episodes: 2, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(synthesize_scenes(&small(3)).unwrap(), synthesize_scenes(&small(3)).unwrap());
        assert_ne!(synthesize_scenes(&small(3)).unwrap().tracks, synthesize_scenes(&small(4)).unwrap().tracks);
    }

    #[test]
    fn no_braking_no_noise_is_constant_velocity() {
        let cfg = SynthConfig { braking_probability: 0.0, noise_sigma: 0.0, ..small(1) };
        let traffic = synthesize_scenes(&cfg).unwrap();
        assert!(traffic.braking_events.is_empty());
        let d = traffic.dataset(SegmentConfig::at_rate(10.0)).unwrap();
        assert!(!d.is_empty());
        for s in &d.segments {
            let w = d.window_of(s);
            let p = cv_predict(w.history.track(s.target).unwrap(), 50, 10.0, 0.5).unwrap();
            for (m, t) in p.means().iter().zip(d.target_future(s).unwrap()) {
                assert!((m[0] - t[0]).abs() < 1e-9 && (m[1] - t[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn follower_reacts_within_gap() {
        let cfg = SynthConfig { noise_sigma: 0.0, braking_probability: 0.5, episodes: 3, ..small(5) };
        let traffic = synthesize_scenes(&cfg).unwrap();
        let gap = cfg.reaction_frames() as u64;
        let mut checked = 0;
        for ev in &traffic.braking_events {
            let platoon = traffic.platoons.iter().find(|p| p[0] == ev.vehicle).unwrap();
            let follower = &traffic.clean[&platoon[1]];
            let start = traffic.tracks.tracks[&platoon[1]].first_frame();
            let k = (ev.start_frame - start) as usize;
            let g = gap as usize;
            if k < 2 || k + g + 1 >= follower.len() {
                continue;
            }
            let speed = |i: usize| (follower[i][0] - follower[i - 1][0]) * cfg.sample_rate;
            assert!(speed(k + g) < speed(k + g - 1) - 1e-9, "follower did not slow by frame {}", k + g);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn vehicle_ids_encode_episode() {
        let traffic = synthesize_scenes(&small(2)).unwrap();
        assert_eq!(traffic.tracks.tracks.len(), 2 * 3 * 6);
        assert!(traffic.tracks.tracks.contains_key(&AgentId(1017)));
    }
}
