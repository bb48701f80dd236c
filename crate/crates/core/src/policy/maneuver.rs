//! Maneuver classes: lateral {keep, left, right} x longitudinal {normal, braking}.

use crate::error::Result;
use crate::policy::config::CspConfig;
use crate::scene::{velocity_estimate, Point, TrackHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lateral {
    Keep = 0,
    Left = 1,
    Right = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Longitudinal {
    Normal = 0,
    Braking = 1,
}

pub fn maneuver_index(lat: Lateral, lon: Longitudinal) -> usize {
    lat as usize * 2 + lon as usize
}

/// Label of the ground-truth `future` (absolute positions) following `history`.
pub fn maneuver_label(history: &TrackHistory, future: &[Point], config: &CspConfig) -> Result<usize> {
    let m = &config.maneuver;
    let now = history.last_position();
    let end = future.last().copied().unwrap_or(now);
    let dy = end[1] - now[1];
    let threshold = m.lane_change_fraction * config.cell_width;
    let lat = if dy > threshold {
        Lateral::Left
    } else if dy < -threshold {
        Lateral::Right
    } else {
        Lateral::Keep
    };

    let v = velocity_estimate(history, config.sample_rate, m.current_speed_window_s)?;
    let current_speed = v[0].hypot(v[1]);
    let mut path = 0.0;
    let mut prev = now;
    for p in future {
        path += (p[0] - prev[0]).hypot(p[1] - prev[1]);
        prev = *p;
    }
    let mean_speed = if future.is_empty() { current_speed } else { path * config.sample_rate / future.len() as f64 };
    let lon = if current_speed > 0.0 && mean_speed < m.braking_ratio * current_speed {
        Longitudinal::Braking
    } else {
        Longitudinal::Normal
    };
    Ok(maneuver_index(lat, lon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentId;

    fn history(speed: f64) -> TrackHistory {
        let positions: Vec<_> = (0..30).map(|k| [speed * 0.1 * k as f64, 0.0]).collect();
        TrackHistory::from_positions(AgentId(1), 0, &positions).unwrap()
    }

    #[test]
    fn keep_lane_cruise() {
        let h = history(20.0);
        let x0 = h.last_position()[0];
        let future: Vec<_> = (1..=50).map(|s| [x0 + 2.0 * s as f64, 0.0]).collect();
        assert_eq!(maneuver_label(&h, &future, &CspConfig::default()).unwrap(), 0);
    }

    #[test]
    fn braking_and_lane_change() {
        let c = CspConfig::default();
        let h = history(20.0);
        let x0 = h.last_position()[0];
        let slow: Vec<_> = (1..=50).map(|s| [x0 + 1.0 * s as f64, 0.0]).collect();
        assert_eq!(maneuver_label(&h, &slow, &c).unwrap(), maneuver_index(Lateral::Keep, Longitudinal::Braking));
        let left: Vec<_> = (1..=50).map(|s| [x0 + 2.0 * s as f64, 0.08 * s as f64]).collect();
        assert_eq!(maneuver_label(&h, &left, &c).unwrap(), maneuver_index(Lateral::Left, Longitudinal::Normal));
        let right: Vec<_> = (1..=50).map(|s| [x0 + 2.0 * s as f64, -0.08 * s as f64]).collect();
        assert_eq!(maneuver_label(&h, &right, &c).unwrap(), 4);
    }
}
