use crate::error::Result;
use crate::scene::{velocity_estimate, Cov2, TrackHistory, TrajectoryGaussian};

/// Averaging window of the constant-velocity model, seconds.
pub const CV_WINDOW_S: f64 = 1.0;
pub const DEFAULT_CV_SIGMA: f64 = 0.5;

/// Extrapolates the last observed position at the trailing one-second average velocity.
///
/// Covariance at step `s` is `diag((sigma * s * dt)^2)`.
pub fn cv_predict(target: &TrackHistory, horizon_steps: usize, sample_rate: f64, sigma: f64) -> Result<TrajectoryGaussian> {
    let v = velocity_estimate(target, sample_rate, CV_WINDOW_S)?;
    let last = target.last_position();
    let dt = 1.0 / sample_rate;
    let mut means = Vec::with_capacity(horizon_steps);
    let mut covariances = Vec::with_capacity(horizon_steps);
    for s in 1..=horizon_steps {
        let t = s as f64 * dt;
        means.push([last[0] + v[0] * t, last[1] + v[1] * t]);
        let sd = sigma * t;
        covariances.push(Cov2::diagonal(sd * sd, sd * sd));
    }
    TrajectoryGaussian::new(target.agent_id(), means, covariances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentId;
    use crate::Error;

    #[test]
    fn extrapolates_constant_velocity() {
        let positions: Vec<_> = (0..30).map(|k| [5.0 + 0.1 * k as f64, 1.5]).collect();
        let t = TrackHistory::from_positions(AgentId(1), 0, &positions).unwrap();
        let p = cv_predict(&t, 50, 10.0, DEFAULT_CV_SIGMA).unwrap();
        assert_eq!(p.horizon(), 50);
        let x0 = t.last_position()[0];
        for (s, m) in p.means().iter().enumerate() {
            assert!((m[0] - (x0 + 0.1 * (s + 1) as f64)).abs() < 1e-9);
            assert_eq!(m[1], 1.5);
        }
        let c = p.covariances()[9];
        assert!((c.xx - 0.25).abs() < 1e-12 && c.xy == 0.0);
    }

    #[test]
    fn stationary_target_stays_put() {
        let t = TrackHistory::from_positions(AgentId(2), 0, &[[3.0, 4.0]; 12]).unwrap();
        let p = cv_predict(&t, 5, 10.0, 0.5).unwrap();
        assert!(p.means().iter().all(|m| *m == [3.0, 4.0]));
    }

    #[test]
    fn needs_two_states() {
        let t = TrackHistory::from_positions(AgentId(2), 0, &[[3.0, 4.0]]).unwrap();
        assert!(matches!(cv_predict(&t, 5, 10.0, 0.5), Err(Error::InsufficientHistory { .. })));
    }
}
