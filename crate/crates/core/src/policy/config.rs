use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamConfig;

/// Architecture and geometry of the social-pooling policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CspConfig {
    /// Longitudinal cells of the social grid.
    pub grid_rows: usize,
    /// Lateral cells (lanes) of the social grid.
    pub grid_cols: usize,
    /// Cell length along the direction of travel, meters.
    pub cell_length: f64,
    /// Cell width (one lane), meters.
    pub cell_width: f64,
    pub encoder_hidden: usize,
    /// Width of the input and dynamics embeddings.
    pub embed_size: usize,
    pub conv_filters: usize,
    pub conv_kernel: (usize, usize),
    pub pool_window: (usize, usize),
    pub decoder_hidden: usize,
    pub num_modes: usize,
    pub history_steps: usize,
    pub horizon_steps: usize,
    pub sample_rate: f64,
    pub leaky_slope: f64,
    /// Positions are divided by this before entering the network, meters.
    pub position_scale: f64,
    /// Velocities are expressed in units of this, m/s.
    pub velocity_scale: f64,
    pub maneuver: ManeuverConfig,
}

pub const HISTORY_SECONDS: f64 = 3.0;
pub const HORIZON_SECONDS: f64 = 5.0;
pub const NUM_MODES: usize = 6;

impl Default for CspConfig {
    fn default() -> Self {
        Self::at_rate(10.0)
    }
}

impl CspConfig {
    /// Full-size architecture at the given sample rate.
    pub fn at_rate(sample_rate: f64) -> Self {
        Self {
            grid_rows: 13,
            grid_cols: 3,
            cell_length: 4.57,
            cell_width: 3.66,
            encoder_hidden: 64,
            embed_size: 32,
            conv_filters: 64,
            conv_kernel: (3, 3),
            pool_window: (2, 1),
            decoder_hidden: 128,
            num_modes: NUM_MODES,
            history_steps: (HISTORY_SECONDS * sample_rate).round() as usize,
            horizon_steps: (HORIZON_SECONDS * sample_rate).round() as usize,
            sample_rate,
            leaky_slope: 0.1,
            position_scale: 10.0,
            velocity_scale: 10.0,
            maneuver: ManeuverConfig::default(),
        }
    }

    /// Reduced hidden sizes for desk-scale training and tests.
    pub fn desk(sample_rate: f64) -> Self {
        Self {
            encoder_hidden: 16,
            embed_size: 16,
            conv_filters: 8,
            decoder_hidden: 16,
            ..Self::at_rate(sample_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_modes != NUM_MODES {
            return bad(format!("num_modes must be {NUM_MODES}, got {}", self.num_modes));
        }
        if !(self.sample_rate > 0.0) {
            return bad("sample_rate must be positive".into());
        }
        let hist = (HISTORY_SECONDS * self.sample_rate).round() as usize;
        let horizon = (HORIZON_SECONDS * self.sample_rate).round() as usize;
        if self.history_steps != hist || self.horizon_steps != horizon {
            return bad(format!(
                "history/horizon steps must be {hist}/{horizon} at {} Hz, got {}/{}",
                self.sample_rate, self.history_steps, self.horizon_steps
            ));
        }
        let sizes = [
            self.grid_rows,
            self.grid_cols,
            self.encoder_hidden,
            self.embed_size,
            self.conv_filters,
            self.decoder_hidden,
            self.conv_kernel.0,
            self.conv_kernel.1,
            self.pool_window.0,
            self.pool_window.1,
        ];
        if sizes.contains(&0) {
            return bad("all sizes must be at least 1".into());
        }
        if self.grid_rows.is_multiple_of(2) || self.grid_cols.is_multiple_of(2) {
            return bad("grid dimensions must be odd so the target sits in the centre cell".into());
        }
        if self.conv_kernel.0 > self.grid_rows || self.conv_kernel.1 > self.grid_cols {
            return bad("conv kernel larger than grid".into());
        }
        let (ch, cw) = self.conv_output_hw();
        if self.pool_window.0 > ch || self.pool_window.1 > cw {
            return bad("pool window larger than conv output".into());
        }
        for v in [self.cell_length, self.cell_width, self.position_scale, self.velocity_scale] {
            if !(v > 0.0) {
                return bad("lengths and scales must be positive".into());
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn conv_output_hw(&self) -> (usize, usize) {
        (self.grid_rows + 1 - self.conv_kernel.0, self.grid_cols + 1 - self.conv_kernel.1)
    }

    /// Width of the flattened pooled social context.
    pub fn context_dim(&self) -> usize {
        let (h, w) = self.conv_output_hw();
        self.conv_filters * (h / self.pool_window.0) * (w / self.pool_window.1)
    }

    /// Features per encoded step: relative position and velocity.
    pub const STEP_FEATURES: usize = 4;
}

/// Thresholds used to derive maneuver labels from ground-truth futures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManeuverConfig {
    /// Lateral displacement, in lanes, beyond which the future counts as a lane change.
    pub lane_change_fraction: f64,
    /// Mean future speed below this fraction of current speed counts as braking.
    pub braking_ratio: f64,
    /// Window for the current-speed estimate, seconds.
    pub current_speed_window_s: f64,
}

impl Default for ManeuverConfig {
    fn default() -> Self {
        Self { lane_change_fraction: 0.5, braking_ratio: 0.8, current_speed_window_s: 0.2 }
    }
}

/// Joint training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub csp_loss_weight: f64,
    pub fccsp_loss_weight: f64,
    /// Start the future-context weights of the decoder and maneuver head at zero.
    pub zero_init_future_gates: bool,
    /// Standard deviation growth rate of constant-velocity predictions, m/s.
    pub cv_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() },
            csp_loss_weight: 1.0,
            fccsp_loss_weight: 1.0,
            zero_init_future_gates: true,
            cv_sigma: 0.5,
        }
    }
}
