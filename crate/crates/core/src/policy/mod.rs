//! Policy models: constant velocity, CSP, and future-conditional CSP.

pub mod config;
pub mod cv;
pub mod grid;
pub mod maneuver;
pub mod net;
pub mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, ParameterStore};
use crate::scene::{AgentId, SceneHistory, TrajectoryGaussian};

pub use config::{CspConfig, ManeuverConfig, TrainConfig};
pub use cv::{cv_predict, DEFAULT_CV_SIGMA};
pub use grid::{FutureGridTensor, SocialGrid, SocialGridTensor};
pub use net::{build_future_grid, build_history_grid, csp_forward, fccsp_forward, init_params, top_mode_forward};
pub use train::{train_policies, TrainedPolicies, TrainingScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Cv,
    Csp,
    FcCsp,
}

impl PolicyKind {
    pub fn is_future_conditional(self) -> bool {
        matches!(self, PolicyKind::FcCsp)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Cv => "CV",
            PolicyKind::Csp => "CSP",
            PolicyKind::FcCsp => "FC-CSP",
        })
    }
}

/// Everything a policy sees when predicting one agent at one level.
#[derive(Clone, Copy, Debug)]
pub struct PolicyInput<'a> {
    pub scene: &'a SceneHistory,
    pub target: AgentId,
    pub level: usize,
    /// Predictions for every other agent; `None` for the level-0 pass.
    pub others: Option<&'a BTreeMap<AgentId, TrajectoryGaussian>>,
}

pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    /// Whether the policy consumes the other agents' predicted futures.
    fn future_conditional(&self) -> bool;

    fn predict(&self, input: &PolicyInput<'_>) -> Result<TrajectoryGaussian>;
}

pub type PolicyRef = Arc<dyn Policy>;

#[derive(Clone, Debug)]
pub struct CvPolicy {
    pub horizon_steps: usize,
    pub sigma: f64,
}

impl Policy for CvPolicy {
    fn name(&self) -> String {
        PolicyKind::Cv.to_string()
    }

    fn future_conditional(&self) -> bool {
        false
    }

    fn predict(&self, input: &PolicyInput<'_>) -> Result<TrajectoryGaussian> {
        cv_predict(input.scene.track(input.target)?, self.horizon_steps, input.scene.sample_rate(), self.sigma)
    }
}

/// Trained weights shared by the CSP and FC-CSP policies.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModels {
    pub config: CspConfig,
    pub csp: ParameterStore,
    pub fccsp: ParameterStore,
    pub cv_sigma: f64,
}

pub const CSP_PREFIX: &str = "csp/";
pub const FCCSP_PREFIX: &str = "fccsp/";
const META_MODEL: &str = "model_config";
const META_CV_SIGMA: &str = "cv_sigma";

impl PolicyModels {
    /// Both networks in one checkpoint, under `csp/` and `fccsp/`, with the
    /// architecture and CV spread recorded next to `metadata`.
    pub fn to_checkpoint(&self, mut metadata: BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut params = ParameterStore::new();
        params.extend_prefixed(CSP_PREFIX, &self.csp)?;
        params.extend_prefixed(FCCSP_PREFIX, &self.fccsp)?;
        let model = toml::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        metadata.insert(META_MODEL.into(), model);
        metadata.insert(META_CV_SIGMA.into(), format!("{:?}", self.cv_sigma));
        Ok(Checkpoint { metadata, params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| ckpt.metadata.get(key).ok_or_else(|| Error::Checkpoint(format!("missing metadata {key:?}")));
        let config: CspConfig = toml::from_str(meta(META_MODEL)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        config.validate()?;
        let cv_sigma: f64 = meta(META_CV_SIGMA)?.parse().map_err(|_| Error::Checkpoint("bad cv_sigma".into()))?;
        let models = Self { csp: ckpt.params.strip_prefix(CSP_PREFIX), fccsp: ckpt.params.strip_prefix(FCCSP_PREFIX), config, cv_sigma };
        let expect_csp = net::init_params(&models.config, false, false, 0)?;
        let expect_fc = net::init_params(&models.config, true, false, 0)?;
        for (have, want, label) in [(&models.csp, &expect_csp, "csp"), (&models.fccsp, &expect_fc, "fccsp")] {
            let same = have.len() == want.len() && want.iter().all(|(n, t)| have.get(n).is_ok_and(|h| h.shape() == t.shape()));
            if !same {
                return Err(Error::Checkpoint(format!("{label} arrays do not match the recorded architecture")));
            }
        }
        Ok(models)
    }

    fn check_rate(&self, scene: &SceneHistory) -> Result<()> {
        if scene.sample_rate() != self.config.sample_rate {
            return Err(Error::RateMismatch { dataset: scene.sample_rate(), config: self.config.sample_rate });
        }
        Ok(())
    }
}

/// Top mode of the history-only network.
#[derive(Clone, Debug)]
pub struct CspPolicy {
    pub models: Arc<PolicyModels>,
}

impl Policy for CspPolicy {
    fn name(&self) -> String {
        PolicyKind::Csp.to_string()
    }

    fn future_conditional(&self) -> bool {
        false
    }

    fn predict(&self, input: &PolicyInput<'_>) -> Result<TrajectoryGaussian> {
        self.models.check_rate(input.scene)?;
        net::top_mode_forward(input.scene, input.target, None, &self.models.csp, &self.models.config)
    }
}

/// Top mode of the future-conditional network.
#[derive(Clone, Debug)]
pub struct FcCspPolicy {
    pub models: Arc<PolicyModels>,
}

impl Policy for FcCspPolicy {
    fn name(&self) -> String {
        PolicyKind::FcCsp.to_string()
    }

    fn future_conditional(&self) -> bool {
        true
    }

    fn predict(&self, input: &PolicyInput<'_>) -> Result<TrajectoryGaussian> {
        self.models.check_rate(input.scene)?;
        let empty = BTreeMap::new();
        let others = input.others.unwrap_or(&empty);
        net::top_mode_forward(input.scene, input.target, Some(others), &self.models.fccsp, &self.models.config)
    }
}

/// Returns a fixed trajectory, used to pin an agent's level-0 slot to a plan.
#[derive(Clone, Debug)]
pub struct PinnedPolicy {
    pub trajectory: TrajectoryGaussian,
}

impl Policy for PinnedPolicy {
    fn name(&self) -> String {
        "pinned".into()
    }

    fn future_conditional(&self) -> bool {
        false
    }

    fn predict(&self, input: &PolicyInput<'_>) -> Result<TrajectoryGaussian> {
        if input.target != self.trajectory.agent_id() {
            return Err(Error::InvalidArgument(format!(
                "pinned trajectory belongs to agent {}, asked for {}",
                self.trajectory.agent_id(),
                input.target
            )));
        }
        Ok(self.trajectory.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let config = CspConfig { encoder_hidden: 3, embed_size: 3, conv_filters: 2, decoder_hidden: 3, ..CspConfig::at_rate(2.0) };
        let models = train::init_models(&config, &TrainConfig::default(), 4).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "4".to_string());
        let ckpt = models.to_checkpoint(meta).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.metadata["seed"], "4");
        assert_eq!(PolicyModels::from_checkpoint(&back).unwrap(), models);

        let mut broken = back.clone();
        broken.params = broken.params.strip_prefix(CSP_PREFIX);
        assert!(PolicyModels::from_checkpoint(&broken).is_err());
    }
}
