//! Multi-fidelity recursive behavior prediction for highway traffic.
//!
//! Agents are assigned a reasoning level and a ladder of policies; level-k
//! policies condition on the level-(k-1) predictions of every other agent.
//! The crate provides the scene types, a small neural layer set used to build
//! the social-pooling policies, the recursion engine, trajectory data
//! ingestion, and the RMSE evaluation harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod recursion;
pub mod scene;

pub use error::{Error, Result};
pub use scene::{
    build_scene, select_top_mode, velocity_estimate, AgentId, AgentState, Cov2, MixtureMode, MixturePrediction,
    Point, ScenePrediction, SceneHistory, TrackHistory, TrajectoryGaussian,
};
