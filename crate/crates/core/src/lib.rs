//! Continuous-action NAF Q-learning for muscle-driven point-to-point reaching.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod nn;
pub mod noise;
pub mod protocol;
pub mod replay;
pub mod sim;
pub mod train;

pub use agent::{AgentConfig, AgentOptimizers, AgentParams};
pub use checkpoint::{Checkpoint, RunArtifacts};
pub use config::{resolve_config, Overrides};
pub use env::{EnvObservation, EnvSpec, Environment, EpisodeConfig, ReachingEnv};
pub use error::{Error, Result};
pub use protocol::{RemoteEnv, Session};
pub use replay::{DualReplayBuffer, Transition};
pub use sim::{EnvGeometry, EnvKind, MotionDomain, PhysicsConfig};
pub use train::{evaluate, train, TrainConfig, TrainOutcome};
