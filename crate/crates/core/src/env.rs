//! Episodic point-to-point reaching task on top of the muscle simulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{EnvGeometry, MotionDomain, SimState, Vec3};

/// What an agent needs to know about an environment, local or remote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub action_dim: usize,
    pub state_dim: usize,
    pub d_thres: f64,
    pub max_steps: u32,
    pub domain_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvObservation {
    /// Target position `(T_x, T_y, T_z)`; `T_y` is zero in 2D.
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// `|P - T|` after the step (m).
    pub distance: f64,
    pub t: u32,
}

/// Gym-style reset/step contract shared by the in-process environment and
/// the network client.
pub trait Environment {
    fn spec(&self) -> EnvSpec;
    /// Starts a new episode. `Some(seed)` reseeds the target generator first.
    fn reset(&mut self, seed: Option<u64>) -> Result<EnvObservation>;
    fn step(&mut self, action: &[f64]) -> Result<EnvObservation>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub d_thres: f64,
    pub omega: f64,
    pub max_steps: u32,
    /// Keep the point mass where the last episode left it instead of
    /// returning it to rest.
    pub persist_position: bool,
}

impl EpisodeConfig {
    pub fn validate(&self, domain: &MotionDomain) -> Result<()> {
        if !(self.d_thres > 0.0 && self.d_thres.is_finite()) {
            return Err(Error::config("d_thres", "d_thres must be positive"));
        }
        if self.d_thres >= domain.radius() {
            return Err(Error::config(
                "d_thres",
                format!(
                    "d_thres {} m is not smaller than the motion-domain radius {} m",
                    self.d_thres,
                    domain.radius()
                ),
            ));
        }
        let success = if domain.dim == 2 {
            std::f64::consts::PI * self.d_thres.powi(2)
        } else {
            4.0 / 3.0 * std::f64::consts::PI * self.d_thres.powi(3)
        };
        if success >= 0.01 * domain.measure {
            return Err(Error::config(
                "d_thres",
                "success region must cover less than 1% of the motion domain",
            ));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::config("omega", "omega must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "max_steps must be positive"));
        }
        Ok(())
    }
}

/// Shrinkage (m) below which a distance counts as unchanged. A mass settled
/// at equilibrium still jitters by a few ulps per step.
pub const CLOSER_TOLERANCE: f64 = 1e-12;

/// Step reward: `omega` on success, `1/t` when the distance shrinks, `-1`
/// otherwise. `t` starts at 1 in every episode.
pub fn reward(d_prev: f64, d_next: f64, t: u32, cfg: &EpisodeConfig) -> f64 {
    if d_next <= cfg.d_thres {
        cfg.omega
    } else if d_next < d_prev - CLOSER_TOLERANCE {
        1.0 / f64::from(t.max(1))
    } else {
        -1.0
    }
}

pub fn target_state(target: &Vec3) -> Vec<f64> {
    vec![target.x, target.y, target.z]
}

#[derive(Debug, Clone)]
pub struct ReachingEnv {
    pub geom: EnvGeometry,
    pub domain: MotionDomain,
    pub cfg: EpisodeConfig,
    sim: SimState,
    target: Vec3,
    t: u32,
    distance: f64,
    active: bool,
    rng: ChaCha8Rng,
}

impl ReachingEnv {
    pub fn new(geom: EnvGeometry, domain: MotionDomain, cfg: EpisodeConfig, seed: u64) -> Result<Self> {
        cfg.validate(&domain)?;
        let sim = SimState::at_rest(domain.center, geom.n_muscles());
        Ok(ReachingEnv {
            target: domain.center,
            geom,
            domain,
            cfg,
            sim,
            t: 0,
            distance: 0.0,
            active: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sim_state(&self) -> &SimState {
        &self.sim
    }

    pub fn target(&self) -> Vec3 {
        self.target
    }

    pub fn is_done(&self) -> bool {
        !self.active
    }

    fn start_position(&self) -> SimState {
        if self.cfg.persist_position {
            SimState {
                velocity: Vec3::zeros(),
                time: 0.0,
                ..self.sim.clone()
            }
        } else {
            SimState::at_rest(self.domain.center, self.geom.n_muscles())
        }
    }

    fn observation(&self, reward: f64) -> EnvObservation {
        EnvObservation {
            state: target_state(&self.target),
            reward,
            done: !self.active,
            distance: self.distance,
            t: self.t,
        }
    }

    /// Starts an episode toward an explicit target, which may lie anywhere
    /// (including outside the motion domain or inside the success ball).
    pub fn reset_with_target(&mut self, target: Vec3) -> Result<EnvObservation> {
        if self.geom.dim() == 2 && target.y != 0.0 {
            return Err(Error::Dimension {
                expected: 2,
                actual: 3,
            });
        }
        self.sim = self.start_position();
        self.target = target;
        self.t = 0;
        self.distance = (self.sim.position - target).norm();
        self.active = true;
        Ok(self.observation(0.0))
    }
}

impl Environment for ReachingEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            action_dim: self.geom.n_muscles(),
            state_dim: 3,
            d_thres: self.cfg.d_thres,
            max_steps: self.cfg.max_steps,
            domain_length: self.domain.characteristic_length,
        }
    }

    fn reset(&mut self, seed: Option<u64>) -> Result<EnvObservation> {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        let start = self.start_position();
        let target = loop {
            let t = self.domain.sample_target(&mut self.rng)?;
            if (start.position - t).norm() > self.cfg.d_thres {
                break t;
            }
        };
        self.reset_with_target(target)
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvObservation> {
        if !self.active {
            return Err(Error::EpisodeDone);
        }
        if action.len() != self.geom.n_muscles() {
            return Err(Error::Dimension {
                expected: self.geom.n_muscles(),
                actual: action.len(),
            });
        }
        let clamped: Vec<f64> = action.iter().map(|a| a.clamp(0.0, 1.0)).collect();
        self.sim = self.geom.step(&self.sim, &clamped)?;
        self.t += 1;
        let d_next = (self.sim.position - self.target).norm();
        let r = reward(self.distance, d_next, self.t, &self.cfg);
        self.distance = d_next;
        if d_next <= self.cfg.d_thres || self.t >= self.cfg.max_steps {
            self.active = false;
        }
        Ok(self.observation(r))
    }
}
