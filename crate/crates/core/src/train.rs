//! Training loop, greedy evaluation and the out-of-domain reaching test.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::{train_step, AgentConfig, AgentOptimizers, AgentParams};
use crate::env::{EnvSpec, Environment, EpisodeConfig, ReachingEnv};
use crate::error::{Error, Result};
use crate::nn::{Activation, OptimizerKind};
use crate::noise::{apply_noise, OuConfig, OuNoise};
use crate::replay::{DualReplayBuffer, Transition};
use crate::sim::{estimate_motion_domain, DomainConfig, EnvGeometry, EnvKind, PhysicsConfig, Vec3};

/// Every knob of a training run. Unset JSON keys fall back to these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub total_steps: u64,
    pub gamma: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub replay_capacity: usize,
    /// Success radius in metres; derived from `d_thres_fraction` when unset.
    pub d_thres: Option<f64>,
    pub d_thres_fraction: f64,
    pub omega: f64,
    pub max_steps: u32,
    pub persist_position: bool,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub logistic_slope: f64,
    pub diag_eps: f64,
    pub ou: OuConfig,
    pub physics: PhysicsConfig,
    pub domain: DomainConfig,
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Check target-network constancy and buffer isolation on every step.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let agent = AgentConfig::default();
        TrainConfig {
            env: EnvKind::Circle2d { muscles: 6 },
            seed: 0,
            total_steps: 150_000,
            gamma: 0.99,
            alpha: 0.01,
            batch_size: 32,
            warmup_steps: 1_000,
            replay_capacity: 100_000,
            d_thres: None,
            d_thres_fraction: 0.01,
            omega: 10.0,
            max_steps: 200,
            persist_position: false,
            hidden_layers: agent.hidden_layers,
            activation: agent.activation,
            logistic_slope: agent.logistic_slope,
            diag_eps: agent.diag_eps,
            ou: OuConfig::default(),
            physics: PhysicsConfig::default(),
            domain: DomainConfig::default(),
            checkpoint_every: 10_000,
            checkpoint_path: None,
            metrics_path: None,
            audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "gamma must be < 1 (and >= 0)"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "alpha must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "total_steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "batch_size must be positive"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::config("replay_capacity", "replay_capacity must hold a batch"));
        }
        if let Some(d) = self.d_thres {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::config("d_thres", "d_thres must be positive"));
            }
        }
        if !(self.d_thres_fraction > 0.0 && self.d_thres_fraction < 0.5) {
            return Err(Error::config("d_thres_fraction", "d_thres_fraction must lie in (0, 0.5)"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::config("omega", "omega must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "max_steps must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "checkpoint_every must be positive"));
        }
        self.ou.validate()?;
        self.physics.validate()?;
        self.agent_config(self.env.n_muscles()).validate()
    }

    pub fn agent_config(&self, action_dim: usize) -> AgentConfig {
        AgentConfig {
            state_dim: 3,
            action_dim,
            hidden_layers: self.hidden_layers.clone(),
            activation: self.activation,
            logistic_slope: self.logistic_slope,
            gamma: self.gamma,
            diag_eps: self.diag_eps,
        }
    }

    pub fn geometry(&self) -> Result<EnvGeometry> {
        EnvGeometry::new(self.env, &self.physics)
    }
}

/// Independent seed for one consumer of randomness.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_AGENT: u64 = 1;
const STREAM_REPLAY: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_ENV: u64 = 4;

/// Builds the in-process environment described by `cfg`.
pub fn build_env(cfg: &TrainConfig) -> Result<ReachingEnv> {
    let geom = cfg.geometry()?;
    let domain = estimate_motion_domain(&geom, &cfg.domain)?;
    let d_thres = cfg
        .d_thres
        .unwrap_or(cfg.d_thres_fraction * domain.characteristic_length);
    let episode = EpisodeConfig {
        d_thres,
        omega: cfg.omega,
        max_steps: cfg.max_steps,
        persist_position: cfg.persist_position,
    };
    ReachingEnv::new(geom, domain, episode, derive_seed(cfg.seed, STREAM_ENV))
}

/// Maps a target position to network input coordinates in roughly [-1, 1].
pub fn normalize_state(raw: &[f64], scale: f64) -> Vec<f64> {
    raw.iter().map(|v| v / scale).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: u64,
    pub total_steps: u64,
    pub reward_sum: f64,
    pub final_distance: f64,
    pub length: u32,
    pub loss_mean: f64,
    pub sigma: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "episode,total_steps,reward_sum,final_distance,length,loss_mean,sigma";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.episode,
            self.total_steps,
            self.reward_sum,
            self.final_distance,
            self.length,
            self.loss_mean,
            self.sigma
        )
    }
}

/// Borrowed view of the learner handed to checkpoint sinks.
pub struct TrainSnapshot<'a> {
    pub cfg: &'a TrainConfig,
    pub spec: &'a EnvSpec,
    pub agent: &'a AgentParams,
    pub optimizers: &'a AgentOptimizers,
    pub step: u64,
}

pub trait TrainSink {
    fn on_episode(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _snapshot: &TrainSnapshot<'_>, _is_final: bool) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: AgentParams,
    pub optimizers: AgentOptimizers,
    pub metrics: Vec<MetricsRow>,
    pub spec: EnvSpec,
    pub steps: u64,
    /// Number of audited steps; zero unless `cfg.audit` is set.
    pub audited_steps: u64,
}

/// Runs `cfg.total_steps` environment steps of NAF training against `env`.
///
/// Per step: greedy action plus OU noise, environment step, record into the
/// episode buffer, and (after warm-up) one gradient step on a batch from the
/// back buffer. Per episode: move the episode buffer into the back buffer and
/// copy `V` into `V'`.
pub fn train<E: Environment>(
    cfg: &TrainConfig,
    env: &mut E,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = env.spec();
    if spec.action_dim != cfg.env.n_muscles() {
        return Err(Error::Dimension {
            expected: cfg.env.n_muscles(),
            actual: spec.action_dim,
        });
    }
    if spec.state_dim != 3 {
        return Err(Error::Dimension {
            expected: 3,
            actual: spec.state_dim,
        });
    }
    let scale = spec.domain_length / 2.0;
    if !(scale > 0.0) {
        return Err(Error::config("env", "environment reports an empty motion domain"));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_AGENT));
    let mut agent = AgentParams::new(&cfg.agent_config(spec.action_dim), &mut init_rng)?;
    let mut opt = AgentOptimizers::new(OptimizerKind::ADAM, cfg.alpha, &agent);
    let mut buffer = DualReplayBuffer::new(cfg.replay_capacity)?;
    let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_REPLAY));
    let mut noise = OuNoise::new(
        cfg.ou.clone(),
        spec.action_dim,
        derive_seed(cfg.seed, STREAM_NOISE),
    )?;

    let mut metrics = Vec::new();
    let mut step: u64 = 0;
    let mut episode: u64 = 0;
    let mut audited_steps = 0;

    while step < cfg.total_steps {
        let seed = (episode == 0).then(|| derive_seed(cfg.seed, STREAM_ENV));
        let obs = env.reset(seed)?;
        noise.reset();
        let mut state = normalize_state(&obs.state, scale);
        let mut reward_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut loss_count = 0u32;
        let mut final_distance;
        let mut length = 0;
        let target_checksum = cfg.audit.then(|| agent.value_target.checksum());

        loop {
            let greedy = agent.select_action(&state)?;
            let action = apply_noise(&greedy, noise.sample(step));
            let next = env.step(&action)?;
            let next_state = normalize_state(&next.state, scale);
            let terminal = next.distance <= spec.d_thres;
            buffer.record(
                Transition::new(state, action, next.reward, next_state.clone(), terminal)
                    .with_episode(episode),
            );
            step += 1;
            length += 1;
            reward_sum += next.reward;
            final_distance = next.distance;

            if step > cfg.warmup_steps {
                match buffer.sample(cfg.batch_size, &mut replay_rng) {
                    Ok(batch) => {
                        if cfg.audit {
                            if let Some(t) = batch.iter().find(|t| t.episode >= episode) {
                                return Err(Error::Training(format!(
                                    "audit: sampled a transition from running episode {}",
                                    t.episode
                                )));
                            }
                        }
                        loss_sum += train_step(&mut agent, &mut opt, &batch)?;
                        loss_count += 1;
                    }
                    Err(Error::NotReady { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            if let Some(sum) = target_checksum {
                if agent.value_target.checksum() != sum {
                    return Err(Error::Training("audit: V' changed within an episode".into()));
                }
                audited_steps += 1;
            }
            if step % cfg.checkpoint_every == 0 && step < cfg.total_steps {
                sink.on_checkpoint(
                    &TrainSnapshot {
                        cfg,
                        spec: &spec,
                        agent: &agent,
                        optimizers: &opt,
                        step,
                    },
                    false,
                )?;
            }
            state = next_state;
            if next.done || step >= cfg.total_steps {
                break;
            }
        }

        buffer.end_episode();
        agent.hard_update_target();
        let row = MetricsRow {
            episode,
            total_steps: step,
            reward_sum,
            final_distance,
            length,
            loss_mean: if loss_count > 0 {
                loss_sum / f64::from(loss_count)
            } else {
                0.0
            },
            sigma: noise.anneal_sigma(step),
        };
        sink.on_episode(&row)?;
        metrics.push(row);
        episode += 1;
    }

    sink.on_checkpoint(
        &TrainSnapshot {
            cfg,
            spec: &spec,
            agent: &agent,
            optimizers: &opt,
            step,
        },
        true,
    )?;
    Ok(TrainOutcome {
        agent,
        optimizers: opt,
        metrics,
        spec,
        steps: step,
        audited_steps,
    })
}

/// Maps raw target states to actions.
pub trait Policy {
    fn act(&self, state: &[f64]) -> Result<Vec<f64>>;
}

/// Deterministic `mu(s)` on normalized state, without exploration noise.
pub struct GreedyPolicy<'a> {
    pub agent: &'a AgentParams,
    pub state_scale: f64,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(agent: &'a AgentParams, domain_length: f64) -> Self {
        GreedyPolicy {
            agent,
            state_scale: domain_length / 2.0,
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.agent
            .select_action(&normalize_state(state, self.state_scale))
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> Policy for F {
    fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self(state))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub distances: Vec<f64>,
    pub successes: usize,
}

pub fn rmse(distances: &[f64]) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    (distances.iter().map(|d| d * d).sum::<f64>() / distances.len() as f64).sqrt()
}

/// Rolls out one episode from the observation returned by a reset.
fn rollout<E: Environment, P: Policy + ?Sized>(
    env: &mut E,
    policy: &P,
    first: crate::env::EnvObservation,
    mut on_step: impl FnMut(&[f64], &crate::env::EnvObservation),
) -> Result<crate::env::EnvObservation> {
    let mut obs = first;
    while !obs.done {
        let action = policy.act(&obs.state)?;
        obs = env.step(&action)?;
        on_step(&action, &obs);
    }
    Ok(obs)
}

/// Greedy rollouts over `n_episodes` random targets.
pub fn evaluate<E: Environment, P: Policy + ?Sized>(
    env: &mut E,
    policy: &P,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let d_thres = env.spec().d_thres;
    let mut distances = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let first = env.reset((i == 0).then_some(seed))?;
        let last = rollout(env, policy, first, |_, _| {})?;
        distances.push(last.distance);
    }
    Ok(EvalReport {
        rmse: rmse(&distances),
        successes: distances.iter().filter(|&&d| d <= d_thres).count(),
        distances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodTrial {
    pub target: Vec3,
    pub initial_distance: f64,
    pub final_distance: f64,
    /// Distance from the target to the reachable boundary along the ray from
    /// the domain centre (negative when the target is inside).
    pub boundary_gap: f64,
    /// Mean excitation of the muscle whose anchor points most toward the target.
    pub nearest_excitation: f64,
    /// Mean excitation of the muscle pointing most away from it.
    pub farthest_excitation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodReport {
    pub scale: f64,
    pub trials: Vec<OodTrial>,
}

impl OodReport {
    pub fn fraction_closer(&self) -> f64 {
        let closer = self
            .trials
            .iter()
            .filter(|t| t.final_distance < t.initial_distance)
            .count();
        closer as f64 / self.trials.len().max(1) as f64
    }

    pub fn mean_nearest_excitation(&self) -> f64 {
        mean(self.trials.iter().map(|t| t.nearest_excitation))
    }

    pub fn mean_farthest_excitation(&self) -> f64 {
        mean(self.trials.iter().map(|t| t.farthest_excitation))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Random unit direction in the environment's motion space.
pub fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec3 {
    loop {
        let mut v = Vec3::zeros();
        for i in 0..3 {
            if dim == 2 && i == 1 {
                continue;
            }
            v[i] = StandardNormal.sample(rng);
        }
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn boundary_radius(env: &ReachingEnv, dir: &Vec3) -> f64 {
    let c = env.domain.center;
    let (mut lo, mut hi) = (0.0, env.domain.characteristic_length);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if env.domain.reachable(&(c + dir * mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Places targets at `scale` times the domain radius in random directions and
/// rolls out the greedy policy toward each.
pub fn out_of_domain_test<P: Policy + ?Sized>(
    env: &mut ReachingEnv,
    policy: &P,
    scale: f64,
    n_trials: usize,
    seed: u64,
) -> Result<OodReport> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config("scale", "scale must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = env.geom.dim();
    let center = env.domain.center;
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let dir = random_direction(dim, &mut rng);
        let target = center + dir * (scale * env.domain.radius());
        let cosines: Vec<f64> = env
            .geom
            .muscles
            .iter()
            .map(|m| (m.anchor - center).normalize().dot(&dir))
            .collect();
        let argmax = |sign: f64| {
            (0..cosines.len())
                .max_by(|&a, &b| (sign * cosines[a]).total_cmp(&(sign * cosines[b])))
                .expect("at least one muscle")
        };
        let (near, far) = (argmax(1.0), argmax(-1.0));

        let first = env.reset_with_target(target)?;
        let initial_distance = first.distance;
        let (mut near_sum, mut far_sum, mut steps) = (0.0, 0.0, 0usize);
        let last = rollout(env, policy, first, |a, _| {
            near_sum += a[near].clamp(0.0, 1.0);
            far_sum += a[far].clamp(0.0, 1.0);
            steps += 1;
        })?;
        let steps = steps.max(1) as f64;
        trials.push(OodTrial {
            target,
            initial_distance,
            final_distance: last.distance,
            boundary_gap: scale * env.domain.radius() - boundary_radius(env, &dir),
            nearest_excitation: near_sum / steps,
            farthest_excitation: far_sum / steps,
        });
    }
    Ok(OodReport { scale, trials })
}

/// Exponential smoothing: `s0 = v0`, `s_i = w s_{i-1} + (1 - w) v_i`.
pub fn smooth_series(values: &[f64], weight: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::config("values", "cannot smooth an empty series"));
    }
    if !(0.0..1.0).contains(&weight) {
        return Err(Error::config("weight", "smoothing weight must lie in [0, 1)"));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut s = values[0];
    out.push(s);
    for &v in &values[1..] {
        s = weight * s + (1.0 - weight) * v;
        out.push(s);
    }
    Ok(out)
}
