use std::sync::OnceLock;

use proptest::prelude::*;

use nafreach::env::{reward, EpisodeConfig};
use nafreach::sim::{SimState, Vec3};
use nafreach::train::{build_env, TrainConfig};
use nafreach::{EnvKind, Environment, Error, ReachingEnv};

fn base_env() -> &'static ReachingEnv {
    static ENV: OnceLock<ReachingEnv> = OnceLock::new();
    ENV.get_or_init(|| build_env(&TrainConfig::default()).unwrap())
}

fn env() -> ReachingEnv {
    base_env().clone()
}

/// The reward rule written out independently of the library. Shrinkage under
/// a picometre is integrator jitter, not progress.
fn hand_reward(d_prev: f64, d_next: f64, t: u32, d_thres: f64, omega: f64) -> f64 {
    if d_next <= d_thres {
        return omega;
    }
    if d_prev - d_next > 1e-12 {
        return 1.0 / t as f64;
    }
    -1.0
}

#[test]
fn reward_reference_values() {
    let cfg = EpisodeConfig {
        d_thres: 0.002,
        omega: 10.0,
        max_steps: 200,
        persist_position: false,
    };
    assert_eq!(reward(0.05, 0.06, 3, &cfg), -1.0);
    assert_eq!(reward(0.05, 0.04, 4, &cfg), 0.25);
    assert_eq!(reward(0.05, 0.002, 4, &cfg), 10.0);
    assert_eq!(reward(0.05, 0.04, 1, &cfg), 1.0);
    assert_eq!(reward(0.035_915_974_215_756_45, 0.035_915_974_215_756_44, 9, &cfg), -1.0);
}

#[test]
fn settled_mass_earns_no_spurious_progress() {
    let mut e = env();
    e.reset(Some(0)).unwrap();
    let a = [0.504, 0.505, 0.503, 0.507, 0.502, 0.492];
    let rewards: Vec<f64> = (0..200).map(|_| e.step(&a).unwrap().reward).collect();
    // Once settled, every remaining step scores -1.
    assert!(rewards[100..].iter().all(|r| *r == -1.0));
}

#[test]
fn scripted_episode_matches_hand_table() {
    let mut e = env();
    let target = Vec3::new(0.03, 0.0, -0.02);
    let first = e.reset_with_target(target).unwrap();
    let script: [[f64; 6]; 5] = [
        [1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.9, 0.0, 0.0, 0.0, 0.5, 0.9],
    ];

    // Independent replay of the physics to obtain the distances.
    let g = e.geom.clone();
    let mut s = SimState::at_rest(e.domain.center, 6);
    let mut d_prev = first.distance;
    let (d_thres, omega) = (e.cfg.d_thres, e.cfg.omega);
    let mut table = Vec::new();
    for (i, a) in script.iter().enumerate() {
        s = g.step(&s, a).unwrap();
        let d = (s.position - target).norm();
        table.push((hand_reward(d_prev, d, i as u32 + 1, d_thres, omega), d <= d_thres));
        d_prev = d;
    }

    let mut got = Vec::new();
    for a in &script {
        let o = e.step(a).unwrap();
        got.push((o.reward, o.done));
    }
    assert_eq!(got, table);
    // Pinned: the first pull approaches, holding it overshoots, relaxing
    // drifts away, and the final mixed pull approaches again.
    let rewards: Vec<f64> = got.iter().map(|r| r.0).collect();
    assert_eq!(rewards, vec![1.0, -1.0, -1.0, -1.0, 0.2]);
}

#[test]
fn moving_straight_at_target_scores_one() {
    let mut e = env();
    let target = Vec3::new(0.05, 0.0, 0.0);
    e.reset_with_target(target).unwrap();
    let o = e.step(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(o.reward, 1.0);
    assert_eq!(o.t, 1);
}

#[test]
fn target_at_rest_position_succeeds_immediately() {
    let mut e = env();
    let center = e.domain.center;
    e.reset_with_target(center).unwrap();
    let o = e.step(&[0.0; 6]).unwrap();
    assert!(o.done);
    assert_eq!(o.reward, e.cfg.omega);
}

#[test]
fn step_cap_and_absorbing_done() {
    let mut e = env();
    let first = e.reset(Some(3)).unwrap();
    assert!(first.distance > e.cfg.d_thres);
    let mut last = first;
    for t in 1..=200 {
        last = e.step(&[0.0; 6]).unwrap();
        assert_eq!(last.done, t == 200, "t={t}");
        assert!(matches!(last.reward, r if r == -1.0 || r > 0.0));
    }
    assert_eq!(last.t, 200);
    assert!(matches!(e.step(&[0.0; 6]), Err(Error::EpisodeDone)));
    assert!(matches!(e.step(&[0.0; 6]), Err(Error::EpisodeDone)));
    e.reset(None).unwrap();
    assert!(e.step(&[0.0; 6]).is_ok());
}

#[test]
fn state_is_target_only_and_constant() {
    let mut e = env();
    let first = e.reset(Some(9)).unwrap();
    assert_eq!(first.state.len(), 3);
    assert_eq!(first.state[1], 0.0);
    for k in 0..20 {
        let o = e.step(&[(k % 2) as f64, 0.3, 0.0, 1.0, 0.0, 0.2]).unwrap();
        assert_eq!(o.state, first.state);
    }
}

#[test]
fn seeded_resets_reproduce_targets() {
    let targets = |seed| {
        let mut e = env();
        let mut out = vec![e.reset(Some(seed)).unwrap().state];
        for _ in 0..20 {
            out.push(e.reset(None).unwrap().state);
        }
        out
    };
    assert_eq!(targets(1), targets(1));
    assert_ne!(targets(1), targets(2));
}

#[test]
fn resets_avoid_success_ball_and_stay_in_domain() {
    let mut e = env();
    e.reset(Some(0)).unwrap();
    for _ in 0..2000 {
        let o = e.reset(None).unwrap();
        assert!(o.distance > e.cfg.d_thres);
        assert!(e.domain.contains(&e.target()));
    }
}

#[test]
fn wrong_action_length_and_bad_target_dimension() {
    let mut e = env();
    e.reset(Some(0)).unwrap();
    assert!(matches!(e.step(&[0.0; 5]), Err(Error::Dimension { .. })));
    assert!(matches!(
        e.reset_with_target(Vec3::new(0.0, 0.01, 0.0)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn oversized_threshold_is_a_config_error() {
    let cfg = TrainConfig {
        d_thres: Some(0.5),
        ..TrainConfig::default()
    };
    assert!(matches!(build_env(&cfg), Err(Error::Config { .. })));
    let cfg = TrainConfig {
        d_thres_fraction: 0.2,
        ..TrainConfig::default()
    };
    assert!(matches!(build_env(&cfg), Err(Error::Config { .. })));
}

#[test]
fn cuboid_spec() {
    let e = build_env(&TrainConfig {
        env: EnvKind::Cuboid3d,
        ..TrainConfig::default()
    })
    .unwrap();
    let spec = e.spec();
    assert_eq!((spec.action_dim, spec.state_dim, spec.max_steps), (8, 3, 200));
    assert!((spec.d_thres - 0.01 * spec.domain_length).abs() < 1e-15);
}

proptest! {
    #[test]
    fn reward_codomain(d_prev in 0.0f64..0.2, d_next in 0.0f64..0.2, t in 1u32..=200) {
        let cfg = EpisodeConfig { d_thres: 0.002, omega: 10.0, max_steps: 200, persist_position: false };
        let r = reward(d_prev, d_next, t, &cfg);
        let in_codomain = r == -1.0 || r == 10.0 || (1..=200).any(|k| r == 1.0 / k as f64);
        prop_assert!(in_codomain);
        if d_next <= cfg.d_thres {
            prop_assert_eq!(r, 10.0);
        }
    }

    #[test]
    fn actions_are_clamped(a in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut e = env();
        e.reset(Some(1)).unwrap();
        e.step(&a).unwrap();
        prop_assert!(e.sim_state().excitations.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
