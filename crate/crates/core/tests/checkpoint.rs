use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nafreach::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use nafreach::config::{parse_config, resolve_config, Overrides};
use nafreach::train::{build_env, train, NullSink, TrainConfig};
use nafreach::{Environment, Error, RunArtifacts};

fn trained() -> (TrainConfig, Checkpoint) {
    let cfg = TrainConfig {
        total_steps: 400,
        warmup_steps: 100,
        hidden_layers: vec![16, 16],
        ..TrainConfig::default()
    };
    let mut env = build_env(&cfg).unwrap();
    let mut sink = RunArtifacts::new(None, None).unwrap();
    train(&cfg, &mut env, &mut sink).unwrap();
    (cfg, sink.last_checkpoint.unwrap())
}

fn checkpoint_error(e: Error) -> String {
    match e {
        Error::Checkpoint(msg) => msg,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let (_, ckpt) = trained();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.nafc");
    let b = dir.path().join("b.nafc");
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(&fs::read(&a).unwrap()[..8], MAGIC);
}

#[test]
fn target_value_survives_round_trip_exactly() {
    let (_, ckpt) = trained();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let s = [rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)];
        assert_eq!(
            ckpt.agent.target_value(&s).unwrap().to_bits(),
            back.agent.target_value(&s).unwrap().to_bits()
        );
        assert_eq!(ckpt.agent.select_action(&s).unwrap(), back.agent.select_action(&s).unwrap());
    }
    assert_eq!(back.optimizers, ckpt.optimizers);
    assert_eq!(back.step, 400);
}

#[test]
fn malformed_files_get_distinct_errors() {
    let (_, ckpt) = trained();
    let bytes = ckpt.to_bytes().unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(checkpoint_error(Checkpoint::from_bytes(&bad_magic).unwrap_err()).contains("not a checkpoint"));

    let mut next_version = bytes.clone();
    next_version[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(checkpoint_error(Checkpoint::from_bytes(&next_version).unwrap_err()).contains("unsupported version"));

    for cut in [4, 12, 40, bytes.len() / 2, bytes.len() - 1] {
        let msg = checkpoint_error(Checkpoint::from_bytes(&bytes[..cut]).unwrap_err());
        assert!(msg.contains("truncated") || msg.contains("not a checkpoint"), "cut {cut}: {msg}");
    }

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint_error(Checkpoint::from_bytes(&extra).unwrap_err()).contains("trailing"));
}

#[test]
fn shape_table_mismatch_detected() {
    let (_, mut ckpt) = trained();
    // A V' with a different hidden width than V.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    ckpt.agent.value_target = nafreach::nn::Mlp::new(
        &[3, 8, 16, 1],
        ckpt.agent.value.hidden,
        ckpt.agent.value.head,
        &mut rng,
    )
    .unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    let msg = checkpoint_error(Checkpoint::from_bytes(&bytes).unwrap_err());
    assert!(msg.contains("shape table mismatch"), "{msg}");
}

#[test]
fn geometry_mismatch_refused() {
    let (cfg, ckpt) = trained();
    let env = build_env(&cfg).unwrap();
    ckpt.verify_geometry(env.geom.hash()).unwrap();
    ckpt.verify_spec(&env.spec()).unwrap();
    let other = nafreach::EnvGeometry::new(cfg.env, &nafreach::PhysicsConfig {
        circle_radius: 0.12,
        ..nafreach::PhysicsConfig::default()
    })
    .unwrap();
    let msg = checkpoint_error(ckpt.verify_geometry(other.hash()).unwrap_err());
    assert!(msg.contains("geometry mismatch"));
}

#[test]
fn run_artifacts_write_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = resolve_config(
        None,
        &Overrides {
            total_steps: Some(500),
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 200,
        ..cfg
    };
    let mut env = build_env(&cfg).unwrap();
    let mut sink = RunArtifacts::from_config(&cfg).unwrap();
    let out = train(&cfg, &mut env, &mut sink).unwrap();

    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "episode,total_steps,reward_sum,final_distance,length,loss_mean,sigma"
    );
    assert_eq!(lines.count(), out.metrics.len());
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint.nafc")).unwrap();
    assert_eq!(ckpt.step, 500);
    assert_eq!(ckpt.config, cfg);
    assert!(dir.path().join("checkpoint.nafc.step200").exists());
    assert!(dir.path().join("checkpoint.nafc.step400").exists());
}

#[test]
fn config_defaults_table() {
    let cfg = parse_config("{}").unwrap();
    let geom = cfg.geometry().unwrap();
    let m = &geom.muscles[0];
    let table: [(&str, f64, f64); 10] = [
        ("gamma", cfg.gamma, 0.99),
        ("alpha", cfg.alpha, 0.01),
        ("max_steps", f64::from(cfg.max_steps), 200.0),
        ("f_max", m.f_max, 1.0),
        ("l_opt", m.l_opt, 0.01),
        ("f_pass_max", m.f_pass_max, 0.1),
        ("flex", m.flex, 0.5),
        ("damping", m.damping, 0.1),
        ("ou.sigma_start", cfg.ou.sigma_start, 0.35),
        ("ou.sigma_end", cfg.ou.sigma_end, 0.05),
    ];
    for (name, got, want) in table {
        assert_eq!(got, want, "{name}");
    }
    assert_eq!(cfg.physics.circle_radius, 0.10);
    assert_eq!(cfg.physics.cuboid_edge, 0.20);
    let geom = TrainConfig::default().geometry().unwrap();
    assert!(geom.muscles.iter().all(|m| (m.anchor.norm() - 0.10).abs() < 1e-15));
}

#[test]
fn unknown_and_invalid_keys_are_named() {
    match parse_config(r#"{"ou": {"thetta": 1}}"#) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "thetta"),
        other => panic!("{other:?}"),
    }
    let bad = resolve_config(
        None,
        &Overrides {
            gamma: Some(1.5),
            ..Overrides::default()
        },
    )
    .unwrap_err();
    assert!(bad.to_string().contains("gamma must be < 1"));
    let t = TrainConfig {
        total_steps: 10,
        ..TrainConfig::default()
    };
    let mut env = build_env(&t).unwrap();
    assert!(train(&TrainConfig { alpha: -1.0, ..t }, &mut env, &mut NullSink).is_err());
}
