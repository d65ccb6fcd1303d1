use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nafreach::checkpoint::{write_atomic, Checkpoint};
use nafreach::config::{resolve_config, Overrides};
use nafreach::protocol::{serve, DEFAULT_PORT, DEFAULT_TIMEOUT};
use nafreach::sim::{TrajectoryWriter, Vec3};
use nafreach::train::{build_env, evaluate, out_of_domain_test, train, GreedyPolicy, Policy};
use nafreach::{EnvKind, Environment, Error, ReachingEnv, RunArtifacts};

const EXIT_CONFIG: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_DIMENSION: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

/// Train and evaluate NAF agents on muscle-driven reaching tasks.
///
/// Settings are resolved from built-in defaults, then `--config`, then
/// explicit flags; later sources win.
#[derive(Parser)]
#[command(name = "nafreach", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes metrics.csv and checkpoint.nafc.
    Train(RunArgs),
    /// Greedy evaluation over random targets; prints RMSE in mm.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for distances.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// One greedy episode; writes the trajectory CSV.
    Demo {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated coordinates (x,z in 2D; x,y,z in 3D), `random`
        /// or `out-of-domain`.
        #[arg(long, default_value = "random")]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for trajectory.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Serve an environment over newline-delimited JSON on TCP.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Exit after this many client sessions.
        #[arg(long)]
        max_sessions: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            env: self.env,
            seed: self.seed,
            total_steps: self.total_steps,
            gamma: self.gamma,
            out: self.out.clone(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Dimension { .. } => EXIT_DIMENSION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            out,
        } => cmd_eval(&checkpoint, episodes, seed, &out),
        Command::Demo {
            checkpoint,
            target,
            seed,
            out,
        } => cmd_demo(&checkpoint, &target, seed, &out),
        Command::Serve {
            run,
            port,
            host,
            max_sessions,
        } => cmd_serve(&run, &host, port, max_sessions),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(args: &RunArgs) -> Result<(), Error> {
    let mut cfg = resolve_config(args.config.as_deref(), &args.overrides())?;
    if cfg.metrics_path.is_none() && cfg.checkpoint_path.is_none() {
        Overrides {
            out: Some(PathBuf::from(".")),
            ..Overrides::default()
        }
        .apply(&mut cfg);
    }
    for p in [&cfg.metrics_path, &cfg.checkpoint_path].into_iter().flatten() {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    let mut env = build_env(&cfg)?;
    let mut sink = RunArtifacts::from_config(&cfg)?;
    let outcome = train(&cfg, &mut env, &mut sink)?;
    let last = outcome.metrics.last();
    println!(
        "trained {} steps over {} episodes on {}",
        outcome.steps,
        outcome.metrics.len(),
        cfg.env
    );
    if let Some(row) = last {
        println!("last episode final distance {:.3} mm", row.final_distance * 1e3);
    }
    if let Some(p) = &cfg.checkpoint_path {
        println!("checkpoint {}", p.display());
    }
    if let Some(p) = &cfg.metrics_path {
        println!("metrics {}", p.display());
    }
    Ok(())
}

/// Loads a checkpoint and rebuilds the environment it was trained on.
fn load_agent(path: &Path) -> Result<(Checkpoint, ReachingEnv), Error> {
    let ckpt = Checkpoint::load(path)?;
    let env = build_env(&ckpt.config)?;
    ckpt.verify_geometry(env.geom.hash())?;
    ckpt.verify_spec(&env.spec())?;
    Ok((ckpt, env))
}

fn cmd_eval(path: &Path, episodes: usize, seed: u64, out: &Path) -> Result<(), Error> {
    if episodes == 0 {
        return Err(Error::config("episodes", "must be at least 1"));
    }
    let (ckpt, mut env) = load_agent(path)?;
    let policy = GreedyPolicy::new(&ckpt.agent, ckpt.domain_length);
    let report = evaluate(&mut env, &policy, episodes, seed)?;

    let mut csv = String::from("episode,final_distance\n");
    for (i, d) in report.distances.iter().enumerate() {
        csv.push_str(&format!("{i},{d}\n"));
    }
    fs::create_dir_all(out)?;
    let csv_path = out.join("distances.csv");
    write_atomic(&csv_path, csv.as_bytes())?;

    println!("RMSE {:.4} mm over {episodes} episodes", report.rmse * 1e3);
    println!(
        "successes {}/{episodes} (d_thres {:.4} mm)",
        report.successes,
        ckpt.d_thres * 1e3
    );
    println!("distances {}", csv_path.display());
    Ok(())
}

fn parse_target(text: &str, dim: usize) -> Result<Vec3, Error> {
    let coords: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::config("target", format!("cannot parse {text:?}: {e}")))?;
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::config("target", "coordinates must be finite"));
    }
    match (dim, coords.as_slice()) {
        (2, &[x, z]) => Ok(Vec3::new(x, 0.0, z)),
        (3, &[x, y, z]) => Ok(Vec3::new(x, y, z)),
        _ => Err(Error::Dimension {
            expected: dim,
            actual: coords.len(),
        }),
    }
}

fn cmd_demo(path: &Path, target: &str, seed: u64, out: &Path) -> Result<(), Error> {
    let (ckpt, mut env) = load_agent(path)?;
    let policy = GreedyPolicy::new(&ckpt.agent, ckpt.domain_length);

    if target == "out-of-domain" {
        let report = out_of_domain_test(&mut env, &policy, 1.5, 1, seed)?;
        let trial = &report.trials[0];
        println!(
            "target ({:.4}, {:.4}, {:.4}) m at 1.5x domain radius",
            trial.target.x, trial.target.y, trial.target.z
        );
        println!("initial distance {:.3} mm", trial.initial_distance * 1e3);
        println!("final distance {:.3} mm", trial.final_distance * 1e3);
        println!("target beyond reachable boundary by {:.3} mm", trial.boundary_gap * 1e3);
        return Ok(());
    }

    let mut obs = if target == "random" {
        env.reset(Some(seed))?
    } else {
        let t = parse_target(target, env.geom.dim())?;
        env.reset_with_target(t)?
    };
    fs::create_dir_all(out)?;
    let traj_path = out.join("trajectory.csv");
    let mut writer = TrajectoryWriter::new(BufWriter::new(File::create(&traj_path)?), env.geom.n_muscles())?;
    writer.write(env.sim_state())?;
    let initial = obs.distance;
    let mut last_reward = 0.0;
    while !obs.done {
        let action = policy.act(&obs.state)?;
        obs = env.step(&action)?;
        writer.write(env.sim_state())?;
        last_reward = obs.reward;
    }
    writer.into_inner().flush()?;

    let t = env.target();
    println!("target ({:.4}, {:.4}, {:.4}) m", t.x, t.y, t.z);
    println!("initial distance {:.3} mm", initial * 1e3);
    println!("final distance {:.3} mm after {} steps", obs.distance * 1e3, obs.t);
    println!("last reward {last_reward}");
    println!("trajectory {}", traj_path.display());
    Ok(())
}

fn cmd_serve(args: &RunArgs, host: &str, port: u16, max_sessions: Option<usize>) -> Result<(), Error> {
    let cfg = resolve_config(args.config.as_deref(), &args.overrides())?;
    let template = build_env(&cfg)?;
    let listener = TcpListener::bind((host, port))?;
    println!("serving {} on {}", cfg.env, listener.local_addr()?);
    std::io::stdout().flush()?;
    serve(&listener, || Ok(template.clone()), DEFAULT_TIMEOUT, max_sessions)
}
