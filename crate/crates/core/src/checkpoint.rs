//! Binary checkpoints and on-disk run artifacts.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "NAFCKPT1" | u32 version
//! str env kind | u64 geometry hash
//! u32 action_dim | u32 state_dim | f64 gamma | f64 diag_eps
//! u8 hidden activation | f64 logistic slope | u64 training step
//! f64 d_thres | f64 omega | u32 max_steps | f64 domain length
//! shape table: u32 network count (4), then per network u32 layer count
//!              and (u32 n_in, u32 n_out) per layer
//! parameters:  mu, V, V', L; per layer weights (row-major) then bias
//! optimizers:  mu, V, L; u8 kind | f64 lr | f64 beta1 | f64 beta2 | f64 eps
//!              | u64 step | u64 len | f64[len] first | f64[len] second
//! str run config (JSON)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::agent::{tri_len, AgentOptimizers, AgentParams};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp, OptimizerKind, OptimizerState, OutputHead};
use crate::sim::EnvKind;
use crate::train::{MetricsRow, TrainConfig, TrainSink, TrainSnapshot};

pub const MAGIC: &[u8; 8] = b"NAFCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub env: EnvKind,
    pub geometry_hash: u64,
    pub step: u64,
    pub d_thres: f64,
    pub omega: f64,
    pub max_steps: u32,
    pub domain_length: f64,
    pub agent: AgentParams,
    pub optimizers: AgentOptimizers,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn from_snapshot(s: &TrainSnapshot<'_>) -> Result<Self> {
        Ok(Checkpoint {
            env: s.cfg.env,
            geometry_hash: s.cfg.geometry()?.hash(),
            step: s.step,
            d_thres: s.spec.d_thres,
            omega: s.cfg.omega,
            max_steps: s.spec.max_steps,
            domain_length: s.spec.domain_length,
            agent: s.agent.clone(),
            optimizers: s.optimizers.clone(),
            config: s.cfg.clone(),
        })
    }

    /// Refuses a checkpoint trained against different mechanics.
    pub fn verify_geometry(&self, hash: u64) -> Result<()> {
        if hash != self.geometry_hash {
            return Err(Error::Checkpoint(format!(
                "geometry mismatch: checkpoint {:016x}, environment {hash:016x}",
                self.geometry_hash
            )));
        }
        Ok(())
    }

    /// Checks that `spec` describes the environment this agent was trained on.
    pub fn verify_spec(&self, spec: &EnvSpec) -> Result<()> {
        if spec.action_dim != self.agent.action_dim {
            return Err(Error::Dimension {
                expected: self.agent.action_dim,
                actual: spec.action_dim,
            });
        }
        if spec.d_thres.to_bits() != self.d_thres.to_bits()
            || spec.domain_length.to_bits() != self.domain_length.to_bits()
        {
            return Err(Error::Checkpoint(
                "environment episode settings differ from the checkpoint".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.env.to_string());
        w.u64(self.geometry_hash);
        let a = &self.agent;
        w.u32(a.action_dim as u32);
        w.u32(a.state_dim() as u32);
        w.f64(a.gamma);
        w.f64(a.diag_eps);
        w.u8(match a.mu.hidden {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        w.f64(match a.mu.head {
            OutputHead::ReducedLogistic { slope } => slope,
            OutputHead::Linear => unreachable!("validated agent"),
        });
        w.u64(self.step);
        w.f64(self.d_thres);
        w.f64(self.omega);
        w.u32(self.max_steps);
        w.f64(self.domain_length);

        let nets = [&a.mu, &a.value, &a.value_target, &a.l_net];
        w.u32(nets.len() as u32);
        for net in nets {
            w.u32(net.layers.len() as u32);
            for l in &net.layers {
                w.u32(l.n_in as u32);
                w.u32(l.n_out as u32);
            }
        }
        for net in nets {
            for p in net.params() {
                w.f64(*p);
            }
        }
        let o = &self.optimizers;
        for s in [&o.mu, &o.value, &o.l_net] {
            let (kind, b1, b2, eps) = match s.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => (0u8, beta1, beta2, eps),
                OptimizerKind::Sgd => (1u8, 0.0, 0.0, 0.0),
            };
            w.u8(kind);
            w.f64(s.learning_rate);
            w.f64(b1);
            w.f64(b2);
            w.f64(eps);
            w.u64(s.step);
            w.u64(s.first_moment.len() as u64);
            for v in s.first_moment.iter().chain(&s.second_moment) {
                w.f64(*v);
            }
        }
        let json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("cannot encode run config: {e}")))?;
        w.str(&json);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let mut r = Reader { buf: bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let env: EnvKind = r
            .str()?
            .parse()
            .map_err(|_| Error::Checkpoint("unknown environment kind".into()))?;
        let geometry_hash = r.u64()?;
        let action_dim = r.u32()? as usize;
        let state_dim = r.u32()? as usize;
        let gamma = r.f64()?;
        let diag_eps = r.f64()?;
        let hidden = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        };
        let slope = r.f64()?;
        let step = r.u64()?;
        let d_thres = r.f64()?;
        let omega = r.f64()?;
        let max_steps = r.u32()?;
        let domain_length = r.f64()?;

        let n_nets = r.u32()?;
        if n_nets != 4 {
            return Err(shape_err(format!("expected 4 networks, found {n_nets}")));
        }
        let mut shapes = Vec::with_capacity(4);
        for _ in 0..4 {
            let n_layers = r.u32()? as usize;
            if n_layers == 0 || n_layers > 64 {
                return Err(shape_err(format!("implausible layer count {n_layers}")));
            }
            let mut s = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let n_in = r.u32()? as usize;
                let n_out = r.u32()? as usize;
                if n_in == 0 || n_out == 0 || n_in.saturating_mul(n_out) > 1 << 24 {
                    return Err(shape_err(format!("implausible layer {n_in}x{n_out}")));
                }
                s.push((n_in, n_out));
            }
            shapes.push(s);
        }
        check_shape_table(&shapes, state_dim, action_dim)?;

        let heads = [
            OutputHead::ReducedLogistic { slope },
            OutputHead::Linear,
            OutputHead::Linear,
            OutputHead::Linear,
        ];
        let mut nets = Vec::with_capacity(4);
        for (shape, head) in shapes.iter().zip(heads) {
            let mut layers = Vec::with_capacity(shape.len());
            for &(n_in, n_out) in shape {
                let mut l = Dense::zeros(n_in, n_out);
                for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                    *v = r.f64()?;
                }
                layers.push(l);
            }
            nets.push(Mlp::from_layers(layers, hidden, head).map_err(|e| {
                Error::Checkpoint(format!("invalid network: {e}"))
            })?);
        }
        let l_net = nets.pop().expect("4 nets");
        let value_target = nets.pop().expect("4 nets");
        let value = nets.pop().expect("4 nets");
        let mu = nets.pop().expect("4 nets");
        let agent = AgentParams {
            mu,
            value,
            value_target,
            l_net,
            action_dim,
            gamma,
            diag_eps,
        };
        agent
            .validate()
            .map_err(|e| shape_err(e.to_string()))?;

        let mut read_opt = |net: &Mlp| -> Result<OptimizerState> {
            let kind = r.u8()?;
            let lr = r.f64()?;
            let (b1, b2, eps) = (r.f64()?, r.f64()?, r.f64()?);
            let opt_step = r.u64()?;
            let len = r.u64()? as usize;
            let kind = match kind {
                0 => OptimizerKind::Adam {
                    beta1: b1,
                    beta2: b2,
                    eps,
                },
                1 => OptimizerKind::Sgd,
                other => return Err(Error::Checkpoint(format!("unknown optimizer tag {other}"))),
            };
            let expected = match kind {
                OptimizerKind::Adam { .. } => net.param_count(),
                OptimizerKind::Sgd => 0,
            };
            if len != expected {
                return Err(shape_err(format!(
                    "optimizer state has {len} entries, network has {expected}"
                )));
            }
            let first = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let second = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Ok(OptimizerState {
                kind,
                learning_rate: lr,
                step: opt_step,
                first_moment: first,
                second_moment: second,
            })
        };
        let optimizers = AgentOptimizers {
            mu: read_opt(&agent.mu)?,
            value: read_opt(&agent.value)?,
            l_net: read_opt(&agent.l_net)?,
        };
        let config: TrainConfig = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Checkpoint(format!("embedded run config is invalid: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            env,
            geometry_hash,
            step,
            d_thres,
            omega,
            max_steps,
            domain_length,
            agent,
            optimizers,
            config,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}

fn shape_err(msg: String) -> Error {
    Error::Checkpoint(format!("shape table mismatch: {msg}"))
}

fn check_shape_table(shapes: &[Vec<(usize, usize)>], state_dim: usize, action_dim: usize) -> Result<()> {
    let names = ["mu", "V", "V'", "L"];
    let outs = [action_dim, 1, 1, tri_len(action_dim)];
    for ((shape, name), out) in shapes.iter().zip(names).zip(outs) {
        if shape[0].0 != state_dim {
            return Err(shape_err(format!("{name} input width {} != state_dim {state_dim}", shape[0].0)));
        }
        if shape[shape.len() - 1].1 != out {
            return Err(shape_err(format!(
                "{name} output width {} != {out}",
                shape[shape.len() - 1].1
            )));
        }
        if shape.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(shape_err(format!("{name} layers do not chain")));
        }
    }
    if shapes[1] != shapes[2] {
        return Err(shape_err("V' differs from V".into()));
    }
    Ok(())
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}

/// Writes the per-episode metrics CSV and checkpoints during training.
///
/// Metrics rows are appended and flushed one at a time; checkpoints are
/// written atomically, every `checkpoint_every` steps and once at the end.
pub struct RunArtifacts {
    metrics: Option<BufWriter<File>>,
    checkpoint_path: Option<PathBuf>,
    pub last_checkpoint: Option<Checkpoint>,
}

impl RunArtifacts {
    pub fn new(metrics_path: Option<&Path>, checkpoint_path: Option<&Path>) -> Result<Self> {
        let metrics = match metrics_path {
            Some(p) => {
                let mut w = BufWriter::new(
                    OpenOptions::new()
                        .create(true)
                        .write(true)
                        .truncate(true)
                        .open(p)?,
                );
                writeln!(w, "{}", MetricsRow::CSV_HEADER)?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };
        Ok(RunArtifacts {
            metrics,
            checkpoint_path: checkpoint_path.map(Path::to_path_buf),
            last_checkpoint: None,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::new(cfg.metrics_path.as_deref(), cfg.checkpoint_path.as_deref())
    }
}

impl TrainSink for RunArtifacts {
    fn on_episode(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            writeln!(w, "{}", row.to_csv())?;
            w.flush()?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, snapshot: &TrainSnapshot<'_>, is_final: bool) -> Result<()> {
        let ckpt = Checkpoint::from_snapshot(snapshot)?;
        if let Some(path) = &self.checkpoint_path {
            ckpt.save(path)?;
            if !is_final {
                let mut periodic = path.as_os_str().to_owned();
                periodic.push(format!(".step{}", snapshot.step));
                ckpt.save(Path::new(&periodic))?;
            }
        }
        if is_final {
            self.last_checkpoint = Some(ckpt);
        }
        Ok(())
    }
}
