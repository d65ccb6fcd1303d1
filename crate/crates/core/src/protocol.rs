//! Newline-delimited JSON protocol exposing a [`ReachingEnv`] over TCP.
//!
//! Requests, one JSON object per line:
//!
//! ```text
//! {"cmd":"spec"}
//! {"cmd":"reset","seed":42}        seed optional
//! {"cmd":"step","action":[...]}
//! {"cmd":"close"}
//! ```
//!
//! Any request may carry an integer `"id"`, echoed in its response. Every
//! request gets exactly one response, `{"ok":true,...}` or
//! `{"ok":false,"error":"..."}`, in request order. Errors do not end the
//! session. Protocol version 1 (`"proto":1` in the `spec` response).

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::env::{EnvObservation, EnvSpec, Environment, ReachingEnv};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7788;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum Request {
    Spec {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
    },
    Reset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
    },
    Step {
        action: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
    },
    Close {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
    },
}

impl Request {
    fn id(&self) -> Option<u64> {
        match self {
            Request::Spec { id } | Request::Reset { id, .. } | Request::Step { id, .. } | Request::Close { id } => *id,
        }
    }
}

#[derive(Serialize)]
struct SpecReply<'a> {
    ok: bool,
    proto: u32,
    #[serde(flatten)]
    spec: &'a EnvSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
}

#[derive(Serialize)]
struct ObsReply<'a> {
    ok: bool,
    #[serde(flatten)]
    obs: &'a EnvObservation,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
}

#[derive(Serialize)]
struct AckReply {
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
}

#[derive(Serialize)]
struct ErrorReply<'a> {
    ok: bool,
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
}

fn encode<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("reply types always serialize")
}

fn error_reply(error: &str, id: Option<u64>) -> String {
    encode(&ErrorReply { ok: false, error, id })
}

/// Protocol state for one client connection. Transport-free, so transcripts
/// can be replayed without a socket.
pub struct Session {
    env: ReachingEnv,
    started: bool,
    closed: bool,
}

impl Session {
    pub fn new(env: ReachingEnv) -> Self {
        Session {
            env,
            started: false,
            closed: false,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Handles one request line and returns the response line (without the
    /// trailing newline).
    pub fn handle_line(&mut self, line: &str) -> String {
        let req: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) => return error_reply("parse", salvage_id(line)),
        };
        let id = req.id();
        match req {
            Request::Spec { .. } => encode(&SpecReply {
                ok: true,
                proto: PROTOCOL_VERSION,
                spec: &self.env.spec(),
                id,
            }),
            Request::Reset { seed, .. } => match self.env.reset(seed) {
                Ok(obs) => {
                    self.started = true;
                    encode(&ObsReply { ok: true, obs: &obs, id })
                }
                Err(_) => error_reply("sim", id),
            },
            Request::Step { action, .. } => {
                if !self.started {
                    return error_reply("no-episode", id);
                }
                if action.len() != self.env.geom.n_muscles() {
                    return error_reply("dim", id);
                }
                match self.env.step(&action) {
                    Ok(obs) => encode(&ObsReply { ok: true, obs: &obs, id }),
                    Err(Error::EpisodeDone) => error_reply("episode-done", id),
                    Err(Error::Dimension { .. }) => error_reply("dim", id),
                    Err(_) => error_reply("sim", id),
                }
            }
            Request::Close { .. } => {
                self.closed = true;
                encode(&AckReply { ok: true, id })
            }
        }
    }
}

/// Serves one connection until the client closes it or disconnects.
pub fn serve_connection(stream: TcpStream, env: ReachingEnv, timeout: Duration) -> Result<()> {
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut session = Session::new(env);
    let mut line = String::new();
    while !session.is_closed() {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let request = line.trim_end_matches(['\r', '\n']);
        if request.trim().is_empty() {
            continue;
        }
        let mut reply = session.handle_line(request);
        reply.push('\n');
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections one at a time, giving each a fresh environment.
/// Stops after `max_sessions` sessions when set, otherwise runs forever.
pub fn serve<F>(
    listener: &TcpListener,
    mut make_env: F,
    timeout: Duration,
    max_sessions: Option<usize>,
) -> Result<()>
where
    F: FnMut() -> Result<ReachingEnv>,
{
    let mut served = 0;
    while max_sessions.map_or(true, |m| served < m) {
        let (stream, _) = listener.accept()?;
        served += 1;
        let env = make_env()?;
        // A failed session (timeout, reset by peer) must not stop the server.
        if let Err(e) = serve_connection(stream, env, timeout) {
            eprintln!("session ended with error: {e}");
        }
    }
    Ok(())
}

/// [`Environment`] backed by a remote server.
pub struct RemoteEnv {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    spec: EnvSpec,
    next_id: u64,
    line: String,
}

#[derive(Deserialize)]
struct Reply {
    ok: bool,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    id: Option<u64>,
    #[serde(flatten)]
    payload: serde_json::Map<String, serde_json::Value>,
}

impl RemoteEnv {
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        let mut env = RemoteEnv {
            reader: BufReader::new(stream),
            writer,
            spec: EnvSpec {
                action_dim: 0,
                state_dim: 0,
                d_thres: 0.0,
                max_steps: 0,
                domain_length: 0.0,
            },
            next_id: 0,
            line: String::new(),
        };
        let reply = env.call(Request::Spec { id: None })?;
        let proto = reply.payload.get("proto").and_then(|v| v.as_u64());
        if proto != Some(u64::from(PROTOCOL_VERSION)) {
            return Err(Error::Protocol(format!("unsupported protocol version {proto:?}")));
        }
        env.spec = serde_json::from_value(serde_json::Value::Object(reply.payload))
            .map_err(|e| Error::Protocol(format!("bad spec reply: {e}")))?;
        Ok(env)
    }

    fn call(&mut self, mut req: Request) -> Result<Reply> {
        let id = self.next_id;
        self.next_id += 1;
        match &mut req {
            Request::Spec { id: slot }
            | Request::Reset { id: slot, .. }
            | Request::Step { id: slot, .. }
            | Request::Close { id: slot } => *slot = Some(id),
        }
        let mut text = serde_json::to_string(&req).map_err(|e| Error::Protocol(e.to_string()))?;
        text.push('\n');
        self.writer.write_all(text.as_bytes())?;
        self.writer.flush()?;

        self.line.clear();
        if self.reader.read_line(&mut self.line)? == 0 {
            return Err(Error::Protocol("server closed the connection".into()));
        }
        let reply: Reply = serde_json::from_str(self.line.trim_end())
            .map_err(|e| Error::Protocol(format!("malformed reply: {e}")))?;
        if reply.id != Some(id) {
            return Err(Error::Protocol(format!(
                "reply out of order: expected id {id}, got {:?}",
                reply.id
            )));
        }
        if !reply.ok {
            let err = reply.error.unwrap_or_default();
            return Err(match err.as_str() {
                "dim" => Error::Dimension {
                    expected: self.spec.action_dim,
                    actual: 0,
                },
                "episode-done" => Error::EpisodeDone,
                _ => Error::Protocol(format!("server error: {err}")),
            });
        }
        Ok(reply)
    }

    fn observation(reply: Reply) -> Result<EnvObservation> {
        serde_json::from_value(serde_json::Value::Object(reply.payload))
            .map_err(|e| Error::Protocol(format!("bad observation: {e}")))
    }

    /// Sends `close` and waits for the acknowledgement.
    pub fn close(mut self) -> Result<()> {
        self.call(Request::Close { id: None }).map(|_| ())
    }
}

impl Environment for RemoteEnv {
    fn spec(&self) -> EnvSpec {
        self.spec.clone()
    }

    fn reset(&mut self, seed: Option<u64>) -> Result<EnvObservation> {
        let reply = self.call(Request::Reset { seed, id: None })?;
        Self::observation(reply)
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvObservation> {
        if action.len() != self.spec.action_dim {
            return Err(Error::Dimension {
                expected: self.spec.action_dim,
                actual: action.len(),
            });
        }
        let reply = self.call(Request::Step {
            action: action.to_vec(),
            id: None,
        })?;
        Self::observation(reply)
    }
}

/// Id of a well-formed JSON object whose command could not be decoded.
fn salvage_id(line: &str) -> Option<u64> {
    serde_json::from_str::<serde_json::Value>(line).ok()?.get("id")?.as_u64()
}
