//! Client for an out-of-process scorer speaking newline-delimited JSON.
//!
//! ```text
//! -> {"req_id": "r17", "target": "...", "context": "..." | null}
//! <- {"req_id": "r17", "logprob_sum": -412.7, "token_count": 128}
//! <- {"req_id": "r17", "error": "out of memory"}
//! ```
//!
//! Endpoints are either `tcp://host:port` or `cmd:<program> [args...]`, the
//! latter spawning a child process and talking over its stdin/stdout.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, Capabilities, LogLikelihood, PerplexityBackend, SegmentRef};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Tcp(String),
    Command(Vec<String>),
}

impl std::str::FromStr for Endpoint {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if !argv.is_empty() {
                return Ok(Endpoint::Command(argv));
            }
        }
        Err(BackendError::Unreachable(format!(
            "unrecognized endpoint {s:?} (expected tcp://host:port or cmd:<program>)"
        )))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Command(argv) => write!(f, "cmd:{}", argv.join(" ")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub endpoint: Endpoint,
    pub max_connections: usize,
    pub max_retries: usize,
    /// Backend context window in pipeline tokens.
    pub max_context_tokens: usize,
    /// Appended to the context text before sending; empty means plain concatenation.
    pub context_separator: String,
    pub deterministic: bool,
    pub timeout_secs: u64,
}

impl ExternalConfig {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            max_connections: 4,
            max_retries: 2,
            max_context_tokens: 4096,
            context_separator: String::new(),
            deterministic: true,
            timeout_secs: 300,
        }
    }
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct Request {
    pub req_id: String,
    pub target: String,
    pub context: Option<String>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
#[serde(untagged)]
pub enum Response {
    Ok {
        req_id: String,
        logprob_sum: f64,
        token_count: usize,
    },
    Err {
        req_id: String,
        error: String,
    },
}

enum Conn {
    Tcp {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
    },
    Child {
        child: Child,
        stdin: ChildStdin,
        stdout: BufReader<ChildStdout>,
    },
}

impl Conn {
    fn open(cfg: &ExternalConfig) -> Result<Self, BackendError> {
        match &cfg.endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| BackendError::Unreachable(format!("{addr}: {e}")))?;
                let timeout = Some(Duration::from_secs(cfg.timeout_secs.max(1)));
                stream.set_read_timeout(timeout).ok();
                stream.set_nodelay(true).ok();
                let writer = stream
                    .try_clone()
                    .map_err(|e| BackendError::Unreachable(e.to_string()))?;
                Ok(Conn::Tcp {
                    reader: BufReader::new(stream),
                    writer,
                })
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| BackendError::Unreachable(format!("{}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                Ok(Conn::Child { child, stdin, stdout })
            }
        }
    }

    fn roundtrip(&mut self, line: &str) -> Result<String, BackendError> {
        let io = |e: std::io::Error| BackendError::Io(e.to_string());
        let (w, r): (&mut dyn Write, &mut dyn BufRead) = match self {
            Conn::Tcp { reader, writer } => (writer, reader),
            Conn::Child { stdin, stdout, .. } => (stdin, stdout),
        };
        let mut msg = Vec::with_capacity(line.len() + 1);
        msg.extend_from_slice(line.as_bytes());
        msg.push(b'\n');
        w.write_all(&msg).map_err(io)?;
        w.flush().map_err(io)?;
        let mut buf = String::new();
        if r.read_line(&mut buf).map_err(io)? == 0 {
            return Err(BackendError::Io("connection closed".into()));
        }
        Ok(buf)
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Conn::Child { child, .. } = self {
            child.kill().ok();
            child.wait().ok();
        }
    }
}

struct Pool {
    idle: Vec<Conn>,
    open: usize,
}

pub struct ExternalBackend {
    cfg: ExternalConfig,
    pool: Mutex<Pool>,
    available: Condvar,
    next_id: AtomicU64,
}

impl ExternalBackend {
    /// Opens one connection up front so an unreachable endpoint fails here.
    pub fn connect(cfg: ExternalConfig) -> Result<Self, BackendError> {
        let first = Conn::open(&cfg)?;
        Ok(Self {
            pool: Mutex::new(Pool {
                idle: vec![first],
                open: 1,
            }),
            cfg,
            available: Condvar::new(),
            next_id: AtomicU64::new(0),
        })
    }

    fn checkout(&self) -> Result<Conn, BackendError> {
        let mut pool = self.pool.lock().unwrap();
        loop {
            if let Some(c) = pool.idle.pop() {
                return Ok(c);
            }
            if pool.open < self.cfg.max_connections.max(1) {
                pool.open += 1;
                drop(pool);
                return Conn::open(&self.cfg).inspect_err(|_| {
                    self.pool.lock().unwrap().open -= 1;
                });
            }
            pool = self.available.wait(pool).unwrap();
        }
    }

    fn checkin(&self, conn: Option<Conn>) {
        let mut pool = self.pool.lock().unwrap();
        match conn {
            Some(c) => pool.idle.push(c),
            None => pool.open -= 1,
        }
        self.available.notify_one();
    }

    fn call_once(&self, line: &str, req_id: &str) -> Result<LogLikelihood, BackendError> {
        let mut conn = self.checkout()?;
        let reply = match conn.roundtrip(line) {
            Ok(r) => r,
            Err(e) => {
                self.checkin(None);
                return Err(e);
            }
        };
        self.checkin(Some(conn));
        parse_response(&reply, req_id)
    }
}

fn parse_response(line: &str, req_id: &str) -> Result<LogLikelihood, BackendError> {
    let resp: Response =
        serde_json::from_str(line.trim_end()).map_err(|e| BackendError::Protocol(format!("bad response: {e}")))?;
    match resp {
        Response::Ok {
            req_id: id,
            logprob_sum,
            token_count,
        } => {
            if id != req_id {
                return Err(BackendError::Protocol(format!("expected req_id {req_id}, got {id}")));
            }
            if token_count == 0 {
                return Err(BackendError::Protocol("token_count is zero".into()));
            }
            Ok(LogLikelihood {
                logprob_sum,
                token_count,
            })
        }
        Response::Err { req_id: id, error } => {
            if id != req_id {
                return Err(BackendError::Protocol(format!("expected req_id {req_id}, got {id}")));
            }
            Err(BackendError::Remote(error))
        }
    }
}

impl PerplexityBackend for ExternalBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_context_tokens: self.cfg.max_context_tokens,
            deterministic: self.cfg.deterministic,
        }
    }

    fn describe(&self) -> String {
        format!("external({},sep={:?})", self.cfg.endpoint, self.cfg.context_separator)
    }

    fn log_likelihood(
        &self,
        target: SegmentRef<'_>,
        context: Option<SegmentRef<'_>>,
    ) -> Result<LogLikelihood, BackendError> {
        let req_id = format!("r{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let request = Request {
            req_id: req_id.clone(),
            target: target.text.to_string(),
            context: context.map(|c| format!("{}{}", c.text, self.cfg.context_separator)),
        };
        let line = serde_json::to_string(&request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let mut attempt = 0;
        loop {
            match self.call_once(&line, &req_id) {
                Err(e) if e.is_retriable() && attempt < self.cfg.max_retries => {
                    log::warn!("retrying {req_id} after {e}");
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Serves the protocol on a reader/writer pair using any backend. The
/// backend sees each request as a whitespace-tokenized segment.
pub fn serve<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    backend: &dyn PerplexityBackend,
    tokenizer: &crate::corpus::TokenizerSpec,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                let target = tokenizer.token_ids(&req.target);
                let context = req.context.as_deref().map(|c| tokenizer.token_ids(c));
                let result = backend.log_likelihood(
                    SegmentRef::new(&target, &req.target),
                    context
                        .as_deref()
                        .zip(req.context.as_deref())
                        .filter(|(t, _)| !t.is_empty())
                        .map(|(t, s)| SegmentRef::new(t, s)),
                );
                match result {
                    Ok(ll) => Response::Ok {
                        req_id: req.req_id,
                        logprob_sum: ll.logprob_sum,
                        token_count: ll.token_count,
                    },
                    Err(e) => Response::Err {
                        req_id: req.req_id,
                        error: e.to_string(),
                    },
                }
            }
            Err(e) => Response::Err {
                req_id: String::new(),
                error: format!("bad request: {e}"),
            },
        };
        // One write per response; many small writes stall on an unbuffered socket.
        let mut out = serde_json::to_vec(&response)?;
        out.push(b'\n');
        writer.write_all(&out)?;
        writer.flush()?;
    }
    Ok(())
}
