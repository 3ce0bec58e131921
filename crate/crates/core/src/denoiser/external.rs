//! Line-delimited JSON protocol for attaching an out-of-process model.
//!
//! Handshake: the client sends `{"v":1,"hello":true}` and the server answers
//! `{"v":1,"vocab":V,"mask":id,"eos":id,"hidden":d|null}`. Each request is
//! `{"v":1,"prompt":[..],"cells":[{"t":id}|null,..],"query":[..]}` and each
//! response `{"v":1,"preds":[{"pos":p,"topk":[[id,prob],..],"tail":m,"hidden":[..]?},..]}`
//! or `{"v":1,"error":"msg"}`. One request per line, one response per line.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{predict_checked, Denoiser, DenoiserError, Descriptor, Prediction};
use crate::dist::Distribution;
use crate::state::{Cell, TokenId, Vocab};

pub const PROTOCOL_VERSION: u32 = 1;
/// Entries sent explicitly per distribution; the rest is folded into the tail.
pub const WIRE_TOP_K: usize = 32;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Serialize, Deserialize)]
struct Hello {
    v: u32,
    hello: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct HelloReply {
    v: u32,
    vocab: u32,
    mask: TokenId,
    eos: TokenId,
    hidden: Option<usize>,
    #[serde(default = "yes")]
    deterministic: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct WireCell {
    t: TokenId,
}

#[derive(Debug, Serialize, Deserialize)]
struct Request {
    v: u32,
    prompt: Vec<TokenId>,
    cells: Vec<Option<WireCell>>,
    query: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WirePrediction {
    pos: usize,
    topk: Vec<(TokenId, f64)>,
    tail: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Response {
    v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preds: Option<Vec<WirePrediction>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
}

impl Connection {
    fn round_trip(&mut self, line: &str, timeout: Duration) -> Result<String, DenoiserError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(DenoiserError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(DenoiserError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(DenoiserError::Protocol("model closed the stream".into())),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client side of the protocol. Requests are serialized through a mutex,
/// so one client serves one decode at a time.
pub struct ExternalDenoiserClient {
    conn: Mutex<Connection>,
    descriptor: Descriptor,
    timeout: Duration,
}

impl std::fmt::Debug for ExternalDenoiserClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDenoiserClient")
            .field("descriptor", &self.descriptor)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ExternalDenoiserClient {
    /// Spawns `program args..` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, DenoiserError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(
            Connection {
                writer: Box::new(stdin),
                lines: spawn_reader(BufReader::new(stdout)),
                child: Some(child),
            },
            timeout,
        )
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, DenoiserError> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::from_streams(reader, stream, timeout)
    }

    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self, DenoiserError> {
        Self::handshake(
            Connection {
                writer: Box::new(writer),
                lines: spawn_reader(reader),
                child: None,
            },
            timeout,
        )
    }

    fn handshake(mut conn: Connection, timeout: Duration) -> Result<Self, DenoiserError> {
        let hello = serde_json::to_string(&Hello {
            v: PROTOCOL_VERSION,
            hello: true,
        })
        .expect("serializable");
        let reply = conn.round_trip(&hello, timeout)?;
        let value: serde_json::Value =
            serde_json::from_str(&reply).map_err(|e| DenoiserError::Protocol(format!("bad handshake reply: {e}")))?;
        let got = value.get("v").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if got != PROTOCOL_VERSION {
            return Err(DenoiserError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                got,
            });
        }
        if let Some(msg) = value.get("error").and_then(serde_json::Value::as_str) {
            return Err(DenoiserError::Remote(msg.to_owned()));
        }
        let reply: HelloReply =
            serde_json::from_value(value).map_err(|e| DenoiserError::Protocol(format!("bad handshake reply: {e}")))?;
        let vocab =
            Vocab::new(reply.vocab, reply.mask, reply.eos).map_err(|e| DenoiserError::Protocol(e.to_string()))?;
        Ok(Self {
            conn: Mutex::new(conn),
            descriptor: Descriptor {
                vocab,
                hidden_dim: reply.hidden,
                deterministic: reply.deterministic,
                protocol_version: PROTOCOL_VERSION,
            },
            timeout,
        })
    }
}

fn spawn_reader(reader: impl BufRead + Send + 'static) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in reader.lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl Denoiser for ExternalDenoiserClient {
    fn descriptor(&self) -> Descriptor {
        self.descriptor.clone()
    }

    fn predict(
        &self,
        prompt: &[TokenId],
        cells: &[Cell],
        positions: &[usize],
    ) -> Result<Vec<Prediction>, DenoiserError> {
        let request = Request {
            v: PROTOCOL_VERSION,
            prompt: prompt.to_vec(),
            cells: cells.iter().map(|c| c.token().map(|t| WireCell { t })).collect(),
            query: positions.to_vec(),
        };
        let line = serde_json::to_string(&request).expect("serializable");
        let reply = {
            let mut conn = self
                .conn
                .lock()
                .map_err(|_| DenoiserError::Protocol("connection poisoned".into()))?;
            conn.round_trip(&line, self.timeout)?
        };
        let response: Response =
            serde_json::from_str(&reply).map_err(|e| DenoiserError::Protocol(format!("bad response: {e}")))?;
        if response.v != PROTOCOL_VERSION {
            return Err(DenoiserError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                got: response.v,
            });
        }
        if let Some(msg) = response.error {
            return Err(DenoiserError::Remote(msg));
        }
        let preds = response
            .preds
            .ok_or_else(|| DenoiserError::Protocol("response has neither preds nor error".into()))?;
        preds
            .into_iter()
            .map(|p| {
                let dist = Distribution::new(p.topk, p.tail).map_err(|source| DenoiserError::Malformed {
                    position: p.pos,
                    source,
                })?;
                Ok(Prediction {
                    position: p.pos,
                    dist,
                    hidden: p.hidden,
                })
            })
            .collect()
    }
}

fn to_wire(p: Prediction) -> WirePrediction {
    let entries = p.dist.entries();
    let folded: f64 = entries.iter().skip(WIRE_TOP_K).map(|e| e.1).sum();
    WirePrediction {
        pos: p.position,
        topk: entries.iter().take(WIRE_TOP_K).copied().collect(),
        tail: p.dist.tail() + folded,
        hidden: p.hidden,
    }
}

fn handle_line(denoiser: &dyn Denoiser, line: &str) -> String {
    let error = |msg: String| {
        serde_json::to_string(&Response {
            v: PROTOCOL_VERSION,
            preds: None,
            error: Some(msg),
        })
        .expect("serializable")
    };
    let value: serde_json::Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return error(format!("unparseable request: {e}")),
    };
    let v = value.get("v").and_then(serde_json::Value::as_u64);
    if v != Some(u64::from(PROTOCOL_VERSION)) {
        return error(format!("unsupported protocol version {v:?}"));
    }
    if value.get("hello").is_some() {
        let d = denoiser.descriptor();
        return serde_json::to_string(&HelloReply {
            v: PROTOCOL_VERSION,
            vocab: d.vocab.size,
            mask: d.vocab.mask_id,
            eos: d.vocab.eos_id,
            hidden: d.hidden_dim,
            deterministic: d.deterministic,
        })
        .expect("serializable");
    }
    let request: Request = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return error(format!("bad request: {e}")),
    };
    let cells: Vec<Cell> = request
        .cells
        .iter()
        .map(|c| c.map_or(Cell::Masked, |w| Cell::Committed(w.t)))
        .collect();
    match predict_checked(denoiser, &request.prompt, &cells, &request.query) {
        Ok(preds) => serde_json::to_string(&Response {
            v: PROTOCOL_VERSION,
            preds: Some(preds.into_iter().map(to_wire).collect()),
            error: None,
        })
        .expect("serializable"),
        Err(e) => error(e.to_string()),
    }
}

/// Serves `denoiser` over a line stream until the reader is exhausted.
pub fn serve(denoiser: &dyn Denoiser, reader: impl BufRead, mut writer: impl Write) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writer.write_all(handle_line(denoiser, &line).as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
