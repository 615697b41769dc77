//! Client side: a connection ([`Session`]) and the model backend built on it.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use serde_json::Value;

use super::*;
use crate::lm::{logprob_serde, Backend, ConditionalModel, ModelHandle, TokenSeq, TrainPair, TrainSession};
use crate::templating::RenderedInput;

/// Requests in flight before the client waits for a response.
pub const DEFAULT_WINDOW: usize = 16;

/// Largest accepted `|Σ exp(row) - 1|` on a logprobs row.
pub const NORMALIZATION_TOL: f64 = 1e-6;

struct Conn {
    reader: Box<dyn BufRead + Send>,
    writer: Option<Box<dyn Write + Send>>,
    next_id: u64,
    child: Option<Child>,
    closed: bool,
}

impl Conn {
    fn send(&mut self, m: &Message) -> Result<()> {
        let w = self
            .writer
            .as_mut()
            .ok_or_else(|| Error::Transport("connection closed".into()))?;
        w.write_all(m.to_line()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::Transport(e.to_string()))
    }

    fn recv(&mut self) -> Result<Message> {
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| Error::Transport(e.to_string()))?;
        if n == 0 {
            return Err(Error::Transport("server closed the connection".into()));
        }
        Message::from_line(&line)
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        if !self.closed {
            let bye = Message::new(self.next_id, Kind::Bye, &Empty {});
            if let Ok(m) = bye {
                let _ = self.send(&m);
            }
        }
        self.writer = None;
        if let Some(mut c) = self.child.take() {
            let _ = c.wait();
        }
    }
}

/// One connection. Calls from several threads are serialized; a single call
/// may pipeline many requests.
pub struct Session {
    conn: Mutex<Conn>,
    window: usize,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("window", &self.window)
            .finish_non_exhaustive()
    }
}

impl Session {
    /// `tcp://host:port`, or `exec:program arg ...` to spawn a server and talk
    /// over its stdin and stdout (arguments are split on whitespace).
    pub fn connect(endpoint: &str) -> Result<Self> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("{endpoint}: {e}")))?;
            let read = stream.try_clone().map_err(|e| Error::Transport(e.to_string()))?;
            Ok(Session::from_streams(BufReader::new(read), stream))
        } else if let Some(cmd) = endpoint.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| Error::Config("exec endpoint has no command".into()))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()
                .map_err(|e| Error::Transport(format!("{endpoint}: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            let s = Session::from_streams(BufReader::new(stdout), stdin);
            s.conn.lock().expect("fresh lock").child = Some(child);
            Ok(s)
        } else {
            Err(Error::Config(format!(
                "endpoint {endpoint:?} must start with tcp:// or exec:"
            )))
        }
    }

    pub fn from_streams<R, W>(reader: R, writer: W) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Session {
            conn: Mutex::new(Conn {
                reader: Box::new(reader),
                writer: Some(Box::new(writer)),
                next_id: 1,
                child: None,
                closed: false,
            }),
            window: DEFAULT_WINDOW,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window.max(1);
        self
    }

    fn lock(&self) -> Result<std::sync::MutexGuard<'_, Conn>> {
        self.conn
            .lock()
            .map_err(|_| Error::Transport("connection poisoned by an earlier failure".into()))
    }

    /// One request; an `error` response becomes [`Error::Server`].
    pub fn call<P: Serialize>(&self, kind: Kind, payload: &P) -> Result<Message> {
        let payload = serde_json::to_value(payload)?;
        self.call_many(vec![(kind, payload)])?.pop().expect("one response")
    }

    /// Sends the requests with up to `window` in flight and returns the
    /// responses in request order, matched by id. Transport and protocol
    /// failures fail the whole call; server errors fail only their entry.
    pub fn call_many(&self, requests: Vec<(Kind, Value)>) -> Result<Vec<Result<Message>>> {
        let mut conn = self.lock()?;
        if conn.closed {
            return Err(Error::Transport("session is closed".into()));
        }
        let n = requests.len();
        let mut out: Vec<Option<Result<Message>>> = (0..n).map(|_| None).collect();
        let mut pending: HashMap<u64, (usize, Kind)> = HashMap::new();
        let mut queue = requests.into_iter().enumerate();
        let mut received = 0;
        while received < n {
            while pending.len() < self.window {
                let Some((i, (kind, payload))) = queue.next() else {
                    break;
                };
                let id = conn.next_id;
                conn.next_id += 1;
                conn.send(&Message { id, kind, payload })?;
                pending.insert(id, (i, kind));
            }
            let m = conn.recv()?;
            let (i, kind) = pending
                .remove(&m.id)
                .ok_or_else(|| Error::Protocol(format!("response to unknown request id {}", m.id)))?;
            out[i] = Some(if m.kind == Kind::Error {
                Err(Error::Server(m.parse::<ErrorPayload>()?.message))
            } else if m.kind != kind {
                return Err(Error::Protocol(format!(
                    "request {} was {kind:?} but the response is {:?}",
                    m.id, m.kind
                )));
            } else {
                Ok(m)
            });
            received += 1;
        }
        Ok(out.into_iter().map(|r| r.expect("every request answered")).collect())
    }

    /// Sends `bye` and stops using the connection.
    pub fn close(&self) -> Result<()> {
        let r = self.call(Kind::Bye, &Empty {});
        self.lock()?.closed = true;
        r.map(|_| ())
    }
}

fn parse<T: for<'de> serde::Deserialize<'de>>(r: Result<Message>) -> Result<T> {
    r?.parse()
}

/// Model served over a [`Session`], optionally pinned to a server-side
/// checkpoint.
#[derive(Debug, Clone)]
pub struct RemoteModel {
    session: Arc<Session>,
    info: HelloResponse,
    checkpoint: Option<String>,
}

impl RemoteModel {
    pub fn connect(endpoint: &str) -> Result<Self> {
        Self::new(Arc::new(Session::connect(endpoint)?))
    }

    /// Performs the `hello` exchange.
    pub fn new(session: Arc<Session>) -> Result<Self> {
        let info: HelloResponse = parse(session.call(
            Kind::Hello,
            &HelloRequest {
                version: PROTOCOL_VERSION.to_string(),
                client: "autoseq".into(),
            },
        ))?;
        if info.version != PROTOCOL_VERSION {
            return Err(Error::VersionMismatch {
                client: PROTOCOL_VERSION.to_string(),
                server: info.version,
            });
        }
        if info.vocab_size == 0 {
            return Err(Error::Protocol("server reported an empty vocabulary".into()));
        }
        Ok(RemoteModel {
            session,
            info,
            checkpoint: None,
        })
    }

    pub fn info(&self) -> &HelloResponse {
        &self.info
    }

    pub fn session(&self) -> &Arc<Session> {
        &self.session
    }

    pub fn checkpoint(&self) -> Option<&str> {
        self.checkpoint.as_deref()
    }

    pub fn at_checkpoint(&self, name: impl Into<String>) -> Self {
        RemoteModel {
            checkpoint: Some(name.into()),
            ..self.clone()
        }
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.info.vocab_size {
            return Err(Error::Protocol(format!(
                "row has {} entries, vocabulary has {}",
                row.len(),
                self.info.vocab_size
            )));
        }
        let mass: f64 = row.iter().map(|x| x.exp()).sum();
        if mass.is_nan() || (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Protocol(format!("row sums to {mass}, not 1")));
        }
        Ok(())
    }
}

impl ConditionalModel for RemoteModel {
    fn backend(&self) -> Backend {
        Backend::Remote
    }

    fn identifier(&self) -> String {
        match &self.checkpoint {
            Some(c) => format!("remote:{}@{c}", self.info.model),
            None => format!("remote:{}", self.info.model),
        }
    }

    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }

    fn special(&self) -> SpecialTokens {
        self.info.special
    }

    fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let r: TokenizeResponse = parse(
            self.session
                .call(Kind::Tokenize, &TokenizeRequest { text: text.into() }),
        )?;
        Ok(TokenSeq(r.ids))
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let r: DetokenizeResponse = parse(
            self.session
                .call(Kind::Detokenize, &DetokenizeRequest { ids: ids.to_vec() }),
        )?;
        Ok(r.text)
    }

    fn next_token_logprobs(&self, input: &RenderedInput, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.next_token_logprobs_batch(input, &[prefix])?.remove(0))
    }

    fn next_token_logprobs_batch(&self, input: &RenderedInput, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let req = LogprobsRequest {
            input: input.text.clone(),
            prefixes: prefixes.iter().map(|p| p.to_vec()).collect(),
            checkpoint: self.checkpoint.clone(),
        };
        let r: LogprobsResponse = parse(self.session.call(Kind::Logprobs, &req))?;
        if r.rows.len() != prefixes.len() {
            return Err(Error::Protocol(format!(
                "{} rows for {} prefixes",
                r.rows.len(),
                prefixes.len()
            )));
        }
        let rows: Vec<Vec<f64>> = r.rows.into_iter().map(logprob_serde::decode).collect();
        for row in &rows {
            self.check_row(row)?;
        }
        Ok(rows)
    }

    fn trainable(&self) -> bool {
        self.info.trainable
    }

    fn start_training(&self, pairs: &[TrainPair], config: &FineTuneConfig) -> Result<Box<dyn TrainSession>> {
        if !self.info.trainable {
            return Err(Error::NotTrainable(self.identifier()));
        }
        config.validate()?;
        Ok(Box::new(RemoteTrainer {
            model: self.clone(),
            start: Some(FinetuneStart {
                from: self.checkpoint.clone(),
                pairs: pairs
                    .iter()
                    .map(|p| WirePair {
                        input: p.input.text.clone(),
                        target: p.target.0.clone(),
                    })
                    .collect(),
                config: config.clone(),
            }),
        }))
    }
}

/// The session's server-side trainer. The first request carries the pairs
/// and the configuration; later ones only a step count.
pub struct RemoteTrainer {
    model: RemoteModel,
    start: Option<FinetuneStart>,
}

impl RemoteTrainer {
    fn steps(&mut self, steps: usize) -> Result<FinetuneResponse> {
        let req = FinetuneRequest {
            start: self.start.take(),
            steps,
        };
        parse(self.model.session.call(Kind::Finetune, &req))
    }
}

impl TrainSession for RemoteTrainer {
    fn train_steps(&mut self, steps: usize) -> Result<f64> {
        Ok(self.steps(steps)?.loss.unwrap_or(f64::NAN))
    }

    fn snapshot(&mut self) -> Result<ModelHandle> {
        if self.start.is_some() {
            self.steps(0)?;
        }
        let r: CheckpointResponse = parse(self.model.session.call(Kind::Checkpoint, &Empty {}))?;
        Ok(ModelHandle::new(self.model.at_checkpoint(r.checkpoint)))
    }
}
