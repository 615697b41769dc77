//! Reference server: speaks the protocol around any local model.

use std::io::{BufRead, BufReader, Write};
use std::sync::Arc;
use std::thread;

use serde_json::Value;

use super::*;
use crate::lm::{ModelHandle, TrainPair, TrainSession};
use crate::templating::RenderedInput;

/// One session's state: the model it was started with, the active model
/// (changed by `restore`), the current trainer and the frozen checkpoints.
pub struct Server {
    base: ModelHandle,
    active: ModelHandle,
    trainer: Option<(Box<dyn TrainSession>, usize)>,
    checkpoints: Vec<ModelHandle>,
}

impl Server {
    pub fn new(model: ModelHandle) -> Self {
        Server {
            active: model.clone(),
            base: model,
            trainer: None,
            checkpoints: Vec::new(),
        }
    }

    fn checkpoint(&self, name: &str) -> Result<&ModelHandle> {
        name.strip_prefix("ckpt-")
            .and_then(|n| n.parse::<usize>().ok())
            .and_then(|i| self.checkpoints.get(i))
            .ok_or_else(|| Error::Checkpoint(format!("unknown checkpoint {name:?}")))
    }

    /// The response to one request, and whether the connection stays open.
    pub fn handle(&mut self, request: &Message) -> (Message, bool) {
        match self.dispatch(request) {
            Ok(payload) => (
                Message {
                    id: request.id,
                    kind: request.kind,
                    payload,
                },
                request.kind != Kind::Bye,
            ),
            Err(e) => (Message::error(request.id, e.to_string()), true),
        }
    }

    fn dispatch(&mut self, req: &Message) -> Result<Value> {
        let out = match req.kind {
            Kind::Hello => {
                req.parse::<HelloRequest>()?;
                serde_json::to_value(HelloResponse {
                    version: PROTOCOL_VERSION.to_string(),
                    model: self.base.identifier(),
                    vocab_size: self.base.vocab_size(),
                    special: self.base.special(),
                    trainable: self.base.trainable(),
                })?
            }
            Kind::Tokenize => {
                let r: TokenizeRequest = req.parse()?;
                serde_json::to_value(TokenizeResponse {
                    ids: self.base.tokenize(&r.text)?.0,
                })?
            }
            Kind::Detokenize => {
                let r: DetokenizeRequest = req.parse()?;
                serde_json::to_value(DetokenizeResponse {
                    text: self.base.detokenize(&r.ids)?,
                })?
            }
            Kind::Logprobs => {
                let r: LogprobsRequest = req.parse()?;
                let model = match &r.checkpoint {
                    Some(c) => self.checkpoint(c)?,
                    None => &self.active,
                };
                let input = RenderedInput::from_text(r.input)?;
                let prefixes: Vec<&[TokenId]> = r.prefixes.iter().map(Vec::as_slice).collect();
                let rows = model.next_token_logprobs_batch(&input, &prefixes)?;
                serde_json::to_value(LogprobsResponse {
                    rows: rows.iter().map(|r| crate::lm::logprob_serde::encode(r)).collect(),
                })?
            }
            Kind::Finetune => {
                let r: FinetuneRequest = req.parse()?;
                if let Some(start) = r.start {
                    let from = match &start.from {
                        Some(c) => self.checkpoint(c)?.clone(),
                        None => self.active.clone(),
                    };
                    if !from.trainable() {
                        return Err(Error::NotTrainable(from.backend().to_string()));
                    }
                    let pairs = start
                        .pairs
                        .into_iter()
                        .map(|p| {
                            Ok(TrainPair {
                                input: RenderedInput::from_text(p.input)?,
                                target: p.target.into(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    self.trainer = Some((from.model().start_training(&pairs, &start.config)?, 0));
                }
                let (trainer, done) = self
                    .trainer
                    .as_mut()
                    .ok_or_else(|| Error::Model("no training session; send a finetune request with start".into()))?;
                let loss = trainer.train_steps(r.steps)?;
                *done += r.steps;
                serde_json::to_value(FinetuneResponse {
                    step: *done,
                    loss: (r.steps > 0 && loss.is_finite()).then_some(loss),
                })?
            }
            Kind::Checkpoint => {
                let frozen = match &mut self.trainer {
                    Some((t, _)) => t.snapshot()?,
                    None => self.active.clone(),
                };
                self.checkpoints.push(frozen);
                serde_json::to_value(CheckpointResponse {
                    checkpoint: format!("ckpt-{}", self.checkpoints.len() - 1),
                })?
            }
            Kind::Restore => {
                let r: RestoreRequest = req.parse()?;
                self.active = self.checkpoint(&r.checkpoint)?.clone();
                self.trainer = None;
                serde_json::to_value(Empty {})?
            }
            Kind::Bye => serde_json::to_value(Empty {})?,
            Kind::Error => return Err(Error::Protocol("error is a response kind".into())),
        };
        Ok(out)
    }
}

/// Answers requests line by line until `bye` or end of input. A line that
/// is not a message gets an `error` response with the line's `id` if one can
/// be read, else 0.
pub fn serve<R: BufRead, W: Write>(model: ModelHandle, reader: R, mut writer: W) -> Result<()> {
    let mut server = Server::new(model);
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Transport(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, open) = match Message::from_line(&line) {
            Ok(m) => server.handle(&m),
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64))
                    .unwrap_or(0);
                (Message::error(id, e.to_string()), true)
            }
        };
        writer
            .write_all(reply.to_line()?.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| Error::Transport(e.to_string()))?;
        if !open {
            break;
        }
    }
    Ok(())
}

/// Client session to a server running on a background thread of this
/// process, connected by OS pipes.
pub fn in_process(model: ModelHandle) -> Result<Arc<Session>> {
    let (req_r, req_w) = std::io::pipe().map_err(|e| Error::Transport(e.to_string()))?;
    let (resp_r, resp_w) = std::io::pipe().map_err(|e| Error::Transport(e.to_string()))?;
    thread::spawn(move || serve(model, BufReader::new(req_r), resp_w));
    Ok(Arc::new(Session::from_streams(BufReader::new(resp_r), req_w)))
}

/// Serves connections from `listener` one after another, each with a fresh
/// session state, until accepting fails.
pub fn serve_tcp(model: ModelHandle, listener: std::net::TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream.map_err(|e| Error::Transport(e.to_string()))?;
        let read = stream.try_clone().map_err(|e| Error::Transport(e.to_string()))?;
        // A client vanishing mid-session only ends that session.
        let _ = serve(model.clone(), BufReader::new(read), stream);
    }
    Ok(())
}
