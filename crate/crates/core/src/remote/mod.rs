//! `autoseq-proto/1`: newline-delimited JSON between the engine and a process
//! hosting a model.
//!
//! Every line is one [`Message`] `{"id", "kind", "payload"}`. The client picks
//! the ids; the server answers every request with exactly one message
//! carrying the same id, either of the same kind or of kind `error`. Requests
//! on one connection are handled in order, and the client may pipeline
//! several before reading responses.
//!
//! Payloads by kind (request → response):
//!
//! - `hello`: `{"version", "client"}` → `{"version", "model", "vocab_size",
//!   "special": {"mask_id", "eos_id", "pad_id"}, "trainable"}`. The client
//!   refuses a server whose `version` differs from [`PROTOCOL_VERSION`].
//! - `tokenize`: `{"text"}` → `{"ids"}`.
//! - `detokenize`: `{"ids"}` → `{"text"}`.
//! - `logprobs`: `{"input", "prefixes", "checkpoint"?}` → `{"rows"}`.
//!   `input` is the rendered input text with one `[MASK]`; `prefixes` is a
//!   list of id lists; `rows[i]` is the natural-log next-token distribution
//!   after `prefixes[i]`, one entry per vocabulary id, with `null` for
//!   `-inf`. Without `checkpoint` the session's active model answers.
//! - `finetune`: `{"start"?: {"from"?, "pairs": [{"input", "target"}],
//!   "config"}, "steps"}` → `{"step", "loss"}`. `start` (re)creates the
//!   session's trainer from checkpoint `from` (or the active model); `steps`
//!   SGD steps then run on the current trainer. `step` is the trainer's total
//!   and `loss` the mean loss over this call's steps (`null` for none).
//! - `checkpoint`: `{}` → `{"checkpoint"}`. Freezes the trainer's current
//!   parameters, or the active model when no trainer exists, under a fresh
//!   name.
//! - `restore`: `{"checkpoint"}` → `{}`. Makes the checkpoint the active
//!   model and drops the trainer.
//! - `bye`: `{}` → `{}`. The server closes the connection after replying.
//! - `error` (response only): `{"message"}`.

pub mod check;
pub mod client;
pub mod server;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lm::{FineTuneConfig, SpecialTokens, TokenId};

pub use check::{serve_check, CheckOutcome, CheckReport};
pub use client::{RemoteModel, Session};
pub use server::{in_process, serve, serve_tcp, Server};

pub const PROTOCOL_VERSION: &str = "autoseq-proto/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Hello,
    Tokenize,
    Detokenize,
    Logprobs,
    Finetune,
    Checkpoint,
    Restore,
    Bye,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    pub kind: Kind,
    #[serde(default)]
    pub payload: Value,
}

impl Message {
    pub fn new<P: Serialize>(id: u64, kind: Kind, payload: &P) -> Result<Self> {
        Ok(Message {
            id,
            kind,
            payload: serde_json::to_value(payload)?,
        })
    }

    pub fn error(id: u64, message: impl Into<String>) -> Self {
        Message {
            id,
            kind: Kind::Error,
            payload: serde_json::json!({ "message": message.into() }),
        }
    }

    pub fn to_line(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol(format!("malformed message: {e}")))
    }

    /// Payload as `T`; a mismatch is a protocol error.
    pub fn parse<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| Error::Protocol(format!("bad {:?} payload: {e}", self.kind)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloRequest {
    pub version: String,
    pub client: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloResponse {
    pub version: String,
    pub model: String,
    pub vocab_size: usize,
    pub special: SpecialTokens,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeRequest {
    pub ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsRequest {
    pub input: String,
    pub prefixes: Vec<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsResponse {
    pub rows: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePair {
    pub input: String,
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStart {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    pub pairs: Vec<WirePair>,
    pub config: FineTuneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<FinetuneStart>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResponse {
    pub step: usize,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointResponse {
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoreRequest {
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}

/// Payload for kinds whose payload is the empty object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Empty {}
