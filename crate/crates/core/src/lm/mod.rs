//! Conditional sequence model contract and the shared fine-tuning driver.
//!
//! A model maps a rendered input and a decoded prefix to a natural-log
//! probability distribution over the whole vocabulary. Everything above this
//! layer (scoring, beam search, re-ranking) talks to models only through
//! [`ModelHandle`].

pub mod tabular;
pub mod tiny;

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::templating::{RenderedInput, MASK};

pub use tabular::TabularModel;
pub use tiny::{TinyConfig, TinyModel};

pub type TokenId = usize;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";

/// Token ids of a label sequence or decoded prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub mask_id: TokenId,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
}

impl SpecialTokens {
    pub fn contains(&self, id: TokenId) -> bool {
        id == self.mask_id || id == self.eos_id || id == self.pad_id
    }
}

/// Whitespace vocabulary used by the local backends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    special: SpecialTokens,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    mask_id: TokenId,
    eos_id: TokenId,
    pad_id: TokenId,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::new(
            r.tokens,
            SpecialTokens {
                mask_id: r.mask_id,
                eos_id: r.eos_id,
                pad_id: r.pad_id,
            },
        )
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            mask_id: v.special.mask_id,
            eos_id: v.special.eos_id,
            pad_id: v.special.pad_id,
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>, special: SpecialTokens) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!(
                    "token {i} ({t:?}) is empty or has whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let ids = [special.mask_id, special.eos_id, special.pad_id];
        if ids.iter().any(|&i| i >= tokens.len()) {
            return Err(Error::InvalidVocab("special id out of range".into()));
        }
        if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
            return Err(Error::InvalidVocab("special ids must be distinct".into()));
        }
        if tokens.len() < 5 {
            return Err(Error::InvalidVocab("need at least 2 non-special tokens".into()));
        }
        Ok(Vocab { tokens, index, special })
    }

    /// `<pad>`, `</s>`, `[MASK]` followed by the distinct words in first-seen order.
    pub fn with_specials<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = vec![PAD_TOKEN.to_string(), EOS_TOKEN.to_string(), MASK.to_string()];
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Vocab::new(
            tokens,
            SpecialTokens {
                pad_id: 0,
                eos_id: 1,
                mask_id: 2,
            },
        )
    }

    /// Vocabulary over every whitespace token of `texts`.
    pub fn from_corpus<'a, I>(texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::with_specials(texts.into_iter().flat_map(str::split_whitespace))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Every id except mask, pad and EOS.
    pub fn content_ids(&self) -> Vec<TokenId> {
        (0..self.len()).filter(|&i| !self.special.contains(i)).collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.token(i).ok_or(Error::InvalidTokenId {
                    id: i,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Tabular,
    TinyNeural,
    Remote,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Tabular => "tabular",
            Backend::TinyNeural => "tiny-neural",
            Backend::Remote => "remote",
        })
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(Backend::Tabular),
            "tiny-neural" => Ok(Backend::TinyNeural),
            "remote" => Ok(Backend::Remote),
            _ => Err(Error::Config(format!("unknown backend {s:?}"))),
        }
    }
}

/// Cross-entropy fine-tuning schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            steps: 1000,
            batch_size: 8,
            learning_rate: 6e-5,
            validate_every: 100,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validate_every must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One supervised example: the rendered input and the label sequence to emit at the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub input: RenderedInput,
    pub target: TokenSeq,
}

/// A model being trained; owned by one fine-tuning run.
pub trait TrainSession: Send {
    /// Runs `steps` SGD steps and returns the mean training loss over them.
    fn train_steps(&mut self, steps: usize) -> Result<f64>;

    /// Immutable handle to the current parameters.
    fn snapshot(&mut self) -> Result<ModelHandle>;
}

/// Backend side of the model contract. Callers go through [`ModelHandle`],
/// which validates arguments before delegating here.
pub trait ConditionalModel: Send + Sync + fmt::Debug {
    fn backend(&self) -> Backend;

    fn identifier(&self) -> String;

    fn vocab_size(&self) -> usize;

    fn special(&self) -> SpecialTokens;

    fn tokenize(&self, text: &str) -> Result<TokenSeq>;

    fn detokenize(&self, ids: &[TokenId]) -> Result<String>;

    fn next_token_logprobs(&self, input: &RenderedInput, prefix: &[TokenId]) -> Result<Vec<f64>>;

    fn next_token_logprobs_batch(&self, input: &RenderedInput, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        prefixes.iter().map(|p| self.next_token_logprobs(input, p)).collect()
    }

    /// Chain-rule sum of next-token log-probabilities. `target` is non-empty.
    fn sequence_logprob(&self, input: &RenderedInput, target: &[TokenId]) -> Result<f64> {
        let prefixes: Vec<&[TokenId]> = (0..target.len()).map(|j| &target[..j]).collect();
        let rows = self.next_token_logprobs_batch(input, &prefixes)?;
        Ok(rows.iter().zip(target).map(|(row, &t)| row[t]).sum())
    }

    fn trainable(&self) -> bool {
        false
    }

    fn start_training(&self, _pairs: &[TrainPair], _config: &FineTuneConfig) -> Result<Box<dyn TrainSession>> {
        Err(Error::NotTrainable(self.backend().to_string()))
    }

    /// Writes a checkpoint, for backends that have one.
    fn save(&self, _path: &std::path::Path) -> Result<()> {
        Err(Error::Checkpoint(format!(
            "{} backend has no checkpoint format",
            self.backend()
        )))
    }
}

/// Shared, cheaply clonable reference to a model. Scoring is read-only and
/// may run concurrently.
#[derive(Debug, Clone)]
pub struct ModelHandle(Arc<dyn ConditionalModel>);

impl ModelHandle {
    pub fn new<M: ConditionalModel + 'static>(model: M) -> Self {
        ModelHandle(Arc::new(model))
    }

    pub fn from_arc(model: Arc<dyn ConditionalModel>) -> Self {
        ModelHandle(model)
    }

    pub fn backend(&self) -> Backend {
        self.0.backend()
    }

    pub fn identifier(&self) -> String {
        self.0.identifier()
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable()
    }

    pub fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    pub fn special(&self) -> SpecialTokens {
        self.0.special()
    }

    /// Every id except the special tokens.
    pub fn content_ids(&self) -> Vec<TokenId> {
        let sp = self.special();
        (0..self.vocab_size()).filter(|&i| !sp.contains(i)).collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let seq = self.0.tokenize(text)?;
        self.check_ids(&seq)?;
        Ok(seq)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        self.check_ids(ids)?;
        self.0.detokenize(ids)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let size = self.vocab_size();
        match ids.iter().find(|&&i| i >= size) {
            Some(&id) => Err(Error::InvalidTokenId { id, size }),
            None => Ok(()),
        }
    }

    /// Natural-log distribution over the vocabulary for the token after `prefix`.
    pub fn next_token_logprobs(&self, input: &RenderedInput, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(prefix)?;
        let row = self.0.next_token_logprobs(input, prefix)?;
        self.check_row(&row)?;
        Ok(row)
    }

    pub fn next_token_logprobs_batch(&self, input: &RenderedInput, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        for p in prefixes {
            self.check_ids(p)?;
        }
        let rows = self.0.next_token_logprobs_batch(input, prefixes)?;
        if rows.len() != prefixes.len() {
            return Err(Error::Model(format!(
                "backend returned {} rows for {} prefixes",
                rows.len(),
                prefixes.len()
            )));
        }
        for r in &rows {
            self.check_row(r)?;
        }
        Ok(rows)
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.vocab_size() {
            return Err(Error::Model(format!(
                "distribution has {} entries, vocabulary has {}",
                row.len(),
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// Sum over the target of log P(t_j | t_<j, input).
    pub fn sequence_logprob(&self, input: &RenderedInput, target: &[TokenId]) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::EmptyLabelSequence);
        }
        self.check_ids(target)?;
        self.0.sequence_logprob(input, target)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.0.save(path)
    }

    pub fn model(&self) -> &dyn ConditionalModel {
        self.0.as_ref()
    }

    pub fn ptr_eq(&self, other: &ModelHandle) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Dev-set evaluation used to pick the best checkpoint. Higher is better.
pub type DevEval<'a> = dyn Fn(&ModelHandle) -> Result<f64> + Sync + 'a;

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    /// Checkpoint with the best dev evaluation (earliest on ties).
    pub model: ModelHandle,
    pub best_metric: f64,
    pub best_step: usize,
    /// `(step, dev metric, mean train loss since the previous evaluation)`.
    pub history: Vec<(usize, f64, f64)>,
}

/// Fine-tunes a copy of `model` with cross-entropy on `pairs`, evaluating
/// every `validate_every` steps (and after the last step) and keeping the best
/// checkpoint. The input handle is never modified. `steps = 0` evaluates the
/// input model as is.
pub fn fine_tune(
    model: &ModelHandle,
    pairs: &[TrainPair],
    config: &FineTuneConfig,
    dev_eval: &DevEval<'_>,
) -> Result<FineTuneResult> {
    if pairs.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one pair".into()));
    }
    config.validate()?;
    for p in pairs {
        if p.target.is_empty() {
            return Err(Error::EmptyLabelSequence);
        }
        model.check_ids(&p.target)?;
    }
    // With no steps the input model is only evaluated, so any backend works.
    if config.steps == 0 {
        let m = dev_eval(model)?;
        return Ok(FineTuneResult {
            model: model.clone(),
            best_metric: m,
            best_step: 0,
            history: vec![(0, m, f64::NAN)],
        });
    }
    if !model.trainable() {
        return Err(Error::NotTrainable(model.backend().to_string()));
    }
    let mut session = model.0.start_training(pairs, config)?;
    let mut done = 0;
    let mut best: Option<(ModelHandle, f64, usize)> = None;
    let mut history = Vec::new();
    while done < config.steps {
        let chunk = config.validate_every.min(config.steps - done);
        let loss = session.train_steps(chunk)?;
        done += chunk;
        let snap = session.snapshot()?;
        let m = dev_eval(&snap)?;
        let m = if m.is_nan() { f64::NEG_INFINITY } else { m };
        history.push((done, m, loss));
        if best.as_ref().is_none_or(|(_, b, _)| m > *b) {
            best = Some((snap, m, done));
        }
    }
    let (model, best_metric, best_step) = best.expect("at least one evaluation ran");
    Ok(FineTuneResult {
        model,
        best_metric,
        best_step,
        history,
    })
}

/// `ln Σ exp(x)`, exact for `-inf` entries.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let z = logsumexp(logits);
    logits.iter().map(|&x| x - z).collect()
}

/// Serde helper for log-probability vectors: `-inf` travels as `null`.
pub mod logprob_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn encode(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().map(|&x| x.is_finite().then_some(x)).collect()
    }

    pub fn decode(v: Vec<Option<f64>>) -> Vec<f64> {
        v.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect()
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        encode(v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(decode(Vec::<Option<f64>>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_basics() {
        let v = Vocab::with_specials(["a", "b", "a", "c"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.content_ids(), vec![3, 4, 5]);
        let seq = v.tokenize("a c </s>").unwrap();
        assert_eq!(seq.ids(), &[3, 5, 1]);
        assert_eq!(v.detokenize(&seq).unwrap(), "a c </s>");
        assert!(matches!(v.tokenize("zzz"), Err(Error::UnknownToken(_))));
        assert!(v.detokenize(&[9]).is_err());
        assert!(Vocab::with_specials(["only"]).is_err());
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn logsumexp_handles_neg_inf() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let ls = log_softmax(&[1.0, 2.0, 3.0]);
        assert!(logsumexp(&ls).abs() < 1e-12);
    }

    #[test]
    fn fine_tune_rejects_untrainable() {
        let v = Vocab::with_specials(["a", "b"]).unwrap();
        let m = ModelHandle::new(TabularModel::uniform("u", v));
        let pair = TrainPair {
            input: RenderedInput::from_text("x [MASK]").unwrap(),
            target: TokenSeq(vec![3]),
        };
        let err = fine_tune(&m, &[pair], &FineTuneConfig::default(), &|_| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::NotTrainable(_)));
    }
}
