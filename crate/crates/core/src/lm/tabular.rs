//! Exactly computable model backed by an explicit conditional table.
//!
//! The distribution for the next token depends on the input's *signature*
//! and on the last (at most two) tokens of the prefix. An input's signature
//! is the signature of the first whitespace token of its text, stripped of
//! surrounding punctuation, that is registered as a trigger word. Lookup
//! goes `(signature, context)`, then `(wildcard, context)`, then a uniform
//! distribution over content tokens.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{logprob_serde, Backend, ConditionalModel, SpecialTokens, TokenId, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::templating::RenderedInput;

/// Longest prefix suffix the table conditions on.
pub const MAX_ORDER: usize = 2;

type Key = (Option<String>, Vec<TokenId>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularRepr", into = "TabularRepr")]
pub struct TabularModel {
    name: String,
    vocab: Vocab,
    triggers: BTreeMap<String, String>,
    table: HashMap<Key, Vec<f64>>,
    uniform: Vec<f64>,
}

impl TabularModel {
    /// A model with an empty table: every context gets the uniform backoff.
    pub fn uniform(name: &str, vocab: Vocab) -> Self {
        let content = vocab.content_ids();
        let lp = -(content.len() as f64).ln();
        let mut uniform = vec![f64::NEG_INFINITY; vocab.len()];
        for &i in &content {
            uniform[i] = lp;
        }
        TabularModel {
            name: name.to_string(),
            vocab,
            triggers: BTreeMap::new(),
            table: HashMap::new(),
            uniform,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Registers `word` as a trigger for `signature`.
    pub fn add_trigger(&mut self, word: &str, signature: &str) {
        self.triggers.insert(word.to_string(), signature.to_string());
    }

    /// Sets the distribution for `(signature, context)` from explicit
    /// probabilities. Mass not listed is spread evenly over the content
    /// tokens that are not listed. `signature = None` is the wildcard.
    pub fn set_probs(&mut self, signature: Option<&str>, context: &[TokenId], probs: &[(TokenId, f64)]) -> Result<()> {
        let v = self.vocab.len();
        let sp = self.vocab.special();
        let mut row = vec![0.0; v];
        let mut total = 0.0;
        for &(t, p) in probs {
            if t >= v {
                return Err(Error::InvalidTokenId { id: t, size: v });
            }
            if t == sp.mask_id || t == sp.pad_id {
                return Err(Error::Model("mask and pad cannot carry probability".into()));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Model(format!("probability {p} out of range")));
            }
            row[t] += p;
            total += p;
        }
        if total > 1.0 + 1e-12 {
            return Err(Error::Model(format!("probabilities sum to {total} > 1")));
        }
        let rest: Vec<TokenId> = self
            .vocab
            .content_ids()
            .into_iter()
            .filter(|&t| !probs.iter().any(|&(q, _)| q == t))
            .collect();
        let remainder = (1.0 - total).max(0.0);
        if remainder > 1e-12 {
            if rest.is_empty() {
                return Err(Error::Model(format!("probabilities sum to {total} < 1")));
            }
            let share = remainder / rest.len() as f64;
            for t in rest {
                row[t] = share;
            }
        }
        let z: f64 = row.iter().sum();
        let logs = row.iter().map(|&p| (p / z).ln()).collect();
        self.set_logprobs(signature, context, logs)
    }

    /// Sets a full log-probability row for `(signature, context)`.
    pub fn set_logprobs(&mut self, signature: Option<&str>, context: &[TokenId], logprobs: Vec<f64>) -> Result<()> {
        if context.len() > MAX_ORDER {
            return Err(Error::Model(format!("context longer than {MAX_ORDER} tokens")));
        }
        if logprobs.len() != self.vocab.len() {
            return Err(Error::Model("row length differs from vocabulary size".into()));
        }
        if let Some(&t) = context.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::InvalidTokenId {
                id: t,
                size: self.vocab.len(),
            });
        }
        let z = super::logsumexp(&logprobs);
        if z.is_nan() || z.abs() >= 1e-9 {
            return Err(Error::Model(format!("row does not normalise (logsumexp = {z})")));
        }
        self.table
            .insert((signature.map(str::to_string), context.to_vec()), logprobs);
        Ok(())
    }

    /// Signature of an input text, if any trigger occurs in it.
    pub fn signature_of(&self, text: &str) -> Option<&str> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
            .find_map(|w| self.triggers.get(w).map(String::as_str))
    }

    fn row(&self, signature: Option<&str>, prefix: &[TokenId]) -> &[f64] {
        let ctx = prefix[prefix.len().saturating_sub(MAX_ORDER)..].to_vec();
        if let Some(sig) = signature {
            if let Some(r) = self.table.get(&(Some(sig.to_string()), ctx.clone())) {
                return r;
            }
        }
        self.table.get(&(None, ctx)).map(Vec::as_slice).unwrap_or(&self.uniform)
    }
}

impl ConditionalModel for TabularModel {
    fn backend(&self) -> Backend {
        Backend::Tabular
    }

    fn identifier(&self) -> String {
        self.name.clone()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn special(&self) -> SpecialTokens {
        self.vocab.special()
    }

    fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        self.vocab.tokenize(text)
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        self.vocab.detokenize(ids)
    }

    fn next_token_logprobs(&self, input: &RenderedInput, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.row(self.signature_of(&input.text), prefix).to_vec())
    }

    fn sequence_logprob(&self, input: &RenderedInput, target: &[TokenId]) -> Result<f64> {
        let sig = self.signature_of(&input.text);
        Ok((0..target.len()).map(|j| self.row(sig, &target[..j])[target[j]]).sum())
    }
}

#[derive(Serialize, Deserialize)]
struct TabularRepr {
    format: String,
    name: String,
    vocab: Vocab,
    #[serde(default)]
    triggers: BTreeMap<String, String>,
    #[serde(default)]
    table: Vec<EntryRepr>,
}

#[derive(Serialize, Deserialize)]
struct EntryRepr {
    signature: Option<String>,
    /// Context as token strings.
    context: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_logprobs")]
    logprobs: Option<Vec<f64>>,
    /// Alternative hand-written form; see [`TabularModel::set_probs`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<BTreeMap<String, f64>>,
}

mod opt_logprobs {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::logprob_serde::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        Ok(Option::<Vec<Option<f64>>>::deserialize(d)?.map(super::logprob_serde::decode))
    }
}

pub const TABULAR_FORMAT: &str = "autoseq-tabular/1";

impl TryFrom<TabularRepr> for TabularModel {
    type Error = Error;

    fn try_from(r: TabularRepr) -> Result<Self> {
        if r.format != TABULAR_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported tabular format {:?}, expected {TABULAR_FORMAT}",
                r.format
            )));
        }
        let mut m = TabularModel::uniform(&r.name, r.vocab);
        m.triggers = r.triggers;
        for e in r.table {
            let ctx = e
                .context
                .iter()
                .map(|t| m.vocab.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
                .collect::<Result<Vec<_>>>()?;
            match (e.logprobs, e.probs) {
                (Some(lp), None) => m.set_logprobs(e.signature.as_deref(), &ctx, lp)?,
                (None, Some(p)) => {
                    let probs = p
                        .iter()
                        .map(|(t, &x)| {
                            m.vocab
                                .id(t)
                                .map(|i| (i, x))
                                .ok_or_else(|| Error::UnknownToken(t.clone()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    m.set_probs(e.signature.as_deref(), &ctx, &probs)?
                }
                _ => {
                    return Err(Error::Checkpoint(
                        "table entry needs exactly one of `logprobs` or `probs`".into(),
                    ))
                }
            }
        }
        Ok(m)
    }
}

impl From<TabularModel> for TabularRepr {
    fn from(m: TabularModel) -> Self {
        let mut table: Vec<EntryRepr> = m
            .table
            .iter()
            .map(|((sig, ctx), row)| EntryRepr {
                signature: sig.clone(),
                context: ctx
                    .iter()
                    .map(|&t| m.vocab.token(t).unwrap_or_default().to_string())
                    .collect(),
                logprobs: Some(row.clone()),
                probs: None,
            })
            .collect();
        table.sort_by(|a, b| (&a.signature, &a.context).cmp(&(&b.signature, &b.context)));
        TabularRepr {
            format: TABULAR_FORMAT.to_string(),
            name: m.name,
            vocab: m.vocab,
            triggers: m.triggers,
            table,
        }
    }
}

impl TabularModel {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{logsumexp, ModelHandle};

    fn vocab4() -> Vocab {
        Vocab::with_specials(["a", "b", "c", "d"]).unwrap()
    }

    fn input(text: &str) -> RenderedInput {
        RenderedInput::from_text(text).unwrap()
    }

    #[test]
    fn uniform_entries() {
        let m = ModelHandle::new(TabularModel::uniform("u", vocab4()));
        let row = m.next_token_logprobs(&input("hi [MASK]"), &[]).unwrap();
        for id in m.content_ids() {
            assert!((row[id] - (0.25f64).ln()).abs() < 1e-15);
            assert!((row[id] + 1.386294).abs() < 1e-6);
        }
        assert!(logsumexp(&row).abs() < 1e-9);
        let two = m.sequence_logprob(&input("hi [MASK]"), &[3, 4]).unwrap();
        assert!((two - 2.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!((two + 2.772589).abs() < 1e-6);
    }

    #[test]
    fn table_lookup_and_chain_rule() {
        let v = vocab4();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        let mut t = TabularModel::uniform("t", v);
        t.set_probs(None, &[], &[(a, 0.5)]).unwrap();
        t.set_probs(None, &[a], &[(b, 0.25)]).unwrap();
        let m = ModelHandle::new(t);
        let x = input("[MASK]");
        assert!((m.next_token_logprobs(&x, &[]).unwrap()[a] - 0.5f64.ln()).abs() < 1e-15);
        let lp = m.sequence_logprob(&x, &[a, b]).unwrap();
        assert!((lp - 0.125f64.ln()).abs() < 1e-12);
        assert!((lp + 2.079442).abs() < 1e-6);
        assert!(matches!(m.sequence_logprob(&x, &[]), Err(Error::EmptyLabelSequence)));
        assert!(matches!(
            m.next_token_logprobs(&x, &[42]),
            Err(Error::InvalidTokenId { id: 42, .. })
        ));
    }

    #[test]
    fn deterministic_chain_scores_zero() {
        let v = vocab4();
        let (a, b, eos) = (v.id("a").unwrap(), v.id("b").unwrap(), v.special().eos_id);
        let mut t = TabularModel::uniform("det", v);
        t.set_probs(None, &[], &[(a, 1.0)]).unwrap();
        t.set_probs(None, &[a], &[(b, 1.0)]).unwrap();
        t.set_probs(None, &[a, b], &[(eos, 1.0)]).unwrap();
        let m = ModelHandle::new(t);
        assert_eq!(m.sequence_logprob(&input("[MASK]"), &[a, b, eos]).unwrap(), 0.0);
    }

    #[test]
    fn signatures_and_backoff() {
        let v = vocab4();
        let (a, c) = (v.id("a").unwrap(), v.id("c").unwrap());
        let mut t = TabularModel::uniform("s", v);
        t.add_trigger("great", "pos");
        t.set_probs(Some("pos"), &[], &[(a, 0.9)]).unwrap();
        t.set_probs(None, &[], &[(c, 0.7)]).unwrap();
        assert_eq!(t.signature_of("A great, film [MASK]"), Some("pos"));
        assert_eq!(t.signature_of("meh [MASK]"), None);
        let m = ModelHandle::new(t);
        let pos = m.next_token_logprobs(&input("so great! [MASK]"), &[]).unwrap();
        assert!((pos[a] - 0.9f64.ln()).abs() < 1e-12);
        let other = m.next_token_logprobs(&input("meh [MASK]"), &[]).unwrap();
        assert!((other[c] - 0.7f64.ln()).abs() < 1e-12);
        // unseen context falls back to uniform
        let deep = m.next_token_logprobs(&input("so great [MASK]"), &[a, a, a]).unwrap();
        assert!((deep[c] - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rows() {
        let v = vocab4();
        let sp = v.special();
        let mut t = TabularModel::uniform("bad", v);
        assert!(t.set_probs(None, &[], &[(3, 0.7), (4, 0.6)]).is_err());
        assert!(t.set_probs(None, &[], &[(sp.mask_id, 0.1)]).is_err());
        assert!(t.set_probs(None, &[3, 3, 3], &[(3, 1.0)]).is_err());
        assert!(t.set_logprobs(None, &[], vec![0.0; 7]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = vocab4();
        let eos = v.special().eos_id;
        let mut t = TabularModel::uniform("rt", v);
        t.add_trigger("good", "pos");
        t.set_probs(Some("pos"), &[3], &[(4, 0.3), (eos, 0.2)]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: TabularModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);

        let hand = r#"{"format":"autoseq-tabular/1","name":"h",
            "vocab":{"tokens":["<pad>","</s>","[MASK]","x","y"],"mask_id":2,"eos_id":1,"pad_id":0},
            "table":[{"signature":null,"context":[],"probs":{"x":0.75}}]}"#;
        let h: TabularModel = serde_json::from_str(hand).unwrap();
        let row = h.next_token_logprobs(&input("[MASK]"), &[]).unwrap();
        assert!((row[3] - 0.75f64.ln()).abs() < 1e-12);
        assert!((row[4] - 0.25f64.ln()).abs() < 1e-12);
    }
}
