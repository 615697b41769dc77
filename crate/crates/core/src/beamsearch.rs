//! Per-class candidate generation by beam search over next-token
//! log-probabilities summed across the class's examples.
//!
//! Every example is conditioned independently; at each step the rows of all
//! examples are added and the sum drives expansion. A hypothesis is extended
//! with content tokens only. EOS completes it (it is kept as the last token so
//! the reported score is exactly the summed sequence log-probability), as does
//! reaching `max_len` content tokens. EOS is not allowed as the first token.
//!
//! Expansions with a `-inf` aggregated score are dropped.

use std::cmp::Ordering;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, FewShotSplit};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lm::{ModelHandle, TokenId, TokenSeq};
use crate::templating::{render_all, RenderedInput, Template};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub beam_width: usize,
    /// Content tokens per candidate; EOS is not counted.
    pub max_len: usize,
    /// Completed candidates are ranked by `gen_score / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam_width: 50,
            max_len: 20,
            length_penalty: 0.0,
        }
    }
}

impl SearchConfig {
    /// Single-token label words.
    pub fn autoword() -> Self {
        SearchConfig {
            max_len: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_width and max_len must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seq: TokenSeq,
    pub text: String,
    /// Sum over the class's examples of the sequence log-probability.
    #[serde(with = "crate::persist::float")]
    pub gen_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::persist::opt_float")]
    pub contrastive_score: Option<f64>,
}

#[derive(Debug, Clone)]
struct Hyp {
    seq: Vec<TokenId>,
    score: f64,
}

/// Higher score first, then lexicographic token ids.
fn by_score(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.seq.cmp(&b.seq))
}

fn rank_key(h: &Hyp, penalty: f64) -> f64 {
    if penalty == 0.0 {
        h.score
    } else {
        h.score / (h.seq.len() as f64).powf(penalty)
    }
}

/// Beam search for one class given its rendered inputs.
pub fn generate_from_inputs(
    model: &ModelHandle,
    inputs: &[RenderedInput],
    config: &SearchConfig,
    exec: Exec,
) -> Result<Vec<Candidate>> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::Search("no examples to generate from".into()));
    }
    let content = model.content_ids();
    let eos = model.special().eos_id;
    let width = config.beam_width;
    let by_rank = |a: &Hyp, b: &Hyp| {
        rank_key(b, config.length_penalty)
            .total_cmp(&rank_key(a, config.length_penalty))
            .then_with(|| a.seq.cmp(&b.seq))
    };

    let mut live = vec![Hyp {
        seq: Vec::new(),
        score: 0.0,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    for step in 0..config.max_len {
        let prefixes: Vec<&[TokenId]> = live.iter().map(|h| h.seq.as_slice()).collect();
        let per_input = exec.try_map(inputs, |x| model.next_token_logprobs_batch(x, &prefixes))?;
        let last = step + 1 == config.max_len;
        let mut next = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let mut row = vec![0.0; model.vocab_size()];
            for rows in &per_input {
                for (acc, v) in row.iter_mut().zip(&rows[h]) {
                    *acc += v;
                }
            }
            if step > 0 && row[eos] > f64::NEG_INFINITY {
                let mut seq = hyp.seq.clone();
                seq.push(eos);
                done.push(Hyp {
                    seq,
                    score: hyp.score + row[eos],
                });
            }
            for &t in &content {
                let score = hyp.score + row[t];
                if score == f64::NEG_INFINITY || score.is_nan() {
                    continue;
                }
                let mut seq = hyp.seq.clone();
                seq.push(t);
                if last {
                    done.push(Hyp { seq, score });
                } else {
                    next.push(Hyp { seq, score });
                }
            }
        }
        next.sort_by(by_score);
        next.truncate(width);
        done.sort_by(by_rank);
        done.truncate(width);
        live = next;
        // Extensions never score higher than their prefix, so with raw
        // ranking nothing live can still enter a full pool.
        let pool_closed = config.length_penalty == 0.0
            && done.len() == width
            && live.first().is_none_or(|h| h.score < done[width - 1].score);
        if live.is_empty() || pool_closed {
            break;
        }
    }
    done.into_iter()
        .map(|h| {
            Ok(Candidate {
                text: model.detokenize(&h.seq)?,
                seq: TokenSeq(h.seq),
                gen_score: h.score,
                contrastive_score: None,
            })
        })
        .collect()
}

/// Beam search over one class's examples, which must all carry the same label.
pub fn generate_candidates(
    model: &ModelHandle,
    template: &Template,
    class_examples: &[&Example],
    config: &SearchConfig,
    exec: Exec,
) -> Result<Vec<Candidate>> {
    if let Some(first) = class_examples.first() {
        if class_examples.iter().any(|e| e.label != first.label) {
            return Err(Error::Search("class examples carry different labels".into()));
        }
    }
    let inputs = render_all(template, class_examples.iter().copied())?;
    generate_from_inputs(model, &inputs, config, exec)
}

/// Candidates for every class of the split, from that class's training examples.
pub fn generate_all(
    model: &ModelHandle,
    template: &Template,
    split: &FewShotSplit,
    config: &SearchConfig,
    exec: Exec,
) -> Result<IndexMap<String, Vec<Candidate>>> {
    let lists = exec.try_map(&split.labels, |label| {
        let examples = split.class_train(label);
        generate_candidates(model, template, &examples, config, exec).map_err(|e| match e {
            Error::Search(m) => Error::Search(format!("class {label:?}: {m}")),
            e => e,
        })
    })?;
    Ok(split.labels.iter().cloned().zip(lists).collect())
}

/// Largest absolute difference between a candidate's `gen_score` and the
/// independently recomputed sum of per-example sequence log-probabilities.
pub fn max_gen_score_error(model: &ModelHandle, inputs: &[RenderedInput], candidates: &[Candidate]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in candidates {
        let mut total = 0.0;
        for x in inputs {
            total += model.sequence_logprob(x, &c.seq)?;
        }
        worst = worst.max((total - c.gen_score).abs());
    }
    Ok(worst)
}
