//! Contrastive re-ranking of candidates and best-first enumeration of label
//! mappings.
//!
//! A candidate's contrastive score for class `y` is its mean sequence
//! log-probability over the class's training examples minus the mean over all
//! other training examples. Every score is first shifted by the score of the
//! first training example in split order; the difference of means is
//! unchanged mathematically, but a sequence that scores the same everywhere
//! then comes out as exactly `0.0`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::beamsearch::Candidate;
use crate::corpus::FewShotSplit;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lm::{ModelHandle, TokenId};
use crate::scoring::{LabelMapping, MappingEntry};
use crate::templating::{render_all, RenderedInput, Template};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMapping {
    pub mapping: LabelMapping,
    /// Sum of the chosen candidates' contrastive scores, in class order.
    #[serde(with = "crate::persist::float")]
    pub combo_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::persist::opt_float")]
    pub dev_metric: Option<f64>,
    /// Position of each class's candidate in its re-ranked list.
    #[serde(default)]
    pub ranks: Vec<usize>,
}

/// Difference of shifted means. Empty sides are an error; `NaN` (both sides
/// `-inf`) becomes `-inf`.
pub fn contrastive_from_scores(in_class: &[f64], out_class: &[f64], shift: f64) -> Result<f64> {
    if in_class.is_empty() || out_class.is_empty() {
        return Err(Error::Search(
            "contrastive score needs examples both in and outside the class".into(),
        ));
    }
    let mean = |xs: &[f64]| xs.iter().map(|x| x - shift).sum::<f64>() / xs.len() as f64;
    let d = mean(in_class) - mean(out_class);
    Ok(if d.is_nan() { f64::NEG_INFINITY } else { d })
}

fn shift_of(scores: &[f64]) -> f64 {
    scores.iter().copied().find(|s| s.is_finite()).unwrap_or(0.0)
}

struct TrainView {
    inputs: Vec<RenderedInput>,
    labels: Vec<String>,
}

impl TrainView {
    fn new(template: &Template, split: &FewShotSplit) -> Result<Self> {
        Ok(TrainView {
            inputs: render_all(template, &split.train)?,
            labels: split
                .train
                .iter()
                .map(|e| e.label.clone().unwrap_or_default())
                .collect(),
        })
    }

    fn scores(&self, model: &ModelHandle, seq: &[TokenId]) -> Result<Vec<f64>> {
        self.inputs.iter().map(|x| model.sequence_logprob(x, seq)).collect()
    }

    fn contrastive(&self, class: &str, scores: &[f64]) -> Result<f64> {
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (l, &s) in self.labels.iter().zip(scores) {
            if l == class {
                inside.push(s)
            } else {
                outside.push(s)
            }
        }
        if inside.is_empty() {
            return Err(Error::Search(format!("class {class:?} has no training examples")));
        }
        contrastive_from_scores(&inside, &outside, shift_of(scores))
    }
}

pub fn contrastive_score(
    model: &ModelHandle,
    template: &Template,
    split: &FewShotSplit,
    class: &str,
    seq: &[TokenId],
) -> Result<f64> {
    let view = TrainView::new(template, split)?;
    view.contrastive(class, &view.scores(model, seq)?)
}

/// Contrastive score first, then generation score, then token ids.
pub fn rerank_order(a: &Candidate, b: &Candidate) -> Ordering {
    let c = |x: &Candidate| x.contrastive_score.unwrap_or(f64::NEG_INFINITY);
    c(b).total_cmp(&c(a))
        .then_with(|| b.gen_score.total_cmp(&a.gen_score))
        .then_with(|| a.seq.cmp(&b.seq))
}

/// Fills `contrastive_score` on every candidate and sorts each class's list
/// by [`rerank_order`].
pub fn rerank_candidates(
    model: &ModelHandle,
    template: &Template,
    split: &FewShotSplit,
    candidates: &IndexMap<String, Vec<Candidate>>,
    exec: Exec,
) -> Result<IndexMap<String, Vec<Candidate>>> {
    let view = TrainView::new(template, split)?;
    let flat: Vec<(&String, &Candidate)> = candidates
        .iter()
        .flat_map(|(class, list)| list.iter().map(move |c| (class, c)))
        .collect();
    let scores = exec.try_map(&flat, |(class, c)| {
        view.contrastive(class, &view.scores(model, &c.seq)?)
    })?;
    let mut out: IndexMap<String, Vec<Candidate>> = candidates.keys().map(|k| (k.clone(), Vec::new())).collect();
    for ((class, c), s) in flat.into_iter().zip(scores) {
        let mut c = c.clone();
        c.contrastive_score = Some(s);
        out[class.as_str()].push(c);
    }
    for list in out.values_mut() {
        list.sort_by(rerank_order);
    }
    Ok(out)
}

#[derive(PartialEq)]
struct Node {
    sum: f64,
    idx: Vec<usize>,
}

impl Eq for Node {}

impl Ord for Node {
    /// Max-heap order: larger sum, then lexicographically smaller index vector.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sum.total_cmp(&other.sum).then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sum of the selected scores, added in list order.
pub fn combo_sum(scores: &[Vec<f64>], idx: &[usize]) -> f64 {
    scores.iter().zip(idx).map(|(s, &i)| s[i]).sum()
}

/// The `n` best selections (one index per list) by [`combo_sum`], ties by
/// lexicographic index vector, skipping selections rejected by `valid`.
/// Each list must be sorted non-increasing.
pub fn k_best_combinations<F>(scores: &[Vec<f64>], n: usize, valid: F) -> Result<Vec<(Vec<usize>, f64)>>
where
    F: Fn(&[usize]) -> bool,
{
    if scores.is_empty() || scores.iter().any(Vec::is_empty) {
        return Err(Error::Search("every class needs at least one candidate".into()));
    }
    for s in scores {
        if s.windows(2).any(|w| w[0].total_cmp(&w[1]) == Ordering::Less) {
            return Err(Error::Search(
                "candidate scores must be sorted in descending order".into(),
            ));
        }
    }
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    let start = vec![0; scores.len()];
    seen.insert(start.clone());
    heap.push(Node {
        sum: combo_sum(scores, &start),
        idx: start,
    });
    let mut out = Vec::new();
    while out.len() < n {
        let Some(Node { sum, idx }) = heap.pop() else { break };
        for c in 0..idx.len() {
            if idx[c] + 1 < scores[c].len() {
                let mut next = idx.clone();
                next[c] += 1;
                if seen.insert(next.clone()) {
                    heap.push(Node {
                        sum: combo_sum(scores, &next),
                        idx: next,
                    });
                }
            }
        }
        if valid(&idx) {
            out.push((idx, sum));
        }
    }
    Ok(out)
}

/// Top `n` label mappings from re-ranked per-class lists. A mapping that
/// gives two classes the same token sequence is skipped.
pub fn top_n_mappings(ranked: &IndexMap<String, Vec<Candidate>>, n: usize) -> Result<Vec<ScoredMapping>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let lists: Vec<&Vec<Candidate>> = ranked.values().collect();
    let scores = lists
        .iter()
        .zip(ranked.keys())
        .map(|(l, class)| {
            l.iter()
                .map(|c| {
                    c.contrastive_score.ok_or_else(|| {
                        Error::Search(format!(
                            "candidate {:?} of class {class:?} has no contrastive score",
                            c.text
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let injective = |idx: &[usize]| {
        (0..idx.len()).all(|a| (a + 1..idx.len()).all(|b| lists[a][idx[a]].seq != lists[b][idx[b]].seq))
    };
    let best = k_best_combinations(&scores, n, injective)?;
    if best.is_empty() {
        return Err(Error::Search(
            "no combination assigns distinct sequences to every class".into(),
        ));
    }
    best.into_iter()
        .map(|(idx, sum)| {
            let entries = ranked
                .keys()
                .zip(&idx)
                .zip(&lists)
                .map(|((class, &i), l)| {
                    (
                        class.clone(),
                        MappingEntry {
                            text: l[i].text.clone(),
                            tokens: l[i].seq.clone(),
                        },
                    )
                })
                .collect();
            Ok(ScoredMapping {
                mapping: LabelMapping::from_entries(entries)?,
                combo_score: sum,
                dev_metric: None,
                ranks: idx,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::TokenSeq;

    fn cand(seq: &[usize], c: f64) -> Candidate {
        Candidate {
            seq: TokenSeq(seq.to_vec()),
            text: format!("{seq:?}"),
            gen_score: 0.0,
            contrastive_score: Some(c),
        }
    }

    #[test]
    fn contrastive_arithmetic() {
        assert_eq!(contrastive_from_scores(&[-1.0, -1.0], &[-3.0], 0.0).unwrap(), 2.0);
        let q = -0.1 - 0.2;
        assert_eq!(contrastive_from_scores(&[q; 5], &[q; 11], q).unwrap(), 0.0);
        assert!(contrastive_from_scores(&[-1.0], &[], 0.0).is_err());
        assert_eq!(
            contrastive_from_scores(&[f64::NEG_INFINITY], &[f64::NEG_INFINITY], 0.0).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn two_by_two_tie_break() {
        let ranked: IndexMap<String, Vec<Candidate>> = [
            ("a".to_string(), vec![cand(&[1], 3.0), cand(&[2], 1.0)]),
            ("b".to_string(), vec![cand(&[3], 2.0), cand(&[4], 0.0)]),
        ]
        .into_iter()
        .collect();
        let top = top_n_mappings(&ranked, 3).unwrap();
        let got: Vec<(Vec<usize>, f64)> = top.iter().map(|m| (m.ranks.clone(), m.combo_score)).collect();
        assert_eq!(got, vec![(vec![0, 0], 5.0), (vec![0, 1], 3.0), (vec![1, 0], 3.0)]);
        assert_eq!(top_n_mappings(&ranked, 1).unwrap()[0].ranks, vec![0, 0]);
    }

    #[test]
    fn shared_sequence_is_skipped() {
        let ranked: IndexMap<String, Vec<Candidate>> = [
            ("a".to_string(), vec![cand(&[7], 3.0), cand(&[2], 1.0)]),
            ("b".to_string(), vec![cand(&[7], 2.0), cand(&[4], 0.0)]),
        ]
        .into_iter()
        .collect();
        let top = top_n_mappings(&ranked, 1).unwrap();
        assert_eq!(top[0].ranks, vec![0, 1]);
        let only: IndexMap<String, Vec<Candidate>> = [
            ("a".to_string(), vec![cand(&[7], 0.0)]),
            ("b".to_string(), vec![cand(&[7], 0.0)]),
        ]
        .into_iter()
        .collect();
        assert!(top_n_mappings(&only, 5).is_err());
    }

    #[test]
    fn unsorted_lists_are_rejected() {
        assert!(k_best_combinations(&[vec![1.0, 2.0]], 1, |_| true).is_err());
        assert!(k_best_combinations(&[vec![]], 1, |_| true).is_err());
    }
}
