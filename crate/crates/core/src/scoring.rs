//! Label mappings and classification by label-sequence log-probability.
//!
//! A class's score is the raw summed log-probability of its label sequence at
//! the mask; there is no length normalization.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TaskSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lm::{ModelHandle, TokenSeq};
use crate::templating::{RenderedInput, Template};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub text: String,
    pub tokens: TokenSeq,
}

/// Injective map from class label to label sequence, in task label order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMapping {
    entries: IndexMap<String, MappingEntry>,
}

impl LabelMapping {
    /// Builds and validates a mapping; entries are reordered to task order.
    pub fn new(task: &TaskSpec, entries: IndexMap<String, MappingEntry>) -> Result<Self> {
        let mut ordered = IndexMap::with_capacity(entries.len());
        for label in &task.labels {
            let e = entries
                .get(label)
                .ok_or_else(|| Error::InvalidMapping(format!("no sequence for class {label:?}")))?;
            ordered.insert(label.clone(), e.clone());
        }
        if let Some(extra) = entries.keys().find(|k| task.class_index(k).is_none()) {
            return Err(Error::InvalidMapping(format!("{extra:?} is not a task class")));
        }
        let m = LabelMapping { entries: ordered };
        m.check()?;
        Ok(m)
    }

    /// Mapping over whatever classes `entries` names, in its order.
    pub fn from_entries(entries: IndexMap<String, MappingEntry>) -> Result<Self> {
        let m = LabelMapping { entries };
        m.check()?;
        Ok(m)
    }

    /// Tokenizes each class's text with `model`.
    pub fn from_texts<S: AsRef<str>>(
        task: &TaskSpec,
        model: &ModelHandle,
        texts: &IndexMap<String, S>,
    ) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (class, text) in texts {
            let text = text.as_ref().trim().to_string();
            let tokens = model.tokenize(&text)?;
            entries.insert(class.clone(), MappingEntry { text, tokens });
        }
        Self::new(task, entries)
    }

    fn check(&self) -> Result<()> {
        for (i, (class, e)) in self.entries.iter().enumerate() {
            if e.tokens.is_empty() {
                return Err(Error::InvalidMapping(format!(
                    "class {class:?} maps to an empty sequence"
                )));
            }
            if let Some((other, _)) = self.entries.iter().take(i).find(|(_, o)| o.tokens == e.tokens) {
                return Err(Error::InvalidMapping(format!(
                    "classes {other:?} and {class:?} share the sequence {:?}",
                    e.text
                )));
            }
        }
        Ok(())
    }

    /// Checks that the mapping covers exactly the task's classes in order.
    pub fn validate_for(&self, task: &TaskSpec) -> Result<()> {
        if self.entries.len() != task.labels.len() || self.entries.keys().zip(&task.labels).any(|(a, b)| a != b) {
            return Err(Error::InvalidMapping(format!(
                "mapping classes {:?} do not match task labels {:?}",
                self.entries.keys().collect::<Vec<_>>(),
                task.labels
            )));
        }
        self.check()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: &str) -> Option<&MappingEntry> {
        self.entries.get(class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &MappingEntry)> {
        self.entries.iter()
    }

    pub fn classes(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Class → display text.
    pub fn texts(&self) -> IndexMap<String, String> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.text.clone())).collect()
    }

    /// Same texts, tokenized for another model. Identity when the vocabularies agree.
    pub fn retokenize(&self, task: &TaskSpec, model: &ModelHandle) -> Result<Self> {
        Self::from_texts(task, model, &self.texts())
    }

    /// Target sequence for a gold label.
    pub fn target(&self, class: &str) -> Result<&TokenSeq> {
        self.entries
            .get(class)
            .map(|e| &e.tokens)
            .ok_or_else(|| Error::InvalidMapping(format!("class {class:?} is not mapped")))
    }
}

/// `score[y] = log P(M(y) | T(x))` for every mapped class, in mapping order.
pub fn class_scores(
    model: &ModelHandle,
    template: &Template,
    example: &Example,
    mapping: &LabelMapping,
) -> Result<IndexMap<String, f64>> {
    let input = template.render(example)?;
    scores_for_input(model, &input, mapping)
}

pub fn scores_for_input(
    model: &ModelHandle,
    input: &RenderedInput,
    mapping: &LabelMapping,
) -> Result<IndexMap<String, f64>> {
    mapping
        .iter()
        .map(|(c, e)| Ok((c.clone(), model.sequence_logprob(input, &e.tokens)?)))
        .collect()
}

/// Per-token average of each class score. Diagnostic only; never used by [`predict`].
pub fn normalized_scores(scores: &IndexMap<String, f64>, mapping: &LabelMapping) -> IndexMap<String, f64> {
    scores
        .iter()
        .map(|(c, s)| {
            let n = mapping.get(c).map_or(1, |e| e.tokens.len());
            (c.clone(), s / n as f64)
        })
        .collect()
}

/// Highest-scoring class; the earliest class wins ties.
pub fn argmax_class(scores: &IndexMap<String, f64>) -> Result<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (c, &s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::InvalidMapping("no classes to score".into()))
}

pub fn predict(model: &ModelHandle, template: &Template, example: &Example, mapping: &LabelMapping) -> Result<String> {
    let scores = class_scores(model, template, example, mapping)?;
    argmax_class(&scores).map(str::to_string)
}

pub fn predict_all(
    model: &ModelHandle,
    template: &Template,
    examples: &[Example],
    mapping: &LabelMapping,
    exec: Exec,
) -> Result<Vec<String>> {
    exec.try_map(examples, |ex| predict(model, template, ex, mapping))
}
