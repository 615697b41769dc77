//! Labeled datasets, task descriptions and deterministic few-shot splits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One input with its ordered text fields and an optional gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub fields: Vec<String>,
    pub label: Option<String>,
}

impl Example {
    /// Validating constructor. Trailing whitespace is stripped from every field.
    pub fn new<S: Into<String>>(fields: Vec<S>, label: Option<&str>) -> Result<Self> {
        let fields: Vec<String> = fields.into_iter().map(|f| f.into().trim_end().to_string()).collect();
        if fields.is_empty() {
            return Err(Error::InvalidExample("at least one field is required".into()));
        }
        if let Some(i) = fields.iter().position(|f| f.is_empty()) {
            return Err(Error::InvalidExample(format!("field {i} is empty")));
        }
        Ok(Example {
            fields,
            label: label.map(str::to_string),
        })
    }

    pub fn labeled<S: Into<String>>(fields: Vec<S>, label: &str) -> Result<Self> {
        Self::new(fields, Some(label))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    SingleSentence,
    SentencePair,
    BoolqStyle,
    CopaStyle,
    MultircStyle,
    WicStyle,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::SingleSentence,
        TaskKind::SentencePair,
        TaskKind::BoolqStyle,
        TaskKind::CopaStyle,
        TaskKind::MultircStyle,
        TaskKind::WicStyle,
    ];

    /// Number of text fields an example of this kind carries.
    pub fn arity(self) -> usize {
        match self {
            TaskKind::SingleSentence => 1,
            TaskKind::SentencePair | TaskKind::BoolqStyle => 2,
            TaskKind::MultircStyle | TaskKind::WicStyle => 3,
            TaskKind::CopaStyle => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SingleSentence => "single-sentence",
            TaskKind::SentencePair => "sentence-pair",
            TaskKind::BoolqStyle => "boolq-style",
            TaskKind::CopaStyle => "copa-style",
            TaskKind::MultircStyle => "multirc-style",
            TaskKind::WicStyle => "wic-style",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidTask(format!("unsupported task kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    F1,
    Matthews,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1 => "f1",
            MetricKind::Matthews => "matthews",
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "acc" => Ok(MetricKind::Accuracy),
            "f1" => Ok(MetricKind::F1),
            "matthews" | "mcc" => Ok(MetricKind::Matthews),
            _ => Err(Error::InvalidTask(format!("unknown metric {s:?}"))),
        }
    }
}

/// Task kind, ordered label space and reporting metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub metric: MetricKind,
    /// Class treated as positive by F1. Defaults to the first label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<String>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, labels: Vec<String>, metric: MetricKind) -> Result<Self> {
        let spec = TaskSpec {
            kind,
            labels,
            metric,
            positive_label: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a task whose labels are the distinct gold labels in order of first appearance.
    pub fn from_examples(kind: TaskKind, examples: &[Example], metric: MetricKind) -> Result<Self> {
        let spec = Self::new(kind, labels_in_order(examples)?, metric)?;
        spec.check_examples(examples)?;
        Ok(spec)
    }

    pub fn with_positive_label(mut self, label: &str) -> Result<Self> {
        self.positive_label = Some(label.to_string());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::InvalidTask(format!(
                "need at least 2 labels, got {}",
                self.labels.len()
            )));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(Error::InvalidTask(format!("duplicate label {l:?}")));
            }
        }
        if let Some(p) = &self.positive_label {
            if !self.labels.contains(p) {
                return Err(Error::InvalidTask(format!("positive label {p:?} is not a task label")));
            }
        }
        Ok(())
    }

    pub fn positive(&self) -> &str {
        self.positive_label.as_deref().unwrap_or(&self.labels[0])
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Every example has the task's arity and, when labeled, a known label.
    pub fn check_examples(&self, examples: &[Example]) -> Result<()> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.fields.len() != self.kind.arity() {
                return Err(Error::InvalidExample(format!(
                    "example {i} has {} fields, task {} expects {}",
                    ex.fields.len(),
                    self.kind,
                    self.kind.arity()
                )));
            }
            if let Some(l) = &ex.label {
                if self.class_index(l).is_none() {
                    return Err(Error::InvalidExample(format!(
                        "example {i} has label {l:?} outside the task label set"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn labels_in_order(examples: &[Example]) -> Result<Vec<String>> {
    let mut labels: Vec<String> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let l = ex
            .label
            .as_ref()
            .ok_or_else(|| Error::InvalidExample(format!("example {i} has no label")))?;
        if !labels.contains(l) {
            labels.push(l.clone());
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Tsv,
    JsonLines,
}

impl DataFormat {
    /// `.jsonl`/`.json` is JSON-lines, everything else TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => DataFormat::JsonLines,
            _ => DataFormat::Tsv,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(DataFormat::Tsv),
            "json-lines" | "jsonl" => Ok(DataFormat::JsonLines),
            _ => Err(Error::Config(format!("unknown data format {s:?}"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    fields: Vec<String>,
    #[serde(default)]
    label: Option<String>,
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format, &path.display().to_string())
}

/// Parses dataset text. `source` only appears in error messages.
pub fn parse_dataset(text: &str, format: DataFormat, source: &str) -> Result<Vec<Example>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut arity: Option<usize> = None;
    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (fields, label) = match format {
            DataFormat::Tsv => {
                let mut cols: Vec<&str> = raw.split('\t').collect();
                if cols.len() < 2 {
                    return Err(parse_err(
                        line_no,
                        "expected at least one field and a label column".into(),
                    ));
                }
                let label = cols.pop().unwrap().trim();
                let label = (!label.is_empty()).then(|| label.to_string());
                (cols.into_iter().map(str::to_string).collect::<Vec<_>>(), label)
            }
            DataFormat::JsonLines => {
                let rec: JsonRecord = serde_json::from_str(raw).map_err(|e| parse_err(line_no, e.to_string()))?;
                (rec.fields, rec.label)
            }
        };
        match arity {
            None => arity = Some(fields.len()),
            Some(a) if a != fields.len() => {
                return Err(parse_err(
                    line_no,
                    format!("ragged arity: {} fields, earlier records have {a}", fields.len()),
                ))
            }
            _ => {}
        }
        let ex = Example::new(fields, label.as_deref()).map_err(|e| parse_err(line_no, e.to_string()))?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::NoRecords(source.to_string()));
    }
    Ok(out)
}

/// Few-shot train and dev sets with `k_per_class` examples of every label in each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub seed: u64,
    pub k_per_class: usize,
}

impl FewShotSplit {
    /// Training examples of class `label`, in split order.
    pub fn class_train(&self, label: &str) -> Vec<&Example> {
        self.train
            .iter()
            .filter(|e| e.label.as_deref() == Some(label))
            .collect()
    }

    /// Training examples of every other class, in split order.
    pub fn complement_train(&self, label: &str) -> Vec<&Example> {
        self.train
            .iter()
            .filter(|e| e.label.as_deref() != Some(label))
            .collect()
    }
}

/// Samples a split with labels ordered by first appearance.
pub fn sample_few_shot(data: &[Example], k: usize, seed: u64) -> Result<FewShotSplit> {
    let labels = labels_in_order(data)?;
    sample_few_shot_with_labels(data, &labels, k, seed)
}

/// For every label: shuffle its example indices with a ChaCha stream keyed by
/// (seed, class index); the first `k` go to train and the next `k` to dev.
pub fn sample_few_shot_with_labels(data: &[Example], labels: &[String], k: usize, seed: u64) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    for (i, ex) in data.iter().enumerate() {
        let l = ex
            .label
            .as_deref()
            .ok_or_else(|| Error::InvalidExample(format!("example {i} has no label")))?;
        let c = labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::InvalidExample(format!("example {i} has unknown label {l:?}")))?;
        by_class[c].push(i);
    }
    let mut train = Vec::with_capacity(k * labels.len());
    let mut dev = Vec::with_capacity(k * labels.len());
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < 2 * k {
            return Err(Error::NotEnoughExamples {
                class: labels[c].clone(),
                available: idx.len(),
                needed: 2 * k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        idx.shuffle(&mut rng);
        train.extend(idx[..k].iter().map(|&i| data[i].clone()));
        dev.extend(idx[k..2 * k].iter().map(|&i| data[i].clone()));
    }
    Ok(FewShotSplit {
        labels: labels.to_vec(),
        train,
        dev,
        seed,
        k_per_class: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(per_class: usize) -> Vec<Example> {
        let mut v = Vec::new();
        for i in 0..per_class {
            v.push(Example::labeled(vec![format!("good {i}")], "positive").unwrap());
            v.push(Example::labeled(vec![format!("bad {i}")], "negative").unwrap());
        }
        v
    }

    #[test]
    fn tsv_two_lines() {
        let ex = parse_dataset("good\tpositive\nbad\tnegative\n", DataFormat::Tsv, "t").unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].fields, vec!["good"]);
        assert_eq!(ex[0].label.as_deref(), Some("positive"));
        assert_eq!(ex[1].label.as_deref(), Some("negative"));
    }

    #[test]
    fn empty_file_is_no_records() {
        let err = parse_dataset("", DataFormat::Tsv, "empty.tsv").unwrap_err();
        assert!(err.to_string().contains("no records"), "{err}");
    }

    #[test]
    fn json_lines_pair() {
        let ex = parse_dataset(
            r#"{"fields": ["premise", "hypothesis"], "label": "entailment"}"#,
            DataFormat::JsonLines,
            "p.jsonl",
        )
        .unwrap();
        assert_eq!(ex[0].fields.len(), TaskKind::SentencePair.arity());
        assert_eq!(ex[0].label.as_deref(), Some("entailment"));
        let unlabeled = parse_dataset(r#"{"fields": ["x"], "label": null}"#, DataFormat::JsonLines, "u").unwrap();
        assert_eq!(unlabeled[0].label, None);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_dataset("a\tx\n{oops\n", DataFormat::JsonLines, "f").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_dataset("a\tb\tx\nc\tx\n", DataFormat::Tsv, "f").unwrap_err();
        assert!(
            err.to_string().contains("line 2") && err.to_string().contains("ragged"),
            "{err}"
        );
        let err = parse_dataset("lonely\n", DataFormat::Tsv, "f").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn example_invariants() {
        assert!(Example::new(Vec::<String>::new(), None).is_err());
        assert!(Example::new(vec!["ok", "   "], None).is_err());
        assert_eq!(Example::new(vec!["trail  "], None).unwrap().fields[0], "trail");
    }

    #[test]
    fn task_spec_checks() {
        assert!(TaskSpec::new(TaskKind::SingleSentence, vec!["a".into()], MetricKind::Accuracy).is_err());
        assert!(TaskSpec::new(
            TaskKind::SingleSentence,
            vec!["a".into(), "a".into()],
            MetricKind::Accuracy
        )
        .is_err());
        let data = toy(3);
        let spec = TaskSpec::from_examples(TaskKind::SingleSentence, &data, MetricKind::F1).unwrap();
        assert_eq!(spec.labels, vec!["positive", "negative"]);
        assert!(TaskSpec::from_examples(TaskKind::SentencePair, &data, MetricKind::F1).is_err());
        assert_eq!("copa-style".parse::<TaskKind>().unwrap(), TaskKind::CopaStyle);
        assert!("regression".parse::<TaskKind>().is_err());
    }

    #[test]
    fn sixteen_shot_split() {
        let data = toy(100);
        let split = sample_few_shot(&data, 16, 13).unwrap();
        for l in &split.labels {
            assert_eq!(split.train.iter().filter(|e| e.label.as_ref() == Some(l)).count(), 16);
            assert_eq!(split.dev.iter().filter(|e| e.label.as_ref() == Some(l)).count(), 16);
        }
        for t in &split.train {
            assert!(!split.dev.contains(t));
        }
        let again = sample_few_shot(&data, 16, 13).unwrap();
        assert_eq!(
            serde_json::to_string(&split).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        let other = sample_few_shot(&data, 16, 14).unwrap();
        assert_ne!(split.train, other.train);
    }

    #[test]
    fn k1_uses_every_example_once() {
        let data = toy(2);
        let split = sample_few_shot(&data, 1, 0).unwrap();
        let mut used: Vec<&Example> = split.train.iter().chain(split.dev.iter()).collect();
        used.sort_by(|a, b| a.fields.cmp(&b.fields));
        let mut all: Vec<&Example> = data.iter().collect();
        all.sort_by(|a, b| a.fields.cmp(&b.fields));
        assert_eq!(used, all);
    }

    #[test]
    fn too_few_examples_names_the_class() {
        let mut data = toy(40);
        data.push(Example::labeled(vec!["meh"], "neutral").unwrap());
        let err = sample_few_shot(&data, 16, 1).unwrap_err();
        assert!(err.to_string().contains("\"neutral\""), "{err}");
    }

    #[test]
    fn class_views_partition_train() {
        let split = sample_few_shot(&toy(10), 4, 7).unwrap();
        for l in &split.labels {
            let inside = split.class_train(l);
            let outside = split.complement_train(l);
            assert_eq!(inside.len() + outside.len(), split.train.len());
            assert!(inside.iter().all(|e| !outside.contains(e)));
        }
    }
}
