//! JSON-lines persistence for candidates and mappings, and serde helpers for
//! scores that may be infinite.
//!
//! Candidate lines: `{"class", "tokens", "text", "gen_score", "contrastive_score"?}`.
//! Mapping lines: `{"mapping": {class: text}, "tokens": {class: [ids]},
//! "combo_score", "dev_metric"?, "ranks"}`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::beamsearch::Candidate;
use crate::error::{Error, Result};
use crate::lm::TokenSeq;
use crate::rerank::ScoredMapping;
use crate::scoring::{LabelMapping, MappingEntry};

/// `f64` that round-trips through JSON including `±inf` and `NaN`, which are
/// written as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod float {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(de::Error::custom(format!("not a number: {t:?}"))),
            },
        }
    }
}

pub mod opt_float {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    struct W(#[serde(with = "super::float")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => super::float::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Serialize, Deserialize)]
struct CandidateLine {
    class: String,
    tokens: TokenSeq,
    text: String,
    #[serde(with = "float")]
    gen_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_float")]
    contrastive_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct MappingLine {
    mapping: IndexMap<String, String>,
    tokens: IndexMap<String, TokenSeq>,
    #[serde(with = "float")]
    combo_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_float")]
    dev_metric: Option<f64>,
    #[serde(default)]
    ranks: Vec<usize>,
}

fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn candidates_to_jsonl(path: &Path, by_class: &IndexMap<String, Vec<Candidate>>) -> Result<()> {
    write_lines(
        path,
        by_class.iter().flat_map(|(class, list)| {
            list.iter().map(move |c| CandidateLine {
                class: class.clone(),
                tokens: c.seq.clone(),
                text: c.text.clone(),
                gen_score: c.gen_score,
                contrastive_score: c.contrastive_score,
            })
        }),
    )
}

/// Candidates grouped by class in order of first appearance.
pub fn candidates_from_jsonl(path: &Path) -> Result<IndexMap<String, Vec<Candidate>>> {
    let mut out: IndexMap<String, Vec<Candidate>> = IndexMap::new();
    for l in read_lines::<CandidateLine>(path)? {
        out.entry(l.class).or_default().push(Candidate {
            seq: l.tokens,
            text: l.text,
            gen_score: l.gen_score,
            contrastive_score: l.contrastive_score,
        });
    }
    Ok(out)
}

pub fn mappings_to_jsonl(path: &Path, mappings: &[ScoredMapping]) -> Result<()> {
    write_lines(
        path,
        mappings.iter().map(|m| MappingLine {
            mapping: m.mapping.texts(),
            tokens: m.mapping.iter().map(|(c, e)| (c.clone(), e.tokens.clone())).collect(),
            combo_score: m.combo_score,
            dev_metric: m.dev_metric,
            ranks: m.ranks.clone(),
        }),
    )
}

pub fn mappings_from_jsonl(path: &Path) -> Result<Vec<ScoredMapping>> {
    read_lines::<MappingLine>(path)?
        .into_iter()
        .map(|l| {
            let entries =
                l.mapping
                    .into_iter()
                    .map(|(class, text)| {
                        let tokens =
                            l.tokens.get(&class).cloned().ok_or_else(|| {
                                Error::InvalidMapping(format!("no tokens recorded for class {class:?}"))
                            })?;
                        Ok((class, MappingEntry { text, tokens }))
                    })
                    .collect::<Result<IndexMap<_, _>>>()?;
            Ok(ScoredMapping {
                mapping: LabelMapping::from_entries(entries)?,
                combo_score: l.combo_score,
                dev_metric: l.dev_metric,
                ranks: l.ranks,
            })
        })
        .collect()
}

/// Hand-written mapping file: a JSON object `{class: text}`.
pub fn mapping_texts_from_json(path: &Path) -> Result<IndexMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let texts: IndexMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(texts)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
