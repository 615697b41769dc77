//! Run configuration: one TOML file plus command-line overrides.
//!
//! ```toml
//! workers = 0                  # 0: all cores, 1: sequential, n: n threads
//! out_dir = "runs/sst2"
//!
//! [task]
//! kind = "single-sentence"     # or sentence-pair, boolq-style, copa-style, multirc-style, wic-style
//! data = "train.tsv"           # .tsv (fields..., label) or .jsonl ({"fields", "label"})
//! labels = ["positive", "negative"]   # default: order of first appearance in the data
//! metric = "accuracy"          # accuracy | f1 | matthews
//! positive = "positive"        # F1 positive class, default the first label
//! template = "{0} It was [MASK] ."    # default: the task kind's built-in template
//!
//! [search]
//! k = 16
//! seed = 0
//! beam_width = 50
//! max_len = 20
//! length_penalty = 0.0
//! n = 20
//!
//! [finetune]
//! steps = 1000
//! batch_size = 8
//! learning_rate = 6e-5
//! validate_every = 100
//!
//! [generator]
//! backend = "tabular"          # tabular | tiny-neural | remote
//! path = "generator.json"
//!
//! [classifier]
//! backend = "remote"
//! endpoint = "tcp://127.0.0.1:7000"
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use autoseq::beamsearch::SearchConfig;
use autoseq::corpus::{MetricKind, TaskKind};
use autoseq::lm::{Backend, FineTuneConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub task: TaskSection,
    pub search: SearchSection,
    pub finetune: FineTuneConfig,
    pub generator: ModelSection,
    pub classifier: ModelSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workers: 0,
            out_dir: None,
            task: TaskSection::default(),
            search: SearchSection::default(),
            finetune: FineTuneConfig::default(),
            generator: ModelSection::default(),
            classifier: ModelSection {
                backend: Backend::TinyNeural,
                ..ModelSection::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub metric: MetricKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub k: usize,
    pub seed: u64,
    pub beam_width: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    pub n: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        SearchSection {
            k: 16,
            seed: 0,
            beam_width: s.beam_width,
            max_len: s.max_len,
            length_penalty: s.length_penalty,
            n: 20,
        }
    }
}

impl SearchSection {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            beam_width: self.beam_width,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backend: Backend,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backend: Backend::Tabular,
            path: None,
            endpoint: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        rebase(&mut config.out_dir);
        rebase(&mut config.task.data);
        rebase(&mut config.generator.path);
        rebase(&mut config.classifier.path);
        Ok(config)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        match &self.out_dir {
            Some(p) => Ok(p),
            None => bail!(UsageError("no output directory; pass --out-dir or set out_dir".into())),
        }
    }

    pub fn data(&self) -> Result<&Path> {
        match &self.task.data {
            Some(p) => Ok(p),
            None => bail!(UsageError("no data file; pass --data or set task.data".into())),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }
}
