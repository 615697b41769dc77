//! The three-step search: generate candidates per class, re-rank them
//! contrastively and combine the best into mappings, then fine-tune on each
//! mapping and pick the best on the dev split.

use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::beamsearch::{generate_all, max_gen_score_error, Candidate, SearchConfig};
use crate::corpus::{sample_few_shot_with_labels, Example, FewShotSplit, TaskSpec};
use crate::error::{Error, Result, StageExt};
use crate::exec::Exec;
use crate::finetune_rerank::{finetune_rerank, FineTuneSummary, RerankOutcome};
use crate::lm::{FineTuneConfig, ModelHandle};
use crate::rerank::{rerank_candidates, top_n_mappings, ScoredMapping};
use crate::scoring::LabelMapping;
use crate::templating::{render_all, Template};

pub const REPORT_FORMAT: &str = "autoseq-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: TaskSpec,
    pub template: Template,
    /// Train (and dev) examples per class.
    pub k: usize,
    /// Master seed; see [`SeedPlan`].
    pub seed: u64,
    pub search: SearchConfig,
    /// Mappings carried into fine-tuning.
    pub n: usize,
    /// `seed` here is ignored; the plan's shuffle seed is used.
    pub finetune: FineTuneConfig,
}

impl PipelineConfig {
    /// Paper-scale defaults for a task: K = 16, beam 50, 20 tokens, n = 20,
    /// 1000 steps validated every 100, batch 8, learning rate 6e-5.
    pub fn new(task: TaskSpec, template: Template) -> Self {
        PipelineConfig {
            task,
            template,
            k: 16,
            seed: 0,
            search: SearchConfig::default(),
            n: 20,
            finetune: FineTuneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.search.validate()?;
        self.finetune.validate()?;
        if self.template.arity() != self.task.kind.arity() {
            return Err(Error::Config(format!(
                "template {:?} uses {} fields but task {} has {}",
                self.template.to_pattern(),
                self.template.arity(),
                self.task.kind,
                self.task.kind.arity()
            )));
        }
        if self.k == 0 || self.n == 0 {
            return Err(Error::Config("k and n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seeds derived from the master seed by fixed offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    /// Few-shot sampling.
    pub split: u64,
    /// Initialization of freshly created trainable models.
    pub init: u64,
    /// Fine-tuning batch order.
    pub shuffle: u64,
}

impl SeedPlan {
    pub fn from_master(master: u64) -> Self {
        SeedPlan {
            master,
            split: master,
            init: master.wrapping_add(1),
            shuffle: master.wrapping_add(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Search,
    /// A given mapping is fine-tuned and evaluated; generation and re-ranking are skipped.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCandidates {
    pub before_rerank: Vec<Candidate>,
    pub after_rerank: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRow {
    pub mapping: IndexMap<String, String>,
    #[serde(with = "crate::persist::float")]
    pub combo_score: f64,
    #[serde(default, with = "crate::persist::opt_float")]
    pub dev_metric: Option<f64>,
    pub fine_tune: FineTuneSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub k_per_class: usize,
    pub train: usize,
    pub dev: usize,
}

/// Everything a run decided. Contains no timings, so equal inputs give
/// byte-identical serializations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub format: String,
    pub mode: RunMode,
    pub config: PipelineConfig,
    pub seeds: SeedPlan,
    /// Caller-supplied run description (backends, paths).
    #[serde(default)]
    pub run: serde_json::Value,
    #[serde(default)]
    pub generator: Option<String>,
    pub classifier: String,
    pub split: SplitSummary,
    pub candidates: IndexMap<String, ClassCandidates>,
    /// Largest gap between a candidate's generation score and its
    /// independently recomputed per-example sum.
    #[serde(default, with = "crate::persist::opt_float")]
    pub gen_score_max_abs_error: Option<f64>,
    pub mappings: Vec<MappingRow>,
    pub winner: usize,
}

impl SearchReport {
    pub fn winner_row(&self) -> &MappingRow {
        &self.mappings[self.winner]
    }
}

/// Wall-clock seconds per stage, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageTimings(pub IndexMap<String, f64>);

impl StageTimings {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f().stage(stage);
        self.0.insert(stage.to_string(), t.elapsed().as_secs_f64());
        r
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: SearchReport,
    pub timings: StageTimings,
    pub split: FewShotSplit,
    pub candidates: IndexMap<String, Vec<Candidate>>,
    pub reranked: IndexMap<String, Vec<Candidate>>,
    pub mappings: Vec<ScoredMapping>,
    pub winner_model: ModelHandle,
}

fn prepare(config: &PipelineConfig, data: &[Example], timings: &mut StageTimings) -> Result<(SeedPlan, FewShotSplit)> {
    config.validate().stage("config")?;
    let seeds = SeedPlan::from_master(config.seed);
    let split = timings.time("split", || {
        config.task.check_examples(data)?;
        sample_few_shot_with_labels(data, &config.task.labels, config.k, seeds.split)
    })?;
    Ok((seeds, split))
}

fn finetune_stage(
    config: &PipelineConfig,
    seeds: &SeedPlan,
    classifier: &ModelHandle,
    split: &FewShotSplit,
    mappings: &[ScoredMapping],
    timings: &mut StageTimings,
    exec: Exec,
) -> Result<RerankOutcome> {
    let ft = FineTuneConfig {
        seed: seeds.shuffle,
        ..config.finetune.clone()
    };
    timings.time("finetune", || {
        finetune_rerank(classifier, &config.template, &config.task, split, mappings, &ft, exec)
    })
}

fn resolved(config: &PipelineConfig, seeds: &SeedPlan) -> PipelineConfig {
    let mut c = config.clone();
    c.finetune.seed = seeds.shuffle;
    c
}

fn mapping_rows(outcome: &RerankOutcome) -> Vec<MappingRow> {
    outcome
        .mappings
        .iter()
        .zip(&outcome.runs)
        .map(|(m, run)| MappingRow {
            mapping: m.mapping.texts(),
            combo_score: m.combo_score,
            dev_metric: m.dev_metric,
            fine_tune: run.clone(),
        })
        .collect()
}

fn split_summary(split: &FewShotSplit) -> SplitSummary {
    SplitSummary {
        k_per_class: split.k_per_class,
        train: split.train.len(),
        dev: split.dev.len(),
    }
}

/// Runs the full search. Errors carry the name of the failing stage.
pub fn run_pipeline(
    config: &PipelineConfig,
    data: &[Example],
    generator: &ModelHandle,
    classifier: &ModelHandle,
    exec: Exec,
) -> Result<PipelineOutput> {
    let mut timings = StageTimings::default();
    let (seeds, split) = prepare(config, data, &mut timings)?;
    let (candidates, gen_err) = timings.time("generate", || {
        let c = generate_all(generator, &config.template, &split, &config.search, exec)?;
        let mut worst: f64 = 0.0;
        for (class, list) in &c {
            let inputs = render_all(&config.template, split.class_train(class))?;
            worst = worst.max(max_gen_score_error(generator, &inputs, list)?);
        }
        Ok((c, worst))
    })?;
    let reranked = timings.time("rerank", || {
        rerank_candidates(generator, &config.template, &split, &candidates, exec)
    })?;
    let top = timings.time("combine", || top_n_mappings(&reranked, config.n))?;
    let outcome = finetune_stage(config, &seeds, classifier, &split, &top, &mut timings, exec)?;

    let report = SearchReport {
        format: REPORT_FORMAT.to_string(),
        mode: RunMode::Search,
        config: resolved(config, &seeds),
        seeds,
        run: serde_json::Value::Null,
        generator: Some(generator.identifier()),
        classifier: classifier.identifier(),
        split: split_summary(&split),
        candidates: candidates
            .iter()
            .map(|(class, before)| {
                (
                    class.clone(),
                    ClassCandidates {
                        before_rerank: before.clone(),
                        after_rerank: reranked[class.as_str()].clone(),
                    },
                )
            })
            .collect(),
        gen_score_max_abs_error: Some(gen_err),
        mappings: mapping_rows(&outcome),
        winner: outcome.winner,
    };
    Ok(PipelineOutput {
        report,
        timings,
        split,
        candidates,
        reranked,
        mappings: outcome.mappings,
        winner_model: outcome.winner_model,
    })
}

/// Fine-tunes and evaluates one given mapping (`class → text`), skipping
/// generation and re-ranking. Its combo score is recorded as 0.
pub fn run_baseline(
    config: &PipelineConfig,
    data: &[Example],
    classifier: &ModelHandle,
    texts: &IndexMap<String, String>,
    exec: Exec,
) -> Result<PipelineOutput> {
    let mut timings = StageTimings::default();
    let (seeds, split) = prepare(config, data, &mut timings)?;
    let mapping = LabelMapping::from_texts(&config.task, classifier, texts).stage("mapping")?;
    let given = ScoredMapping {
        mapping,
        combo_score: 0.0,
        dev_metric: None,
        ranks: Vec::new(),
    };
    let outcome = finetune_stage(config, &seeds, classifier, &split, &[given], &mut timings, exec)?;
    let report = SearchReport {
        format: REPORT_FORMAT.to_string(),
        mode: RunMode::Baseline,
        config: resolved(config, &seeds),
        seeds,
        run: serde_json::Value::Null,
        generator: None,
        classifier: classifier.identifier(),
        split: split_summary(&split),
        candidates: IndexMap::new(),
        gen_score_max_abs_error: None,
        mappings: mapping_rows(&outcome),
        winner: outcome.winner,
    };
    Ok(PipelineOutput {
        report,
        timings,
        split,
        candidates: IndexMap::new(),
        reranked: IndexMap::new(),
        mappings: outcome.mappings,
        winner_model: outcome.winner_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_plan_offsets() {
        let s = SeedPlan::from_master(u64::MAX);
        assert_eq!((s.split, s.init, s.shuffle), (u64::MAX, 0, 1));
    }
}
