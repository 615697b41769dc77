//! Fine-tune-and-validate selection among the top label mappings.

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, FewShotSplit, TaskSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lm::{fine_tune, Backend, FineTuneConfig, ModelHandle, TrainPair};
use crate::metrics::task_metric;
use crate::rerank::ScoredMapping;
use crate::scoring::{predict_all, LabelMapping};
use crate::templating::Template;

/// Task metric of the mapping's predictions on labeled `examples`.
pub fn evaluate_mapping(
    model: &ModelHandle,
    template: &Template,
    task: &TaskSpec,
    mapping: &LabelMapping,
    examples: &[Example],
    exec: Exec,
) -> Result<f64> {
    let gold = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            e.label
                .clone()
                .ok_or_else(|| Error::InvalidExample(format!("evaluation example {i} has no label")))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_all(model, template, examples, mapping, exec)?;
    task_metric(task, &preds, &gold)
}

/// `(T(x), M(y))` for every labeled example.
pub fn training_pairs(template: &Template, mapping: &LabelMapping, examples: &[Example]) -> Result<Vec<TrainPair>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let label = e
                .label
                .as_deref()
                .ok_or_else(|| Error::InvalidExample(format!("training example {i} has no label")))?;
            Ok(TrainPair {
                input: template.render(e)?,
                target: mapping.target(label)?.clone(),
            })
        })
        .collect()
}

/// One mapping's fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneSummary {
    pub best_step: usize,
    /// `(step, dev metric, mean train loss)`; the loss is `null` when no
    /// training happened.
    pub history: Vec<(usize, Option<f64>, Option<f64>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RerankOutcome {
    /// Input mappings, in input order, retokenized for the classifier and with
    /// `dev_metric` filled where fine-tuning succeeded.
    pub mappings: Vec<ScoredMapping>,
    pub runs: Vec<FineTuneSummary>,
    pub winner: usize,
    pub winner_model: ModelHandle,
}

impl RerankOutcome {
    pub fn winner_mapping(&self) -> &ScoredMapping {
        &self.mappings[self.winner]
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Fine-tunes a fresh copy of `base` for every mapping and keeps the one with
/// the best dev metric; ties go to the higher combo score, then input order.
/// A failing run is recorded and skipped; the call fails only if all fail.
pub fn finetune_rerank(
    base: &ModelHandle,
    template: &Template,
    task: &TaskSpec,
    split: &FewShotSplit,
    mappings: &[ScoredMapping],
    config: &FineTuneConfig,
    exec: Exec,
) -> Result<RerankOutcome> {
    if mappings.is_empty() {
        return Err(Error::Search("no mappings to fine-tune".into()));
    }
    config.validate()?;
    // A remote session holds one training state at a time.
    let outer = if base.backend() == Backend::Remote {
        Exec::Sequential
    } else {
        exec
    };
    let results = outer.map(mappings, |m| -> Result<(LabelMapping, _)> {
        let mapping = m.mapping.retokenize(task, base)?;
        let pairs = training_pairs(template, &mapping, &split.train)?;
        let eval = |h: &ModelHandle| evaluate_mapping(h, template, task, &mapping, &split.dev, exec);
        let r = fine_tune(base, &pairs, config, &eval)?;
        Ok((mapping, r))
    });

    let mut out = Vec::with_capacity(mappings.len());
    let mut runs = Vec::with_capacity(mappings.len());
    let mut best: Option<(usize, ModelHandle)> = None;
    let mut first_err = None;
    for (i, (m, r)) in mappings.iter().zip(results).enumerate() {
        match r {
            Ok((mapping, ft)) => {
                out.push(ScoredMapping {
                    mapping,
                    dev_metric: Some(ft.best_metric),
                    ..m.clone()
                });
                runs.push(FineTuneSummary {
                    best_step: ft.best_step,
                    history: ft.history.iter().map(|&(s, d, l)| (s, finite(d), finite(l))).collect(),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((b, _)) => {
                        let (bm, bc) = (out[*b].dev_metric.unwrap_or(f64::NEG_INFINITY), out[*b].combo_score);
                        ft.best_metric > bm || (ft.best_metric == bm && m.combo_score > bc)
                    }
                };
                if better {
                    best = Some((i, ft.model));
                }
            }
            Err(e) => {
                runs.push(FineTuneSummary {
                    best_step: 0,
                    history: Vec::new(),
                    error: Some(e.to_string()),
                });
                out.push(ScoredMapping {
                    dev_metric: None,
                    ..m.clone()
                });
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some((winner, winner_model)) => Ok(RerankOutcome {
            mappings: out,
            runs,
            winner,
            winner_model,
        }),
        None => Err(first_err.expect("at least one mapping")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MetricKind, TaskKind};
    use crate::lm::{TabularModel, Vocab};
    use crate::templating::builtin_template;
    use indexmap::IndexMap;

    fn task() -> TaskSpec {
        TaskSpec::new(
            TaskKind::SingleSentence,
            vec!["pos".into(), "neg".into()],
            MetricKind::Accuracy,
        )
        .unwrap()
    }

    #[test]
    fn constant_predictor_gets_half() {
        let v = Vocab::with_specials(["a", "b", "good", "bad"]).unwrap();
        let m = ModelHandle::new(TabularModel::uniform("u", v));
        let texts: IndexMap<String, &str> = [("pos".to_string(), "a"), ("neg".to_string(), "b")]
            .into_iter()
            .collect();
        let map = LabelMapping::from_texts(&task(), &m, &texts).unwrap();
        let dev = vec![
            Example::labeled(vec!["good"], "pos").unwrap(),
            Example::labeled(vec!["bad"], "neg").unwrap(),
        ];
        let t = builtin_template(TaskKind::SingleSentence);
        assert_eq!(
            evaluate_mapping(&m, &t, &task(), &map, &dev, Exec::Sequential).unwrap(),
            0.5
        );
        let pairs = training_pairs(&t, &map, &dev).unwrap();
        assert_eq!(pairs[1].target.0, vec![4]);
        assert_eq!(pairs[1].input.text, "bad [MASK]");
    }

    #[test]
    fn untrainable_base_fails_every_run() {
        let v = Vocab::with_specials(["a", "b", "good", "bad"]).unwrap();
        let m = ModelHandle::new(TabularModel::uniform("u", v));
        let texts: IndexMap<String, &str> = [("pos".to_string(), "a"), ("neg".to_string(), "b")]
            .into_iter()
            .collect();
        let map = LabelMapping::from_texts(&task(), &m, &texts).unwrap();
        let mut data = Vec::new();
        for _ in 0..2 {
            data.push(Example::labeled(vec!["good"], "pos").unwrap());
            data.push(Example::labeled(vec!["bad"], "neg").unwrap());
        }
        let split = crate::corpus::sample_few_shot(&data, 1, 0).unwrap();
        let sm = ScoredMapping {
            mapping: map,
            combo_score: 0.0,
            dev_metric: None,
            ranks: vec![0, 0],
        };
        let t = builtin_template(TaskKind::SingleSentence);
        let err = finetune_rerank(
            &m,
            &t,
            &task(),
            &split,
            &[sm],
            &FineTuneConfig::default(),
            Exec::Sequential,
        );
        assert!(matches!(err, Err(Error::NotTrainable(_))));
        assert!(finetune_rerank(
            &m,
            &t,
            &task(),
            &split,
            &[],
            &FineTuneConfig::default(),
            Exec::Sequential
        )
        .is_err());
    }
}
