//! Classification metrics for dev selection and reporting.
//!
//! Degenerate F1 and MCC (a zero denominator) are 0.

use crate::corpus::{MetricKind, TaskSpec};
use crate::error::{Error, Result};

/// Binary confusion counts with respect to one positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinaryConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl BinaryConfusion {
    pub fn from_labels<S: AsRef<str>>(preds: &[S], gold: &[S], positive: &str) -> Result<Self> {
        check_lengths(preds.len(), gold.len())?;
        let mut c = BinaryConfusion::default();
        for (p, g) in preds.iter().zip(gold) {
            match (p.as_ref() == positive, g.as_ref() == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn matthews(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom.sqrt()
        }
    }
}

fn check_lengths(p: usize, g: usize) -> Result<()> {
    if p != g {
        return Err(Error::Metric(format!("{p} predictions for {g} gold labels")));
    }
    if p == 0 {
        return Err(Error::Metric("no predictions".into()));
    }
    Ok(())
}

pub fn accuracy<S: AsRef<str>>(preds: &[S], gold: &[S]) -> Result<f64> {
    check_lengths(preds.len(), gold.len())?;
    let hits = preds.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_binary<S: AsRef<str>>(preds: &[S], gold: &[S], positive: &str) -> Result<()> {
    let mut seen: Vec<&str> = vec![positive];
    for l in preds.iter().chain(gold).map(AsRef::as_ref) {
        if !seen.contains(&l) {
            seen.push(l);
        }
    }
    if seen.len() > 2 {
        return Err(Error::Metric(format!(
            "binary metric over {} classes: {seen:?}",
            seen.len()
        )));
    }
    Ok(())
}

/// F1 of `positive`. At most one other label may appear.
pub fn f1<S: AsRef<str>>(preds: &[S], gold: &[S], positive: &str) -> Result<f64> {
    check_binary(preds, gold, positive)?;
    Ok(BinaryConfusion::from_labels(preds, gold, positive)?.f1())
}

/// Matthews correlation of a binary labeling. The sign does not depend on
/// which class is taken as positive.
pub fn matthews<S: AsRef<str>>(preds: &[S], gold: &[S], positive: &str) -> Result<f64> {
    check_binary(preds, gold, positive)?;
    Ok(BinaryConfusion::from_labels(preds, gold, positive)?.matthews())
}

/// The task's metric. F1 and MCC require a two-label task; predictions and
/// gold must come from the task's label set.
pub fn task_metric<S: AsRef<str>>(task: &TaskSpec, preds: &[S], gold: &[S]) -> Result<f64> {
    for l in preds.iter().chain(gold).map(AsRef::as_ref) {
        if task.class_index(l).is_none() {
            return Err(Error::Metric(format!("unknown class {l:?}")));
        }
    }
    match task.metric {
        MetricKind::Accuracy => accuracy(preds, gold),
        MetricKind::F1 | MetricKind::Matthews if task.labels.len() != 2 => Err(Error::Metric(format!(
            "{:?} needs a binary task, got {} labels",
            task.metric,
            task.labels.len()
        ))),
        MetricKind::F1 => f1(preds, gold, task.positive()),
        MetricKind::Matthews => matthews(preds, gold, task.positive()),
    }
}
