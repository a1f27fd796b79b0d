//! Communication accounting and evaluation metrics.

mod ledger;

pub use ledger::{comm_cost, CommLedger, CommRecord, CommTotals, Direction, BYTES_PER_PARAM};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::vit::Predict;

/// Images per inference call during evaluation.
const EVAL_CHUNK: usize = 256;

/// Relative drop in global accuracy caused by personalization,
/// `(before - after) / before`. Negative when personalization helps.
pub fn forgetting_ratio(acc_global_before: f64, acc_global_after: f64) -> Result<f64> {
    relative_drop("forgetting ratio", acc_global_before, acc_global_after)
}

/// Relative accuracy loss from heterogeneity, `(hom - het) / hom`.
pub fn hetero_drop(acc_hom: f64, acc_het: f64) -> Result<f64> {
    relative_drop("heterogeneity drop", acc_hom, acc_het)
}

fn relative_drop(what: &str, base: f64, other: f64) -> Result<f64> {
    if !(base.is_finite() && other.is_finite()) || base == 0.0 {
        return Err(Error::Metric(format!("{what} is undefined for reference accuracy {base}")));
    }
    Ok((base - other) / base)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of correctly classified samples of `ds`.
pub fn correct(model: &dyn Predict, ds: &Dataset) -> Result<usize> {
    let mut hits = 0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (images, labels) = ds.batch(chunk);
        let (logits, _) = model.predict(&images)?;
        let classes = logits.shape()[1];
        for (row, &l) in logits.data().chunks(classes).zip(&labels) {
            hits += usize::from(argmax(row) == l);
        }
    }
    Ok(hits)
}

pub fn accuracy(model: &dyn Predict, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Metric(format!("test split `{}` is empty", ds.name)));
    }
    Ok(correct(model, ds)? as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub acc: f64,
    pub per_client: Vec<f64>,
}

/// Global mode scores `models[0]` on the union of `tests`; local mode scores
/// `models[i]` on `tests[i]` and averages.
pub fn evaluate(models: &[&dyn Predict], tests: &[&Dataset], mode: EvalMode) -> Result<Evaluation> {
    if tests.is_empty() {
        return Err(Error::Metric("no test splits to evaluate".into()));
    }
    if let Some(t) = tests.iter().find(|t| t.is_empty()) {
        return Err(Error::Metric(format!("test split `{}` is empty", t.name)));
    }
    match mode {
        EvalMode::Global => {
            let [model] = models else {
                return Err(Error::Metric(format!("global evaluation takes one model, got {}", models.len())));
            };
            let mut hits = 0;
            let mut total = 0;
            let mut per_client = Vec::with_capacity(tests.len());
            for t in tests {
                let h = correct(*model, t)?;
                per_client.push(h as f64 / t.len() as f64);
                hits += h;
                total += t.len();
            }
            Ok(Evaluation {
                acc: hits as f64 / total as f64,
                per_client,
            })
        }
        EvalMode::Local => {
            if models.len() != tests.len() {
                return Err(Error::Metric(format!(
                    "local evaluation pairs models with tests, got {} and {}",
                    models.len(),
                    tests.len()
                )));
            }
            let per_client = models.iter().zip(tests).map(|(m, t)| accuracy(*m, t)).collect::<Result<Vec<_>>>()?;
            Ok(Evaluation {
                acc: mean(&per_client),
                per_client,
            })
        }
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub mean: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Mean cosine similarity between the class-token features of two models
/// over `eval_set`. Samples where either feature has zero norm are skipped
/// and counted.
pub fn repr_similarity(pre: &dyn Predict, tuned: &dyn Predict, eval_set: &Dataset) -> Result<Similarity> {
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    let all: Vec<usize> = (0..eval_set.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (images, _) = eval_set.batch(chunk);
        let (_, a) = pre.predict(&images)?;
        let (_, b) = tuned.predict(&images)?;
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "repr_similarity",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let d = a.shape()[1];
        for (x, y) in a.data().chunks(d).zip(b.data().chunks(d)) {
            match cosine(x, y) {
                Some(c) => {
                    sum += c;
                    used += 1;
                }
                None => skipped += 1,
            }
        }
    }
    if used == 0 {
        return Err(Error::Metric(format!("every one of {skipped} samples had a zero-norm feature")));
    }
    Ok(Similarity {
        mean: sum / used as f64,
        used,
        skipped,
    })
}

pub fn cosine(x: &[f64], y: &[f64]) -> Option<f64> {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some((dot / (nx * ny)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub global_acc: f64,
    pub mean_local_acc: f64,
    pub per_task_acc: Vec<f64>,
    pub loss: f64,
}

/// Writes `round,global_acc,mean_local_acc,task0_acc..task{K-1}_acc,loss`.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], num_tasks: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["round".to_string(), "global_acc".into(), "mean_local_acc".into()];
    header.extend((0..num_tasks).map(|k| format!("task{k}_acc")));
    header.push("loss".into());
    w.write_record(&header).map_err(ledger::csv_err)?;
    for r in rows {
        if r.per_task_acc.len() != num_tasks {
            return Err(Error::Metric(format!(
                "round {} has {} task accuracies, expected {num_tasks}",
                r.round,
                r.per_task_acc.len()
            )));
        }
        let mut rec = vec![r.round.to_string(), r.global_acc.to_string(), r.mean_local_acc.to_string()];
        rec.extend(r.per_task_acc.iter().map(f64::to_string));
        rec.push(r.loss.to_string());
        w.write_record(&rec).map_err(ledger::csv_err)?;
    }
    w.flush().map_err(|e| Error::Metric(format!("csv flush: {e}")))?;
    Ok(())
}
