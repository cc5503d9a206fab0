use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::N_CLASSES;

/// Model outputs for one example after argmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub quantity: f64,
    pub tag: usize,
    pub indication: usize,
}

pub type Labels = Prediction;

/// Per-class F1 scores and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
}

/// Macro-F1 over `n_classes`; a class with no true or predicted members scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<F1Report> {
    if pred.len() != truth.len() {
        return Err(Error::dim("macro_f1", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Data("cannot score an empty evaluation set".into()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Data(format!("class index outside [0, {n_classes})")));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / n_classes as f64;
    Ok(F1Report {
        macro_f1,
        per_class,
    })
}

/// Scores for one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub quantity_mse: f64,
    pub tag_macro_f1: f64,
    pub indication_macro_f1: f64,
    pub tag_per_class: Vec<f64>,
    pub indication_per_class: Vec<f64>,
}

impl RunMetrics {
    /// Entry-wise mean of several runs.
    pub fn mean(runs: &[RunMetrics]) -> Result<RunMetrics> {
        let n = runs.len();
        if n == 0 {
            return Err(Error::Data("no runs to average".into()));
        }
        let avg = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n as f64;
        let avg_vec = |f: &dyn Fn(&RunMetrics) -> &Vec<f64>| {
            let mut acc = vec![0.0; f(&runs[0]).len()];
            for r in runs {
                acc.iter_mut().zip(f(r)).for_each(|(a, b)| *a += b);
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            acc
        };
        Ok(RunMetrics {
            quantity_mse: avg(&|r| r.quantity_mse),
            tag_macro_f1: avg(&|r| r.tag_macro_f1),
            indication_macro_f1: avg(&|r| r.indication_macro_f1),
            tag_per_class: avg_vec(&|r| &r.tag_per_class),
            indication_per_class: avg_vec(&|r| &r.indication_per_class),
        })
    }
}

pub fn evaluate_metrics(preds: &[Prediction], labels: &[Labels]) -> Result<RunMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::dim("evaluate_metrics", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Data("cannot score an empty evaluation set".into()));
    }
    let mse = preds
        .iter()
        .zip(labels)
        .map(|(p, l)| (p.quantity - l.quantity).powi(2))
        .sum::<f64>()
        / preds.len() as f64;
    let col = |xs: &[Prediction], f: fn(&Prediction) -> usize| xs.iter().map(f).collect::<Vec<_>>();
    let tag = macro_f1(&col(preds, |p| p.tag), &col(labels, |p| p.tag), N_CLASSES)?;
    let ind = macro_f1(
        &col(preds, |p| p.indication),
        &col(labels, |p| p.indication),
        N_CLASSES,
    )?;
    Ok(RunMetrics {
        quantity_mse: mse,
        tag_macro_f1: tag.macro_f1,
        indication_macro_f1: ind.macro_f1,
        tag_per_class: tag.per_class,
        indication_per_class: ind.per_class,
    })
}
