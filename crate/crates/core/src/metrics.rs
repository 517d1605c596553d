//! Regression and sentiment-bin metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the neutral band used by [`MetricReport::acc3`].
pub const NEUTRAL_BAND: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Negative vs non-negative over all samples.
    pub acc2_nn: f64,
    /// Negative vs positive over samples with a non-zero label.
    pub acc2_np: f64,
    /// Support-weighted F1 of the two binary protocols.
    pub f1_nn: f64,
    pub f1_np: f64,
    pub acc7: f64,
    pub acc5: f64,
    pub acc3: f64,
    pub mae: f64,
    pub corr: f64,
}

/// Support-weighted binary F1; a class with no predicted or no true members
/// contributes an F1 of 0.
pub fn weighted_f1(pred: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in [false, true] {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == class && **t == class).count();
        let pred_n = pred.iter().filter(|p| **p == class).count();
        let support = truth.iter().filter(|t| **t == class).count();
        let f1 = if pred_n + support == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (pred_n + support) as f64
        };
        total += f1 * support as f64;
    }
    total / truth.len() as f64
}

fn accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn bin(x: f64, bound: f64) -> f64 {
    x.clamp(-bound, bound).round_ties_even()
}

fn three_way(x: f64) -> i8 {
    if x < -NEUTRAL_BAND {
        -1
    } else if x > NEUTRAL_BAND {
        1
    } else {
        0
    }
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

pub fn evaluate(pred: &[f64], labels: &[f64]) -> Result<MetricReport> {
    if pred.len() != labels.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions for {} labels", pred.len(), labels.len()),
        ));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("evaluate", "at least two samples are needed for correlation"));
    }
    let n = pred.len() as f64;
    let nn_p: Vec<bool> = pred.iter().map(|p| *p >= 0.0).collect();
    let nn_t: Vec<bool> = labels.iter().map(|y| *y >= 0.0).collect();
    let (np_p, np_t): (Vec<bool>, Vec<bool>) = pred
        .iter()
        .zip(labels)
        .filter(|(_, y)| **y != 0.0)
        .map(|(p, y)| (*p > 0.0, *y > 0.0))
        .unzip();
    let hits = |f: &dyn Fn(f64, f64) -> bool| pred.iter().zip(labels).filter(|(p, y)| f(**p, **y)).count() as f64 / n;
    Ok(MetricReport {
        acc2_nn: accuracy(&nn_p, &nn_t),
        acc2_np: accuracy(&np_p, &np_t),
        f1_nn: weighted_f1(&nn_p, &nn_t),
        f1_np: weighted_f1(&np_p, &np_t),
        acc7: hits(&|p, y| bin(p, 3.0) == bin(y, 3.0)),
        acc5: hits(&|p, y| bin(p, 2.0) == bin(y, 2.0)),
        acc3: hits(&|p, y| three_way(p) == three_way(y)),
        mae: pred.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n,
        corr: pearson(pred, labels),
    })
}
