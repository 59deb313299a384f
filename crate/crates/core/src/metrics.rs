//! Classification metrics: confusion counts, one-vs-rest precision, recall,
//! F1 and specificity, rank-based AUC, balanced accuracy and the combined
//! model-selection score.
//!
//! Conventions:
//! - hard predictions are the row argmax, ties going to the lowest index;
//! - a 0/0 ratio is reported as 0;
//! - classes whose AUC is undefined (no positives or no negatives) are
//!   reported as `None` and left out of the mean AUC;
//! - balanced accuracy averages recall over classes with at least one true
//!   sample; macro precision/F1/specificity average over classes that occur
//!   in the truth or the predictions.

use serde::{Deserialize, Serialize};

use crate::catalog::ClassCatalog;
use crate::error::{Error, Result};
use crate::matrix::{argmax, ProbMatrix};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// row = true class, column = predicted class
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(format!(
                "{classes}x{classes} confusion matrix needs {} counts",
                classes * classes
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        (0..self.classes).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_total(&self, pred: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, pred)).sum()
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::invalid(format!("label out of range for {classes} classes")));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn per_class_prfs(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let total = cm.total();
    (0..cm.classes)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_ = cm.row_total(c) - tp;
            let fp = cm.col_total(c) - tp;
            let tn = total - tp - fn_ - fp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                specificity: ratio(tn, tn + fp),
            }
        })
        .collect()
}

/// Mean recall over classes that have at least one true sample.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::invalid("balanced accuracy of an empty confusion matrix"));
    }
    let recalls: Vec<f64> = (0..cm.classes)
        .filter(|&c| cm.row_total(c) > 0)
        .map(|c| ratio(cm.get(c, c), cm.row_total(c)))
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// One-vs-rest AUC from the Mann-Whitney rank sum with mid-ranks for ties:
/// `P(score_pos > score_neg) + P(tie) / 2`. `None` when either side is empty.
pub fn auc_ovr(scores: &[f64], positive: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ranks are 1-based; a tie block spanning positions i..j gets (i + 1 + j) / 2.
    // Rank sums are kept doubled so they stay integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let doubled_rank = (i + 1 + j) as u64;
        let pos_in_block = order[i..j].iter().filter(|&&k| positive[k]).count() as u64;
        doubled_rank_sum += doubled_rank * pos_in_block;
        i = j;
    }
    let n_pos_u = n_pos as u64;
    // 2U = 2R - n_pos (n_pos + 1)
    let doubled_u = doubled_rank_sum - n_pos_u * (n_pos_u + 1);
    Ok(Some(doubled_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64)))
}

/// AUC of each probability column against its one-vs-rest truth.
pub fn per_class_auc(probs: &ProbMatrix, truth: &[usize]) -> Result<Vec<Option<f64>>> {
    if probs.rows() != truth.len() {
        return Err(Error::shape(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            truth.len()
        )));
    }
    (0..probs.cols())
        .map(|c| {
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            auc_ovr(&probs.matrix().column(c), &positive)
        })
        .collect()
}

pub fn mean_of_defined(aucs: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aucs.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAuc(
            "no class has both positive and negative samples".into(),
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn mean_auc(probs: &ProbMatrix, truth: &[usize]) -> Result<f64> {
    mean_of_defined(&per_class_auc(probs, truth)?)
}

pub fn combined_score(balanced_accuracy: f64, mean_auc: f64) -> Result<f64> {
    for (name, v) in [("balanced accuracy", balanced_accuracy), ("mean AUC", mean_auc)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok((balanced_accuracy + mean_auc) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub balanced_accuracy: f64,
    pub mean_auc: f64,
    pub combined_score: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub macro_specificity: f64,
}

/// Per-class and aggregate metrics, with classes in catalog order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub aggregate: AggregateMetrics,
}

pub fn evaluate(probs: &ProbMatrix, truth: &[usize], catalog: &ClassCatalog) -> Result<MetricsReport> {
    let k = catalog.len();
    if probs.cols() != k {
        return Err(Error::shape(format!(
            "{} probability columns for {k} classes",
            probs.cols()
        )));
    }
    let preds: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    let cm = confusion(&preds, truth, k)?;
    let scores = per_class_prfs(&cm);
    let aucs = per_class_auc(probs, truth)?;
    let balanced = balanced_accuracy(&cm)?;
    let mean_auc = mean_of_defined(&aucs)?;

    let active: Vec<usize> = (0..k).filter(|&c| cm.row_total(c) > 0 || cm.col_total(c) > 0).collect();
    let macro_of =
        |f: fn(&ClassScores) -> f64| active.iter().map(|&c| f(&scores[c])).sum::<f64>() / active.len() as f64;

    Ok(MetricsReport {
        classes: catalog.names().to_vec(),
        per_class: scores
            .iter()
            .zip(&aucs)
            .map(|(s, &auc)| ClassMetrics {
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                specificity: s.specificity,
                auc,
            })
            .collect(),
        aggregate: AggregateMetrics {
            balanced_accuracy: balanced,
            mean_auc,
            combined_score: combined_score(balanced, mean_auc)?,
            macro_precision: macro_of(|s| s.precision),
            macro_f1: macro_of(|s| s.f1),
            macro_specificity: macro_of(|s| s.specificity),
        },
    })
}
