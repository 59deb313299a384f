//! Multi-class focal loss `-alpha_t (1 - p_t)^gamma log(p_t)` and its
//! gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{log_softmax_row, softmax_row};

/// Lower clamp on `p_t` before taking its log.
pub const MIN_PROB: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    /// Per-class balancing factor, indexed by the true class.
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub reduction: Reduction,
}

impl FocalConfig {
    /// Uniform `alpha = 1`, `gamma = 2`, mean reduction.
    pub fn new(classes: usize) -> Self {
        Self {
            alpha: vec![1.0; classes],
            gamma: 2.0,
            reduction: Reduction::Mean,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if let Some(a) = self.alpha.iter().find(|a| **a <= 0.0 || !a.is_finite()) {
            return Err(Error::invalid(format!("alpha entries must be > 0, got {a}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalOutput {
    pub total: f64,
    pub per_sample: Vec<f64>,
}

fn check(logits: &Matrix, targets: &[usize], cfg: &FocalConfig) -> Result<()> {
    cfg.validate()?;
    if logits.rows() != targets.len() {
        return Err(Error::shape(format!(
            "{} logit rows but {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if cfg.alpha.len() != logits.cols() {
        return Err(Error::shape(format!(
            "alpha has {} entries for {} classes",
            cfg.alpha.len(),
            logits.cols()
        )));
    }
    if let Some((i, t)) = targets.iter().enumerate().find(|(_, t)| **t >= logits.cols()) {
        return Err(Error::invalid(format!(
            "target {t} at row {i} is not a class index below {}",
            logits.cols()
        )));
    }
    if logits.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(())
}

/// `(log p_t clamped, 1 - p_t, clamp active)` for one row.
fn true_class_terms(row: &[f64], target: usize) -> (f64, f64, bool) {
    let log_pt = log_softmax_row(row)[target];
    let floor = MIN_PROB.ln();
    // 1 - p_t without cancellation near p_t = 1.
    let one_minus = -log_pt.exp_m1();
    if log_pt < floor {
        (floor, one_minus, true)
    } else {
        (log_pt, one_minus, false)
    }
}

fn reduce(per_sample: &[f64], reduction: Reduction) -> f64 {
    let sum: f64 = per_sample.iter().sum();
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if per_sample.is_empty() => 0.0,
        Reduction::Mean => sum / per_sample.len() as f64,
    }
}

pub fn focal_loss(logits: &Matrix, targets: &[usize], cfg: &FocalConfig) -> Result<FocalOutput> {
    check(logits, targets, cfg)?;
    let per_sample: Vec<f64> = logits
        .iter_rows()
        .zip(targets)
        .map(|(row, &t)| {
            let (log_pt, one_minus, _) = true_class_terms(row, t);
            -cfg.alpha[t] * one_minus.powf(cfg.gamma) * log_pt
        })
        .collect();
    Ok(FocalOutput {
        total: reduce(&per_sample, cfg.reduction),
        per_sample,
    })
}

/// d(total)/d(logits).
///
/// With `w = (1 - p_t)^gamma` and `l = log p_t`, and
/// `d p_t / d z_j = p_t (δ_tj - p_j)`:
///
/// `dL/dz_j = -α_t (δ_tj - p_j) [ l · (-γ (1 - p_t)^(γ-1) p_t) + w · [not clamped] ]`
pub fn focal_loss_grad(logits: &Matrix, targets: &[usize], cfg: &FocalConfig) -> Result<Matrix> {
    check(logits, targets, cfg)?;
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if targets.is_empty() => 0.0,
        Reduction::Mean => 1.0 / targets.len() as f64,
    };
    let gamma = cfg.gamma;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, (row, &t)) in logits.iter_rows().zip(targets).enumerate() {
        let p = softmax_row(row);
        let (log_pt, one_minus, clamped) = true_class_terms(row, t);
        let p_t = (-one_minus) + 1.0;
        let w = one_minus.powf(gamma);
        // -γ (1 - p_t)^(γ-1) p_t, with its p_t -> 1 limit of 0 for γ > 0.
        let dw_coeff = if gamma == 0.0 || one_minus == 0.0 {
            0.0
        } else {
            -gamma * one_minus.powf(gamma - 1.0) * p_t
        };
        let inner = log_pt * dw_coeff + if clamped { 0.0 } else { w };
        let c = -cfg.alpha[t] * inner * scale;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            *g = c * (delta - p[j]);
        }
    }
    Ok(grad)
}
