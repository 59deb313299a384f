//! Softmax-averaging ensembles over per-model outputs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix, ProbMatrix};
use crate::nn::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Logits,
    Probabilities,
}

/// One member's predictions; row `i` belongs to `image_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub model_id: String,
    pub image_ids: Vec<String>,
    pub values: Matrix,
    pub kind: OutputKind,
}

impl ModelOutputs {
    pub fn new(model_id: impl Into<String>, image_ids: Vec<String>, values: Matrix, kind: OutputKind) -> Result<Self> {
        let model_id = model_id.into();
        if image_ids.len() != values.rows() {
            return Err(Error::shape(format!(
                "model '{model_id}': {} image ids for {} rows",
                image_ids.len(),
                values.rows()
            )));
        }
        let mut seen = HashMap::with_capacity(image_ids.len());
        for (i, id) in image_ids.iter().enumerate() {
            if seen.insert(id.as_str(), i).is_some() {
                return Err(Error::DuplicateImage { id: id.clone(), row: i });
            }
        }
        Ok(Self {
            model_id,
            image_ids,
            values,
            kind,
        })
    }

    fn probabilities(&self) -> Result<ProbMatrix> {
        match self.kind {
            OutputKind::Logits => softmax(&self.values),
            OutputKind::Probabilities => {
                ProbMatrix::with_tolerance(self.values.clone(), crate::matrix::PRINTED_ROW_SUM_TOL)
            }
        }
    }
}

/// Reorders every member to the first member's image order.
pub fn align(outputs: Vec<ModelOutputs>) -> Result<Vec<ModelOutputs>> {
    let Some(first) = outputs.first() else {
        return Err(Error::invalid("ensemble needs at least one member"));
    };
    let order = first.image_ids.clone();
    let first_id = first.model_id.clone();
    outputs
        .into_iter()
        .map(|member| {
            let position: HashMap<&str, usize> = member
                .image_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), i))
                .collect();
            let mut values = Matrix::zeros(order.len(), member.values.cols());
            for (i, id) in order.iter().enumerate() {
                let src = *position.get(id.as_str()).ok_or_else(|| Error::MissingImage {
                    model: member.model_id.clone(),
                    image: id.clone(),
                })?;
                values.row_mut(i).copy_from_slice(member.values.row(src));
            }
            if member.image_ids.len() != order.len() {
                let extra = member.image_ids.iter().find(|id| !order.contains(id));
                return Err(Error::invalid(format!(
                    "model '{}' has image '{}' that '{}' lacks",
                    member.model_id,
                    extra.map_or("?", String::as_str),
                    first_id
                )));
            }
            Ok(ModelOutputs {
                model_id: member.model_id,
                image_ids: order.clone(),
                values,
                kind: member.kind,
            })
        })
        .collect()
}

/// Cell-wise mean of member probabilities.
///
/// Members are reduced in sorted order (model id, then values bitwise) with a
/// running mean, so the result does not depend on the order of `outputs` and
/// `M` identical members reproduce that member exactly.
pub fn ensemble_average(outputs: &[ModelOutputs]) -> Result<ProbMatrix> {
    let Some(first) = outputs.first() else {
        return Err(Error::invalid("ensemble needs at least one member"));
    };
    let k = first.values.cols();
    for m in outputs {
        if m.values.cols() != k {
            return Err(Error::shape(format!(
                "model '{}' has {} classes, expected {k}",
                m.model_id,
                m.values.cols()
            )));
        }
        if m.image_ids != first.image_ids {
            return Err(Error::invalid(format!(
                "model '{}' is not aligned with '{}'",
                m.model_id, first.model_id
            )));
        }
    }
    let mut members: Vec<(&ModelOutputs, ProbMatrix)> = outputs
        .iter()
        .map(|m| Ok((m, m.probabilities()?)))
        .collect::<Result<_>>()?;
    members.sort_by(|(a, pa), (b, pb)| {
        a.model_id.cmp(&b.model_id).then_with(|| {
            let bits = |p: &ProbMatrix| -> Vec<u64> { p.matrix().as_slice().iter().map(|v| v.to_bits()).collect() };
            bits(pa).cmp(&bits(pb))
        })
    });

    let n = first.values.rows();
    let mut mean = members[0].1.matrix().clone();
    let mut lo = mean.clone();
    let mut hi = mean.clone();
    for (count, (_, p)) in members.iter().enumerate().skip(1) {
        let count = (count + 1) as f64;
        let src = p.matrix().as_slice();
        for (idx, &x) in src.iter().enumerate() {
            let m = &mut mean.as_mut_slice()[idx];
            *m += (x - *m) / count;
            let l = &mut lo.as_mut_slice()[idx];
            *l = l.min(x);
            let h = &mut hi.as_mut_slice()[idx];
            *h = h.max(x);
        }
    }
    // Rounding in the running mean may step a hair outside the members' range.
    for ((m, &l), &h) in mean.as_mut_slice().iter_mut().zip(lo.as_slice()).zip(hi.as_slice()) {
        *m = m.clamp(l, h);
    }
    debug_assert_eq!(mean.rows(), n);
    Ok(ProbMatrix::new_unchecked(mean))
}

/// Row argmax with ties to the lowest class index.
pub fn predict_labels(probs: &ProbMatrix) -> Vec<usize> {
    (0..probs.rows()).map(|i| argmax(probs.row(i))).collect()
}
