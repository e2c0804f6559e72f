//! Zero-shot evaluation by filling the template with each seed label.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{EvalExample, ReportRow};
use crate::model::{Mlm, Scalar};
use crate::task::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: usize,
    pub scores: Vec<f64>,
    pub predicted: String,
    pub correct: bool,
}

/// Index of the largest score; the earliest wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= *s => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn predict<T: Scalar>(model: &Mlm<T>, spec: &TaskSpec, id: usize, example: &EvalExample) -> Result<Prediction> {
    let scores = model.score_label(spec, &example.inputs)?;
    let best = argmax_first(&scores).unwrap_or(0);
    let predicted = spec.seed_labels()[best].clone();
    let correct = predicted == example.gold;
    Ok(Prediction { id, scores, predicted, correct })
}

/// Accuracy of `model` on `examples`, plus one prediction per example in input order.
pub fn evaluate<T: Scalar>(
    model: &Mlm<T>,
    spec: &TaskSpec,
    examples: &[EvalExample],
) -> Result<(ReportRow, Vec<Prediction>)> {
    if examples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if let Some(bad) = examples.iter().find(|e| spec.label_position(&e.gold).is_none()) {
        return Err(Error::UnknownGold(bad.gold.clone()));
    }
    let predictions = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| predict(model, spec, i, ex))
        .collect::<Result<Vec<_>>>()?;
    let correct = predictions.iter().filter(|p| p.correct).count() as u64;
    let row = ReportRow { task: spec.name().into(), correct, n: examples.len() as u64 };
    Ok((row, predictions))
}
