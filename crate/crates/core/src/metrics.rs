//! Classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
}

/// `confusion[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(predictions: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::LabelRange { label: p.max(t) as i64, classes });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class precision, recall and F1 with `0/0 := 0`; the macro score
/// averages F1 over all `classes`, including ones absent from both inputs.
pub fn macro_f1(predictions: &[usize], truth: &[usize], classes: usize) -> Result<F1Report> {
    if classes == 0 {
        return Err(Error::Config("macro F1 needs at least one class".into()));
    }
    let m = confusion_matrix(predictions, truth, classes)?;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassScore> = (0..classes)
        .map(|c| {
            let tp = m[c][c];
            let predicted: usize = (0..classes).map(|t| m[t][c]).sum();
            let actual: usize = m[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            // 2PR/(P+R) written on counts, which is exact for the 0/0 case.
            let f1 = ratio(2 * tp, predicted + actual);
            ClassScore { precision, recall, f1, support: actual }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / classes as f64;
    Ok(F1Report { per_class, macro_f1 })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
