use crate::config::F1Average;
use crate::data::Split;
use crate::error::{Error, Result};

/// Header of `metrics.csv`.
pub const METRICS_HEADER: &str = "epoch,split,loss_total,loss_cls,loss_contrast,accuracy,macro_f1";

/// Per-class F1 from a confusion count; a class with no true or predicted
/// instances scores 0.
pub fn per_class_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::Contract(format!("class {bad} outside [0, {classes})")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

/// Accuracy and F1 averaged as requested (macro: unweighted over classes;
/// weighted: by label support).
pub fn accuracy_f1(preds: &[usize], labels: &[usize], classes: usize, average: F1Average) -> Result<(f64, f64)> {
    let f1 = per_class_f1(preds, labels, classes)?;
    let n = labels.len() as f64;
    let acc = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    let avg = match average {
        F1Average::Macro => f1.iter().sum::<f64>() / classes as f64,
        F1Average::Weighted => {
            let mut support = vec![0usize; classes];
            labels.iter().for_each(|&l| support[l] += 1);
            f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / n
        }
    };
    Ok((acc, avg))
}

pub fn accuracy_macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<(f64, f64)> {
    accuracy_f1(preds, labels, classes, F1Average::Macro)
}

/// One row of `metrics.csv`. `macro_f1` holds the configured F1 average.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_contrast: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.split.as_str(),
            self.loss_total,
            self.loss_cls,
            self.loss_contrast,
            self.accuracy,
            self.macro_f1
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
