//! Accuracy metrics on a clean test split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss, Classifier};
use crate::stream::ModalityStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub count: usize,
    pub top1: f64,
    pub top5: f64,
    /// Top-1 per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
}

/// Metrics from per-sample score rows (logits or probabilities).
pub fn evaluate_scores<'a>(
    scores: impl IntoIterator<Item = &'a [f64]>,
    labels: &[usize],
    class_count: usize,
) -> Result<AccuracyMetrics> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig("evaluation on an empty split".into()));
    }
    let k5 = class_count.min(5);
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut hits = vec![0usize; class_count];
    let mut totals = vec![0usize; class_count];
    let mut rows = 0usize;
    for (row, &y) in scores.into_iter().zip(labels) {
        if row.len() != class_count {
            return Err(Error::Dimension(format!("score row of {} for {class_count} classes", row.len())));
        }
        if y >= class_count {
            return Err(Error::InvalidLabel {
                label: y,
                classes: class_count,
            });
        }
        rows += 1;
        totals[y] += 1;
        if loss::argmax(row) == y {
            top1 += 1;
            hits[y] += 1;
        }
        if loss::top_k(row, k5).contains(&y) {
            top5 += 1;
        }
    }
    if rows != labels.len() {
        return Err(Error::Dimension(format!("{rows} score rows for {} labels", labels.len())));
    }
    let n = rows as f64;
    Ok(AccuracyMetrics {
        count: rows,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
    })
}

/// Evaluate a single-modality classifier against the stream's labels.
pub fn evaluate(model: &dyn Classifier, test: &ModalityStream) -> Result<AccuracyMetrics> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("evaluation on an empty split".into()));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let logits = model.forward(&test.refs(&all))?;
    evaluate_scores(logits.iter_rows(), &test.labels, model.class_count())
}
