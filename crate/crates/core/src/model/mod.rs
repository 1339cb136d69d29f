//! Classifier abstraction, the reference spatio-temporal GCN, and the gate network.

mod checkpoint;
mod gate;
pub mod loss;
mod optim;
mod stgcn;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use gate::{gate_forward, GateNetwork};
pub use optim::{LrSchedule, Sgd};
pub use stgcn::{BackboneSpec, BlockCache, InputNorm, ReferenceStGcn, StGcnConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::skeleton::Tensor3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// `(batch, K)` logit matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn from_rows(classes: usize, rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        debug_assert_eq!(data.len(), n * classes);
        Self {
            rows: n,
            classes,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.classes)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.classes.max(1)).take(self.rows)
    }
}

/// A trainable classifier over one modality stream.
///
/// Implementors provide single-sample forward / gradient passes; batch-level
/// methods are derived and fan out through [`crate::par`], so results never
/// depend on how a dataset is partitioned into batches.
pub trait Classifier: Send + Sync {
    /// Expected `(T, V, C)` of every input.
    fn input_shape(&self) -> (usize, usize, usize);

    fn class_count(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn mode(&self) -> Mode;

    fn set_mode(&mut self, mode: Mode);

    /// Logits for one input; shape already checked.
    fn logits_unchecked(&self, input: &Tensor3) -> Vec<f64>;

    /// Accumulate `d(loss)/d(params)` for one input into `grad`, given
    /// `d(loss)/d(logits)` as a function of the logits.
    fn accumulate_grad(
        &self,
        input: &Tensor3,
        dlogits: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        grad: &mut [f64],
    );

    fn check_input(&self, input: &Tensor3) -> Result<()> {
        if input.shape() != self.input_shape() {
            return Err(Error::Dimension(format!(
                "model expects {:?}, got {:?}",
                self.input_shape(),
                input.shape()
            )));
        }
        Ok(())
    }

    fn forward(&self, batch: &[&Tensor3]) -> Result<Logits> {
        for x in batch {
            self.check_input(x)?;
        }
        let rows = par::map_slice(batch, |x| self.logits_unchecked(x));
        Ok(Logits::from_rows(self.class_count(), rows))
    }

    /// Un-reduced cross-entropy per sample.
    fn per_sample_loss(&self, batch: &[&Tensor3], labels: &[usize]) -> Result<Vec<f64>> {
        check_labels(labels, batch.len(), self.class_count())?;
        let logits = self.forward(batch)?;
        Ok(logits
            .iter_rows()
            .zip(labels)
            .map(|(z, &y)| loss::cross_entropy(z, y))
            .collect())
    }

    /// Mean cross-entropy over the batch and its parameter gradient.
    fn loss_and_grad(&self, batch: &[&Tensor3], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_labels(labels, batch.len(), self.class_count())?;
        for x in batch {
            self.check_input(x)?;
        }
        let n = batch.len() as f64;
        let parts = par::map_indices(batch.len(), |i| {
            let mut g = vec![0.0; self.params().len()];
            let y = labels[i];
            let mut loss = 0.0;
            self.accumulate_grad(
                batch[i],
                &mut |z| {
                    loss = loss::cross_entropy(z, y);
                    loss::cross_entropy_grad(z, y).into_iter().map(|d| d / n).collect()
                },
                &mut g,
            );
            (loss, g)
        });
        let mut grad = vec![0.0; self.params().len()];
        let mut total = 0.0;
        for (l, g) in parts {
            total += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((total / n, grad))
    }
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Dimension(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    Ok(())
}
