//! One modality of a labelled dataset, materialized for training.

use crate::error::{Error, Result};
use crate::model::{loss, Classifier, InputNorm};
use crate::noise::NoisyDataset;
use crate::par;
use crate::skeleton::{derive, Modality, SkeletonSequence, SkeletonTopology, Tensor3};

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStream {
    pub modality: Modality,
    pub class_count: usize,
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor3>,
    /// Labels used for training (noisy, when derived from a [`NoisyDataset`]).
    pub labels: Vec<usize>,
    /// Injection provenance, when known.
    pub corrupted: Option<Vec<bool>>,
}

impl ModalityStream {
    pub fn from_sequences(
        samples: &[SkeletonSequence],
        class_count: usize,
        topology: &SkeletonTopology,
        modality: Modality,
    ) -> Result<Self> {
        let inputs = par::try_map_slice(samples, |s| derive(s, topology, modality).map(|m| m.data))?;
        Ok(Self {
            modality,
            class_count,
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            inputs,
            labels: samples.iter().map(|s| s.label).collect(),
            corrupted: None,
        })
    }

    pub fn from_noisy(noisy: &NoisyDataset, topology: &SkeletonTopology, modality: Modality) -> Result<Self> {
        let mut stream = Self::from_sequences(&noisy.samples, noisy.class_count, topology, modality)?;
        stream.corrupted = Some(noisy.corrupted_mask.clone());
        Ok(stream)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> Option<(usize, usize, usize)> {
        self.inputs.first().map(Tensor3::shape)
    }

    pub fn refs(&self, indices: &[usize]) -> Vec<&Tensor3> {
        indices.iter().map(|&i| &self.inputs[i]).collect()
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Per-channel standardization fitted on this stream.
    pub fn input_norm(&self) -> Result<InputNorm> {
        InputNorm::fit(&self.inputs).ok_or_else(|| Error::InvalidConfig("empty stream".into()))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            modality: self.modality,
            class_count: self.class_count,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: self.labels_at(indices),
            corrupted: self
                .corrupted
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Top-1 accuracy of `model` against the stream's labels.
pub fn accuracy(model: &dyn Classifier, stream: &ModalityStream) -> Result<f64> {
    if stream.is_empty() {
        return Err(Error::InvalidConfig("accuracy over an empty split".into()));
    }
    let all: Vec<usize> = (0..stream.len()).collect();
    let logits = model.forward(&stream.refs(&all))?;
    let hits = logits
        .iter_rows()
        .zip(&stream.labels)
        .filter(|(z, &y)| loss::argmax(z) == y)
        .count();
    Ok(hits as f64 / stream.len() as f64)
}
