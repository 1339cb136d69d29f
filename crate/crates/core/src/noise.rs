//! Seeded label-noise injection with per-sample provenance, and selector
//! diagnostics computed against that provenance.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::json_sha256;
use crate::error::{Error, Result};
use crate::skeleton::{Dataset, SkeletonSequence};

/// Training data whose labels have been (partially) replaced by noisy labels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    /// Sequences carrying the noisy label in `label`.
    pub samples: Vec<SkeletonSequence>,
    pub true_labels: Vec<usize>,
    pub corrupted_mask: Vec<bool>,
    pub noise_ratio: f64,
    pub seed: u64,
    pub class_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub sample_id: String,
    pub true_label: usize,
    pub noisy_label: usize,
}

/// Audit trail of one injection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseManifest {
    pub seed: u64,
    pub noise_ratio: f64,
    pub class_count: usize,
    pub records: Vec<NoiseRecord>,
    /// Wall-clock stamp set by the CLI; left empty by library calls so that
    /// the manifest stays a pure function of its inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_at: Option<String>,
}

impl NoiseManifest {
    pub fn corrupted_mask(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.true_label != r.noisy_label).collect()
    }

    /// Hash of the manifest without its timestamp.
    pub fn content_hash(&self) -> Result<String> {
        let stripped = NoiseManifest {
            injected_at: None,
            ..self.clone()
        };
        json_sha256(&stripped)
    }

    /// Re-apply recorded labels to clean data.
    pub fn apply(&self, clean: &Dataset) -> Result<NoisyDataset> {
        if clean.samples.len() != self.records.len() {
            return Err(Error::InvalidArgument(format!(
                "manifest has {} records, dataset has {} samples",
                self.records.len(),
                clean.samples.len()
            )));
        }
        let by_id: HashMap<&str, &NoiseRecord> =
            self.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        let mut samples = clean.samples.clone();
        let mut true_labels = Vec::with_capacity(samples.len());
        let mut corrupted_mask = Vec::with_capacity(samples.len());
        for s in &mut samples {
            let rec = by_id
                .get(s.sample_id.as_str())
                .ok_or_else(|| Error::UnknownSample(s.sample_id.clone()))?;
            if rec.true_label != s.label {
                return Err(Error::InvalidArgument(format!(
                    "manifest true label {} disagrees with dataset label {} for `{}`",
                    rec.true_label, s.label, s.sample_id
                )));
            }
            true_labels.push(s.label);
            corrupted_mask.push(rec.noisy_label != rec.true_label);
            s.label = rec.noisy_label;
        }
        Ok(NoisyDataset {
            samples,
            true_labels,
            corrupted_mask,
            noise_ratio: self.noise_ratio,
            seed: self.seed,
            class_count: self.class_count,
        })
    }
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn noisy_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted_mask.iter().filter(|&&c| c).count()
    }

    pub fn manifest(&self) -> NoiseManifest {
        NoiseManifest {
            seed: self.seed,
            noise_ratio: self.noise_ratio,
            class_count: self.class_count,
            records: self
                .samples
                .iter()
                .zip(&self.true_labels)
                .map(|(s, &t)| NoiseRecord {
                    sample_id: s.sample_id.clone(),
                    true_label: t,
                    noisy_label: s.label,
                })
                .collect(),
            injected_at: None,
        }
    }

    /// Row subset, preserving provenance.
    pub fn subset(&self, indices: &[usize]) -> NoisyDataset {
        NoisyDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            corrupted_mask: indices.iter().map(|&i| self.corrupted_mask[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> NoisyDataset {
        NoisyDataset {
            samples: Vec::new(),
            true_labels: Vec::new(),
            corrupted_mask: Vec::new(),
            noise_ratio: self.noise_ratio,
            seed: self.seed,
            class_count: self.class_count,
        }
    }
}

/// `floor(ratio * n)`, robust to the representation error of decimal ratios
/// (e.g. `0.29 * 100` evaluates to `28.999...`).
pub fn corruption_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Flip exactly `floor(ratio * n)` labels, chosen uniformly without
/// replacement, each to a class drawn uniformly from the `K - 1` wrong ones.
pub fn inject_symmetric_noise(data: &Dataset, ratio: f64, seed: u64) -> Result<NoisyDataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    let k = data.class_count;
    if k < 2 {
        return Err(Error::DegenerateClasses(k));
    }
    for s in &data.samples {
        s.validate(k)?;
    }
    let n = data.samples.len();
    let flips = corruption_count(ratio, n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n, flips).into_vec();
    chosen.sort_unstable();

    let true_labels = data.labels();
    let mut samples = data.samples.clone();
    let mut corrupted_mask = vec![false; n];
    for i in chosen {
        let offset = rng.random_range(1..k);
        samples[i].label = (true_labels[i] + offset) % k;
        corrupted_mask[i] = true;
    }
    Ok(NoisyDataset {
        samples,
        true_labels,
        corrupted_mask,
        noise_ratio: ratio,
        seed,
        class_count: k,
    })
}

/// Class-conditional noise driven by a confusion matrix.
///
/// Only symmetric noise is supported; this entry point exists so callers can
/// name the model, and always returns [`Error::Unsupported`].
pub fn inject_asymmetric_noise(
    _data: &Dataset,
    _transition: &[Vec<f64>],
    _seed: u64,
) -> Result<NoisyDataset> {
    Err(Error::Unsupported("asymmetric label noise".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorQuality {
    /// Fraction of selected samples that are uncorrupted.
    pub precision: f64,
    /// Fraction of uncorrupted samples that were selected.
    pub recall: f64,
    pub selected: usize,
}

/// Precision / recall of a selection given by sample id.
pub fn selector_quality<'a, I>(selected_ids: I, noisy: &NoisyDataset) -> Result<SelectorQuality>
where
    I: IntoIterator<Item = &'a str>,
{
    let index: HashMap<&str, usize> = noisy
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.sample_id.as_str(), i))
        .collect();
    let mut picked = vec![false; noisy.len()];
    for id in selected_ids {
        let i = *index.get(id).ok_or_else(|| Error::UnknownSample(id.to_string()))?;
        picked[i] = true;
    }
    quality_from_mask(&picked, &noisy.corrupted_mask)
}

/// Precision / recall of a selection given by row index.
pub fn selector_quality_indices(selected: &[usize], corrupted_mask: &[bool]) -> Result<SelectorQuality> {
    let mut picked = vec![false; corrupted_mask.len()];
    for &i in selected {
        if i >= corrupted_mask.len() {
            return Err(Error::UnknownSample(format!("#{i}")));
        }
        picked[i] = true;
    }
    quality_from_mask(&picked, corrupted_mask)
}

fn quality_from_mask(picked: &[bool], corrupted: &[bool]) -> Result<SelectorQuality> {
    let selected = picked.iter().filter(|&&p| p).count();
    if selected == 0 {
        return Err(Error::EmptySelection);
    }
    let clean_total = corrupted.iter().filter(|&&c| !c).count();
    let clean_selected = picked.iter().zip(corrupted).filter(|&(&p, &c)| p && !c).count();
    Ok(SelectorQuality {
        precision: clean_selected as f64 / selected as f64,
        recall: if clean_total == 0 {
            1.0
        } else {
            clean_selected as f64 / clean_total as f64
        },
        selected,
    })
}
