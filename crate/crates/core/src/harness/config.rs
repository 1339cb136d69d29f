//! Experiment configuration, read from and snapshotted as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cm_moe::{FusionHyper, ENSEMBLE_WEIGHTS};
use crate::cross_training::{SelectionSchedule, TrainHyper};
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, LrSchedule};
use crate::skeleton::{generate_synthetic_dataset, load_dataset, Dataset, DatasetFormat, SkeletonSequence, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
    Path {
        path: PathBuf,
        #[serde(default = "default_format")]
        format: DatasetFormat,
    },
}

fn default_format() -> DatasetFormat {
    DatasetFormat::ArrayContainer
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            spec: SyntheticSpec::default(),
            seed: 0,
        }
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { spec, seed } => generate_synthetic_dataset(spec, *seed),
            DatasetSource::Path { path, format } => load_dataset(path, *format),
        }
    }
}

/// Training subjects of the standard NTU-60 cross-subject protocol.
pub const NTU_XSUB_TRAIN_SUBJECTS: [u32; 20] = [1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38];

/// How samples are divided into training and test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "kebab-case")]
pub enum SplitProtocol {
    /// Train on the listed subjects, test on the rest.
    CrossSubject {
        #[serde(default = "xsub_subjects")]
        train_subjects: Vec<u32>,
    },
    /// Train on the listed cameras, test on the rest.
    CrossView {
        #[serde(default = "xview_cameras")]
        train_cameras: Vec<u32>,
    },
    /// Hold out a seeded random fraction of subjects.
    SubjectHoldout {
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn xsub_subjects() -> Vec<u32> {
    NTU_XSUB_TRAIN_SUBJECTS.to_vec()
}

fn xview_cameras() -> Vec<u32> {
    vec![2, 3]
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol::SubjectHoldout {
            test_fraction: default_test_fraction(),
            seed: 0,
        }
    }
}

impl SplitProtocol {
    pub fn name(&self) -> String {
        match self {
            SplitProtocol::CrossSubject { .. } => "cross-subject".into(),
            SplitProtocol::CrossView { .. } => "cross-view".into(),
            SplitProtocol::SubjectHoldout { test_fraction, seed } => format!("subject-holdout-{test_fraction}-{seed}"),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SplitProtocol::CrossSubject { train_subjects } if train_subjects.is_empty() => {
                Err(Error::InvalidConfig("cross-subject split lists no training subjects".into()))
            }
            SplitProtocol::CrossView { train_cameras } if train_cameras.is_empty() => {
                Err(Error::InvalidConfig("cross-view split lists no training cameras".into()))
            }
            SplitProtocol::SubjectHoldout { test_fraction, .. } if !(*test_fraction > 0.0 && *test_fraction < 1.0) => {
                Err(Error::InvalidConfig(format!("test fraction {test_fraction} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// `(train, test)`, each in the dataset's order.
    pub fn split(&self, samples: &[SkeletonSequence]) -> Result<(Vec<SkeletonSequence>, Vec<SkeletonSequence>)> {
        let in_train: Box<dyn Fn(&SkeletonSequence) -> bool> = match self {
            SplitProtocol::CrossSubject { train_subjects } => {
                let set = train_subjects.clone();
                Box::new(move |s| set.contains(&s.subject_id))
            }
            SplitProtocol::CrossView { train_cameras } => {
                let set = train_cameras.clone();
                Box::new(move |s| set.contains(&s.camera_id))
            }
            SplitProtocol::SubjectHoldout { test_fraction, seed } => {
                let mut subjects: Vec<u32> = samples.iter().map(|s| s.subject_id).collect();
                subjects.sort_unstable();
                subjects.dedup();
                subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
                let held = ((subjects.len() as f64 * test_fraction).round() as usize).clamp(1, subjects.len().saturating_sub(1).max(1));
                let test: Vec<u32> = subjects[..held].to_vec();
                Box::new(move |s| !test.contains(&s.subject_id))
            }
        };
        let (train, test): (Vec<_>, Vec<_>) = samples.iter().cloned().partition(|s| in_train(s));
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "{} split leaves {} training and {} test samples",
                self.name(),
                train.len(),
                test.len()
            )));
        }
        Ok((train, test))
    }
}

/// Which split decides the better co-teaching peer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PeerEval {
    /// A seeded slice of the noisy training set, withheld from training.
    HeldOut { fraction: f64 },
    /// The (clean) test split.
    TestSplit,
}

impl Default for PeerEval {
    fn default() -> Self {
        PeerEval::HeldOut { fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    #[serde(flatten)]
    pub hyper: FusionHyper,
    pub unfreeze_experts: bool,
    pub ensemble_weights: [f64; 3],
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hyper: FusionHyper::default(),
            unfreeze_experts: false,
            ensemble_weights: ENSEMBLE_WEIGHTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub noise_ratio: f64,
    pub noise_seed: u64,
    /// Selection fraction for the clean set; `1 - noise_ratio` when unset.
    pub selection_fraction: Option<f64>,
    pub warmup_epochs: usize,
    /// Re-center every sequence on the root joint of its first frame.
    pub center: bool,
    /// Also train the plain (no denoising) baseline for every modality.
    pub baseline: bool,
    pub dataset: DatasetSource,
    pub split: SplitProtocol,
    pub peer_eval: PeerEval,
    pub backbone: BackboneSpec,
    pub cross_train: TrainHyper,
    pub fusion: FusionConfig,
    /// Extra splits evaluated by the ablation suite; empty means `split` only.
    pub ablation_splits: Vec<SplitProtocol>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            noise_ratio: 0.4,
            noise_seed: 0,
            selection_fraction: None,
            warmup_epochs: 10,
            center: true,
            baseline: true,
            dataset: DatasetSource::default(),
            split: SplitProtocol::default(),
            peer_eval: PeerEval::default(),
            backbone: BackboneSpec::default(),
            cross_train: TrainHyper::default(),
            fusion: FusionConfig::default(),
            ablation_splits: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Small synthetic setup sized to run end to end on one CPU core in a
    /// few minutes.
    pub fn toy(noise_ratio: f64, seed: u64) -> Self {
        Self {
            output_dir: PathBuf::from(format!("runs/toy-r{noise_ratio}-s{seed}")),
            noise_ratio,
            noise_seed: seed,
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec {
                    frames: 20,
                    noise_scale: 0.1,
                    ..SyntheticSpec::default()
                },
                seed,
            },
            split: SplitProtocol::SubjectHoldout {
                test_fraction: 1.0 / 3.0,
                seed,
            },
            backbone: BackboneSpec {
                widths: vec![16, 16],
                temporal_kernel: 3,
            },
            // small batches matter here: with 600 samples, large batches leave
            // the peers near chance when the keep ratio starts to drop
            cross_train: TrainHyper {
                epochs: 40,
                batch_size: 8,
                lr: LrSchedule {
                    base: 0.02,
                    milestones: vec![26],
                    gamma: 0.1,
                },
                seed,
                ..TrainHyper::default()
            },
            fusion: FusionConfig {
                hyper: FusionHyper {
                    epochs: 10,
                    batch_size: 16,
                    lr: LrSchedule::constant(0.05),
                    gate_width: 8,
                    seed,
                    ..FusionHyper::default()
                },
                ..FusionConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn fraction(&self) -> f64 {
        self.selection_fraction.unwrap_or(1.0 - self.noise_ratio)
    }

    pub fn schedule(&self) -> Result<SelectionSchedule> {
        SelectionSchedule::new(self.noise_ratio, self.warmup_epochs)
    }

    /// Pre-flight checks; nothing is written before these pass.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return bad(format!("noise ratio {} outside [0, 1)", self.noise_ratio));
        }
        let p = self.fraction();
        if !(p > 0.0 && p <= 1.0) {
            return bad(format!("selection fraction {p} outside (0, 1]"));
        }
        if self.warmup_epochs == 0 {
            return bad("warm-up must last at least one epoch".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output directory is empty".into());
        }
        match &self.dataset {
            DatasetSource::Synthetic { spec, .. } => spec.validate()?,
            DatasetSource::Path { path, .. } if !path.exists() => {
                return bad(format!("dataset path {} does not exist", path.display()));
            }
            DatasetSource::Path { .. } => {}
        }
        self.split.validate()?;
        for s in &self.ablation_splits {
            s.validate()?;
        }
        if let PeerEval::HeldOut { fraction } = self.peer_eval {
            if !(fraction > 0.0 && fraction < 1.0) {
                return bad(format!("peer evaluation fraction {fraction} outside (0, 1)"));
            }
        }
        if self.backbone.widths.is_empty() || self.backbone.widths.contains(&0) {
            return bad("backbone widths must be non-empty and positive".into());
        }
        if self.backbone.temporal_kernel.is_multiple_of(2) {
            return bad("temporal kernel must be odd".into());
        }
        if self.cross_train.epochs == 0 || self.cross_train.batch_size == 0 {
            return bad("cross-training needs at least one epoch and a positive batch size".into());
        }
        if self.fusion.hyper.batch_size == 0 || self.fusion.hyper.gate_width == 0 {
            return bad("fusion batch size and gate width must be positive".into());
        }
        let w = self.fusion.ensemble_weights;
        if w.iter().any(|x| !x.is_finite()) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateWeights(format!("{w:?}")));
        }
        Ok(())
    }

    /// Every split the ablation suite runs.
    pub fn ablation_split_list(&self) -> Vec<SplitProtocol> {
        if self.ablation_splits.is_empty() {
            vec![self.split.clone()]
        } else {
            self.ablation_splits.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Tensor3;

    #[test]
    fn default_round_trips_through_toml() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::toy(0.4, 3)] {
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn sparse_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "noise_ratio = 0.8\noutput_dir = \"x\"\n[split]\nprotocol = \"cross-view\"\n",
        )
        .unwrap();
        assert_eq!(cfg.noise_ratio, 0.8);
        assert_eq!(cfg.warmup_epochs, 10);
        assert_eq!(cfg.cross_train.epochs, 65);
        assert_eq!(cfg.cross_train.weight_decay, 0.0004);
        assert_eq!(cfg.fusion.hyper.weight_decay, 0.0005);
        assert_eq!(cfg.split, SplitProtocol::CrossView { train_cameras: vec![2, 3] });
        assert!((cfg.fraction() - 0.2).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.noise_ratio = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetSource::Path {
            path: "/definitely/not/here".into(),
            format: DatasetFormat::ArrayContainer,
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.fusion.ensemble_weights = [0.0; 3];
        assert!(matches!(cfg.validate(), Err(Error::DegenerateWeights(_))));
    }

    fn seq(id: usize, subject: u32, camera: u32) -> SkeletonSequence {
        SkeletonSequence {
            sample_id: format!("s{id}"),
            frames: Tensor3::zeros(2, 1, 3),
            label: 0,
            subject_id: subject,
            camera_id: camera,
        }
    }

    #[test]
    fn split_rules() {
        let samples: Vec<_> = (0..12).map(|i| seq(i, (i % 6) as u32 + 1, (i % 3) as u32 + 1)).collect();
        let (tr, te) = SplitProtocol::CrossView { train_cameras: vec![2, 3] }.split(&samples).unwrap();
        assert!(tr.iter().all(|s| s.camera_id != 1) && te.iter().all(|s| s.camera_id == 1));
        let (tr, te) = SplitProtocol::CrossSubject { train_subjects: vec![1, 2] }.split(&samples).unwrap();
        assert_eq!(tr.len(), 4);
        assert_eq!(te.len(), 8);
        let hold = SplitProtocol::SubjectHoldout {
            test_fraction: 0.34,
            seed: 5,
        };
        let (tr, te) = hold.split(&samples).unwrap();
        assert_eq!(tr.len() + te.len(), 12);
        for t in &te {
            assert!(tr.iter().all(|s| s.subject_id != t.subject_id));
        }
        assert_eq!(hold.split(&samples).unwrap(), (tr, te));
        assert!(SplitProtocol::CrossSubject { train_subjects: vec![99] }.split(&samples).is_err());
    }
}
