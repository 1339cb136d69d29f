//! The end-to-end run: inject, derive, cross-train every modality, select
//! the clean set, fine-tune the fusion gate, evaluate. Each stage leaves a
//! `stage.json` marker keyed by the configuration hash so an interrupted run
//! resumes from the last finished stage.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PeerEval};
use super::evaluate::{evaluate, evaluate_scores, AccuracyMetrics};
use crate::cm_moe::{
    ensemble_all, finetune_gate, fuse_all, load_fusion, save_fusion, FusionData, FusionModel, GateEpoch,
};
use crate::cross_training::{cross_train, train_plain, write_selection_log, EpochMetrics, TrainHyper};
use crate::digest::{json_sha256, sha256_hex};
use crate::error::{Error, Result};
use crate::global_select::{rank_by_loss, select_clean, LossTable, SelectionManifest};
use crate::model::{load_checkpoint, save_checkpoint, ReferenceStGcn};
use crate::noise::{inject_symmetric_noise, NoiseManifest, NoisyDataset, SelectorQuality};
use crate::skeleton::{Dataset, Modality, SkeletonSequence, SkeletonTopology};
use crate::stream::ModalityStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub ratio: f64,
    pub seed: u64,
    pub corrupted: usize,
    pub manifest_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertReport {
    pub modality: Modality,
    pub chosen_peer: u8,
    pub peer_accuracy: [f64; 2],
    /// Selection quality of both peers in the final epoch.
    pub final_selection: Option<[SelectorQuality; 2]>,
    pub test: AccuracyMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub modality: Modality,
    pub final_loss: f64,
    pub test: AccuracyMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub fraction: f64,
    pub per_modality: BTreeMap<Modality, usize>,
    pub union: usize,
    pub quality: Option<BTreeMap<String, SelectorQuality>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub weights: [f64; 3],
    pub test: AccuracyMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub frozen: [bool; 3],
    pub gate_epochs: Vec<GateEpoch>,
    /// Mean gate weights over the test split.
    pub test_weights: [f64; 3],
    pub test: AccuracyMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    /// Loaded from a previous run rather than recomputed.
    pub resumed: bool,
}

/// Everything a run measured. Serializes deterministically: wall-clock
/// timings live in a separate file and are not part of the JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Configuration snapshot, with the output location blanked so reruns
    /// in other directories compare equal.
    pub config: ExperimentConfig,
    pub split: String,
    pub train_count: usize,
    pub peer_eval_count: usize,
    pub test_count: usize,
    pub noise: NoiseReport,
    pub experts: Vec<ExpertReport>,
    pub baseline: Vec<BaselineReport>,
    pub selection: SelectionReport,
    pub ensemble: EnsembleReport,
    pub fusion: FusionReport,
    /// SHA-256 of every stage artifact, keyed by path relative to the run.
    pub artifacts: BTreeMap<String, String>,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of [`RunReport::to_json`].
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut report: RunReport = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        let timings = path.with_file_name("timings.json");
        if let Ok(t) = fs::read_to_string(&timings) {
            report.timings = serde_json::from_str(&t).map_err(|e| Error::malformed(&timings, e.to_string()))?;
        }
        Ok(report)
    }

    pub fn expert(&self, m: Modality) -> Option<&ExpertReport> {
        self.experts.iter().find(|e| e.modality == m)
    }

    pub fn baseline_for(&self, m: Modality) -> Option<&BaselineReport> {
        self.baseline.iter().find(|b| b.modality == m)
    }

    /// `(arm, modality, metrics)` rows in a fixed order.
    pub fn metric_rows(&self) -> Vec<(&'static str, String, &AccuracyMetrics)> {
        let mut rows = Vec::new();
        for b in &self.baseline {
            rows.push(("plain", b.modality.to_string(), &b.test));
        }
        for e in &self.experts {
            rows.push(("cross-training", e.modality.to_string(), &e.test));
        }
        rows.push(("ensemble", "joint+bone+motion".to_string(), &self.ensemble.test));
        rows.push(("cm-moe", "joint+bone+motion".to_string(), &self.fusion.test));
        rows
    }
}

/// Configuration with the output location blanked.
fn portable(config: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: PathBuf::new(),
        ..config.clone()
    }
}

#[derive(Serialize, Deserialize)]
struct StageMarker<T> {
    config_sha256: String,
    summary: T,
}

struct Stages {
    root: PathBuf,
    key: String,
    timings: Vec<StageTiming>,
}

impl Stages {
    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let d = self.root.join(rel);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    /// Run `work` unless `rel/stage.json` records a finished run under the
    /// same configuration, in which case `resume` rebuilds the result from
    /// disk.
    fn run<S, T>(
        &mut self,
        name: &str,
        rel: &str,
        work: impl FnOnce(&Path) -> Result<(T, S)>,
        resume: impl FnOnce(&Path, S) -> Result<T>,
    ) -> Result<T>
    where
        S: Serialize + DeserializeOwned,
    {
        let started = Instant::now();
        let dir = self.dir(rel).map_err(|e| e.in_stage(name))?;
        let marker = dir.join("stage.json");
        let previous = fs::read_to_string(&marker)
            .ok()
            .and_then(|t| serde_json::from_str::<StageMarker<S>>(&t).ok())
            .filter(|m| m.config_sha256 == self.key);
        let (value, resumed) = match previous {
            Some(m) => {
                log::info!("{name}: resuming from {}", dir.display());
                (resume(&dir, m.summary).map_err(|e| e.in_stage(name))?, true)
            }
            None => {
                let (value, summary) = work(&dir).map_err(|e| e.in_stage(name))?;
                let m = StageMarker {
                    config_sha256: self.key.clone(),
                    summary,
                };
                let bytes = serde_json::to_vec_pretty(&m).map_err(|e| Error::from(e).in_stage(name))?;
                fs::write(&marker, bytes).map_err(|e| Error::io(&marker, e).in_stage(name))?;
                (value, false)
            }
        };
        self.timings.push(StageTiming {
            stage: name.to_string(),
            seconds: started.elapsed().as_secs_f64(),
            resumed,
        });
        Ok(value)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Seed of one modality's trainer, distinct per modality.
pub fn modality_seed(seed: u64, m: Modality) -> u64 {
    seed ^ ((m.index() as u64 + 1) << 32)
}

/// Fail unless every test sample keeps its clean label and none appears in
/// the injection manifest.
pub fn check_test_purity(test: &[SkeletonSequence], clean: &HashMap<String, usize>, manifest: &NoiseManifest) -> Result<()> {
    let injected: std::collections::HashSet<&str> = manifest.records.iter().map(|r| r.sample_id.as_str()).collect();
    for s in test {
        if injected.contains(s.sample_id.as_str()) {
            return Err(Error::Inconsistent(format!("test sample {} went through noise injection", s.sample_id)));
        }
        if clean.get(&s.sample_id) != Some(&s.label) {
            return Err(Error::Inconsistent(format!("test sample {} does not carry its clean label", s.sample_id)));
        }
    }
    Ok(())
}

struct Prepared {
    topology: SkeletonTopology,
    class_count: usize,
    noisy: NoisyDataset,
    /// Rows of `noisy` used for training.
    train_rows: Vec<usize>,
    /// Rows of `noisy` withheld to choose between peers.
    peer_rows: Vec<usize>,
    test: Vec<SkeletonSequence>,
}

fn load_split(config: &ExperimentConfig) -> Result<(Dataset, Vec<SkeletonSequence>, HashMap<String, usize>)> {
    let mut data = config.dataset.load()?;
    let topology = SkeletonTopology::default_for(data.joint_count);
    if config.center {
        data.samples = data
            .samples
            .iter()
            .map(|s| s.centered_on(topology.root()))
            .collect::<Result<_>>()?;
    }
    let clean: HashMap<String, usize> = data.samples.iter().map(|s| (s.sample_id.clone(), s.label)).collect();
    let (train, test) = config.split.split(&data.samples)?;
    let train = Dataset {
        class_count: data.class_count,
        joint_count: data.joint_count,
        samples: train,
    };
    Ok((train, test, clean))
}

/// `(train, peer)` row indices of an `n`-row noisy training set. The held-out
/// slice is a seeded permutation prefix; under [`PeerEval::TestSplit`] every
/// row trains.
pub fn split_peer_rows(peer_eval: &PeerEval, n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    match *peer_eval {
        PeerEval::TestSplit => ((0..n).collect(), Vec::new()),
        PeerEval::HeldOut { fraction } => {
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
            let held = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
            let mut peer = rows[..held].to_vec();
            let mut train = rows[held..].to_vec();
            peer.sort_unstable();
            train.sort_unstable();
            (train, peer)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct InjectSummary {
    corrupted: usize,
    manifest_sha256: String,
}

fn prepare(config: &ExperimentConfig, stages: &mut Stages) -> Result<Prepared> {
    let (train, test, clean) = load_split(config).map_err(|e| e.in_stage("load"))?;
    let topology = SkeletonTopology::default_for(train.joint_count);
    let class_count = train.class_count;
    let noisy = stages.run(
        "inject",
        "inject",
        |dir| {
            let noisy = inject_symmetric_noise(&train, config.noise_ratio, config.noise_seed)?;
            let manifest = noisy.manifest();
            write_json(&dir.join("noise_manifest.json"), &manifest)?;
            let summary = InjectSummary {
                corrupted: noisy.corrupted_count(),
                manifest_sha256: manifest.content_hash()?,
            };
            Ok((noisy, summary))
        },
        |dir, summary: InjectSummary| {
            let manifest: NoiseManifest = read_json(&dir.join("noise_manifest.json"))?;
            if manifest.content_hash()? != summary.manifest_sha256 {
                return Err(Error::malformed(dir.join("noise_manifest.json"), "manifest hash changed"));
            }
            manifest.apply(&train)
        },
    )?;
    check_test_purity(&test, &clean, &noisy.manifest()).map_err(|e| e.in_stage("inject"))?;
    let (train_rows, peer_rows) = split_peer_rows(&config.peer_eval, noisy.len(), config.noise_seed);
    Ok(Prepared {
        topology,
        class_count,
        noisy,
        train_rows,
        peer_rows,
        test,
    })
}

struct Streams {
    train: ModalityStream,
    peer: ModalityStream,
    test: ModalityStream,
}

#[derive(Serialize, Deserialize)]
struct DeriveSummary {
    shapes: BTreeMap<Modality, (usize, usize, usize)>,
    train_sha256: BTreeMap<Modality, String>,
}

fn stream_hash(s: &ModalityStream) -> String {
    let bytes: Vec<u8> = s
        .inputs
        .iter()
        .flat_map(|t| t.as_slice().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    sha256_hex(&bytes)
}

fn derive_streams(config: &ExperimentConfig, prep: &Prepared, stages: &mut Stages) -> Result<[Streams; 3]> {
    let build = || -> Result<[Streams; 3]> {
        let noisy = |rows: &[usize]| prep.noisy.subset(rows);
        let train = noisy(&prep.train_rows);
        let peer = noisy(&prep.peer_rows);
        let one = |m: Modality| -> Result<Streams> {
            let test = ModalityStream::from_sequences(&prep.test, prep.class_count, &prep.topology, m)?;
            let train = ModalityStream::from_noisy(&train, &prep.topology, m)?;
            let peer = match config.peer_eval {
                PeerEval::TestSplit => test.clone(),
                PeerEval::HeldOut { .. } => ModalityStream::from_noisy(&peer, &prep.topology, m)?,
            };
            Ok(Streams { train, peer, test })
        };
        Ok([one(Modality::Joint)?, one(Modality::Bone)?, one(Modality::Motion)?])
    };
    stages.run(
        "derive",
        "derive",
        |_| {
            let streams = build()?;
            let mut summary = DeriveSummary {
                shapes: BTreeMap::new(),
                train_sha256: BTreeMap::new(),
            };
            for (m, s) in Modality::ALL.iter().zip(&streams) {
                summary.shapes.insert(*m, s.train.input_shape().unwrap_or((0, 0, 0)));
                summary.train_sha256.insert(*m, stream_hash(&s.train));
            }
            Ok((streams, summary))
        },
        |dir, summary: DeriveSummary| {
            let streams = build()?;
            for (m, s) in Modality::ALL.iter().zip(&streams) {
                if summary.train_sha256.get(m) != Some(&stream_hash(&s.train)) {
                    return Err(Error::malformed(dir.join("stage.json"), format!("{m} stream differs from the recorded one")));
                }
            }
            Ok(streams)
        },
    )
}

#[derive(Serialize, Deserialize)]
struct CrossSummary {
    chosen_peer: u8,
    peer_accuracy: [f64; 2],
}

fn hyper_for(config: &ExperimentConfig, m: Modality) -> TrainHyper {
    TrainHyper {
        seed: modality_seed(config.cross_train.seed, m),
        ..config.cross_train.clone()
    }
}

struct Expert {
    model: ReferenceStGcn,
    chosen_peer: u8,
    peer_accuracy: [f64; 2],
    epochs: Vec<EpochMetrics>,
}

fn train_expert(config: &ExperimentConfig, m: Modality, s: &Streams, topology: &SkeletonTopology, stages: &mut Stages) -> Result<Expert> {
    let hyper = hyper_for(config, m);
    let schedule = config.schedule()?;
    stages.run(
        &format!("cross-train:{m}"),
        &format!("cross_train/{m}"),
        |dir| {
            let out = cross_train(&s.train, &s.peer, &schedule, &hyper, &config.backbone, topology)?;
            save_checkpoint(&dir.join("expert"), &out.expert, &format!("expert:{m}"), hyper.seed, hyper.epochs)?;
            write_json(&dir.join("epochs.json"), &out.epochs)?;
            write_selection_log(&dir.join("selection_log.csv"), &out.selection_log)?;
            let summary = CrossSummary {
                chosen_peer: out.chosen_peer,
                peer_accuracy: out.peer_accuracy,
            };
            let expert = Expert {
                model: out.expert,
                chosen_peer: out.chosen_peer,
                peer_accuracy: out.peer_accuracy,
                epochs: out.epochs,
            };
            Ok((expert, summary))
        },
        |dir, summary: CrossSummary| {
            Ok(Expert {
                model: load_checkpoint(&dir.join("expert"))?.0,
                chosen_peer: summary.chosen_peer,
                peer_accuracy: summary.peer_accuracy,
                epochs: read_json(&dir.join("epochs.json"))?,
            })
        },
    )
}

fn train_baseline(config: &ExperimentConfig, m: Modality, s: &Streams, topology: &SkeletonTopology, stages: &mut Stages) -> Result<(ReferenceStGcn, f64)> {
    let hyper = hyper_for(config, m);
    stages.run(
        &format!("baseline:{m}"),
        &format!("baseline/{m}"),
        |dir| {
            let out = train_plain(&s.train, &hyper, &config.backbone, topology)?;
            save_checkpoint(&dir.join("model"), &out.model, &format!("plain:{m}"), hyper.seed, hyper.epochs)?;
            write_json(&dir.join("losses.json"), &out.mean_loss)?;
            let last = out.mean_loss.last().copied().unwrap_or(f64::NAN);
            Ok(((out.model, last), last))
        },
        |dir, last: f64| Ok((load_checkpoint(&dir.join("model"))?.0, last)),
    )
}

fn write_loss_tables(path: &Path, tables: &[LossTable; 3]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "joint", "bone", "motion"])?;
    for (i, id) in tables[0].ids.iter().enumerate() {
        let row = [
            id.clone(),
            format!("{:e}", tables[0].losses[i]),
            format!("{:e}", tables[1].losses[i]),
            format!("{:e}", tables[2].losses[i]),
        ];
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Union rows of the clean set plus its manifest.
fn select_stage(config: &ExperimentConfig, experts: &[Expert], streams: &[Streams; 3], stages: &mut Stages) -> Result<(Vec<usize>, SelectionManifest)> {
    let fraction = config.fraction();
    let ids = streams[0].train.ids.clone();
    stages.run(
        "select",
        "select",
        |dir| {
            let tables = [
                rank_by_loss(&experts[0].model, &streams[0].train)?,
                rank_by_loss(&experts[1].model, &streams[1].train)?,
                rank_by_loss(&experts[2].model, &streams[2].train)?,
            ];
            write_loss_tables(&dir.join("losses.csv"), &tables)?;
            let sel = select_clean(&tables, fraction)?;
            let manifest = sel.manifest(streams[0].train.corrupted.as_deref())?;
            write_json(&dir.join("selection_manifest.json"), &manifest)?;
            Ok(((sel.union, manifest), ()))
        },
        |dir, ()| {
            let manifest: SelectionManifest = read_json(&dir.join("selection_manifest.json"))?;
            let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let mut union = manifest
                .union
                .iter()
                .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::UnknownSample(id.clone())))
                .collect::<Result<Vec<_>>>()?;
            union.sort_unstable();
            Ok((union, manifest))
        },
    )
}

fn fuse_stage(
    config: &ExperimentConfig,
    experts: [ReferenceStGcn; 3],
    clean: &FusionData,
    manifest_hash: &str,
    stages: &mut Stages,
) -> Result<(FusionModel, Vec<GateEpoch>)> {
    let hyper = &config.fusion.hyper;
    stages.run(
        "fuse",
        "fuse",
        |dir| {
            let mut model = FusionModel::with_fresh_gate(experts, hyper.gate_width, hyper.seed, clean)?;
            model.frozen = [!config.fusion.unfreeze_experts; 3];
            let out = finetune_gate(model, clean, hyper)?;
            save_fusion(&dir.join("bundle"), &out.model, hyper, Some(manifest_hash.to_string()))?;
            write_json(&dir.join("gate_epochs.json"), &out.epochs)?;
            Ok(((out.model, out.epochs), ()))
        },
        |dir, ()| {
            let (model, _) = load_fusion(&dir.join("bundle"))?;
            Ok((model, read_json(&dir.join("gate_epochs.json"))?))
        },
    )
}

fn collect_artifacts(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == "stage.json" {
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.insert(rel, file_hash(&path)?);
        }
    }
    Ok(out)
}

/// Execute every stage, writing artifacts, `config.toml`, `report.json`,
/// `timings.json` and `metrics.csv` into the configured output directory.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let root = config.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let snapshot = root.join("config.toml");
    fs::write(&snapshot, config.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    let mut stages = Stages {
        root: root.join("stages"),
        key: json_sha256(&portable(config))?,
        timings: Vec::new(),
    };

    let prep = prepare(config, &mut stages)?;
    let streams = derive_streams(config, &prep, &mut stages)?;

    let mut experts = Vec::with_capacity(3);
    for m in Modality::ALL {
        experts.push(train_expert(config, m, &streams[m.index()], &prep.topology, &mut stages)?);
    }
    let mut baselines = Vec::new();
    if config.baseline {
        for m in Modality::ALL {
            baselines.push((m, train_baseline(config, m, &streams[m.index()], &prep.topology, &mut stages)?));
        }
    }

    let (union, manifest) = select_stage(config, &experts, &streams, &mut stages)?;
    let manifest_hash = json_sha256(&manifest)?;
    let clean_rows: Vec<usize> = union.iter().map(|&i| prep.train_rows[i]).collect();
    let clean_set = prep.noisy.subset(&clean_rows);
    let clean = FusionData::from_sequences(&clean_set.samples, prep.class_count, &prep.topology).map_err(|e| e.in_stage("fuse"))?;
    let expert_models = [experts[0].model.clone(), experts[1].model.clone(), experts[2].model.clone()];
    let (fusion, gate_epochs) = fuse_stage(config, expert_models, &clean, &manifest_hash, &mut stages)?;

    let started = Instant::now();
    let eval = || -> Result<_> {
        let test = FusionData::from_sequences(&prep.test, prep.class_count, &prep.topology)?;
        let fused = fuse_all(&fusion, &test)?;
        let fused_metrics = evaluate_scores(fused.iter().map(|p| p.fused.as_slice()), &test.labels, prep.class_count)?;
        let mut test_weights = [0.0; 3];
        for p in &fused {
            for (acc, w) in test_weights.iter_mut().zip(p.weights) {
                *acc += w / fused.len() as f64;
            }
        }
        let ens = ensemble_all(&fusion.experts, config.fusion.ensemble_weights, &test)?;
        let ens_metrics = evaluate_scores(ens.iter().map(|p| p.fused.as_slice()), &test.labels, prep.class_count)?;
        let expert_reports = Modality::ALL
            .iter()
            .zip(&experts)
            .map(|(&m, e)| {
                Ok(ExpertReport {
                    modality: m,
                    chosen_peer: e.chosen_peer,
                    peer_accuracy: e.peer_accuracy,
                    final_selection: e.epochs.last().and_then(|x| x.selection),
                    test: evaluate(&e.model, &streams[m.index()].test)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let baseline_reports = baselines
            .iter()
            .map(|(m, (model, last))| {
                Ok(BaselineReport {
                    modality: *m,
                    final_loss: *last,
                    test: evaluate(model, &streams[m.index()].test)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((fused_metrics, test_weights, ens_metrics, expert_reports, baseline_reports))
    };
    let (fused_metrics, test_weights, ens_metrics, expert_reports, baseline_reports) = eval().map_err(|e| e.in_stage("evaluate"))?;
    stages.timings.push(StageTiming {
        stage: "evaluate".into(),
        seconds: started.elapsed().as_secs_f64(),
        resumed: false,
    });

    let report = RunReport {
        config: portable(config),
        split: config.split.name(),
        train_count: prep.train_rows.len(),
        peer_eval_count: streams[0].peer.len(),
        test_count: prep.test.len(),
        noise: NoiseReport {
            ratio: config.noise_ratio,
            seed: config.noise_seed,
            corrupted: prep.noisy.corrupted_count(),
            manifest_sha256: prep.noisy.manifest().content_hash()?,
        },
        experts: expert_reports,
        baseline: baseline_reports,
        selection: SelectionReport {
            fraction: manifest.fraction,
            per_modality: manifest.per_modality.iter().map(|(m, ids)| (*m, ids.len())).collect(),
            union: manifest.union.len(),
            quality: manifest.quality.clone(),
        },
        ensemble: EnsembleReport {
            weights: config.fusion.ensemble_weights,
            test: ens_metrics,
        },
        fusion: FusionReport {
            frozen: fusion.frozen,
            gate_epochs,
            test_weights,
            test: fused_metrics,
        },
        artifacts: collect_artifacts(&stages.root)?,
        timings: stages.timings,
    };
    write_outputs(&root, &report)?;
    Ok(report)
}

fn write_outputs(root: &Path, report: &RunReport) -> Result<()> {
    let path = root.join("report.json");
    fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
    write_json(&root.join("timings.json"), &report.timings)?;
    let csv_path = root.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["split", "noise_ratio", "arm", "modality", "top1", "top5", "count"])?;
    for (arm, modality, m) in report.metric_rows() {
        w.write_record([
            report.split.clone(),
            report.noise.ratio.to_string(),
            arm.to_string(),
            modality,
            m.top1.to_string(),
            m.top5.to_string(),
            m.count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}
