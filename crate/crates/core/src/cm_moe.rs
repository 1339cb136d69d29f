//! Cross-modal mixture of experts: a gate network weights the joint, bone
//! and motion experts' class distributions per sample, and is fine-tuned on
//! the selected clean set with cross-entropy on the fused distribution.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::model::{
    load_checkpoint, loss, save_checkpoint, Classifier, GateNetwork, InputNorm, LrSchedule, Mode,
    ReferenceStGcn, Sgd,
};
use crate::par;
use crate::skeleton::{concat_channels, derive_all, Modality, SkeletonSequence, SkeletonTopology, Tensor3};

#[derive(Clone, Debug)]
pub struct FusionModel {
    /// Indexed by [`Modality::index`].
    pub experts: [ReferenceStGcn; 3],
    pub frozen: [bool; 3],
    pub gate: GateNetwork,
    pub class_count: usize,
}

impl FusionModel {
    /// Frozen experts by default.
    pub fn new(experts: [ReferenceStGcn; 3], gate: GateNetwork) -> Result<Self> {
        let k = experts[0].class_count();
        let shape = experts[0].input_shape();
        for e in &experts[1..] {
            if e.class_count() != k {
                return Err(Error::InvalidConfig(format!(
                    "experts disagree on class count ({} vs {k})",
                    e.class_count()
                )));
            }
            if e.input_shape() != shape {
                return Err(Error::InvalidConfig("experts disagree on input shape".into()));
            }
        }
        let (t, v, c) = shape;
        if gate.body().input_shape() != (t, v, GateNetwork::EXPERTS * c) {
            return Err(Error::InvalidConfig(format!(
                "gate expects {:?}, experts produce ({t}, {v}, {})",
                gate.body().input_shape(),
                3 * c
            )));
        }
        Ok(Self {
            experts,
            frozen: [true; 3],
            gate,
            class_count: k,
        })
    }

    /// Experts plus a fresh zero-headed gate whose input standardization is
    /// fitted on `data`.
    pub fn with_fresh_gate(experts: [ReferenceStGcn; 3], width: usize, seed: u64, data: &FusionData) -> Result<Self> {
        let (t, v, c) = experts[0].input_shape();
        let mut gate = GateNetwork::new(t, v, c, width, experts[0].topology().clone(), seed)?;
        let norm = InputNorm::fit(&data.gate_inputs)
            .ok_or_else(|| Error::InvalidConfig("gate fitted on an empty set".into()))?;
        gate.body_mut().set_input_norm(norm)?;
        Self::new(experts, gate)
    }

    pub fn topology(&self) -> &SkeletonTopology {
        self.experts[0].topology()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for e in &mut self.experts {
            e.set_mode(mode);
        }
        self.gate.body_mut().set_mode(mode);
    }

    fn require_eval(&self) -> Result<()> {
        let all_eval = self.experts.iter().all(|e| e.mode() == Mode::Eval) && self.gate.body().mode() == Mode::Eval;
        if all_eval {
            Ok(())
        } else {
            Err(Error::InvalidConfig("fusion inference requires eval mode".into()))
        }
    }

    fn check_labels(&self, data: &FusionData) -> Result<()> {
        if data.class_count != self.class_count {
            return Err(Error::InvalidConfig(format!(
                "data has {} classes, experts {}",
                data.class_count, self.class_count
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrediction {
    /// Softmax distribution of each expert, by [`Modality::index`].
    pub expert_scores: [Vec<f64>; 3],
    pub weights: [f64; 3],
    pub fused: Vec<f64>,
}

impl FusedPrediction {
    pub fn predicted(&self) -> usize {
        loss::argmax(&self.fused)
    }
}

/// `sum_m weights[m] * scores[m]`, accumulated in modality order.
pub fn combine(scores: &[Vec<f64>; 3], weights: [f64; 3]) -> Vec<f64> {
    let k = scores[0].len();
    (0..k)
        .map(|c| {
            let mut s = 0.0;
            for m in 0..3 {
                s += weights[m] * scores[m][c];
            }
            s
        })
        .collect()
}

/// Samples materialized as the three expert inputs plus the gate input.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionData {
    pub class_count: usize,
    pub ids: Vec<String>,
    /// Per-sample inputs, by [`Modality::index`].
    pub streams: [Vec<Tensor3>; 3],
    pub gate_inputs: Vec<Tensor3>,
    pub labels: Vec<usize>,
}

impl FusionData {
    /// Uses each sequence's own label (noisy for training sets, true for test).
    pub fn from_sequences(samples: &[SkeletonSequence], class_count: usize, topology: &SkeletonTopology) -> Result<Self> {
        let derived = par::try_map_slice(samples, |s| -> Result<_> {
            let [j, b, m] = derive_all(s, topology)?;
            let gate = concat_channels(&[&j.data, &b.data, &m.data])?;
            Ok((j.data, b.data, m.data, gate))
        })?;
        let mut streams: [Vec<Tensor3>; 3] = Default::default();
        let mut gate_inputs = Vec::with_capacity(samples.len());
        for (j, b, m, g) in derived {
            streams[0].push(j);
            streams[1].push(b);
            streams[2].push(m);
            gate_inputs.push(g);
        }
        Ok(Self {
            class_count,
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            streams,
            gate_inputs,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn expert_scores(experts: &[ReferenceStGcn; 3], data: &FusionData, i: usize) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    for m in 0..3 {
        let x = &data.streams[m][i];
        experts[m].check_input(x)?;
        out[m] = loss::softmax(&experts[m].logits_unchecked(x));
    }
    Ok(out)
}

fn fuse_row(model: &FusionModel, data: &FusionData, i: usize) -> Result<FusedPrediction> {
    let expert_scores = expert_scores(&model.experts, data, i)?;
    let weights = model.gate.weights_from_concat(&data.gate_inputs[i])?;
    let fused = combine(&expert_scores, weights);
    Ok(FusedPrediction {
        expert_scores,
        weights,
        fused,
    })
}

/// Fused prediction for one raw sequence.
pub fn fuse(model: &FusionModel, sample: &SkeletonSequence) -> Result<FusedPrediction> {
    model.require_eval()?;
    let data = FusionData::from_sequences(std::slice::from_ref(sample), model.class_count, model.topology())?;
    fuse_row(model, &data, 0)
}

/// Fused predictions for every row of `data`, in order.
pub fn fuse_all(model: &FusionModel, data: &FusionData) -> Result<Vec<FusedPrediction>> {
    model.require_eval()?;
    model.check_labels(data)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    par::try_map_slice(&rows, |&i| fuse_row(model, data, i))
}

fn check_fixed_weights(weights: [f64; 3]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite()) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateWeights(format!("{weights:?}")));
    }
    Ok(())
}

/// Default hand-set weights for joint, bone and motion.
pub const ENSEMBLE_WEIGHTS: [f64; 3] = [0.6, 0.6, 0.4];

/// Weighted sum of the experts' softmax outputs with constant weights,
/// used as given (no normalization).
pub fn fixed_weight_ensemble(
    experts: &[ReferenceStGcn; 3],
    weights: [f64; 3],
    sample: &SkeletonSequence,
) -> Result<FusedPrediction> {
    check_fixed_weights(weights)?;
    let data = FusionData::from_sequences(std::slice::from_ref(sample), experts[0].class_count(), experts[0].topology())?;
    let expert_scores = expert_scores(experts, &data, 0)?;
    let fused = combine(&expert_scores, weights);
    Ok(FusedPrediction {
        expert_scores,
        weights,
        fused,
    })
}

/// [`fixed_weight_ensemble`] over every row of `data`.
pub fn ensemble_all(experts: &[ReferenceStGcn; 3], weights: [f64; 3], data: &FusionData) -> Result<Vec<FusedPrediction>> {
    check_fixed_weights(weights)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    par::try_map_slice(&rows, |&i| {
        let expert_scores = expert_scores(experts, data, i)?;
        let fused = combine(&expert_scores, weights);
        Ok(FusedPrediction {
            expert_scores,
            weights,
            fused,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gate_width: usize,
    pub seed: u64,
}

impl Default for FusionHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: LrSchedule::constant(0.1),
            momentum: 0.9,
            weight_decay: 0.0005,
            gate_width: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Mean gate weight per modality over the epoch.
    pub mean_weights: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: FusionModel,
    pub epochs: Vec<GateEpoch>,
}

/// Per-sample terms of `-ln S[y]`: the loss and each expert's posterior
/// responsibility `W_m S_m[y] / S[y]`.
fn responsibilities(scores: &[Vec<f64>; 3], weights: [f64; 3], label: usize) -> (f64, [f64; 3]) {
    let parts = [
        weights[0] * scores[0][label],
        weights[1] * scores[1][label],
        weights[2] * scores[2][label],
    ];
    let s = (parts[0] + parts[1] + parts[2]).max(f64::MIN_POSITIVE);
    (-s.ln(), [parts[0] / s, parts[1] / s, parts[2] / s])
}

/// Train the gate (and any unfrozen expert) with cross-entropy on the fused
/// distribution against `clean`'s labels.
pub fn finetune_gate(mut model: FusionModel, clean: &FusionData, hyper: &FusionHyper) -> Result<FinetuneOutcome> {
    if clean.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning on an empty clean set".into()));
    }
    model.check_labels(clean)?;
    if hyper.epochs == 0 {
        return Ok(FinetuneOutcome {
            model,
            epochs: Vec::new(),
        });
    }
    for (m, e) in model.experts.iter_mut().enumerate() {
        e.set_mode(if model.frozen[m] { Mode::Eval } else { Mode::Train });
    }
    model.gate.body_mut().set_mode(Mode::Train);

    let all_frozen = model.frozen.iter().all(|&f| f);
    let cached: Option<Vec<[Vec<f64>; 3]>> = if all_frozen {
        let rows: Vec<usize> = (0..clean.len()).collect();
        Some(par::try_map_slice(&rows, |&i| expert_scores(&model.experts, clean, i))?)
    } else {
        None
    };

    let mut gate_opt = Sgd::new(model.gate.body().param_count(), hyper.momentum, hyper.weight_decay);
    let mut expert_opts: Vec<Sgd> = model
        .experts
        .iter()
        .map(|e| Sgd::new(e.param_count(), hyper.momentum, hyper.weight_decay))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..clean.len()).collect();
    let mut epochs = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let lr = hyper.lr.at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut weight_sum = [0.0; 3];
        for (b, batch) in order.chunks(hyper.batch_size.max(1)).enumerate() {
            let n = batch.len() as f64;
            let scores: Vec<[Vec<f64>; 3]> = match &cached {
                Some(c) => batch.iter().map(|&i| c[i].clone()).collect(),
                None => par::try_map_slice(batch, |&i| expert_scores(&model.experts, clean, i))?,
            };
            let gate = model.gate.body();
            let per_sample = par::map_indices(batch.len(), |j| {
                let i = batch[j];
                let y = clean.labels[i];
                let mut g = vec![0.0; gate.param_count()];
                let mut out = (0.0, [0.0; 3], [0.0; 3]);
                gate.accumulate_grad(
                    &clean.gate_inputs[i],
                    &mut |z| {
                        let w = loss::softmax(z);
                        let weights = [w[0], w[1], w[2]];
                        let (l, resp) = responsibilities(&scores[j], weights, y);
                        out = (l, weights, resp);
                        // d(-ln S[y]) / d(gate logit m) = W_m - responsibility_m
                        (0..3).map(|m| (weights[m] - resp[m]) / n).collect()
                    },
                    &mut g,
                );
                (out, g)
            });
            let mut gate_grad = vec![0.0; gate.param_count()];
            let mut resp_rows = Vec::with_capacity(batch.len());
            for ((l, w, resp), g) in per_sample {
                if !l.is_finite() {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        batch: b,
                        detail: "non-finite fused loss".into(),
                    });
                }
                loss_sum += l;
                for m in 0..3 {
                    weight_sum[m] += w[m];
                }
                for (a, x) in gate_grad.iter_mut().zip(&g) {
                    *a += x;
                }
                resp_rows.push(resp);
            }

            for m in (0..3).filter(|&m| !model.frozen[m]) {
                let expert = &model.experts[m];
                let parts = par::map_indices(batch.len(), |j| {
                    let i = batch[j];
                    let y = clean.labels[i];
                    let r = resp_rows[j][m];
                    let mut g = vec![0.0; expert.param_count()];
                    expert.accumulate_grad(
                        &clean.streams[m][i],
                        &mut |z| {
                            // d(-ln S[y]) / d(expert logits) = r_m (softmax - onehot)
                            let mut d = loss::cross_entropy_grad(z, y);
                            for x in &mut d {
                                *x *= r / n;
                            }
                            d
                        },
                        &mut g,
                    );
                    g
                });
                let mut grad = vec![0.0; expert.param_count()];
                for g in parts {
                    for (a, x) in grad.iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                expert_opts[m].step(model.experts[m].params_mut(), &grad, lr);
            }
            gate_opt.step(model.gate.body_mut().params_mut(), &gate_grad, lr);
        }
        let count = clean.len() as f64;
        let stats = GateEpoch {
            epoch,
            lr,
            mean_loss: loss_sum / count,
            mean_weights: weight_sum.map(|w| w / count),
        };
        log::debug!("gate epoch {epoch}: {stats:?}");
        epochs.push(stats);
    }
    model.set_mode(Mode::Eval);
    Ok(FinetuneOutcome { model, epochs })
}

/// JSON header of a fusion bundle directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionHeader {
    pub class_count: usize,
    pub frozen: [bool; 3],
    /// Checkpoint stems relative to the bundle, by [`Modality::index`].
    pub experts: [String; 3],
    pub gate: String,
    /// Hash of the clean-set manifest the gate was fine-tuned on.
    pub clean_set_sha256: Option<String>,
    pub hyper: FusionHyper,
    pub expert_sha256: [String; 3],
    pub gate_sha256: String,
}

pub fn save_fusion(dir: &Path, model: &FusionModel, hyper: &FusionHyper, clean_set_sha256: Option<String>) -> Result<FusionHeader> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems: [String; 3] = Default::default();
    let mut hashes: [String; 3] = Default::default();
    for m in Modality::ALL {
        let stem = format!("expert_{}", m.name());
        let h = save_checkpoint(&dir.join(&stem), &model.experts[m.index()], &format!("expert:{m}"), hyper.seed, hyper.epochs)?;
        stems[m.index()] = stem;
        hashes[m.index()] = h.param_sha256;
    }
    let g = save_checkpoint(&dir.join("gate"), model.gate.body(), "gate", hyper.seed, hyper.epochs)?;
    let header = FusionHeader {
        class_count: model.class_count,
        frozen: model.frozen,
        experts: stems,
        gate: "gate".into(),
        clean_set_sha256,
        hyper: hyper.clone(),
        expert_sha256: hashes,
        gate_sha256: g.param_sha256,
    };
    let path = dir.join("fusion.json");
    fs::write(&path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
    Ok(header)
}

pub fn load_fusion(dir: &Path) -> Result<(FusionModel, FusionHeader)> {
    let path = dir.join("fusion.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: FusionHeader = serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
    let load = |stem: &str| load_checkpoint(&dir.join(stem)).map(|(m, _)| m);
    let experts = [load(&header.experts[0])?, load(&header.experts[1])?, load(&header.experts[2])?];
    let gate = GateNetwork::from_body(load(&header.gate)?)?;
    let mut model = FusionModel::new(experts, gate)?;
    model.frozen = header.frozen;
    if model.class_count != header.class_count {
        return Err(Error::malformed(&path, "class count disagrees with experts"));
    }
    Ok((model, header))
}

/// Hash of a serialized clean-set manifest, for [`FusionHeader`].
pub fn manifest_hash(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}
