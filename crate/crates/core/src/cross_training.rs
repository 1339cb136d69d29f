//! Co-teaching: two peer networks per modality, each updated on the
//! small-loss subset chosen by the other, under a keep ratio that decays
//! from 1 to `1 - r` over a warm-up of `T_in` epochs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackboneSpec, Classifier, LrSchedule, Mode, ReferenceStGcn, Sgd};
use crate::noise::{selector_quality_indices, SelectorQuality};
use crate::skeleton::SkeletonTopology;
use crate::stream::{accuracy, ModalityStream};

/// Keep-ratio schedule `R(T) = 1 - min(T / T_in * r, r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSchedule {
    pub noise_ratio: f64,
    pub warmup_epochs: usize,
}

impl SelectionSchedule {
    pub fn new(noise_ratio: f64, warmup_epochs: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&noise_ratio) {
            return Err(Error::InvalidRatio(noise_ratio));
        }
        if warmup_epochs == 0 {
            return Err(Error::InvalidArgument("warm-up must last at least one epoch".into()));
        }
        Ok(Self {
            noise_ratio,
            warmup_epochs,
        })
    }
}

/// Shortest decimal form of `x` as `num / den`.
fn decimal_fraction(x: f64) -> Option<(u128, u128)> {
    let text = format!("{x}");
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    if frac.len() > 30 || int.starts_with('-') {
        return None;
    }
    let den = 10u128.checked_pow(frac.len() as u32)?;
    let num = format!("{int}{frac}").parse::<u128>().ok()?;
    Some((num, den))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `R(T)`. The noise ratio is read as the decimal it prints as and the
/// expression is evaluated in exact rational arithmetic before a single final
/// rounding, so e.g. `r = 0.8, T >= T_in` yields exactly `0.2`.
pub fn keep_ratio(schedule: &SelectionSchedule, epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::InvalidArgument(format!("negative epoch {epoch}")));
    }
    let t_in = schedule.warmup_epochs as u128;
    let m = (epoch as u128).min(t_in);
    let r = schedule.noise_ratio;
    if let Some((p, q)) = decimal_fraction(r) {
        let den = t_in.checked_mul(q);
        let sub = m.checked_mul(p);
        if let (Some(den), Some(sub)) = (den, sub) {
            let num = den - sub;
            let g = gcd(num, den).max(1);
            let (num, den) = (num / g, den / g);
            const EXACT: u128 = 1 << 53;
            if num < EXACT && den < EXACT {
                return Ok(num as f64 / den as f64);
            }
        }
    }
    Ok(1.0 - (m as f64 / t_in as f64 * r).min(r))
}

/// `ceil(ratio * n)`, tolerant of representation error (`0.7 * 10` is
/// `7.000000000000001` in binary floating point).
pub fn keep_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of the `ceil(keep_ratio * n)` smallest losses, ties to the lower
/// index, returned in ascending index order.
pub fn small_loss_select(losses: &[f64], keep_ratio: f64) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::InvalidArgument(format!("loss #{i} is not finite")));
    }
    let k = keep_count(keep_ratio, losses.len());
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 65,
            batch_size: 64,
            lr: LrSchedule {
                base: 0.1,
                milestones: vec![35, 55],
                gamma: 0.1,
            },
            momentum: 0.9,
            weight_decay: 0.0004,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Network (1 or 2) whose losses produced the selection.
    pub net: u8,
    pub sample_id: String,
}

/// Two peers plus their optimizers.
#[derive(Clone, Debug)]
pub struct CoTeachingState {
    pub net1: ReferenceStGcn,
    pub net2: ReferenceStGcn,
    pub opt1: Sgd,
    pub opt2: Sgd,
    pub epoch: usize,
    pub lr: f64,
    pub selection_log: Vec<SelectionRecord>,
}

impl CoTeachingState {
    pub fn new(net1: ReferenceStGcn, net2: ReferenceStGcn, hyper: &TrainHyper) -> Self {
        let opt1 = Sgd::new(net1.param_count(), hyper.momentum, hyper.weight_decay);
        let opt2 = Sgd::new(net2.param_count(), hyper.momentum, hyper.weight_decay);
        Self {
            net1,
            net2,
            opt1,
            opt2,
            epoch: 0,
            lr: hyper.lr.at(0),
            selection_log: Vec::new(),
        }
    }
}

/// What one co-teaching step selected, as batch-local indices.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub keep_ratio: f64,
    /// Chosen by net 1's losses; used to update net 2.
    pub selected_by_net1: Vec<usize>,
    /// Chosen by net 2's losses; used to update net 1.
    pub selected_by_net2: Vec<usize>,
    pub losses1: Vec<f64>,
    pub losses2: Vec<f64>,
}

fn diverged(epoch: usize, batch: usize, what: &str) -> Error {
    Error::TrainingDiverged {
        epoch,
        batch,
        detail: what.to_string(),
    }
}

/// One cross-update. Both selections are taken from the pre-update
/// parameters; net 1 then steps on net 2's selection and vice versa.
pub fn co_teaching_step(
    state: &mut CoTeachingState,
    stream: &ModalityStream,
    batch: &[usize],
    batch_index: usize,
    schedule: &SelectionSchedule,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inputs = stream.refs(batch);
    let labels = stream.labels_at(batch);
    let epoch = state.epoch;

    let losses1 = state.net1.per_sample_loss(&inputs, &labels)?;
    let losses2 = state.net2.per_sample_loss(&inputs, &labels)?;
    if losses1.iter().chain(&losses2).any(|l| !l.is_finite()) {
        return Err(diverged(epoch, batch_index, "non-finite loss"));
    }
    let ratio = keep_ratio(schedule, epoch as i64)?;
    let by1 = small_loss_select(&losses1, ratio)?;
    let by2 = small_loss_select(&losses2, ratio)?;

    let (_, grad1) = state
        .net1
        .loss_and_grad(&pick(&inputs, &by2), &pick(&labels, &by2))?;
    let (_, grad2) = state
        .net2
        .loss_and_grad(&pick(&inputs, &by1), &pick(&labels, &by1))?;
    if grad1.iter().chain(&grad2).any(|g| !g.is_finite()) {
        return Err(diverged(epoch, batch_index, "non-finite gradient"));
    }
    let lr = state.lr;
    state.opt1.step(state.net1.params_mut(), &grad1, lr);
    state.opt2.step(state.net2.params_mut(), &grad2, lr);

    for (net, sel) in [(1u8, &by1), (2u8, &by2)] {
        state.selection_log.extend(sel.iter().map(|&i| SelectionRecord {
            epoch,
            batch: batch_index,
            net,
            sample_id: stream.ids[batch[i]].clone(),
        }));
    }
    Ok(StepOutcome {
        keep_ratio: ratio,
        selected_by_net1: by1,
        selected_by_net2: by2,
        losses1,
        losses2,
    })
}

fn pick<T: Copy>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub keep_ratio: f64,
    pub mean_loss: [f64; 2],
    /// Accuracy of each peer on the evaluation split after the epoch.
    pub accuracy: [f64; 2],
    /// Precision / recall of each net's selections over the epoch, when
    /// injection provenance is available.
    pub selection: Option<[SelectorQuality; 2]>,
}

#[derive(Clone, Debug)]
pub struct CrossTrainOutcome {
    pub expert: ReferenceStGcn,
    /// 1 or 2.
    pub chosen_peer: u8,
    pub peer_accuracy: [f64; 2],
    pub epochs: Vec<EpochMetrics>,
    pub selection_log: Vec<SelectionRecord>,
}

/// Peer seeds and the shuffle seed, derived from one run seed.
pub fn derived_seeds(seed: u64) -> (u64, u64, u64) {
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    (base ^ 1, base ^ 2, base ^ 3)
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Train two peers on `train` for `hyper.epochs` epochs and return the one
/// with the higher accuracy on `eval` (net 1 on ties).
pub fn cross_train(
    train: &ModalityStream,
    eval: &ModalityStream,
    schedule: &SelectionSchedule,
    hyper: &TrainHyper,
    backbone: &BackboneSpec,
    topology: &SkeletonTopology,
) -> Result<CrossTrainOutcome> {
    if eval.is_empty() {
        return Err(Error::InvalidConfig("peer evaluation split is empty".into()));
    }
    let shape = train
        .input_shape()
        .ok_or_else(|| Error::InvalidConfig("training split is empty".into()))?;
    let (s1, s2, s_shuffle) = derived_seeds(hyper.seed);
    let norm = train.input_norm()?;
    let mut net1 = backbone.build(shape, train.class_count, topology, s1)?;
    let mut net2 = backbone.build(shape, train.class_count, topology, s2)?;
    net1.set_input_norm(norm.clone())?;
    net2.set_input_norm(norm)?;
    let mut state = CoTeachingState::new(net1, net2, hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(s_shuffle);
    let mut epochs = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        state.epoch = epoch;
        state.lr = hyper.lr.at(epoch);
        let mut picked: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        let mut loss_sum = [0.0; 2];
        let mut ratio = 1.0;
        for (b, batch) in epoch_batches(train.len(), hyper.batch_size, &mut rng).iter().enumerate() {
            let out = co_teaching_step(&mut state, train, batch, b, schedule)?;
            ratio = out.keep_ratio;
            loss_sum[0] += out.losses1.iter().sum::<f64>();
            loss_sum[1] += out.losses2.iter().sum::<f64>();
            picked[0].extend(out.selected_by_net1.iter().map(|&i| batch[i]));
            picked[1].extend(out.selected_by_net2.iter().map(|&i| batch[i]));
        }
        let selection = match &train.corrupted {
            Some(mask) => Some([
                selector_quality_indices(&picked[0], mask)?,
                selector_quality_indices(&picked[1], mask)?,
            ]),
            None => None,
        };
        let n = train.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            lr: state.lr,
            keep_ratio: ratio,
            mean_loss: [loss_sum[0] / n, loss_sum[1] / n],
            accuracy: [accuracy(&state.net1, eval)?, accuracy(&state.net2, eval)?],
            selection,
        };
        log::debug!("{} epoch {epoch}: {:?}", train.modality, metrics);
        epochs.push(metrics);
    }

    state.net1.set_mode(Mode::Eval);
    state.net2.set_mode(Mode::Eval);
    let [acc1, acc2] = match epochs.last() {
        Some(last) => last.accuracy,
        None => [accuracy(&state.net1, eval)?, accuracy(&state.net2, eval)?],
    };
    let (expert, chosen_peer) = if acc2 > acc1 { (state.net2, 2) } else { (state.net1, 1) };
    Ok(CrossTrainOutcome {
        expert,
        chosen_peer,
        peer_accuracy: [acc1, acc2],
        epochs,
        selection_log: state.selection_log,
    })
}

#[derive(Clone, Debug)]
pub struct PlainOutcome {
    pub model: ReferenceStGcn,
    pub mean_loss: Vec<f64>,
}

/// Ordinary mini-batch SGD on every sample; the no-denoising baseline.
pub fn train_plain(
    train: &ModalityStream,
    hyper: &TrainHyper,
    backbone: &BackboneSpec,
    topology: &SkeletonTopology,
) -> Result<PlainOutcome> {
    let shape = train
        .input_shape()
        .ok_or_else(|| Error::InvalidConfig("training split is empty".into()))?;
    let (s1, _, s_shuffle) = derived_seeds(hyper.seed);
    let mut model = backbone.build(shape, train.class_count, topology, s1)?;
    model.set_input_norm(train.input_norm()?)?;
    let mut opt = Sgd::new(model.param_count(), hyper.momentum, hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(s_shuffle);
    let mut mean_loss = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let lr = hyper.lr.at(epoch);
        let mut total = 0.0;
        for (b, batch) in epoch_batches(train.len(), hyper.batch_size, &mut rng).iter().enumerate() {
            let (loss, grad) = model.loss_and_grad(&train.refs(batch), &train.labels_at(batch))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, b, "non-finite loss"));
            }
            total += loss * batch.len() as f64;
            opt.step(model.params_mut(), &grad, lr);
        }
        mean_loss.push(total / train.len() as f64);
    }
    model.set_mode(Mode::Eval);
    Ok(PlainOutcome { model, mean_loss })
}

/// Selection log as CSV: `epoch,batch,net,sample_id`.
pub fn write_selection_log(path: &Path, log: &[SelectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in log {
        w.serialize(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
