//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelnoise::model::{ReferenceStGcn, StGcnConfig};
use skelnoise::skeleton::{SkeletonSequence, SkeletonTopology, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Coordinates uniform in [-2, 2).
pub fn random_sequence(rng: &mut ChaCha8Rng, frames: usize, joints: usize, label: usize) -> SkeletonSequence {
    let data = (0..frames * joints * 3).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    SkeletonSequence {
        sample_id: format!("r{}", rng.random::<u32>()),
        frames: Tensor3::new(frames, joints, 3, data).unwrap(),
        label,
        subject_id: rng.random_range(0..10),
        camera_id: rng.random_range(1..4),
    }
}

/// Coordinates on a 1/8 grid in [-16, 16], so sums and differences of a few
/// of them are exact in f32.
pub fn dyadic_sequence(rng: &mut ChaCha8Rng, frames: usize, joints: usize) -> SkeletonSequence {
    let data = (0..frames * joints * 3)
        .map(|_| rng.random_range(-128i32..=128) as f32 / 8.0)
        .collect();
    SkeletonSequence {
        sample_id: "d".into(),
        frames: Tensor3::new(frames, joints, 3, data).unwrap(),
        label: 0,
        subject_id: 0,
        camera_id: 1,
    }
}

/// Bone stream by explicit loops over (t, v, c), looking up each joint's
/// parent by scanning the pair list.
pub fn naive_bone(seq: &SkeletonSequence, topo: &SkeletonTopology) -> Vec<f32> {
    let (t_len, v_len, c_len) = seq.frames.shape();
    let mut out = vec![0.0f32; t_len * v_len * c_len];
    for t in 0..t_len {
        for v in 0..v_len {
            let parent = topo.bone_pairs().iter().find(|p| p.0 == v).map(|p| p.1);
            for c in 0..c_len {
                let value = match parent {
                    Some(p) => seq.frames.get(t, p, c) - seq.frames.get(t, v, c),
                    None => 0.0,
                };
                out[(t * v_len + v) * c_len + c] = value;
            }
        }
    }
    out
}

/// Motion stream by explicit loops; the last frame stays zero.
pub fn naive_motion(seq: &SkeletonSequence) -> Vec<f32> {
    let (t_len, v_len, c_len) = seq.frames.shape();
    let mut out = vec![0.0f32; t_len * v_len * c_len];
    for t in 0..t_len {
        for v in 0..v_len {
            for c in 0..c_len {
                if t + 1 < t_len {
                    out[(t * v_len + v) * c_len + c] = seq.frames.get(t + 1, v, c) - seq.frames.get(t, v, c);
                }
            }
        }
    }
    out
}

/// A random rooted tree on `joints` vertices: joint `i > 0` hangs off a
/// uniformly chosen earlier joint.
pub fn random_tree(rng: &mut ChaCha8Rng, joints: usize) -> SkeletonTopology {
    let pairs = (0..joints)
        .map(|i| (i, if i == 0 { 0 } else { rng.random_range(0..i) }))
        .collect();
    SkeletonTopology::new(joints, pairs, 0).unwrap()
}

/// `ceil(num * n / den)` in integers.
pub fn ceil_count(num: usize, den: usize, n: usize) -> usize {
    (num * n).div_ceil(den)
}

/// Sort `(loss, index)` lexicographically and take the first `k`, returned ascending.
pub fn brute_smallest(losses: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = losses.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    out.sort_unstable();
    out
}

pub fn brute_union(tables: &[Vec<f64>; 3], k: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let per: Vec<Vec<usize>> = tables.iter().map(|t| brute_smallest(t, k)).collect();
    let union: BTreeSet<usize> = per.iter().flatten().copied().collect();
    (per, union.into_iter().collect())
}

/// Losses with deliberate ties: values drawn from a small set half the time.
pub fn random_losses(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0..8) as f64 * 0.25
            } else {
                rng.random_range(0.0..5.0)
            }
        })
        .collect()
}

pub fn tiny_config(frames: usize, joints: usize, channels: usize, classes: usize) -> StGcnConfig {
    StGcnConfig {
        frames,
        joints,
        in_channels: channels,
        widths: vec![4, 6],
        temporal_kernel: 3,
        outputs: classes,
    }
}

pub fn tiny_model(frames: usize, joints: usize, classes: usize, seed: u64) -> ReferenceStGcn {
    ReferenceStGcn::new(tiny_config(frames, joints, 3, classes), SkeletonTopology::tree(joints), seed).unwrap()
}

/// Random tensor with the given shape, entries in [-1, 1).
pub fn random_tensor(rng: &mut ChaCha8Rng, frames: usize, joints: usize, channels: usize) -> Tensor3 {
    let data = (0..frames * joints * channels).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor3::new(frames, joints, channels, data).unwrap()
}

/// Softmax computed term by term, the plain textbook way.
pub fn scalar_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}
