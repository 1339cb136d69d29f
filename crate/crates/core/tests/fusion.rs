mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use skelnoise::cm_moe::{
    combine, ensemble_all, finetune_gate, fixed_weight_ensemble, fuse_all, load_fusion, save_fusion, FusionData,
    FusionHyper, FusionModel,
};
use skelnoise::model::{loss, Classifier, GateNetwork, LrSchedule, Mode, ReferenceStGcn};
use skelnoise::skeleton::{SkeletonSequence, SkeletonTopology};
use skelnoise::Error;

const FRAMES: usize = 6;
const JOINTS: usize = 5;
const CLASSES: usize = 3;

fn experts(seed: u64) -> [ReferenceStGcn; 3] {
    [0, 1, 2].map(|m| {
        let mut e = tiny_model(FRAMES, JOINTS, CLASSES, seed + m);
        e.set_mode(Mode::Eval);
        e
    })
}

fn gate(seed: u64) -> GateNetwork {
    GateNetwork::new(FRAMES, JOINTS, 3, 4, SkeletonTopology::tree(JOINTS), seed).unwrap()
}

fn data(seed: u64, n: usize) -> (Vec<SkeletonSequence>, FusionData) {
    let mut r = rng(seed);
    let seqs: Vec<SkeletonSequence> = (0..n)
        .map(|i| {
            let label = r.random_range(0..CLASSES);
            let mut s = random_sequence(&mut r, FRAMES, JOINTS, label);
            s.sample_id = format!("f{i:03}");
            s
        })
        .collect();
    let d = FusionData::from_sequences(&seqs, CLASSES, &SkeletonTopology::tree(JOINTS)).unwrap();
    (seqs, d)
}

fn with_head_bias(mut g: GateNetwork, bias: [f64; 3]) -> GateNetwork {
    let n = g.body().param_count();
    let mut p = g.body().params().to_vec();
    p[n - 3..].copy_from_slice(&bias);
    g.body_mut().set_params(p).unwrap();
    g
}

fn eval_model(experts: [ReferenceStGcn; 3], gate: GateNetwork) -> FusionModel {
    let mut m = FusionModel::new(experts, gate).unwrap();
    m.set_mode(Mode::Eval);
    m
}

#[test]
fn one_hot_gate_reproduces_each_expert() {
    let ex = experts(1);
    let (_, d) = data(2, 25);
    for target in 0..3 {
        let mut bias = [0.0; 3];
        bias[target] = 1000.0;
        let model = eval_model(ex.clone(), with_head_bias(gate(3), bias));
        let out = fuse_all(&model, &d).unwrap();
        for (i, p) in out.iter().enumerate() {
            let alone = loss::softmax(&ex[target].logits_unchecked(&d.streams[target][i]));
            assert_eq!(p.fused, alone);
            assert_eq!(p.predicted(), loss::argmax(&alone));
        }
    }
}

#[test]
fn uniform_gate_over_identical_experts_is_a_fixed_point() {
    let one = experts(4)[0].clone();
    let ex = [one.clone(), one.clone(), one.clone()];
    // the joint expert sees every stream: feed the joint tensor to all three
    let (_, mut d) = data(5, 20);
    d.streams[1] = d.streams[0].clone();
    d.streams[2] = d.streams[0].clone();
    let model = eval_model(ex, gate(6));
    for (i, p) in fuse_all(&model, &d).unwrap().iter().enumerate() {
        assert_eq!(p.weights, [1.0 / 3.0; 3]);
        let alone = loss::softmax(&one.logits_unchecked(&d.streams[0][i]));
        for (a, b) in p.fused.iter().zip(&alone) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn fused_scores_are_distributions() {
    let (_, d) = data(7, 50);
    let mut r = rng(8);
    for seed in 0..5 {
        let bias = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
        let model = eval_model(experts(10 * seed), with_head_bias(gate(seed), bias));
        for p in fuse_all(&model, &d).unwrap() {
            assert!((p.fused.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.fused.iter().all(|&s| s >= 0.0));
            assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn fixed_weight_ensemble_matches_scalar_oracle() {
    let ex = experts(11);
    let (seqs, d) = data(12, 30);
    let all = ensemble_all(&ex, [0.6, 0.6, 0.4], &d).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let one = fixed_weight_ensemble(&ex, [0.6, 0.6, 0.4], s).unwrap();
        assert_eq!(one, all[i]);
        let p: Vec<Vec<f64>> = (0..3).map(|m| scalar_softmax(&ex[m].logits_unchecked(&d.streams[m][i]))).collect();
        for c in 0..CLASSES {
            assert_eq!(one.fused[c], 0.6 * p[0][c] + 0.6 * p[1][c] + 0.4 * p[2][c]);
        }
    }
    assert!(matches!(ensemble_all(&ex, [0.0; 3], &d), Err(Error::DegenerateWeights(_))));
    assert!(matches!(ensemble_all(&ex, [f64::NAN, 1.0, 1.0], &d), Err(Error::DegenerateWeights(_))));
}

proptest! {
    #[test]
    fn ensemble_prediction_is_invariant_to_positive_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let rows: [Vec<f64>; 3] = [0, 1, 2].map(|_| {
            let z: Vec<f64> = (0..6).map(|_| r.random_range(-3.0..3.0)).collect();
            loss::softmax(&z)
        });
        let w = [r.random_range(0.1..1.0), r.random_range(0.1..1.0), r.random_range(0.1..1.0)];
        let a = combine(&rows, w);
        let b = combine(&rows, w.map(|x| x * scale));
        prop_assert_eq!(loss::argmax(&a), loss::argmax(&b));
        // powers of two scale exactly
        let c = combine(&rows, w.map(|x| x * 4.0));
        for (x, y) in a.iter().zip(&c) {
            prop_assert_eq!(x * 4.0, *y);
        }
    }
}

#[test]
fn fusion_requires_eval_mode_and_matching_shapes() {
    let (seqs, d) = data(13, 3);
    let model = FusionModel::new(experts(1), gate(1)).unwrap();
    assert!(fuse_all(&model, &d).is_err());
    assert!(skelnoise::cm_moe::fuse(&model, &seqs[0]).is_err());
    let wrong_gate = GateNetwork::new(FRAMES, JOINTS, 2, 4, SkeletonTopology::tree(JOINTS), 1).unwrap();
    assert!(FusionModel::new(experts(1), wrong_gate).is_err());
    let mut mixed = experts(1);
    mixed[2] = tiny_model(FRAMES, JOINTS, CLASSES + 1, 9);
    assert!(FusionModel::new(mixed, gate(1)).is_err());
}

fn hyper(epochs: usize) -> FusionHyper {
    FusionHyper {
        epochs,
        batch_size: 8,
        lr: LrSchedule::constant(0.1),
        gate_width: 4,
        seed: 3,
        ..FusionHyper::default()
    }
}

#[test]
fn frozen_experts_stay_bitwise_fixed_while_the_gate_learns() {
    let ex = experts(20);
    let (_, clean) = data(21, 40);
    let model = FusionModel::with_fresh_gate(ex.clone(), 4, 2, &clean).unwrap();
    assert_eq!(model.frozen, [true; 3]);
    let gate_before = model.gate.body().params().to_vec();
    let out = finetune_gate(model, &clean, &hyper(3)).unwrap();
    assert_eq!(out.epochs.len(), 3);
    for m in 0..3 {
        assert_eq!(out.model.experts[m].params(), ex[m].params());
    }
    assert_ne!(out.model.gate.body().params(), gate_before.as_slice());
    assert_eq!(out.model.gate.body().mode(), Mode::Eval);
    for e in &out.epochs {
        assert!((e.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(e.mean_loss.is_finite());
    }
}

#[test]
fn unfrozen_experts_move_and_only_those() {
    let ex = experts(30);
    let (_, clean) = data(31, 24);
    let mut model = FusionModel::with_fresh_gate(ex.clone(), 4, 2, &clean).unwrap();
    model.frozen = [true, false, true];
    let out = finetune_gate(model, &clean, &hyper(2)).unwrap();
    assert_eq!(out.model.experts[0].params(), ex[0].params());
    assert_ne!(out.model.experts[1].params(), ex[1].params());
    assert_eq!(out.model.experts[2].params(), ex[2].params());
}

#[test]
fn finetune_is_deterministic_and_rejects_empty_sets() {
    let (_, clean) = data(41, 20);
    let run = || {
        let m = FusionModel::with_fresh_gate(experts(40), 4, 2, &clean).unwrap();
        finetune_gate(m, &clean, &hyper(2)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.gate.body().params(), b.model.gate.body().params());
    assert_eq!(a.epochs, b.epochs);
    let (_, empty) = data(0, 0);
    let m = FusionModel::new(experts(40), gate(1)).unwrap();
    assert!(finetune_gate(m, &empty, &hyper(1)).is_err());
}

#[test]
fn bundle_round_trips() {
    let (_, clean) = data(51, 12);
    let m = FusionModel::with_fresh_gate(experts(50), 4, 2, &clean).unwrap();
    let tuned = finetune_gate(m, &clean, &hyper(1)).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let header = save_fusion(dir.path(), &tuned, &hyper(1), Some("abc".into())).unwrap();
    let (back, header_back) = load_fusion(dir.path()).unwrap();
    assert_eq!(header, header_back);
    assert_eq!(back.frozen, tuned.frozen);
    assert_eq!(fuse_all(&back, &clean).unwrap(), fuse_all(&tuned, &clean).unwrap());
}
