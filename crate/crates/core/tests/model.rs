mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use skelnoise::model::{loss, Classifier, GateNetwork, InputNorm, LrSchedule, Mode, ReferenceStGcn, Sgd};
use skelnoise::skeleton::{SkeletonTopology, Tensor3};
use skelnoise::Error;

fn batch(seed: u64, n: usize, frames: usize, joints: usize, channels: usize) -> Vec<Tensor3> {
    let mut r = rng(seed);
    (0..n).map(|_| random_tensor(&mut r, frames, joints, channels)).collect()
}

/// Finite differences along random directions, for a model with a
/// non-trivial input standardization. Parameters are jittered first: with
/// zero-initialized biases a dead input row leaves pre-activations exactly on
/// the ReLU kink, where central differences average the one-sided slopes.
#[test]
fn gradient_matches_central_differences() {
    let mut r = rng(21);
    for (frames, joints, classes) in [(6, 4, 3), (5, 7, 5)] {
        let mut model = tiny_model(frames, joints, classes, 8);
        let norm = InputNorm {
            mean: (0..joints * 3).map(|_| r.random_range(-0.5..0.5)).collect(),
            std: (0..joints * 3).map(|_| r.random_range(0.5..2.0)).collect(),
        };
        model.set_input_norm(norm).unwrap();
        let jittered = model.params().iter().map(|w| w + r.random_range(-0.1..0.1)).collect();
        model.set_params(jittered).unwrap();
        let xs = batch(3, 5, frames, joints, 3);
        let refs: Vec<&Tensor3> = xs.iter().collect();
        let labels: Vec<usize> = (0..5).map(|i| i % classes).collect();
        let (_, grad) = model.loss_and_grad(&refs, &labels).unwrap();
        let base = model.params().to_vec();
        for _ in 0..10 {
            let d: Vec<f64> = (0..base.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let analytic: f64 = grad.iter().zip(&d).map(|(g, x)| g * x).sum();
            let h = 1e-6;
            let mut at = |s: f64| {
                model.set_params(base.iter().zip(&d).map(|(w, x)| w + s * h * x).collect()).unwrap();
                model.loss_and_grad(&refs, &labels).unwrap().0
            };
            let numeric = (at(1.0) - at(-1.0)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(rel < 1e-4, "rel error {rel}");
        }
    }
}

#[test]
fn per_sample_loss_equals_scalar_loop() {
    let model = tiny_model(6, 5, 4, 1);
    let xs = batch(2, 9, 6, 5, 3);
    let refs: Vec<&Tensor3> = xs.iter().collect();
    let labels: Vec<usize> = (0..9).map(|i| (i * 7) % 4).collect();
    let got = model.per_sample_loss(&refs, &labels).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let z = model.forward(&[x]).unwrap().row(0).to_vec();
        let p = scalar_softmax(&z);
        let want = -p[labels[i]].ln();
        assert!((got[i] - want).abs() <= 1e-12 * want.max(1.0), "{} vs {want}", got[i]);
        assert_eq!(got[i], loss::cross_entropy(&z, labels[i]));
    }
    let (mean, _) = model.loss_and_grad(&refs, &labels).unwrap();
    assert!((mean - got.iter().sum::<f64>() / 9.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn loss_is_positive_and_zero_head_gives_ln_k(seed in any::<u64>(), classes in 2usize..8) {
        let mut model = tiny_model(4, 3, classes, seed);
        let xs = batch(seed, 4, 4, 3, 3);
        let refs: Vec<&Tensor3> = xs.iter().collect();
        let labels: Vec<usize> = (0..4).map(|i| i % classes).collect();
        for l in model.per_sample_loss(&refs, &labels).unwrap() {
            prop_assert!(l > 0.0 && l.is_finite());
        }
        model.zero_head();
        for l in model.per_sample_loss(&refs, &labels).unwrap() {
            prop_assert!((l - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_extreme_logits(big in 1.0f64..1e6, label in 0usize..3) {
        let z = [big, -big, 0.0];
        let l = loss::cross_entropy(&z, label);
        prop_assert!(l.is_finite() && l >= 0.0);
        let p = loss::softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Relabelling joints together with the graph leaves the logits unchanged.
    #[test]
    fn backbone_is_permutation_equivariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let joints = r.random_range(2..9);
        let topo = random_tree(&mut r, joints);
        let mut perm: Vec<usize> = (0..joints).collect();
        perm.shuffle(&mut r);
        let cfg = tiny_config(5, joints, 3, 3);
        let a = ReferenceStGcn::new(cfg.clone(), topo.clone(), seed).unwrap();
        let mut b = ReferenceStGcn::zeroed(cfg, topo.permuted(&perm).unwrap()).unwrap();
        b.set_params(a.params().to_vec()).unwrap();
        let x = random_tensor(&mut r, 5, joints, 3);
        let mut y = Tensor3::zeros(5, joints, 3);
        for t in 0..5 {
            for v in 0..joints {
                for c in 0..3 {
                    y.set(t, perm[v], c, x.get(t, v, c));
                }
            }
        }
        let za = a.forward(&[&x]).unwrap().row(0).to_vec();
        let zb = b.forward(&[&y]).unwrap().row(0).to_vec();
        for (p, q) in za.iter().zip(&zb) {
            prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0));
        }
    }
}

#[test]
fn forward_is_batch_invariant() {
    let model = tiny_model(6, 5, 3, 4);
    let xs = batch(5, 7, 6, 5, 3);
    let all: Vec<&Tensor3> = xs.iter().collect();
    let whole = model.forward(&all).unwrap();
    for (i, x) in xs.iter().enumerate() {
        assert_eq!(model.forward(&[x]).unwrap().row(0), whole.row(i));
    }
}

#[test]
fn shape_and_label_errors() {
    let model = tiny_model(6, 5, 3, 4);
    let wrong = Tensor3::zeros(6, 4, 3);
    assert!(matches!(model.forward(&[&wrong]), Err(Error::Dimension(_))));
    let ok = Tensor3::zeros(6, 5, 3);
    assert!(matches!(model.per_sample_loss(&[&ok], &[3]), Err(Error::InvalidLabel { label: 3, classes: 3 })));
    assert!(matches!(model.loss_and_grad(&[], &[]), Err(Error::EmptyBatch)));
    let mut m = model.clone();
    assert!(m.set_params(vec![0.0; 3]).is_err());
    assert!(m
        .set_input_norm(InputNorm {
            mean: vec![0.0; 15],
            std: vec![0.0; 15]
        })
        .is_err());
}

#[test]
fn input_norm_standardizes_training_inputs() {
    let xs = batch(6, 20, 4, 3, 3);
    let norm = InputNorm::fit(&xs).unwrap();
    assert_eq!(norm.mean.len(), 9);
    for f in 0..9 {
        let values: Vec<f64> = xs
            .iter()
            .flat_map(|x| x.as_slice().chunks(9).map(move |row| row[f] as f64))
            .collect();
        let m = values.iter().sum::<f64>() / values.len() as f64;
        assert!((norm.mean[f] - m).abs() < 1e-9);
        assert!(norm.std[f] > 0.0);
    }
    assert!(InputNorm::fit(std::iter::empty()).is_none());
}

#[test]
fn sgd_step_matches_hand_computation() {
    let mut opt = Sgd::new(2, 0.9, 0.1);
    let mut w = vec![1.0, -2.0];
    opt.step(&mut w, &[0.5, 0.25], 0.1);
    // v = g + wd * w = (0.6, 0.05); w -= 0.1 v
    assert!((w[0] - 0.94).abs() < 1e-15 && (w[1] + 2.005).abs() < 1e-15);
    opt.step(&mut w, &[0.0, 0.0], 0.1);
    let v0 = 0.9 * 0.6 + 0.1 * 0.94;
    assert!((w[0] - (0.94 - 0.1 * v0)).abs() < 1e-15);
}

#[test]
fn lr_schedule_steps_at_milestones() {
    let s = LrSchedule {
        base: 0.1,
        milestones: vec![3, 6],
        gamma: 0.1,
    };
    assert_eq!(s.at(0), 0.1);
    assert!((s.at(3) - 0.01).abs() < 1e-15);
    assert!((s.at(10) - 0.001).abs() < 1e-15);
    assert_eq!(LrSchedule::constant(0.5).at(100), 0.5);
}

#[test]
fn gate_weights_lie_on_the_simplex() {
    let topo = SkeletonTopology::tree(5);
    let mut gate = GateNetwork::new(6, 5, 3, 4, topo, 3).unwrap();
    let xs = batch(7, 10, 6, 5, 9);
    for x in &xs {
        let w = gate.weights_from_concat(x).unwrap();
        assert_eq!(w, [1.0 / 3.0; 3], "zero head must give the uniform weighting");
    }
    let n = gate.body().param_count();
    let mut p = gate.body().params().to_vec();
    let mut r = rng(1);
    for v in &mut p[n - 12..] {
        *v = r.random_range(-4.0..4.0);
    }
    gate.body_mut().set_params(p).unwrap();
    for x in &xs {
        let w = gate.weights_from_concat(x).unwrap();
        assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(gate.weights_from_concat(&xs[0].clone()).is_ok());
    assert!(gate.weights_from_concat(&Tensor3::zeros(6, 5, 3)).is_err());
    gate.body_mut().set_mode(Mode::Eval);
    assert!(GateNetwork::from_body(tiny_model(6, 5, 4, 1)).is_err());
}
