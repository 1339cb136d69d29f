mod common;

use std::collections::HashMap;
use std::path::Path;

use common::*;
use rand::Rng;
use skelnoise::cm_moe::FusionHyper;
use skelnoise::cross_training::TrainHyper;
use skelnoise::harness::plots::{accuracy_curve, gate_series};
use skelnoise::harness::{
    check_test_purity, emit_plots, evaluate_scores, run_ablation_suite, run_pipeline, Arm, DatasetSource,
    ExperimentConfig, FusionConfig, RunReport, SplitProtocol,
};
use skelnoise::model::{BackboneSpec, LrSchedule};
use skelnoise::noise::inject_symmetric_noise;
use skelnoise::skeleton::{Dataset, SyntheticSpec};
use skelnoise::Error;

fn tiny(dir: &Path, ratio: f64) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        noise_ratio: ratio,
        noise_seed: 3,
        warmup_epochs: 1,
        dataset: DatasetSource::Synthetic {
            spec: SyntheticSpec {
                class_count: 3,
                samples_per_class: 20,
                frames: 8,
                joints: 5,
                ..SyntheticSpec::default()
            },
            seed: 1,
        },
        split: SplitProtocol::SubjectHoldout {
            test_fraction: 0.3,
            seed: 2,
        },
        backbone: BackboneSpec {
            widths: vec![4],
            temporal_kernel: 3,
        },
        cross_train: TrainHyper {
            epochs: 2,
            batch_size: 8,
            lr: LrSchedule::constant(0.05),
            seed: 4,
            ..TrainHyper::default()
        },
        fusion: FusionConfig {
            hyper: FusionHyper {
                epochs: 1,
                batch_size: 8,
                lr: LrSchedule::constant(0.05),
                gate_width: 4,
                seed: 5,
                ..FusionHyper::default()
            },
            ..FusionConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn pipeline_is_deterministic_across_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(&tiny(a.path(), 0.4)).unwrap();
    let rb = run_pipeline(&tiny(b.path(), 0.4)).unwrap();
    assert_eq!(ra.content_hash().unwrap(), rb.content_hash().unwrap());
    assert_eq!(ra.artifacts, rb.artifacts);
    assert_eq!(
        std::fs::read(a.path().join("metrics.csv")).unwrap(),
        std::fs::read(b.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn pipeline_writes_every_artifact_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path(), 0.4);
    let first = run_pipeline(&config).unwrap();
    for f in ["config.toml", "report.json", "timings.json", "metrics.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    for needle in [
        "noise_manifest.json",
        "selection_log.csv",
        "epochs.json",
        "expert.json",
        "expert.bin",
        "losses.csv",
        "selection_manifest.json",
        "gate_epochs.json",
    ] {
        assert!(first.artifacts.keys().any(|k| k.ends_with(needle)), "no artifact named {needle}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + first.metric_rows().len());
    assert!(first.timings.iter().all(|t| !t.resumed));

    let second = run_pipeline(&config).unwrap();
    assert_eq!(first.content_hash().unwrap(), second.content_hash().unwrap());
    let resumed: Vec<&str> = second.timings.iter().filter(|t| t.resumed).map(|t| t.stage.as_str()).collect();
    assert!(resumed.len() + 1 >= second.timings.len(), "only {resumed:?} resumed");

    let loaded = RunReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(loaded.content_hash().unwrap(), first.content_hash().unwrap());
    assert_eq!(loaded.timings, second.timings);
}

#[test]
fn changed_config_invalidates_resume() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(&tiny(dir.path(), 0.4)).unwrap();
    let b = run_pipeline(&tiny(dir.path(), 0.2)).unwrap();
    assert!(b.timings.iter().all(|t| !t.resumed));
    assert_ne!(a.noise.manifest_sha256, b.noise.manifest_sha256);
}

#[test]
fn report_fields_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_pipeline(&tiny(dir.path(), 0.4)).unwrap();
    assert_eq!(r.experts.len(), 3);
    assert_eq!(r.baseline.len(), 3);
    let n = r.train_count;
    assert!(r.selection.union <= n);
    let biggest = r.selection.per_modality.values().copied().max().unwrap();
    assert!(r.selection.union >= biggest);
    assert!((r.fusion.test_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(r.fusion.test.count, r.test_count);
    assert!(r.selection.quality.as_ref().is_some_and(|q| q.contains_key("union")));
}

#[test]
fn test_purity_check_rejects_leaks() {
    let mut r = rng(1);
    let clean = Dataset {
        class_count: 3,
        joint_count: 4,
        samples: (0..30)
            .map(|i| {
                let mut s = random_sequence(&mut r, 3, 4, i % 3);
                s.sample_id = format!("p{i:02}");
                s
            })
            .collect(),
    };
    let (train, test) = clean.samples.split_at(20);
    let train_set = Dataset {
        samples: train.to_vec(),
        ..clean.clone()
    };
    let manifest = inject_symmetric_noise(&train_set, 0.5, 1).unwrap().manifest();
    let labels: HashMap<String, usize> = clean.samples.iter().map(|s| (s.sample_id.clone(), s.label)).collect();
    check_test_purity(test, &labels, &manifest).unwrap();
    // a training sample showing up in the test split
    let mut leaked = test.to_vec();
    leaked.push(train[0].clone());
    assert!(matches!(check_test_purity(&leaked, &labels, &manifest), Err(Error::Inconsistent(_))));
    // a test label differing from the clean one
    let mut relabelled = test.to_vec();
    relabelled[0].label = (relabelled[0].label + 1) % 3;
    assert!(check_test_purity(&relabelled, &labels, &manifest).is_err());
}

#[test]
fn evaluate_scores_reference_cases() {
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let perfect: Vec<Vec<f64>> = labels.iter().map(|&y| (0..3).map(|c| (c == y) as u8 as f64).collect()).collect();
    let m = evaluate_scores(perfect.iter().map(|r| r.as_slice()), &labels, 3).unwrap();
    assert_eq!((m.top1, m.top5), (1.0, 1.0));
    assert!(m.per_class.iter().all(|&c| c == Some(1.0)));

    let mut r = rng(2);
    let labels: Vec<usize> = (0..3000).map(|_| r.random_range(0..3)).collect();
    let random: Vec<Vec<f64>> = labels.iter().map(|_| (0..3).map(|_| r.random::<f64>()).collect()).collect();
    let m = evaluate_scores(random.iter().map(|r| r.as_slice()), &labels, 3).unwrap();
    assert!((m.top1 - 1.0 / 3.0).abs() < 0.03, "{}", m.top1);
    assert_eq!(m.top5, 1.0);

    let labels: Vec<usize> = (0..200).map(|_| r.random_range(0..8)).collect();
    let scores: Vec<Vec<f64>> = labels.iter().map(|_| (0..8).map(|_| r.random::<f64>()).collect()).collect();
    let m = evaluate_scores(scores.iter().map(|r| r.as_slice()), &labels, 8).unwrap();
    assert!(m.top5 >= m.top1);

    assert!(evaluate_scores(std::iter::empty(), &[], 3).is_err());
    assert!(evaluate_scores([[0.0, 1.0].as_slice()], &[0], 3).is_err());
    let absent = evaluate_scores([[1.0, 0.0, 0.0].as_slice()], &[0], 3).unwrap();
    assert_eq!(absent.per_class, vec![Some(1.0), None, None]);
}

#[test]
fn plots_group_ratios_and_gate_series_are_simplex() {
    let mut reports = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    for ratio in [0.2, 0.4] {
        reports.push(run_pipeline(&tiny(&dir.path().join(format!("r{ratio}")), ratio)).unwrap());
    }
    let curve = accuracy_curve(&reports).unwrap();
    assert_eq!(curve.ticks, vec![0.2, 0.4]);
    assert_eq!(curve.series.len(), 4);
    for (_, ys) in &curve.series {
        assert!(ys.iter().all(|y| y.is_some_and(|v| (0.0..=1.0).contains(&v))));
    }
    for w in gate_series(&reports[0]) {
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let written = emit_plots(&reports, &dir.path().join("plots")).unwrap();
    assert_eq!(written.len(), 3);
    for p in written {
        assert!(std::fs::read_to_string(p).unwrap().starts_with("<svg"));
    }
    assert!(matches!(accuracy_curve(&[]), Err(Error::NothingToPlot(_))));
}

#[test]
fn ablation_rows_cover_every_arm_and_share_the_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path(), 0.4);
    config.ablation_splits = vec![
        SplitProtocol::SubjectHoldout {
            test_fraction: 0.3,
            seed: 2,
        },
        SplitProtocol::SubjectHoldout {
            test_fraction: 0.3,
            seed: 9,
        },
    ];
    let report = run_ablation_suite(&config).unwrap();
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.runs.len(), 2);
    for run in &report.runs {
        let hashes: Vec<&str> = Arm::ALL
            .iter()
            .map(|&a| report.row(&run.split, a).unwrap().noise_manifest_sha256.as_str())
            .collect();
        assert!(hashes.iter().all(|h| *h == run.noise.manifest_sha256));
        let full = report.row(&run.split, Arm::Full).unwrap();
        assert_eq!(full.headline, run.fusion.test.top1);
    }
    assert_eq!(report.table().lines().count(), 9);
    assert!(dir.path().join("ablation.json").is_file());
    assert!(dir.path().join("ablation.txt").is_file());
}

#[test]
fn clean_training_learns_the_synthetic_task() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::toy(0.0, 0);
    config.output_dir = dir.path().to_path_buf();
    config.cross_train.epochs = 15;
    config.cross_train.lr.milestones = vec![10];
    config.warmup_epochs = 5;
    let r = run_pipeline(&config).unwrap();
    let best = r.baseline.iter().map(|b| b.test.top1).fold(0.0, f64::max);
    assert!(best >= 0.9, "best plain top1 {best}");
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), 1.0);
    assert!(run_pipeline(&c).is_err());
    c.noise_ratio = 0.4;
    c.split = SplitProtocol::SubjectHoldout {
        test_fraction: 0.0,
        seed: 0,
    };
    assert!(run_pipeline(&c).is_err());
    let toml = tiny(dir.path(), 0.4).to_toml().unwrap();
    let back = ExperimentConfig::from_toml_str(&toml).unwrap();
    assert_eq!(back, tiny(dir.path(), 0.4));
}
