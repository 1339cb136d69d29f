//! Seeded synthetic action corpus.
//!
//! Every class owns a periodic motion template (per-joint, per-axis sinusoids
//! with a class frequency). A sample is the template played on a
//! subject-scaled rest pose, with amplitude and phase jitter, a
//! camera-dependent rotation about the vertical axis, and Gaussian jitter on
//! every coordinate.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::Dataset;
use super::topology::SkeletonTopology;
use super::{SkeletonSequence, Tensor3};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub joints: usize,
    pub subjects: u32,
    pub cameras: u32,
    /// Std-dev of the per-coordinate Gaussian jitter.
    pub noise_scale: f64,
    /// Scale of the class-specific template relative to the motion shared by all classes.
    pub class_separation: f64,
    /// Relative amplitude jitter per sample, uniform in `1 +- amplitude_jitter`.
    pub amplitude_jitter: f64,
    /// Phase jitter per sample, uniform in `+- phase_jitter` radians.
    pub phase_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 4,
            samples_per_class: 225,
            frames: 24,
            joints: 9,
            subjects: 20,
            cameras: 3,
            noise_scale: 0.05,
            class_separation: 1.0,
            amplitude_jitter: 0.2,
            phase_jitter: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidSpec(format!("{} classes, need at least 2", self.class_count)));
        }
        if self.frames < 2 {
            return Err(Error::InvalidSpec(format!("{} frames, need at least 2", self.frames)));
        }
        if self.joints == 0 || self.samples_per_class == 0 || self.subjects == 0 || self.cameras == 0 {
            return Err(Error::InvalidSpec(
                "joints, samples_per_class, subjects and cameras must be positive".into(),
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidSpec("noise_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.class_count * self.samples_per_class
    }
}

struct Wave {
    amplitude: [f64; 3],
    phase: [f64; 3],
}

fn random_waves(rng: &mut ChaCha8Rng, joints: usize, scale: f64) -> Vec<Wave> {
    let normal = Normal::new(0.0, scale).unwrap();
    (0..joints)
        .map(|_| Wave {
            amplitude: [normal.sample(rng), normal.sample(rng), normal.sample(rng)],
            phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
        })
        .collect()
}

/// Generate `class_count * samples_per_class` sequences, deterministic in `seed`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = SkeletonTopology::default_for(spec.joints);

    let mut rest = vec![[0.0f64; 3]; spec.joints];
    for v in 0..spec.joints {
        if let Some(p) = topo.parent(v).filter(|&p| p != v) {
            let dir = [
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.4..-0.1),
                rng.random_range(-0.3..0.3),
            ];
            rest[v] = [rest[p][0] + dir[0], rest[p][1] + dir[1], rest[p][2] + dir[2]];
        }
    }

    let shared = random_waves(&mut rng, spec.joints, 0.15);
    let shared_freq = rng.random_range(0.5..1.0);
    // evenly spaced tempos so no two classes are near-duplicates
    let mut tempos: Vec<f64> = (0..spec.class_count)
        .map(|k| 0.8 + 1.4 * k as f64 / (spec.class_count - 1) as f64)
        .collect();
    tempos.shuffle(&mut rng);
    let classes: Vec<(f64, Vec<Wave>)> = tempos
        .into_iter()
        .map(|freq| (freq, random_waves(&mut rng, spec.joints, 0.25 * spec.class_separation)))
        .collect();
    let subject_scale: Vec<f64> = (0..spec.subjects).map(|_| rng.random_range(0.85..1.15)).collect();
    let jitter = Normal::new(0.0, spec.noise_scale.max(f64::MIN_POSITIVE)).unwrap();

    let mut samples = Vec::with_capacity(spec.total_samples());
    let mut n = 0usize;
    for _ in 0..spec.samples_per_class {
        for (label, (freq, waves)) in classes.iter().enumerate() {
            let subject = rng.random_range(0..spec.subjects);
            let camera = rng.random_range(1..=spec.cameras);
            let yaw = (camera as f64 - (spec.cameras as f64 + 1.0) / 2.0) * std::f64::consts::FRAC_PI_4;
            let (sin_y, cos_y) = yaw.sin_cos();
            let amp = 1.0 + rng.random_range(-1.0..=1.0) * spec.amplitude_jitter;
            let shift = rng.random_range(-1.0..=1.0) * spec.phase_jitter;
            let scale = subject_scale[subject as usize];

            let mut data = Vec::with_capacity(spec.frames * spec.joints * 3);
            for t in 0..spec.frames {
                let clock = TAU * t as f64 / spec.frames as f64;
                for v in 0..spec.joints {
                    let mut p = [0.0f64; 3];
                    for c in 0..3 {
                        let base = shared[v].amplitude[c] * (shared_freq * clock + shared[v].phase[c]).sin();
                        let own = waves[v].amplitude[c] * (freq * clock + waves[v].phase[c] + shift).sin();
                        p[c] = scale * rest[v][c] + amp * (base + own);
                    }
                    let x = cos_y * p[0] + sin_y * p[2];
                    let z = -sin_y * p[0] + cos_y * p[2];
                    for coord in [x, p[1], z] {
                        let noise = if spec.noise_scale > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
                        data.push((coord + noise) as f32);
                    }
                }
            }
            samples.push(SkeletonSequence {
                sample_id: format!("s{n:06}"),
                frames: Tensor3::new(spec.frames, spec.joints, 3, data)?,
                label,
                subject_id: subject,
                camera_id: camera,
            });
            n += 1;
        }
    }

    Ok(Dataset {
        class_count: spec.class_count,
        joint_count: spec.joints,
        samples,
    })
}
