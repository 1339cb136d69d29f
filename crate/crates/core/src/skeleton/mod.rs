//! Skeleton data model and the joint / bone / motion modality streams.

mod io;
mod synth;
mod topology;

pub use io::{load_dataset, save_dataset, Dataset, DatasetFormat, DatasetManifest, ManifestEntry};
pub use synth::{generate_synthetic_dataset, SyntheticSpec};
pub use topology::SkeletonTopology;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `(T, V, C)` tensor of 32-bit floats stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    frames: usize,
    joints: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(frames: usize, joints: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * joints * channels {
            return Err(Error::Dimension(format!(
                "buffer of {} values cannot hold ({frames}, {joints}, {channels})",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            joints,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, joints: usize, channels: usize) -> Self {
        Self {
            frames,
            joints,
            channels,
            data: vec![0.0; frames * joints * channels],
        }
    }

    /// `(T, V, C)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.joints, self.channels)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn index(&self, t: usize, v: usize, c: usize) -> usize {
        (t * self.joints + v) * self.channels + c
    }

    #[inline]
    pub fn get(&self, t: usize, v: usize, c: usize) -> f32 {
        self.data[self.index(t, v, c)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, v: usize, c: usize, value: f32) {
        let i = self.index(t, v, c);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

/// One recorded action sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSequence {
    pub sample_id: String,
    /// `(T, V, 3)` joint coordinates.
    pub frames: Tensor3,
    pub label: usize,
    pub subject_id: u32,
    pub camera_id: u32,
}

impl SkeletonSequence {
    /// Check the structural invariants against a dataset's class count.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidSequence {
                sample_id: self.sample_id.clone(),
                reason,
            })
        };
        if self.frames.frames() < 2 {
            return fail(format!("{} frame(s), need at least 2", self.frames.frames()));
        }
        if self.frames.channels() != 3 {
            return fail(format!("{} coordinate channels, expected 3", self.frames.channels()));
        }
        if self.frames.as_slice().iter().any(|x| !x.is_finite()) {
            return fail("non-finite coordinate".into());
        }
        if self.label >= class_count {
            return fail(format!("label {} >= class count {class_count}", self.label));
        }
        Ok(())
    }

    /// Translate every frame so that `root` sits at the origin in frame 0.
    pub fn centered_on(&self, root: usize) -> Result<Self> {
        let (t_len, v_len, c_len) = self.frames.shape();
        if root >= v_len {
            return Err(Error::Dimension(format!("root joint {root} >= joint count {v_len}")));
        }
        let origin: Vec<f32> = (0..c_len).map(|c| self.frames.get(0, root, c)).collect();
        let mut out = self.frames.clone();
        for t in 0..t_len {
            for v in 0..v_len {
                for (c, o) in origin.iter().enumerate() {
                    let i = out.index(t, v, c);
                    out.as_mut_slice()[i] -= o;
                }
            }
        }
        Ok(Self {
            frames: out,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Joint,
    Bone,
    Motion,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Joint, Modality::Bone, Modality::Motion];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
            Modality::Motion => "motion",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Modality::Joint),
            "bone" => Ok(Modality::Bone),
            "motion" => Ok(Modality::Motion),
            other => Err(Error::InvalidArgument(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityTensor {
    pub modality: Modality,
    pub data: Tensor3,
}

impl ModalityTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.shape()
    }
}

/// Raw coordinates, unchanged.
pub fn derive_joint(seq: &SkeletonSequence) -> ModalityTensor {
    ModalityTensor {
        modality: Modality::Joint,
        data: seq.frames.clone(),
    }
}

/// For every pair `(i, j)` of the topology, joint slot `i` receives
/// `frames[t, j] - frames[t, i]`. Slots that never appear as a child stay zero.
pub fn derive_bone(seq: &SkeletonSequence, topo: &SkeletonTopology) -> Result<ModalityTensor> {
    let (t_len, v_len, c_len) = seq.frames.shape();
    if topo.joint_count() != v_len {
        return Err(Error::Dimension(format!(
            "topology has {} joints, sequence `{}` has {v_len}",
            topo.joint_count(),
            seq.sample_id
        )));
    }
    let src = &seq.frames;
    let mut out = Tensor3::zeros(t_len, v_len, c_len);
    for t in 0..t_len {
        for &(child, parent) in topo.bone_pairs() {
            for c in 0..c_len {
                out.set(t, child, c, src.get(t, parent, c) - src.get(t, child, c));
            }
        }
    }
    Ok(ModalityTensor {
        modality: Modality::Bone,
        data: out,
    })
}

/// `out[t] = frames[t + 1] - frames[t]`, with the last frame zero-padded so the
/// stream keeps the `(T, V, C)` shape of the source.
pub fn derive_motion(seq: &SkeletonSequence) -> Result<ModalityTensor> {
    let (t_len, v_len, c_len) = seq.frames.shape();
    if t_len < 2 {
        return Err(Error::InsufficientFrames { frames: t_len });
    }
    let src = seq.frames.as_slice();
    let stride = v_len * c_len;
    let mut out = vec![0.0f32; src.len()];
    for t in 0..t_len - 1 {
        let (cur, next) = (&src[t * stride..(t + 1) * stride], &src[(t + 1) * stride..(t + 2) * stride]);
        for ((o, a), b) in out[t * stride..(t + 1) * stride].iter_mut().zip(cur).zip(next) {
            *o = b - a;
        }
    }
    Ok(ModalityTensor {
        modality: Modality::Motion,
        data: Tensor3::new(t_len, v_len, c_len, out)?,
    })
}

pub fn derive(seq: &SkeletonSequence, topo: &SkeletonTopology, modality: Modality) -> Result<ModalityTensor> {
    match modality {
        Modality::Joint => Ok(derive_joint(seq)),
        Modality::Bone => derive_bone(seq, topo),
        Modality::Motion => derive_motion(seq),
    }
}

/// The three streams in `Modality::ALL` order.
pub fn derive_all(seq: &SkeletonSequence, topo: &SkeletonTopology) -> Result<[ModalityTensor; 3]> {
    Ok([derive_joint(seq), derive_bone(seq, topo)?, derive_motion(seq)?])
}

/// Channel-wise concatenation: `(T, V, C)` x n -> `(T, V, n * C)`.
pub fn concat_channels(parts: &[&Tensor3]) -> Result<Tensor3> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("nothing to concatenate".into()))?;
    let (t_len, v_len, c_len) = first.shape();
    if let Some(bad) = parts.iter().find(|p| p.shape() != first.shape()) {
        return Err(Error::Dimension(format!(
            "cannot concatenate {:?} with {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let total = c_len * parts.len();
    let mut data = Vec::with_capacity(t_len * v_len * total);
    for t in 0..t_len {
        for v in 0..v_len {
            for p in parts {
                let start = p.index(t, v, 0);
                data.extend_from_slice(&p.as_slice()[start..start + c_len]);
            }
        }
    }
    Tensor3::new(t_len, v_len, total, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, joints: usize, data: Vec<f32>) -> SkeletonSequence {
        SkeletonSequence {
            sample_id: "s".into(),
            frames: Tensor3::new(frames, joints, 3, data).unwrap(),
            label: 0,
            subject_id: 0,
            camera_id: 0,
        }
    }

    #[test]
    fn joint_stream_is_identity() {
        let s = seq(3, 1, [1.0, 2.0, 3.0].repeat(3));
        let j = derive_joint(&s);
        assert_eq!(j.modality, Modality::Joint);
        assert_eq!(j.data, s.frames);
    }

    #[test]
    fn bone_of_coincident_joints_is_zero() {
        let topo = SkeletonTopology::new(2, vec![(0, 0), (1, 0)], 0).unwrap();
        let s = seq(2, 2, vec![1.0; 12]);
        let b = derive_bone(&s, &topo).unwrap();
        assert!(b.data.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bone_is_parent_minus_child() {
        // joint 1 at origin, its parent joint 0 at (2, -1, 3)
        let topo = SkeletonTopology::new(2, vec![(0, 0), (1, 0)], 0).unwrap();
        let s = seq(2, 2, vec![2.0, -1.0, 3.0, 0.0, 0.0, 0.0, 2.0, -1.0, 3.0, 0.0, 0.0, 0.0]);
        let b = derive_bone(&s, &topo).unwrap();
        for t in 0..2 {
            assert_eq!(
                [b.data.get(t, 1, 0), b.data.get(t, 1, 1), b.data.get(t, 1, 2)],
                [2.0, -1.0, 3.0]
            );
            // self-paired root
            assert_eq!([b.data.get(t, 0, 0), b.data.get(t, 0, 1), b.data.get(t, 0, 2)], [0.0; 3]);
        }
    }

    #[test]
    fn bone_rejects_joint_count_mismatch() {
        let topo = SkeletonTopology::tree(3);
        let s = seq(2, 2, vec![0.0; 12]);
        assert!(matches!(derive_bone(&s, &topo), Err(Error::Dimension(_))));
    }

    #[test]
    fn motion_of_static_pose_is_zero() {
        let s = seq(4, 1, [0.5, -0.25, 7.0].repeat(4));
        let m = derive_motion(&s).unwrap();
        assert!(m.data.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn motion_difference_and_padding() {
        let s = seq(2, 1, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let m = derive_motion(&s).unwrap();
        assert_eq!(m.data.as_slice(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn motion_needs_two_frames() {
        let s = seq(1, 1, vec![0.0; 3]);
        assert!(matches!(derive_motion(&s), Err(Error::InsufficientFrames { frames: 1 })));
    }

    #[test]
    fn concat_interleaves_channels_per_joint() {
        let a = Tensor3::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let b = Tensor3::new(1, 2, 1, vec![10.0, 20.0]).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), (1, 2, 2));
        assert_eq!(c.as_slice(), &[1.0, 10.0, 2.0, 20.0]);
        let bad = Tensor3::zeros(2, 2, 1);
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn centering_moves_root_to_origin() {
        let s = seq(2, 2, vec![1.0, 1.0, 1.0, 2.0, 3.0, 4.0, 1.5, 1.0, 1.0, 2.0, 3.0, 4.0]);
        let c = s.centered_on(0).unwrap();
        assert_eq!(&c.frames.as_slice()[..6], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(c.frames.get(1, 0, 0), 0.5);
    }

    #[test]
    fn validation_catches_bad_sequences() {
        let mut s = seq(2, 1, vec![0.0; 6]);
        assert!(s.validate(2).is_ok());
        s.label = 2;
        assert!(s.validate(2).is_err());
        s.label = 0;
        s.frames.as_mut_slice()[0] = f32::NAN;
        assert!(s.validate(2).is_err());
    }
}
