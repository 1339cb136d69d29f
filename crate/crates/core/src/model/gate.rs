use super::loss::softmax;
use super::{Classifier, ReferenceStGcn, StGcnConfig};
use crate::error::{Error, Result};
use crate::skeleton::{concat_channels, ModalityTensor, SkeletonTopology, Tensor3};

/// Maps the channel-concatenated joint / bone / motion streams to one
/// weight per expert on the open 3-simplex.
#[derive(Clone, Debug)]
pub struct GateNetwork {
    body: ReferenceStGcn,
}

impl GateNetwork {
    pub const EXPERTS: usize = 3;

    /// Two graph blocks of `width` channels; the head starts at zero so the
    /// initial weighting is uniform.
    pub fn new(
        frames: usize,
        joints: usize,
        channels: usize,
        width: usize,
        topology: SkeletonTopology,
        seed: u64,
    ) -> Result<Self> {
        let cfg = StGcnConfig {
            frames,
            joints,
            in_channels: Self::EXPERTS * channels,
            widths: vec![width, width],
            temporal_kernel: 3,
            outputs: Self::EXPERTS,
        };
        let mut body = ReferenceStGcn::new(cfg, topology, seed)?;
        body.zero_head();
        Ok(Self { body })
    }

    pub fn from_body(body: ReferenceStGcn) -> Result<Self> {
        if body.class_count() != Self::EXPERTS || !body.config().in_channels.is_multiple_of(Self::EXPERTS) {
            return Err(Error::InvalidConfig(
                "gate body must take 3*C channels and emit 3 outputs".into(),
            ));
        }
        Ok(Self { body })
    }

    pub fn body(&self) -> &ReferenceStGcn {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut ReferenceStGcn {
        &mut self.body
    }

    /// Weights from an already concatenated `(T, V, 3C)` input.
    pub fn weights_from_concat(&self, input: &Tensor3) -> Result<[f64; 3]> {
        self.body.check_input(input)?;
        let w = softmax(&self.body.logits_unchecked(input));
        Ok([w[0], w[1], w[2]])
    }
}

/// `W = softmax(G(joint || bone || motion))` with channel-wise concatenation.
pub fn gate_forward(
    gate: &GateNetwork,
    joint: &ModalityTensor,
    bone: &ModalityTensor,
    motion: &ModalityTensor,
) -> Result<[f64; 3]> {
    let input = concat_channels(&[&joint.data, &bone.data, &motion.data])?;
    gate.weights_from_concat(&input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::skeleton::{derive_all, SkeletonSequence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn streams(seed: u64) -> [ModalityTensor; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = SkeletonSequence {
            sample_id: "g".into(),
            frames: Tensor3::new(8, 5, 3, (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            label: 0,
            subject_id: 0,
            camera_id: 0,
        };
        derive_all(&seq, &SkeletonTopology::tree(5)).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_weights() {
        let gate = GateNetwork::new(8, 5, 3, 6, SkeletonTopology::tree(5), 1).unwrap();
        let [j, b, m] = streams(0);
        let w = gate_forward(&gate, &j, &b, &m).unwrap();
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_lie_on_simplex_and_are_deterministic() {
        let mut gate = GateNetwork::new(8, 5, 3, 6, SkeletonTopology::tree(5), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in gate.body_mut().params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        gate.body_mut().set_mode(Mode::Eval);
        for s in 0..10 {
            let [j, b, m] = streams(s);
            let w = gate_forward(&gate, &j, &b, &m).unwrap();
            assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(w, gate_forward(&gate, &j, &b, &m).unwrap());
        }
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let gate = GateNetwork::new(8, 5, 3, 6, SkeletonTopology::tree(5), 1).unwrap();
        let [j, b, mut m] = streams(0);
        m.data = Tensor3::zeros(7, 5, 3);
        assert!(matches!(gate_forward(&gate, &j, &b, &m), Err(Error::Dimension(_))));
    }
}
