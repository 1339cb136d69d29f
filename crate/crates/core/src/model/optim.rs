use serde::{Deserialize, Serialize};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v = momentum * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(param_count: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        for ((w, g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            let d = g + self.weight_decay * *w;
            *v = self.momentum * *v + d;
            *w -= lr * *v;
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// Step decay: `base * gamma^(number of milestones <= epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_without_decay_is_plain_sgd() {
        let mut opt = Sgd::new(2, 0.9, 0.0);
        let mut w = vec![1.0, -1.0];
        opt.step(&mut w, &[0.5, 0.25], 0.1);
        assert_eq!(w, vec![1.0 - 0.05, -1.0 - 0.025]);
    }

    #[test]
    fn momentum_and_decay_accumulate() {
        let mut opt = Sgd::new(1, 0.9, 0.1);
        let mut w = vec![1.0];
        opt.step(&mut w, &[0.0], 1.0);
        // v = 0.1, w = 0.9
        assert!((w[0] - 0.9).abs() < 1e-15);
        opt.step(&mut w, &[0.0], 1.0);
        // v = 0.09 + 0.09 = 0.18
        assert!((w[0] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule {
            base: 0.1,
            milestones: vec![35, 55],
            gamma: 0.1,
        };
        assert_eq!(s.at(0), 0.1);
        assert!((s.at(35) - 0.01).abs() < 1e-15);
        assert!((s.at(64) - 0.001).abs() < 1e-15);
    }
}
