use crate::scalar::{lit, Scalar};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<S>,
    v: Vec<S>,
    t: u32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![S::zero(); len], v: vec![S::zero(); len], t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2): (S, S) = (lit(self.beta1), lit(self.beta2));
        let one = S::one();
        let c1 = one - b1.powi(self.t as i32);
        let c2 = one - b2.powi(self.t as i32);
        let lr: S = lit(self.lr);
        let eps: S = lit(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Multiplies the base rate by `gamma` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub step_size: usize,
    pub gamma: f64,
}

impl StepDecay {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        if self.step_size == 0 {
            return base;
        }
        base * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay { step_size: 30, gamma: 0.1 }
    }
}
