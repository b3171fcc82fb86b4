use crate::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of `params` along `grads` (same order and shapes).
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let corr1 = T::of(1.0 - self.beta1.powi(t));
        let corr2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.learning_rate);
        let decay = T::of(1.0 - self.learning_rate * self.weight_decay);
        let eps = T::of(self.eps);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p.data[i] = p.data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_hand_value() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps) after decay.
        let mut p = Tensor::filled("p", &[1], 1.0f64);
        let g = Tensor::filled("p", &[1], 0.5f64);
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(vec![&mut p], &[g]);
        let expected = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.data[0] - expected).abs() < 1e-15);
        assert!((p.data[0] - 0.899000002).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::filled("p", &[2], 3.0f64);
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..2000 {
            let g = Tensor {
                name: "p".into(),
                shape: vec![2],
                data: p.data.iter().map(|x| 2.0 * (x - 1.0)).collect(),
            };
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.data.iter().all(|x| (x - 1.0).abs() < 1e-3), "{:?}", p.data);
    }
}
