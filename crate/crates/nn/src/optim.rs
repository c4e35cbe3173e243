use crate::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on `params`. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore) {
        let tensors = params.tensors_mut();
        if self.m.len() != tensors.len() {
            self.m = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((t, m), v) in tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Init};

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new(0);
        let id = p.add("w", vec![1], Init::Zeros);
        p.get_mut(id).set_grad(vec![5.0]).unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            ..Default::default()
        });
        adam.step(&mut p);
        assert!((p.get(id).data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = ParamStore::new(0);
        let id = p.add("w", vec![1], Init::Zeros);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..100 {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let loss = g.mse(b[id], &[3.0]).unwrap();
            g.backward(loss).unwrap();
            p.collect_grads(&g, &b);
            adam.step(&mut p);
        }
        let w = p.get(id).data()[0];
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }
}
