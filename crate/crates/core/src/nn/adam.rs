use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments mirror the parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&Vec<T>]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn step(&mut self, params: Vec<&mut Vec<T>>, grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        assert_eq!(params.len(), self.m.len(), "parameter/moment count");
        self.t += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let bc1 = 1.0 - c.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let step = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.epsilon);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len(), "parameter/gradient shape");
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_times_lr() {
        for &g in &[3.0f64, -0.02, 1e-3] {
            let mut p = vec![0.5f64];
            let mut s = AdamState::<f64>::new(AdamConfig::default(), &[1]);
            s.step(vec![&mut p], &[vec![g]]);
            let d = p[0] - 0.5;
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((d - want).abs() < 1e-15, "g={g}: {d} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![1.25f32, -3.0];
        let mut s = AdamState::<f32>::new(AdamConfig::default(), &[2]);
        for _ in 0..50 {
            s.step(vec![&mut p], &[vec![0.0, 0.0]]);
        }
        assert_eq!(p, vec![1.25, -3.0]);
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        // Independent textbook Adam in f64 on f(θ) = θ².
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);
            reference.push(th);
        }
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let mut s = AdamState::<f64>::new(cfg, &[1]);
        let mut p = vec![1.0f64];
        for want in reference.iter() {
            let g = 2.0 * p[0];
            s.step(vec![&mut p], &[vec![g]]);
            assert!((p[0] - want).abs() < 1e-6, "{} vs {want}", p[0]);
        }
        assert!(p[0].abs() < 1.0);
        assert_eq!(s.t, 100);
    }
}
