//! Adaptive moment estimation over [`Param`] buffers.

use super::layers::Param;
use super::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state is the step counter; the moments live in each [`Param`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0 }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>]) {
        self.t += 1;
        let lr = T::from_f64_c(self.cfg.lr);
        let b1 = T::from_f64_c(self.cfg.beta1);
        let b2 = T::from_f64_c(self.cfg.beta2);
        let eps = T::from_f64_c(self.cfg.eps);
        let one = T::one();
        let bc1 = T::from_f64_c(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64_c(1.0 - self.cfg.beta2.powi(self.t as i32));
        for p in params.iter_mut() {
            for i in 0..p.w.len() {
                let g = p.g[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.w[i] = p.w[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, step 1 moves each weight by ~lr·sign(g).
        let mut p: Param<f64> = Param::new(vec![1.0, -2.0]);
        p.g = vec![0.5, -3.0];
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&mut [&mut p]);
        assert!((p.w[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.w[1] - (-2.0 + 0.1)).abs() < 1e-6);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p: Param<f64> = Param::new(vec![5.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        });
        for _ in 0..2000 {
            p.zero_grad();
            p.g[0] = 2.0 * p.w[0];
            opt.step(&mut [&mut p]);
        }
        assert!(p.w[0].abs() < 1e-2, "converged to {}", p.w[0]);
    }
}
