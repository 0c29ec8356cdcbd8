//! SGD with momentum, classic weight decay, and the polynomial
//! learning-rate policy.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            power: 0.9,
        }
    }
}

/// lr0 · (1 − iter/max_iter)^power.
pub fn poly_lr(lr0: f64, iter: u64, max_iter: u64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Config(alloc::format!(
            "iteration {iter} exceeds max_iter {max_iter}"
        )));
    }
    if max_iter == 0 {
        return Ok(lr0);
    }
    let frac = 1.0 - iter as f64 / max_iter as f64;
    Ok(lr0 * fmath::powf(frac, power))
}

/// Momentum SGD state for one parameter set (named, fixed order).
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub max_iter: u64,
    pub iter: u64,
    /// Velocity buffers in parameter visit order.
    pub velocity: Vec<(String, Tensor)>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, max_iter: u64, params: &[(String, Tensor)]) -> Self {
        Optimizer {
            config,
            max_iter,
            iter: 0,
            velocity: params
                .iter()
                .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn lr(&self) -> Result<f64> {
        poly_lr(self.config.lr0, self.iter, self.max_iter, self.config.power)
    }

    /// v ← μ·v + (g + wd·θ); θ ← θ − lr·v. Gradients arrive in the same
    /// order as the velocity buffers. Returns the learning rate used.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Vec<f64>]) -> Result<f64> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::MissingGrad(alloc::format!(
                "expected {} gradient groups, got {}",
                self.velocity.len(),
                grads.len()
            )));
        }
        let lr = self.lr()?;
        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        for (((name, theta), (vname, v)), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            if name != vname || theta.numel() != g.len() {
                return Err(Error::MissingGrad(name.clone()));
            }
            for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                *v = mu * *v + (g + wd * *t);
                *t -= lr * *v;
            }
        }
        self.iter += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn poly_lr_paper_endpoints() {
        let m = 1000;
        assert_eq!(poly_lr(0.01, 0, m, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(0.01, m, m, 0.9).unwrap(), 0.0);
        let mid = poly_lr(0.01, m / 2, m, 0.9).unwrap();
        assert!((mid - 0.0053589).abs() < 1e-7, "mid lr {mid}");
        assert!(poly_lr(0.01, m + 1, m, 0.9).is_err());
    }

    #[test]
    fn poly_lr_strictly_decreasing() {
        let m = 57;
        let mut last = f64::INFINITY;
        for it in 0..=m {
            let lr = poly_lr(0.01, it, m, 0.9).unwrap();
            assert!(lr < last, "iter {it}");
            last = lr;
        }
    }

    fn single_param(v: f64) -> Vec<(String, Tensor)> {
        vec![("p".to_string(), Tensor::scalar(v))]
    }

    #[test]
    fn sgd_scalar_hand_case() {
        // θ=1, g=1, μ=0, wd=0, lr=0.1 -> θ=0.9
        let cfg = OptimConfig {
            lr0: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            power: 0.9,
        };
        let mut params = single_param(1.0);
        let mut opt = Optimizer::new(cfg, 1_000_000_000, &params);
        // max_iter huge so lr ≈ lr0 at step 0; poly(0) is exactly lr0.
        let mut refs: Vec<(String, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        let lr = opt.step(&mut refs, &[vec![1.0]]).unwrap();
        assert_eq!(lr, 0.1);
        assert!((params[0].1.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grads_zero_wd_is_identity() {
        let cfg = OptimConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            power: 0.9,
        };
        let mut params = single_param(2.5);
        let mut opt = Optimizer::new(cfg, 10, &params);
        let mut refs: Vec<(String, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        opt.step(&mut refs, &[vec![0.0]]).unwrap();
        assert_eq!(params[0].1.item(), 2.5);
    }

    #[test]
    fn sgd_without_momentum_and_decay_is_vanilla() {
        let cfg = OptimConfig {
            lr0: 0.05,
            momentum: 0.0,
            weight_decay: 0.0,
            power: 1.0,
        };
        let mut params = single_param(1.0);
        let mut opt = Optimizer::new(cfg.clone(), 100, &params);
        let mut expect = 1.0;
        for it in 0..5u64 {
            let lr = poly_lr(cfg.lr0, it, 100, cfg.power).unwrap();
            let g = 2.0 * expect; // pretend loss x^2
            expect -= lr * g;
            let grad = vec![2.0 * params[0].1.item()];
            let mut refs: Vec<(String, &mut Tensor)> =
                params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
            opt.step(&mut refs, &[grad]).unwrap();
            assert!((params[0].1.item() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_and_decay_follow_update_rule() {
        let cfg = OptimConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
            power: 0.0, // constant lr
        };
        let mut params = single_param(1.0);
        let mut opt = Optimizer::new(cfg, 10, &params);
        let mut theta = 1.0;
        let mut v = 0.0;
        for _ in 0..3 {
            let g = 0.5;
            v = 0.9 * v + (g + 0.01 * theta);
            theta -= 0.1 * v;
            let mut refs: Vec<(String, &mut Tensor)> =
                params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
            opt.step(&mut refs, &[vec![0.5]]).unwrap();
            assert!((params[0].1.item() - theta).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_grads_are_rejected() {
        let mut params = single_param(1.0);
        let mut opt = Optimizer::new(OptimConfig::default(), 10, &params);
        let mut refs: Vec<(String, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        assert!(matches!(opt.step(&mut refs, &[]), Err(Error::MissingGrad(_))));
    }
}
