use serde::{Deserialize, Serialize};

use super::{Array, ParamStore, Result, Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            grad_clip: 0.0,
            ..Self::default()
        }
    }
}

/// Moment estimates and step counter, enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Array<T>>,
    pub second: Vec<Array<T>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    state: OptimizerState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let state = OptimizerState {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        };
        Self { config, state }
    }

    pub fn with_state(config: OptimizerConfig, state: OptimizerState<T>) -> Self {
        Self { config, state }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Array<T>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(TensorError::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let mut sq = 0.0;
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    left: params.get(id).shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
            sq += g.sum_squares().as_f64();
        }
        let norm = sq.sqrt();
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        self.state.step += 1;
        let lr = T::of(self.config.lr);
        let c = T::of(clip);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().iter_mut().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv = *pv - lr * c * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(self.config.beta1), T::of(self.config.beta2));
                let t = self.state.step as i32;
                let bc1 = T::one() - b1.powi(t);
                let bc2 = T::one() - b2.powi(t);
                let eps = T::of(self.config.eps);
                for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
                    let m = self.state.first[i].data_mut();
                    let v = self.state.second[i].data_mut();
                    for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gc = gv * c;
                        m[j] = b1 * m[j] + (T::one() - b1) * gc;
                        v[j] = b2 * v[j] + (T::one() - b2) * gc * gc;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("p", Array::scalar(v));
        s
    }

    #[test]
    fn plain_step() {
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &p);
        opt.step(&mut p, &[Array::scalar(2.0)]).unwrap();
        assert!((p.values()[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = single(0.37);
            let cfg = OptimizerConfig { kind, lr: 0.1, ..OptimizerConfig::default() };
            let mut opt = Optimizer::new(cfg, &p);
            for _ in 0..5 {
                opt.step(&mut p, &[Array::scalar(0.0)]).unwrap();
            }
            assert_eq!(p.values()[0].item(), 0.37);
        }
    }

    /// Scalar simulation of the adaptive update under a constant gradient:
    /// with constant g the bias-corrected ratio m/sqrt(v) is exactly
    /// sign(g) at every step, so each step moves by lr (up to eps).
    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let lr = 0.01;
        let mut p = single(0.0);
        let cfg = OptimizerConfig { kind: OptimizerKind::Adam, lr, grad_clip: 0.0, ..OptimizerConfig::default() };
        let mut opt = Optimizer::new(cfg, &p);
        let mut prev = 0.0;
        for step in 1..=100 {
            opt.step(&mut p, &[Array::scalar(3.0)]).unwrap();
            let cur = p.values()[0].item();
            assert!(cur < prev, "step {step} did not descend");
            let oracle = -lr * step as f64;
            assert!((cur - oracle).abs() < 1e-6, "step {step}: {cur} vs {oracle}");
            prev = cur;
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &p);
        let err = opt.step(&mut p, &[Array::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { .. }));
        assert_eq!(p.values()[0].item(), 1.0);
    }

    #[test]
    fn gradient_clip_bounds_sgd_step() {
        let mut p = single(0.0);
        let cfg = OptimizerConfig { grad_clip: 1.0, ..OptimizerConfig::sgd(1.0) };
        let mut opt = Optimizer::new(cfg, &p);
        let norm = opt.step(&mut p, &[Array::scalar(10.0)]).unwrap();
        assert_eq!(norm, 10.0);
        assert!((p.values()[0].item() + 1.0).abs() < 1e-12);
    }
}
