//! AdamW and SGD over the real coordinates of every trainable parameter.

use serde::{Deserialize, Serialize};

use crate::autodiff::Param;
use crate::ctensor::Real;
use crate::{CdsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Adamw,
    Sgd,
}

impl std::str::FromStr for Algo {
    type Err = CdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Algo::Adamw),
            "sgd" => Ok(Algo::Sgd),
            _ => Err(CdsError::Config(format!("unknown optimizer '{s}' (expected adamw or sgd)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub algo: Algo,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// SGD momentum; 0 disables it.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { algo: Algo::Adamw, lr: 1e-3, beta1: 0.99, beta2: 0.999, eps: 1e-8, weight_decay: 0.1, momentum: 0.0 }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self { algo: Algo::Sgd, lr, momentum, weight_decay: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(CdsError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-coordinate moment buffers. `m` doubles as the SGD momentum buffer;
/// `v` stays empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    fn ensure_shapes(&mut self, params: &[&mut Param<T>]) -> Result<()> {
        let sizes: Vec<usize> = params.iter().map(|p| p.real_count()).collect();
        if self.m.is_empty() {
            self.m = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            if self.config.algo == Algo::Adamw {
                self.v = self.m.clone();
            }
            return Ok(());
        }
        let matches = self.m.iter().map(Vec::len).eq(sizes.iter().copied())
            && (self.config.algo == Algo::Sgd || self.v.iter().map(Vec::len).eq(sizes.iter().copied()));
        if matches {
            Ok(())
        } else {
            Err(CdsError::State("optimizer moments do not match the parameter list".into()))
        }
    }

    /// Applies one update to the trainable parameters in `params`. A
    /// non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) -> Result<()> {
        let mut params: Vec<&mut Param<T>> = params.into_iter().filter(|p| p.trainable).collect();
        for p in &params {
            if (0..p.real_count()).any(|k| !p.grad_coord(k).is_finite()) {
                return Err(CdsError::Divergence {
                    step: self.step as usize + 1,
                    reason: format!("non-finite gradient in {}", p.name),
                });
            }
        }
        self.ensure_shapes(&params)?;
        self.step += 1;
        let c = self.config;
        let lr = T::lit(c.lr);
        match c.algo {
            Algo::Adamw => {
                let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                let bc1 = T::one() - T::lit(c.beta1.powf(self.step as f64));
                let bc2 = T::one() - T::lit(c.beta2.powf(self.step as f64));
                let decay = T::one() - T::lit(c.lr * c.weight_decay);
                let eps = T::lit(c.eps);
                for (i, p) in params.iter_mut().enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..m.len() {
                        let g = p.grad_coord(k);
                        m[k] = b1 * m[k] + (T::one() - b1) * g;
                        v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                        let update = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                        p.set_coord(k, p.coord(k) * decay - update);
                    }
                }
            }
            Algo::Sgd => {
                let mu = T::lit(c.momentum);
                let wd = T::lit(c.weight_decay);
                for (i, p) in params.iter_mut().enumerate() {
                    let m = &mut self.m[i];
                    for k in 0..m.len() {
                        let g = p.grad_coord(k) + wd * p.coord(k);
                        m[k] = mu * m[k] + g;
                        p.set_coord(k, p.coord(k) - lr * m[k]);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::real("w", &[1], vec![v]).unwrap();
        p.grad.planes_mut().0[0] = g;
        p
    }

    #[test]
    fn adamw_first_step_is_lr() {
        let mut p = scalar(0.5, 1.0);
        let mut s = OptimizerState::new(OptimConfig { weight_decay: 0.0, ..OptimConfig::default() });
        s.step(vec![&mut p]).unwrap();
        assert!((p.coord(0) - (0.5 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn adamw_pure_decay() {
        let mut p = scalar(2.0, 0.0);
        let mut s = OptimizerState::new(OptimConfig::default());
        s.step(vec![&mut p]).unwrap();
        assert_eq!(p.coord(0), 2.0 * (1.0 - 1e-4));
    }

    #[test]
    fn adamw_decays_both_complex_coordinates() {
        let z = crate::ctensor::ComplexTensor::from_planes(&[1], vec![1.0], vec![-2.0]).unwrap();
        let mut p = Param::complex("z", z);
        let mut s = OptimizerState::new(OptimConfig::default());
        s.step(vec![&mut p]).unwrap();
        assert_eq!(p.value.im()[0], -2.0 * (1.0 - 1e-4));
    }

    #[test]
    fn sgd_steps() {
        let mut p = scalar(1.0, 2.0);
        let mut s = OptimizerState::new(OptimConfig::sgd(0.1, 0.0));
        s.step(vec![&mut p]).unwrap();
        assert!((p.coord(0) - 0.8).abs() < 1e-15);

        let mut q = scalar(0.0, 1.0);
        let mut s = OptimizerState::new(OptimConfig::sgd(0.1, 0.9));
        s.step(vec![&mut q]).unwrap();
        s.step(vec![&mut q]).unwrap();
        assert!((q.coord(0) + 0.1 + 0.19).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = scalar(1.0, f64::NAN);
        let mut s = OptimizerState::new(OptimConfig::default());
        assert!(matches!(s.step(vec![&mut p]), Err(CdsError::Divergence { step: 1, .. })));
        assert_eq!(p.coord(0), 1.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn buffers_are_left_alone() {
        let mut b = Param::buffer("running", &[1], vec![3.0]).unwrap();
        b.grad.planes_mut().0[0] = 1.0;
        let mut s = OptimizerState::new(OptimConfig::default());
        s.step(vec![&mut b]).unwrap();
        assert_eq!(b.coord(0), 3.0);
    }
}
