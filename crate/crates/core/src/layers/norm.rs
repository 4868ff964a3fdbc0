use num_complex::Complex;

use super::{describe, grad_abs, layout, LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Param, Saved, Value};
use crate::ctensor::{ComplexTensor, Real, MAG_FLOOR};
use crate::{CdsError, Result};

/// Batch normalization of magnitudes: `BN(|f|) ⊙ f/|f|`, per channel.
///
/// The normalized magnitude may be negative, which flips the phase by π.
///
/// The variance offset is relative: magnitudes are divided by
/// `sqrt(σ² + ε·E[a²])` with `E[a²] = μ² + σ²`, so scaling every magnitude by
/// the same positive factor leaves the output unchanged exactly.
pub struct EqBatchNorm<T> {
    momentum: T,
    eps: T,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Param<T>,
    running_var: Param<T>,
    tracked: Param<T>,
}

struct BnSaved<T> {
    f: ComplexTensor<T>,
    a: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> EqBatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if channels == 0 || !(eps > 0.0) || !(0.0..=1.0).contains(&momentum) {
            return Err(CdsError::Parameter("eq_batchnorm needs channels > 0, eps > 0, momentum in [0, 1]".into()));
        }
        let c = channels;
        Ok(Self {
            momentum: T::lit(momentum),
            eps: T::lit(eps),
            gamma: Param::real("gamma", &[c], vec![T::one(); c])?,
            beta: Param::real("beta", &[c], vec![T::zero(); c])?,
            running_mean: Param::buffer("running_mean", &[c], vec![T::zero(); c])?,
            running_var: Param::buffer("running_var", &[c], vec![T::one(); c])?,
            tracked: Param::buffer("batches_tracked", &[1], vec![T::zero()])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn running_stats(&self) -> (&[T], &[T]) {
        (self.running_mean.value.re(), self.running_var.value.re())
    }

    pub fn set_affine(&mut self, gamma: &[T], beta: &[T]) {
        self.gamma.value.planes_mut().0.copy_from_slice(gamma);
        self.beta.value.planes_mut().0.copy_from_slice(beta);
    }

    fn run(&mut self, f: &ComplexTensor<T>, mode: Mode) -> Result<(ComplexTensor<T>, BnSaved<T>)> {
        let (n, c, inner) = layout(f.shape())?;
        if c != self.channels() {
            return Err(CdsError::shape(format!("eq_batchnorm has {} channels, input has {c}", self.channels())));
        }
        let floor = T::lit(MAG_FLOOR);
        let a: Vec<T> = f.iter().map(|z| z.norm().max(floor)).collect();
        let count = n * inner;
        let batch_stats = mode == Mode::Train;
        let (mean, var) = if batch_stats {
            if count < 2 {
                return Err(CdsError::shape("eq_batchnorm in train mode needs at least two values per channel"));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for i in 0..n * c {
                mean[i % c] += a[i * inner..(i + 1) * inner].iter().copied().sum::<T>();
            }
            let cnt = T::lit(count as f64);
            mean.iter_mut().for_each(|m| *m /= cnt);
            for i in 0..n * c {
                let m = mean[i % c];
                var[i % c] += a[i * inner..(i + 1) * inner].iter().map(|&x| (x - m) * (x - m)).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v /= cnt);
            let unbias = cnt / T::lit((count - 1) as f64);
            let mo = self.momentum;
            let rm = self.running_mean.value.planes_mut().0;
            for (r, &m) in rm.iter_mut().zip(&mean) {
                *r = (T::one() - mo) * *r + mo * m;
            }
            let rv = self.running_var.value.planes_mut().0;
            for (r, &v) in rv.iter_mut().zip(&var) {
                *r = (T::one() - mo) * *r + mo * v * unbias;
            }
            self.tracked.value.planes_mut().0[0] += T::one();
            (mean, var)
        } else {
            if self.tracked.value.re()[0] == T::zero() {
                log::warn!("eq_batchnorm evaluated before any training step; using initial statistics");
            }
            (self.running_mean.value.re().to_vec(), self.running_var.value.re().to_vec())
        };
        let eps = self.eps;
        let inv_std: Vec<T> =
            var.iter().zip(&mean).map(|(&v, &m)| T::one() / (v + eps * (m * m + v)).sqrt()).collect();
        let mut xhat = vec![T::zero(); f.len()];
        let mut out = Vec::with_capacity(f.len());
        for i in 0..n * c {
            let ch = i % c;
            let (g, b) = (self.gamma.value.re()[ch], self.beta.value.re()[ch]);
            for k in i * inner..(i + 1) * inner {
                xhat[k] = (a[k] - mean[ch]) * inv_std[ch];
                let mag = g * xhat[k] + b;
                out.push(f.get(k) * (mag / a[k]));
            }
        }
        let out = ComplexTensor::from_complex(f.shape(), &out)?;
        Ok((out, BnSaved { f: f.clone(), a, xhat, inv_std, mean, batch_stats }))
    }

    /// Forward pass without recording anything.
    pub fn apply(&mut self, f: &ComplexTensor<T>, mode: Mode) -> Result<ComplexTensor<T>> {
        Ok(self.run(f, mode)?.0)
    }

    pub(crate) fn forward_complex(&mut self, f: &ComplexTensor<T>, mode: Mode) -> Result<(ComplexTensor<T>, Saved)> {
        let (y, s) = self.run(f, mode)?;
        Ok((y, saved(s)))
    }

    pub(crate) fn backward_complex(&mut self, s: &Saved, g: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let s: &BnSaved<T> = restore(s, "eq_batchnorm")?;
        let (n, c, inner) = layout(s.f.shape())?;
        let floor = T::lit(MAG_FLOOR);
        // y = b·u with b = γ·x̂ + β and u = f/a.
        let mut g_b = vec![T::zero(); s.f.len()];
        let mut gf = vec![Complex::new(T::zero(), T::zero()); s.f.len()];
        let mut g_gamma = vec![T::zero(); c];
        let mut g_beta = vec![T::zero(); c];
        for i in 0..n * c {
            let ch = i % c;
            let (gam, bet) = (self.gamma.value.re()[ch], self.beta.value.re()[ch]);
            for k in i * inner..(i + 1) * inner {
                let f = s.f.get(k);
                let a = s.a[k];
                let u = f / a;
                let gy = g.get(k);
                let b = gam * s.xhat[k] + bet;
                g_b[k] = (u.conj() * gy).re;
                g_gamma[ch] += g_b[k] * s.xhat[k];
                g_beta[ch] += g_b[k];
                let gu = gy * b;
                gf[k] = if f.norm() > floor { (gu - u * (u.conj() * gu).re) / a } else { gu / a };
            }
        }
        // Cotangent of the magnitudes through the normalization.
        let cnt = T::lit((n * inner) as f64);
        let mut mean_g = vec![T::zero(); c];
        let mut mean_gx = vec![T::zero(); c];
        if s.batch_stats {
            for i in 0..n * c {
                let ch = i % c;
                let gam = self.gamma.value.re()[ch];
                for k in i * inner..(i + 1) * inner {
                    mean_g[ch] += g_b[k] * gam / cnt;
                    mean_gx[ch] += g_b[k] * gam * s.xhat[k] / cnt;
                }
            }
        }
        for i in 0..n * c {
            let ch = i % c;
            let gam = self.gamma.value.re()[ch];
            for k in i * inner..(i + 1) * inner {
                let g_xhat = g_b[k] * gam;
                // The offset ε·(μ² + σ²) depends on the batch too.
                let coupling = (T::one() + self.eps) * s.xhat[k] + self.eps * s.mean[ch] * s.inv_std[ch];
                let g_a = s.inv_std[ch] * (g_xhat - mean_g[ch] - coupling * mean_gx[ch]);
                if s.f.get(k).norm() > floor {
                    gf[k] += grad_abs(s.f.get(k)) * g_a;
                }
            }
        }
        self.gamma.accumulate_real(&g_gamma);
        self.beta.accumulate_real(&g_beta);
        ComplexTensor::from_complex(s.f.shape(), &gf)
    }
}

impl<T: Real> Layer<T> for EqBatchNorm<T> {
    fn spec(&self) -> LayerSpec {
        let config = LayerConfig::EqBatchnorm {
            channels: self.channels(),
            momentum: self.momentum.as_f64(),
            eps: self.eps.as_f64(),
        };
        describe(&config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, mode: Mode) -> Result<(Value<T>, Saved)> {
        let (y, s) = self.forward_complex(input.as_complex()?, mode)?;
        Ok((Value::Complex(y), s))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        Ok(Value::Complex(self.backward_complex(s, grad_out.as_complex()?)?))
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var, &self.tracked]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var, &mut self.tracked]
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        s.downcast_ref::<BnSaved<f64>>()?.a.iter().map(|a| a / 0.1).reduce(f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctensor::{make_tensor, Fill, Rng};
    use num_complex::Complex64;

    #[test]
    fn two_magnitudes_normalize_to_plus_minus_one() {
        let mut bn = EqBatchNorm::<f64>::new(1, 0.1, 1e-5).unwrap();
        let f = ComplexTensor::from_complex(&[2, 1], &[Complex64::new(0.0, 1.0), Complex64::new(-3.0, 0.0)]).unwrap();
        let y = bn.apply(&f, Mode::Train).unwrap();
        // Independent scalar BN: mean 2, biased variance 1, E[a²] = 5.
        let k = 1.0 / (1.0f64 + 5e-5).sqrt();
        assert!((y.get(0) - Complex64::new(0.0, -k)).norm() < 1e-15);
        assert!((y.get(1) - Complex64::new(-k, 0.0)).norm() < 1e-15);
        let (rm, rv) = bn.running_stats();
        assert!((rm[0] - 0.2).abs() < 1e-15);
        // Unbiased variance 2 enters the running estimate.
        assert!((rv[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn train_mode_invariances() {
        let mut rng = Rng::new(3);
        let f: ComplexTensor<f64> = make_tensor(&[3, 2, 3, 3], Fill::Gaussian { rng: &mut rng, mean: 0.0, std: 1.0 }).unwrap();
        let mut bn = EqBatchNorm::<f64>::new(2, 0.1, 1e-5).unwrap();
        bn.set_affine(&[1.3, 0.7], &[0.0, 0.0]);
        let y = bn.apply(&f, Mode::Train).unwrap();
        let rot = Complex64::from_polar(1.0, 0.8);
        let yr = bn.apply(&f.scale(rot), Mode::Train).unwrap();
        let yl = bn.apply(&f.scale(Complex64::new(4.5, 0.0)), Mode::Train).unwrap();
        let scale = y.max_abs();
        for k in 0..y.len() {
            assert!((yr.get(k) - rot * y.get(k)).norm() <= 1e-12 * scale);
            assert!((yl.get(k) - y.get(k)).norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn eval_before_training_uses_initial_stats() {
        let mut bn = EqBatchNorm::<f64>::new(1, 0.1, 1e-5).unwrap();
        let f = ComplexTensor::from_complex(&[1, 1], &[Complex64::new(0.0, 2.0)]).unwrap();
        let y = bn.apply(&f, Mode::Eval).unwrap();
        // Initial statistics: mean 0, variance 1, so E[a²] = 1.
        assert!((y.get(0) - Complex64::new(0.0, 2.0 / (1.0f64 + 1e-5).sqrt())).norm() < 1e-15);
        assert!(bn.apply(&f, Mode::Train).is_err());
    }
}
