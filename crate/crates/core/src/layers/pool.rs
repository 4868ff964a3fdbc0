use super::{LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Saved, Value};
use crate::ctensor::{ComplexTensor, Real};
use crate::{CdsError, Result};

/// Max-magnitude pooling: each window emits its largest-modulus value.
/// Ties go to the lowest flat index.
pub struct EqMaxPool {
    window: usize,
    stride: usize,
}

struct PoolSaved {
    in_shape: Vec<usize>,
    winners: Vec<usize>,
    /// `(max − runner-up) / max` per window.
    gaps: Vec<f64>,
}

impl EqMaxPool {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(CdsError::Parameter("pooling window and stride must be positive".into()));
        }
        Ok(Self { window, stride })
    }

    /// Pooled output plus the flat input index chosen for each output.
    pub fn pool<T: Real>(&self, f: &ComplexTensor<T>) -> Result<(ComplexTensor<T>, Vec<usize>)> {
        let (out, s) = self.run(f)?;
        Ok((out, s.winners))
    }

    fn run<T: Real>(&self, f: &ComplexTensor<T>) -> Result<(ComplexTensor<T>, PoolSaved)> {
        let &[n, c, h, w] = f.shape() else {
            return Err(CdsError::shape(format!("eq_maxpool expects [N,C,H,W], got {:?}", f.shape())));
        };
        if self.window > h || self.window > w {
            return Err(CdsError::shape(format!("pooling window {} exceeds spatial size {h}x{w}", self.window)));
        }
        let ho = (h - self.window) / self.stride + 1;
        let wo = (w - self.window) / self.stride + 1;
        let mut winners = Vec::with_capacity(n * c * ho * wo);
        let mut gaps = Vec::with_capacity(n * c * ho * wo);
        let mag2 = |k: usize| f.re()[k] * f.re()[k] + f.im()[k] * f.im()[k];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    let mut best_m = T::zero();
                    let mut second = T::zero();
                    for ky in 0..self.window {
                        for kx in 0..self.window {
                            let k = (plane * h + oy * self.stride + ky) * w + ox * self.stride + kx;
                            let m = mag2(k);
                            if best == usize::MAX || m > best_m {
                                if best != usize::MAX {
                                    second = best_m;
                                }
                                best = k;
                                best_m = m;
                            } else if m > second {
                                second = m;
                            }
                        }
                    }
                    winners.push(best);
                    let (a, b) = (best_m.as_f64().sqrt(), second.as_f64().sqrt());
                    gaps.push(if a > 0.0 { (a - b) / a } else { 0.0 });
                }
            }
        }
        let out: Vec<_> = winners.iter().map(|&k| f.get(k)).collect();
        let out = ComplexTensor::from_complex(&[n, c, ho, wo], &out)?;
        Ok((out, PoolSaved { in_shape: f.shape().to_vec(), winners, gaps }))
    }
}

impl<T: Real> Layer<T> for EqMaxPool {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::EqMaxpool { window: self.window, stride: self.stride })
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let (out, s) = self.run(input.as_complex()?)?;
        Ok((Value::Complex(out), saved(s)))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let s: &PoolSaved = restore(s, "eq_maxpool")?;
        let g = grad_out.as_complex()?;
        let mut gx = ComplexTensor::zeros(&s.in_shape)?;
        let (re, im) = gx.planes_mut();
        for (o, &k) in s.winners.iter().enumerate() {
            re[k] += g.re()[o];
            im[k] += g.im()[o];
        }
        Ok(Value::Complex(gx))
    }

    fn branch_signature(&self, s: &Saved) -> Vec<u32> {
        s.downcast_ref::<PoolSaved>().map(|s| s.winners.iter().map(|&k| k as u32).collect()).unwrap_or_default()
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        s.downcast_ref::<PoolSaved>()?.gaps.iter().map(|g| g / 0.01).reduce(f64::min)
    }
}
