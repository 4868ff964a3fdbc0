use num_complex::Complex;

use super::{grad_arg, layout, LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Saved, Value};
use crate::ctensor::{polar, ComplexTensor, Real, Tensor, MAG_FLOOR};
use crate::{CdsError, Result};

fn out_shape(shape: &[usize], factor: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[1] *= factor;
    s
}

/// `z ↦ (ln|z|, sin∠z, cos∠z)`, three real channels per complex channel.
pub struct ComplexToReal;

impl ComplexToReal {
    pub fn apply<T: Real>(z: &ComplexTensor<T>) -> Result<Tensor<T>> {
        let (n, c, inner) = layout(z.shape())?;
        let floor = T::lit(MAG_FLOOR);
        let mut out = vec![T::zero(); 3 * z.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    let (mag, th) = polar(z.get((b * c + ch) * inner + p));
                    let o = ((b * c + ch) * 3) * inner + p;
                    out[o] = mag.max(floor).ln();
                    out[o + inner] = th.sin();
                    out[o + 2 * inner] = th.cos();
                }
            }
        }
        Tensor::from_vec(&out_shape(z.shape(), 3), out)
    }
}

impl<T: Real> Layer<T> for ComplexToReal {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::ComplexToReal)
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let z = input.as_complex()?;
        Ok((Value::Real(Self::apply(z)?), saved(z.clone())))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let z: &ComplexTensor<T> = restore(s, "complex_to_real")?;
        let g = grad_out.as_real()?.data();
        let (n, c, inner) = layout(z.shape())?;
        let floor = T::lit(MAG_FLOOR);
        let mut gz = Vec::with_capacity(z.len());
        for b in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    let v = z.get((b * c + ch) * inner + p);
                    let o = ((b * c + ch) * 3) * inner + p;
                    let (gl, gs, gc) = (g[o], g[o + inner], g[o + 2 * inner]);
                    let (mag, th) = polar(v);
                    if mag <= floor {
                        gz.push(Complex::new(T::zero(), T::zero()));
                        continue;
                    }
                    let g_th = gs * th.cos() - gc * th.sin();
                    gz.push(v / v.norm_sqr() * gl + grad_arg(v) * g_th);
                }
            }
        }
        Ok(Value::Complex(ComplexTensor::from_complex(z.shape(), &gz)?))
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        s.downcast_ref::<ComplexTensor<f64>>()?.iter().map(|z| z.norm() / 0.1).reduce(f64::min)
    }
}

/// `[N, C, ...]` complex to `[N, 2C, ...]` real: real planes, then imaginary.
pub struct ComplexSplit;

impl<T: Real> Layer<T> for ComplexSplit {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::ComplexSplit)
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let z = input.as_complex()?;
        let (n, c, inner) = layout(z.shape())?;
        let mut out = Vec::with_capacity(2 * z.len());
        for b in 0..n {
            let r = b * c * inner..(b + 1) * c * inner;
            out.extend_from_slice(&z.re()[r.clone()]);
            out.extend_from_slice(&z.im()[r]);
        }
        Ok((Value::Real(Tensor::from_vec(&out_shape(z.shape(), 2), out)?), saved(z.shape().to_vec())))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let shape: &Vec<usize> = restore(s, "complex_split")?;
        let (n, c, inner) = layout(shape)?;
        let g = grad_out.as_real()?.data();
        let block = c * inner;
        let mut re = Vec::with_capacity(n * block);
        let mut im = Vec::with_capacity(n * block);
        for b in 0..n {
            re.extend_from_slice(&g[2 * b * block..(2 * b + 1) * block]);
            im.extend_from_slice(&g[(2 * b + 1) * block..(2 * b + 2) * block]);
        }
        Ok(Value::Complex(ComplexTensor::from_planes(shape, re, im)?))
    }
}

/// `[N, ...]` to `[N, prod(...)]`, for either value kind.
pub struct Flatten;

impl<T: Real> Layer<T> for Flatten {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::Flatten)
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let shape = input.shape().to_vec();
        let n = *shape.first().ok_or_else(|| CdsError::shape("flatten expects a batched tensor"))?;
        let flat = [n, shape[1..].iter().product()];
        let y = match input {
            Value::Complex(t) => Value::Complex(t.clone().reshape(&flat)?),
            Value::Real(t) => Value::Real(t.clone().reshape(&flat)?),
        };
        Ok((y, saved(shape)))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let shape: &Vec<usize> = restore(s, "flatten")?;
        Ok(match grad_out {
            Value::Complex(t) => Value::Complex(t.clone().reshape(shape)?),
            Value::Real(t) => Value::Real(t.clone().reshape(shape)?),
        })
    }
}
