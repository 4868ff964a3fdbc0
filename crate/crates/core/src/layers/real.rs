use super::{describe, real_weight, ConvConfig, LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Param, Saved, Value};
use crate::ctensor::{real_conv2d, real_conv2d_backward, Real, Rng, Tensor};
use crate::{CdsError, Result};

fn real_plane<T: Real>(p: &Param<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(p.value.shape(), p.value.re().to_vec())
}

/// Real convolution with optional bias.
pub struct RealConv<T> {
    config: LayerConfig,
    conv: ConvConfig,
    weight: Param<T>,
    bias: Option<Param<T>>,
}

impl<T: Real> RealConv<T> {
    pub(crate) fn new(config: LayerConfig, conv: ConvConfig, bias: bool, rng: &mut Rng) -> Result<Self> {
        let shape = conv.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = Param::real("weight", &shape, real_weight(&shape, fan_in, rng)?)?;
        let bias = if bias { Some(Param::real("bias", &[conv.out_channels], vec![T::zero(); conv.out_channels])?) } else { None };
        Ok(Self { config, conv, weight, bias })
    }
}

impl<T: Real> Layer<T> for RealConv<T> {
    fn spec(&self) -> LayerSpec {
        describe(&self.config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let x = input.as_real()?;
        if x.shape().len() != 4 {
            return Err(CdsError::shape(format!("convolution expects [N,C,H,W], got {:?}", x.shape())));
        }
        let w = real_plane(&self.weight)?;
        let y = real_conv2d(x, &w, self.bias.as_ref().map(|b| b.value.re()), self.conv.params())?;
        Ok((Value::Real(y), saved(x.clone())))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let x: &Tensor<T> = restore(s, "real_conv")?;
        let w = real_plane(&self.weight)?;
        let (gx, gw, gb) = real_conv2d_backward(x, &w, self.conv.params(), grad_out.as_real()?, true)?;
        self.weight.accumulate_real(gw.data());
        if let Some(b) = &mut self.bias {
            b.accumulate_real(&gb);
        }
        Ok(Value::Real(gx.expect("input gradient requested")))
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

pub struct Relu;

impl<T: Real> Layer<T> for Relu {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::Relu)
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let x = input.as_real()?;
        Ok((Value::Real(x.map(|v| v.max(T::zero()))), saved(x.clone())))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let x: &Tensor<T> = restore(s, "relu")?;
        let g = grad_out.as_real()?;
        let d = x.data().iter().zip(g.data()).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
        Ok(Value::Real(Tensor::from_vec(x.shape(), d)?))
    }

    fn branch_signature(&self, s: &Saved) -> Vec<u32> {
        s.downcast_ref::<Tensor<f64>>().map(|x| x.data().iter().map(|&v| (v > 0.0) as u32).collect()).unwrap_or_default()
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        s.downcast_ref::<Tensor<f64>>()?.data().iter().map(|v| v.abs() / 0.05).reduce(f64::min)
    }
}

/// Dense layer on `[N, D]` (or any `[N, ...]` with `D` total features).
pub struct RealFc<T> {
    config: LayerConfig,
    in_features: usize,
    out_features: usize,
    weight: Param<T>,
    bias: Option<Param<T>>,
}

impl<T: Real> RealFc<T> {
    pub(crate) fn new(config: LayerConfig, in_features: usize, out_features: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(CdsError::Parameter("fully connected layer needs non-zero widths".into()));
        }
        let shape = [out_features, in_features];
        let weight = Param::real("weight", &shape, real_weight(&shape, in_features, rng)?)?;
        let bias = if bias { Some(Param::real("bias", &[out_features], vec![T::zero(); out_features])?) } else { None };
        Ok(Self { config, in_features, out_features, weight, bias })
    }

    pub fn set_weight(&mut self, w: &[T]) {
        self.weight.value.planes_mut().0.copy_from_slice(w);
    }
}

impl<T: Real> Layer<T> for RealFc<T> {
    fn spec(&self) -> LayerSpec {
        describe(&self.config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let x = input.as_real()?;
        let n = *x.shape().first().ok_or_else(|| CdsError::shape("dense layer expects a batched input"))?;
        if x.len() != n * self.in_features {
            return Err(CdsError::shape(format!("dense layer expects {} features, got {:?}", self.in_features, x.shape())));
        }
        let (i, o) = (self.in_features, self.out_features);
        let mut y = vec![T::zero(); n * o];
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(o) {
                row.copy_from_slice(b.value.re());
            }
        }
        let beta = if self.bias.is_some() { T::one() } else { T::zero() };
        T::gemm_nt(n, i, o, T::one(), x.data(), self.weight.value.re(), beta, &mut y);
        Ok((Value::Real(Tensor::from_vec(&[n, o], y)?), saved(x.clone())))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let x: &Tensor<T> = restore(s, "real_fc")?;
        let g = grad_out.as_real()?.data();
        let (n, i, o) = (x.shape()[0], self.in_features, self.out_features);
        let mut gx = vec![T::zero(); n * i];
        T::gemm(n, o, i, T::one(), g, self.weight.value.re(), T::zero(), &mut gx);
        let mut gw = vec![T::zero(); o * i];
        T::gemm_tn(o, n, i, T::one(), g, x.data(), T::zero(), &mut gw);
        self.weight.accumulate_real(&gw);
        if let Some(b) = &mut self.bias {
            let mut gb = vec![T::zero(); o];
            for row in g.chunks(o) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            b.accumulate_real(&gb);
        }
        Ok(Value::Real(Tensor::from_vec(x.shape(), gx)?))
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Non-overlapping average pooling over `window × window` blocks.
pub struct AvgPool {
    window: usize,
}

impl AvgPool {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(CdsError::Parameter("pooling window must be positive".into()));
        }
        Ok(Self { window })
    }
}

impl<T: Real> Layer<T> for AvgPool {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::AvgPool { window: self.window })
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let x = input.as_real()?;
        let &[n, c, h, w] = x.shape() else {
            return Err(CdsError::shape(format!("avg_pool expects [N,C,H,W], got {:?}", x.shape())));
        };
        let k = self.window;
        if k > h || k > w {
            return Err(CdsError::shape("pooling window exceeds spatial size"));
        }
        let (ho, wo) = (h / k, w / k);
        let scale = T::one() / T::lit((k * k) as f64);
        let mut y = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x.data()[(plane * h + oy * k + ky) * w + ox * k + kx];
                        }
                    }
                    y[(plane * ho + oy) * wo + ox] = acc * scale;
                }
            }
        }
        Ok((Value::Real(Tensor::from_vec(&[n, c, ho, wo], y)?), saved(x.shape().to_vec())))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let shape: &Vec<usize> = restore(s, "avg_pool")?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let k = self.window;
        let (ho, wo) = (h / k, w / k);
        let scale = T::one() / T::lit((k * k) as f64);
        let g = grad_out.as_real()?.data();
        let mut gx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = g[(plane * ho + oy) * wo + ox] * scale;
                    for ky in 0..k {
                        for kx in 0..k {
                            gx[(plane * h + oy * k + ky) * w + ox * k + kx] = v;
                        }
                    }
                }
            }
        }
        Ok(Value::Real(Tensor::from_vec(shape, gx)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_pool_and_identity_fc() {
        let x = Value::Real(Tensor::from_vec(&[1, 2], vec![-1.0, 2.0]).unwrap());
        let (y, _) = Layer::<f64>::forward(&mut Relu, &x, Mode::Eval).unwrap();
        assert_eq!(y.as_real().unwrap().data(), &[0.0, 2.0]);

        let c = Value::Real(Tensor::from_vec(&[1, 1, 2, 2], vec![3.5; 4]).unwrap());
        let (y, _) = Layer::<f64>::forward(&mut AvgPool::new(2).unwrap(), &c, Mode::Eval).unwrap();
        assert_eq!(y.as_real().unwrap().data(), &[3.5]);

        let mut rng = Rng::new(0);
        let cfg = LayerConfig::RealFc { in_features: 2, out_features: 2, bias: true };
        let mut fc = RealFc::<f64>::new(cfg, 2, 2, true, &mut rng).unwrap();
        fc.set_weight(&[1.0, 0.0, 0.0, 1.0]);
        let (y, _) = fc.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.as_real().unwrap().data(), &[-1.0, 2.0]);
    }
}
