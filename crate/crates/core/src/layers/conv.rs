use super::{complex_weight, describe, layout, LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Param, Saved, Value};
use crate::ctensor::{conv2d, conv2d_backward, ComplexTensor, ConvMethod, Real, Rng};
use crate::layers::ConvConfig;
use crate::{CdsError, Result};

/// Complex convolution; bias-free (`econv`) unless built with a bias.
pub struct ComplexConv<T> {
    config: LayerConfig,
    conv: ConvConfig,
    weight: Param<T>,
    bias: Option<Param<T>>,
}

impl<T: Real> ComplexConv<T> {
    pub(crate) fn new(config: LayerConfig, conv: ConvConfig, bias: bool, rng: &mut Rng) -> Result<Self> {
        let shape = conv.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = Param::complex("weight", complex_weight(&shape, fan_in, rng)?);
        let bias = if bias { Some(Param::complex("bias", ComplexTensor::zeros(&[conv.out_channels])?)) } else { None };
        Ok(Self { config, conv, weight, bias })
    }

    pub fn weight(&self) -> &ComplexTensor<T> {
        &self.weight.value
    }

    pub fn weight_mut(&mut self) -> &mut ComplexTensor<T> {
        &mut self.weight.value
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    /// Forward pass without recording anything.
    pub fn apply(&self, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let mut y = conv2d(z, &self.weight.value, self.conv.params(), ConvMethod::Gauss)?;
        if let Some(b) = &self.bias {
            let (n, c, inner) = layout(y.shape())?;
            let (re, im) = y.planes_mut();
            for i in 0..n * c {
                let ch = i % c;
                for k in i * inner..(i + 1) * inner {
                    re[k] += b.value.re()[ch];
                    im[k] += b.value.im()[ch];
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter cotangents and returns the input cotangent.
    pub(crate) fn pullback(&mut self, z: &ComplexTensor<T>, g: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let (gz, gw) = conv2d_backward(z, &self.weight.value, self.conv.params(), g, true)?;
        self.weight.accumulate(&gw)?;
        if let Some(b) = &mut self.bias {
            let (n, c, inner) = layout(g.shape())?;
            let mut gb = ComplexTensor::zeros(&[c])?;
            let (bre, bim) = gb.planes_mut();
            for i in 0..n * c {
                for k in i * inner..(i + 1) * inner {
                    bre[i % c] += g.re()[k];
                    bim[i % c] += g.im()[k];
                }
            }
            b.accumulate(&gb)?;
        }
        Ok(gz.expect("input gradient requested"))
    }
}

impl<T: Real> Layer<T> for ComplexConv<T> {
    fn spec(&self) -> LayerSpec {
        describe(&self.config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let z = input.as_complex()?;
        if z.shape().len() != 4 {
            return Err(CdsError::shape(format!("convolution expects [N,C,H,W], got {:?}", z.shape())));
        }
        Ok((Value::Complex(self.apply(z)?), saved(z.clone())))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let z: &ComplexTensor<T> = restore(s, "complex_conv")?;
        Ok(Value::Complex(self.pullback(z, grad_out.as_complex()?)?))
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Fully connected complex layer on `[N, D]` (or `[N, D, 1, 1]`) inputs.
///
/// Without bias it is a pure ℂ-linear map and hence complex-scale equivariant.
pub struct ComplexFc<T> {
    inner: ComplexConv<T>,
    in_features: usize,
}

impl<T: Real> ComplexFc<T> {
    pub(crate) fn new(config: LayerConfig, in_features: usize, out_features: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(CdsError::Parameter("fully connected layer needs non-zero widths".into()));
        }
        let conv = ConvConfig::new(in_features, out_features, 1);
        Ok(Self { inner: ComplexConv::new(config, conv, bias, rng)?, in_features })
    }

    fn as_image(&self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let n = x.shape()[0];
        if x.len() != n * self.in_features {
            return Err(CdsError::shape(format!(
                "fully connected layer expects {} features, got shape {:?}",
                self.in_features,
                x.shape()
            )));
        }
        x.clone().reshape(&[n, self.in_features, 1, 1])
    }
}

impl<T: Real> Layer<T> for ComplexFc<T> {
    fn spec(&self) -> LayerSpec {
        self.inner.spec()
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let x = input.as_complex()?;
        if x.shape().is_empty() {
            return Err(CdsError::shape("fully connected layer expects a batched input"));
        }
        let img = self.as_image(x)?;
        let y = self.inner.apply(&img)?;
        let n = y.shape()[0];
        let out = y.len() / n;
        Ok((Value::Complex(y.reshape(&[n, out])?), saved((img, x.shape().to_vec()))))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let (img, in_shape): &(ComplexTensor<T>, Vec<usize>) = restore(s, "complex_fc")?;
        let g = grad_out.as_complex()?;
        let n = g.shape()[0];
        let g = g.clone().reshape(&[n, g.len() / n, 1, 1])?;
        let gx = self.inner.pullback(img, &g)?;
        Ok(Value::Complex(gx.reshape(in_shape)?))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.inner.params_mut()
    }
}
