//! Complex-scale equivariant and invariant layers, plus the baseline layers
//! used for comparison (ℂReLU stacks, wFM convolutions, real CNN pieces).

mod activation;
mod conv;
mod convert;
mod head;
mod norm;
mod pool;
mod ratio;
mod real;
mod wfm;

pub use activation::{CRelu, EquivariantWrap, GtRelu, Identity};
pub use conv::{ComplexConv, ComplexFc};
pub use convert::{ComplexSplit, ComplexToReal, Flatten};
pub use head::{manifold_distance, Metric, PrototypeHead};
pub use norm::EqBatchNorm;
pub use pool::EqMaxPool;
pub use ratio::{conjugate_multiply, divide, Conjugate, Division};
pub use real::{AvgPool, RealConv, RealFc, Relu};
pub use wfm::{arcdist, grid_golden_minimize, wfm_layer, wfm_objective, DistanceTransform, WfmConv};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Layer, Param, ParamDomain, Value};
use crate::ctensor::{ComplexTensor, Conv2dParams, Real, Rng, Tensor};
use crate::{CdsError, Result};

fn one() -> usize {
    1
}

fn zero() -> usize {
    0
}

fn default_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_div_eps() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "zero")]
    pub padding: usize,
    #[serde(default = "one")]
    pub groups: usize,
}

impl ConvConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, padding: 0, groups: 1 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub(crate) fn params(&self) -> Conv2dParams {
        Conv2dParams { stride: self.stride, padding: self.padding, groups: self.groups }
    }

    pub(crate) fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel]
    }

    fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel > 0
            && self.stride > 0
            && self.groups > 0
            && self.in_channels % self.groups == 0
            && self.out_channels % self.groups == 0;
        if ok {
            Ok(())
        } else {
            Err(CdsError::Parameter(format!("invalid convolution configuration {self:?}")))
        }
    }
}

/// Hyperparameters of every layer kind, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hyperparameters", rename_all = "snake_case")]
pub enum LayerConfig {
    /// Bias-free complex convolution.
    Econv(ConvConfig),
    /// Complex convolution with a complex bias per output channel.
    ComplexConv(ConvConfig),
    ComplexFc {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        bias: bool,
    },
    Identity,
    Crelu,
    Gtrelu {
        channels: usize,
        r: f64,
    },
    /// `m̂ ⊙ N(f ⊙ m̂*)` around an inner pointwise layer `N`.
    EqWrap {
        inner: Box<LayerConfig>,
    },
    EqMaxpool {
        window: usize,
        stride: usize,
    },
    EqBatchnorm {
        channels: usize,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_eps")]
        eps: f64,
    },
    Division {
        channels: usize,
        kernel: usize,
        padding: usize,
        #[serde(default = "default_div_eps")]
        eps: f64,
    },
    Conjugate {
        channels: usize,
        kernel: usize,
        padding: usize,
    },
    PrototypeHead {
        embed_dim: usize,
        num_classes: usize,
        metric: Metric,
        invariant: bool,
        #[serde(default)]
        batchnorm: bool,
    },
    ComplexToReal,
    ComplexSplit,
    Flatten,
    WfmConv(ConvConfig),
    DistanceTransform,
    RealConv {
        #[serde(flatten)]
        conv: ConvConfig,
        bias: bool,
    },
    Relu,
    RealFc {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        bias: bool,
    },
    AvgPool {
        window: usize,
    },
}

impl LayerConfig {
    pub fn eq_gtrelu(channels: usize) -> Self {
        LayerConfig::EqWrap { inner: Box::new(LayerConfig::Gtrelu { channels, r: 0.0 }) }
    }

    pub fn kind_name(&self) -> String {
        let v = serde_json::to_value(self).expect("layer configs serialize");
        let kind = v["kind"].as_str().unwrap_or("unknown").to_string();
        match self {
            LayerConfig::EqWrap { inner } => format!("{kind}({})", inner.kind_name()),
            _ => kind,
        }
    }

    /// One representative configuration per layer kind, sized for
    /// finite-difference checks.
    pub fn catalog() -> Vec<LayerConfig> {
        use LayerConfig::*;
        vec![
            Econv(ConvConfig::new(2, 3, 3).padding(1)),
            Econv(ConvConfig::new(4, 4, 3).stride(2).padding(1).groups(2)),
            ComplexConv(ConvConfig::new(2, 3, 3).padding(1)),
            ComplexFc { in_features: 5, out_features: 3, bias: false },
            ComplexFc { in_features: 5, out_features: 3, bias: true },
            Crelu,
            Gtrelu { channels: 2, r: 0.0 },
            Gtrelu { channels: 2, r: 0.1 },
            EqWrap { inner: Box::new(Crelu) },
            Self::eq_gtrelu(2),
            EqMaxpool { window: 2, stride: 2 },
            EqBatchnorm { channels: 2, momentum: 0.1, eps: 1e-5 },
            Division { channels: 2, kernel: 3, padding: 1, eps: 1e-7 },
            Conjugate { channels: 2, kernel: 3, padding: 1 },
            PrototypeHead { embed_dim: 4, num_classes: 3, metric: Metric::Manifold, invariant: false, batchnorm: false },
            PrototypeHead { embed_dim: 4, num_classes: 3, metric: Metric::Manifold, invariant: false, batchnorm: true },
            PrototypeHead { embed_dim: 4, num_classes: 3, metric: Metric::Manifold, invariant: true, batchnorm: true },
            PrototypeHead { embed_dim: 4, num_classes: 3, metric: Metric::Euclidean, invariant: true, batchnorm: false },
            ComplexToReal,
            ComplexSplit,
            Flatten,
            WfmConv(ConvConfig::new(2, 3, 3).stride(2).padding(1)),
            DistanceTransform,
            RealConv { conv: ConvConfig::new(2, 3, 3).padding(1), bias: true },
            Relu,
            RealFc { in_features: 5, out_features: 3, bias: true },
            AvgPool { window: 2 },
        ]
    }
}

/// Reference to a parameter tensor inside a serialized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRef {
    pub name: String,
    pub shape: Vec<usize>,
    pub domain: ParamDomain,
    pub trainable: bool,
}

/// Serialized form of a layer: `{kind, hyperparameters, parameters}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub config: LayerConfig,
    #[serde(default)]
    pub parameters: Vec<ParamRef>,
}

impl LayerSpec {
    pub fn new(config: LayerConfig) -> Self {
        Self { config, parameters: Vec::new() }
    }

    pub fn kind_name(&self) -> String {
        self.config.kind_name()
    }
}

impl From<LayerConfig> for LayerSpec {
    fn from(config: LayerConfig) -> Self {
        Self::new(config)
    }
}

pub(crate) fn describe<T: Real>(config: &LayerConfig, params: &[&Param<T>]) -> LayerSpec {
    LayerSpec {
        config: config.clone(),
        parameters: params
            .iter()
            .map(|p| ParamRef {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                domain: p.domain,
                trainable: p.trainable,
            })
            .collect(),
    }
}

/// Instantiates a layer with freshly initialized parameters.
pub fn build_layer<T: Real>(config: &LayerConfig, rng: &mut Rng) -> Result<Box<dyn Layer<T>>> {
    use LayerConfig::*;
    Ok(match config {
        Econv(c) => {
            c.validate()?;
            Box::new(conv::ComplexConv::new(config.clone(), c.clone(), false, rng)?)
        }
        ComplexConv(c) => {
            c.validate()?;
            Box::new(conv::ComplexConv::new(config.clone(), c.clone(), true, rng)?)
        }
        ComplexFc { in_features, out_features, bias } => {
            Box::new(conv::ComplexFc::new(config.clone(), *in_features, *out_features, *bias, rng)?)
        }
        Identity => Box::new(activation::Identity),
        Crelu => Box::new(CRelu),
        Gtrelu { channels, r } => Box::new(GtRelu::new(*channels, *r)?),
        EqWrap { inner } => Box::new(EquivariantWrap::new(config.clone(), build_layer(inner, rng)?)),
        EqMaxpool { window, stride } => Box::new(EqMaxPool::new(*window, *stride)?),
        EqBatchnorm { channels, momentum, eps } => Box::new(EqBatchNorm::new(*channels, *momentum, *eps)?),
        Division { channels, kernel, padding, eps } => {
            Box::new(ratio::Division::new(config.clone(), *channels, *kernel, *padding, *eps, rng)?)
        }
        Conjugate { channels, kernel, padding } => {
            Box::new(ratio::Conjugate::new(config.clone(), *channels, *kernel, *padding, rng)?)
        }
        PrototypeHead { embed_dim, num_classes, metric, invariant, batchnorm } => Box::new(head::PrototypeHead::new(
            config.clone(),
            *embed_dim,
            *num_classes,
            *metric,
            *invariant,
            *batchnorm,
            rng,
        )?),
        ComplexToReal => Box::new(convert::ComplexToReal),
        ComplexSplit => Box::new(convert::ComplexSplit),
        Flatten => Box::new(convert::Flatten),
        WfmConv(c) => {
            c.validate()?;
            Box::new(wfm::WfmConv::new(config.clone(), c.clone(), rng)?)
        }
        DistanceTransform => Box::new(wfm::DistanceTransform),
        RealConv { conv, bias } => {
            conv.validate()?;
            Box::new(real::RealConv::new(config.clone(), conv.clone(), *bias, rng)?)
        }
        Relu => Box::new(real::Relu),
        RealFc { in_features, out_features, bias } => {
            Box::new(real::RealFc::new(config.clone(), *in_features, *out_features, *bias, rng)?)
        }
        AvgPool { window } => Box::new(real::AvgPool::new(*window)?),
    })
}

/// Samples a small batched test input for `config` with every complex
/// magnitude (or real value) at least 0.1 away from zero.
pub fn sample_input(config: &LayerConfig, rng: &mut Rng) -> Result<Value<f64>> {
    use LayerConfig::*;
    let complex = |shape: &[usize], rng: &mut Rng| -> Result<Value<f64>> {
        let n: usize = shape.iter().product();
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        while re.len() < n {
            let (a, b) = (rng.normal(0.0, 1.0), rng.normal(0.0, 1.0));
            if a.hypot(b) >= 0.1 {
                re.push(a);
                im.push(b);
            }
        }
        Ok(Value::Complex(ComplexTensor::from_planes(shape, re, im)?))
    };
    let real = |shape: &[usize], rng: &mut Rng| -> Result<Value<f64>> {
        let n: usize = shape.iter().product();
        let mut v = Vec::with_capacity(n);
        while v.len() < n {
            let a = rng.normal(0.0, 1.0);
            if a.abs() >= 0.1 {
                v.push(a);
            }
        }
        Ok(Value::Real(Tensor::from_vec(shape, v)?))
    };
    match config {
        Econv(c) | ComplexConv(c) | WfmConv(c) => complex(&[2, c.in_channels, 5, 5], rng),
        ComplexFc { in_features, .. } => complex(&[2, *in_features], rng),
        Identity | Crelu => complex(&[2, 2, 2, 2], rng),
        Gtrelu { channels, .. } | EqBatchnorm { channels, .. } => complex(&[2, *channels, 2, 2], rng),
        EqWrap { inner } => match inner.as_ref() {
            Gtrelu { channels, .. } => complex(&[2, *channels, 2, 2], rng),
            _ => complex(&[2, 2, 2, 2], rng),
        },
        EqMaxpool { window, .. } => complex(&[2, 2, 2 * window, 2 * window], rng),
        Division { channels, .. } | Conjugate { channels, .. } => complex(&[2, *channels, 4, 4], rng),
        PrototypeHead { embed_dim, .. } => complex(&[2, *embed_dim], rng),
        ComplexToReal | ComplexSplit | Flatten | DistanceTransform => complex(&[2, 3, 2, 2], rng),
        RealConv { conv, .. } => real(&[2, conv.in_channels, 5, 5], rng),
        Relu => real(&[2, 3, 2, 2], rng),
        RealFc { in_features, .. } => real(&[2, *in_features], rng),
        AvgPool { window } => real(&[2, 2, 2 * window, 2 * window], rng),
    }
}

/// `(batch, channels, inner)` for a batched `[N, C, ...]` shape.
pub(crate) fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(CdsError::shape(format!("expected a batched [N, C, ...] tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Complex Gaussian weights with per-component std `1/sqrt(2·fan_in)`.
pub(crate) fn complex_weight<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<ComplexTensor<T>> {
    let std = 1.0 / (2.0 * fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let re = (0..n).map(|_| T::lit(rng.normal(0.0, std))).collect();
    let im = (0..n).map(|_| T::lit(rng.normal(0.0, std))).collect();
    ComplexTensor::from_planes(shape, re, im)
}

/// He-style real Gaussian weights.
pub(crate) fn real_weight<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Vec<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Ok((0..n).map(|_| T::lit(rng.normal(0.0, std))).collect())
}

pub(crate) fn cz<T: Real>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

/// `∇|z|` in real-pair form, zero at the origin.
#[inline]
pub(crate) fn grad_abs<T: Real>(z: Complex<T>) -> Complex<T> {
    let r = crate::ctensor::abs(z);
    if r > T::zero() {
        z / r
    } else {
        Complex::new(T::zero(), T::zero())
    }
}

/// `∇∠z = i·z/|z|²` in real-pair form, zero at the origin.
#[inline]
pub(crate) fn grad_arg<T: Real>(z: Complex<T>) -> Complex<T> {
    let r2 = z.norm_sqr();
    if r2 > T::zero() {
        Complex::new(-z.im, z.re) / r2
    } else {
        Complex::new(T::zero(), T::zero())
    }
}

/// Per-pixel channel mean `m`, unit direction `m̂` and floored `|m|` of a
/// batched `[N, C, ...]` tensor. Each output is indexed by `n·inner + p`.
pub(crate) fn pixel_mean<T: Real>(f: &ComplexTensor<T>) -> Result<(Vec<Complex<T>>, Vec<Complex<T>>, Vec<T>)> {
    let (n, c, inner) = layout(f.shape())?;
    let floor = T::lit(crate::ctensor::MAG_FLOOR);
    let inv_c = T::one() / T::lit(c as f64);
    let mut m = vec![Complex::new(T::zero(), T::zero()); n * inner];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for p in 0..inner {
                m[b * inner + p] += f.get(base + p);
            }
        }
    }
    for v in &mut m {
        *v = *v * inv_c;
    }
    let mag: Vec<T> = m.iter().map(|z| z.norm().max(floor)).collect();
    let unit = m.iter().zip(&mag).map(|(z, &a)| *z / a).collect();
    Ok((m, unit, mag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_shape() {
        let spec = LayerSpec::new(LayerConfig::Econv(ConvConfig::new(3, 16, 3).stride(2).padding(1)));
        let v = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["kind"], "econv");
        assert_eq!(v["hyperparameters"]["out_channels"], 16);
        assert!(v["parameters"].as_array().unwrap().is_empty());
        let back: LayerSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);

        let wrapped: LayerSpec =
            serde_json::from_str(r#"{"kind":"eq_wrap","hyperparameters":{"inner":{"kind":"gtrelu","hyperparameters":{"channels":4,"r":0.0}}}}"#)
                .unwrap();
        assert_eq!(wrapped.config, LayerConfig::eq_gtrelu(4));
        assert_eq!(wrapped.kind_name(), "eq_wrap(gtrelu)");
        let unit: LayerSpec = serde_json::from_str(r#"{"kind":"crelu"}"#).unwrap();
        assert_eq!(unit.config, LayerConfig::Crelu);
    }

    #[test]
    fn built_layers_report_their_parameters() {
        let mut rng = Rng::new(0);
        let layer = build_layer::<f64>(&LayerConfig::Econv(ConvConfig::new(2, 4, 3)), &mut rng).unwrap();
        let spec = layer.spec();
        assert_eq!(spec.parameters.len(), 1);
        assert_eq!(spec.parameters[0].shape, vec![4, 2, 3, 3]);
        assert!(build_layer::<f64>(&LayerConfig::Econv(ConvConfig::new(3, 4, 3).groups(2)), &mut rng).is_err());
    }

    #[test]
    fn every_catalog_entry_builds_and_runs() {
        let mut rng = Rng::new(5);
        for config in LayerConfig::catalog() {
            let mut layer = build_layer::<f64>(&config, &mut rng).unwrap();
            let x = sample_input(&config, &mut rng).unwrap();
            let (y, s) = layer.forward(&x, crate::autodiff::Mode::Train).unwrap();
            let g = layer.backward(&s, &y).unwrap();
            assert_eq!(g.shape(), x.shape(), "{}", config.kind_name());
        }
    }
}
