//! CIFAR-style network builders and the executable model graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck_model, GradReport, Layer, Mode, Param, Sequential, Tape, Value};
use crate::ctensor::{make_tensor, ComplexTensor, Fill, Real, Rng, Tensor};
use crate::layers::{build_layer, ConvConfig, LayerConfig, LayerSpec, Metric};
use crate::{CdsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TypeI,
    TypeE,
    Dcn,
    Real,
    SurrealWfm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::TypeI, ModelKind::TypeE, ModelKind::Dcn, ModelKind::Real, ModelKind::SurrealWfm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TypeI => "type_i",
            ModelKind::TypeE => "type_e",
            ModelKind::Dcn => "dcn",
            ModelKind::Real => "real",
            ModelKind::SurrealWfm => "surreal_wfm",
        }
    }

    /// Scalings the logits are built to ignore.
    pub fn invariance(self) -> InvarianceClass {
        match self {
            ModelKind::TypeI | ModelKind::TypeE | ModelKind::SurrealWfm => InvarianceClass::Full,
            ModelKind::Dcn | ModelKind::Real => InvarianceClass::None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = CdsError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CdsError::Config(format!("unknown model '{s}' (expected type_i, type_e, dcn, real or surreal_wfm)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvarianceClass {
    None,
    /// Invariant to unit-magnitude phase shifts only.
    Phase,
    /// Invariant to every nonzero complex scale.
    Full,
}

/// JSON-serializable model description: builder name plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub builder: ModelKind,
    pub num_classes: usize,
    /// Complex input channels.
    pub in_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Initialization seed.
    #[serde(default)]
    pub seed: u64,
    /// Denominator offset of the Type-I division layer.
    #[serde(default = "default_division_eps")]
    pub division_eps: f64,
}

fn default_division_eps() -> f64 {
    1e-7
}

fn default_image_size() -> usize {
    32
}

impl ModelConfig {
    pub fn new(builder: ModelKind, num_classes: usize, in_channels: usize) -> Self {
        Self { builder, num_classes, in_channels, image_size: 32, seed: 0, division_eps: default_division_eps() }
    }

    pub fn image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn division_eps(mut self, eps: f64) -> Self {
        self.division_eps = eps;
        self
    }
}

/// Spatial side after the three stride-2 stages, used as the pooling window.
fn pooled_side(size: usize) -> usize {
    (0..3).fold(size, |h, _| (h + 2 - 3) / 2 + 1)
}

fn stage(i: usize, o: usize) -> ConvConfig {
    ConvConfig::new(i, o, 3).stride(2).padding(1)
}

const WIDTHS: [usize; 3] = [16, 32, 64];
const EMBED: usize = 128;

/// Layer list of a model.
pub fn architecture(config: &ModelConfig) -> Result<Vec<LayerConfig>> {
    use LayerConfig::*;
    let &ModelConfig { builder, num_classes: k, in_channels: c, image_size, division_eps, .. } = config;
    if k < 2 || c == 0 || image_size < 1 {
        return Err(CdsError::Config(format!("invalid model config {config:?}")));
    }
    if matches!(builder, ModelKind::TypeI | ModelKind::TypeE) && !(2..=3).contains(&c) {
        return Err(CdsError::Config(format!("{builder} expects 2 or 3 input channels, got {c}")));
    }
    let pool = pooled_side(image_size);
    let [w1, w2, w3] = WIDTHS;
    let learnable_pool = |bias| ConvConfig::new(w3, w3, pool).stride(pool).groups(w3).with_bias(bias);
    Ok(match builder {
        ModelKind::TypeI => vec![
            Econv(stage(c, w1)),
            Division { channels: w1, kernel: 3, padding: 1, eps: division_eps },
            Gtrelu { channels: w1, r: 0.0 },
            Econv(stage(w1, w2)),
            Gtrelu { channels: w2, r: 0.0 },
            Econv(stage(w2, w3)),
            Gtrelu { channels: w3, r: 0.0 },
            learnable_pool(false),
            Flatten,
            ComplexFc { in_features: w3, out_features: EMBED, bias: false },
            PrototypeHead { embed_dim: EMBED, num_classes: k, metric: Metric::Manifold, invariant: false, batchnorm: true },
        ],
        ModelKind::TypeE => vec![
            Econv(stage(c, w1)),
            LayerConfig::eq_gtrelu(w1),
            Econv(stage(w1, w2)),
            LayerConfig::eq_gtrelu(w2),
            Econv(stage(w2, w3)),
            LayerConfig::eq_gtrelu(w3),
            learnable_pool(false),
            Flatten,
            ComplexFc { in_features: w3, out_features: EMBED, bias: false },
            PrototypeHead { embed_dim: EMBED, num_classes: k, metric: Metric::Manifold, invariant: true, batchnorm: true },
        ],
        ModelKind::Dcn => vec![
            ComplexConv(stage(c, w1)),
            Crelu,
            ComplexConv(stage(w1, w2)),
            Crelu,
            ComplexConv(stage(w2, w3)),
            Crelu,
            learnable_pool(true),
            Flatten,
            ComplexSplit,
            RealFc { in_features: 2 * w3, out_features: EMBED, bias: true },
            Relu,
            RealFc { in_features: EMBED, out_features: k, bias: true },
        ],
        ModelKind::Real => vec![
            ComplexSplit,
            RealConv { conv: stage(2 * c, w1), bias: true },
            Relu,
            RealConv { conv: stage(w1, w2), bias: true },
            Relu,
            RealConv { conv: stage(w2, w3), bias: true },
            Relu,
            RealConv { conv: ConvConfig::new(w3, w3, pool).stride(pool).groups(w3), bias: true },
            Flatten,
            RealFc { in_features: w3, out_features: EMBED, bias: true },
            Relu,
            RealFc { in_features: EMBED, out_features: k, bias: true },
        ],
        ModelKind::SurrealWfm => vec![
            WfmConv(stage(c, w1)),
            WfmConv(stage(w1, w2)),
            WfmConv(stage(w2, w3)),
            DistanceTransform,
            AvgPool { window: pool },
            Flatten,
            RealFc { in_features: w3, out_features: EMBED, bias: true },
            Relu,
            RealFc { in_features: EMBED, out_features: k, bias: true },
        ],
    })
}

trait WithBias {
    fn with_bias(self, bias: bool) -> LayerConfig;
}

impl WithBias for ConvConfig {
    fn with_bias(self, bias: bool) -> LayerConfig {
        if bias {
            LayerConfig::ComplexConv(self)
        } else {
            LayerConfig::Econv(self)
        }
    }
}

/// An executable network: ordered layers, their parameters and the
/// declared invariance class.
pub struct ModelGraph<T> {
    pub config: ModelConfig,
    pub invariance: InvarianceClass,
    net: Sequential<T>,
}

impl<T: Real> ModelGraph<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let mut rng = Rng::new(config.seed);
        let layers = architecture(config)?
            .iter()
            .map(|l| build_layer::<T>(l, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), invariance: config.builder.invariance(), net: Sequential::new(layers) })
    }

    pub fn net(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential<T> {
        &mut self.net
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        self.net.layers()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.net.layers().iter().map(|l| l.spec()).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }

    /// Learnable real coordinates.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.real_count()).sum()
    }

    fn check_input(&self, x: &ComplexTensor<T>) -> Result<()> {
        let c = &self.config;
        match *x.shape() {
            [_, ch, h, w] if ch == c.in_channels && h == c.image_size && w == c.image_size => Ok(()),
            ref s => Err(CdsError::shape(format!(
                "{} expects input [N, {}, {}, {}], got {s:?}",
                c.builder, c.in_channels, c.image_size, c.image_size
            ))),
        }
    }

    /// Logits `[N, K]` plus the tape for [`ModelGraph::backward`].
    pub fn forward(&mut self, x: &ComplexTensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape)> {
        self.check_input(x)?;
        let (y, tape) = self.net.forward(&Value::Complex(x.clone()), mode)?;
        Ok((y.into_real()?, tape))
    }

    pub fn logits(&mut self, x: &ComplexTensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(x, mode)?.0)
    }

    /// Accumulates parameter cotangents for a logit cotangent.
    pub fn backward(&mut self, tape: &Tape, grad_logits: &Tensor<T>) -> Result<()> {
        self.net.backward(tape, &Value::Real(grad_logits.clone()))?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }

    /// Top-1 predictions, ties resolved to the lowest class index.
    pub fn predict(&mut self, x: &ComplexTensor<T>, mode: Mode) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x, mode)?))
    }
}

/// Finite-difference check of a whole network at fp64 on a two-image
/// 16×16 batch. At most `max_coords` coordinates are tested per tensor.
/// Inputs that bring a Division denominator close to zero are redrawn, as in
/// the per-layer check; ReLU-type kinks are handled by branch signatures.
pub fn gradcheck_network(kind: ModelKind, seed: u64, tolerance: f64, max_coords: usize) -> Result<GradReport> {
    let config = ModelConfig::new(kind, 3, 2).image_size(16).seed(seed);
    let mut model = ModelGraph::<f64>::build(&config)?;
    let mut rng = Rng::stream(seed, 0x4743);
    for attempt in 1..=100 {
        let x: ComplexTensor<f64> = make_tensor(&[2, 2, 16, 16], Fill::Gaussian { rng: &mut rng, mean: 0.0, std: 1.0 })?;
        let x = Value::Complex(x);
        let (_, tape) = model.net_mut().forward(&x, Mode::Train)?;
        let margin = model.net().smooth_margin_where(&tape, |l| l.spec().kind_name() == "division");
        drop(tape);
        if margin.is_some_and(|m| m < 1.0) {
            continue;
        }
        let mut report = gradcheck_model(model.net_mut(), &x, &mut rng, tolerance, Some(max_coords), kind.name())?;
        report.attempts = attempt;
        return Ok(report);
    }
    Err(CdsError::Evaluation(format!("{kind}: no well-conditioned gradcheck input in 100 draws")))
}

/// Row-wise argmax of `[N, K]`, lowest index on ties.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best }))
        .collect()
}
