//! Reverse-mode differentiation over layer chains.
//!
//! Every complex quantity is treated as a pair of real coordinates. A
//! cotangent for a complex tensor `z` is stored as a complex tensor holding
//! `∂L/∂re + i·∂L/∂im`; the Wirtinger derivative is half of it,
//! `∂L/∂z̄ = ½(∂L/∂re + i·∂L/∂im)`.
//!
//! Under this convention a product `y = a·z` with constant `a` pulls back as
//! `g_z = conj(a)·g_y`, which is what the layer backward rules use.

mod gradcheck;

pub use gradcheck::{finite_diff_grad, gradcheck, gradcheck_model, CoordinateError, GradReport, GradStatus};

use std::any::Any;

use crate::ctensor::{ComplexTensor, Real, Tensor};
use crate::layers::LayerSpec;
use crate::{CdsError, Result};

/// A value flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Value<T> {
    Complex(ComplexTensor<T>),
    Real(Tensor<T>),
}

impl<T: Real> Value<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Complex(t) => t.shape(),
            Value::Real(t) => t.shape(),
        }
    }

    pub fn as_complex(&self) -> Result<&ComplexTensor<T>> {
        match self {
            Value::Complex(t) => Ok(t),
            Value::Real(_) => Err(CdsError::shape("expected a complex value, found a real one")),
        }
    }

    pub fn as_real(&self) -> Result<&Tensor<T>> {
        match self {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => Err(CdsError::shape("expected a real value, found a complex one")),
        }
    }

    pub fn into_complex(self) -> Result<ComplexTensor<T>> {
        match self {
            Value::Complex(t) => Ok(t),
            Value::Real(_) => Err(CdsError::shape("expected a complex value, found a real one")),
        }
    }

    pub fn into_real(self) -> Result<Tensor<T>> {
        match self {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => Err(CdsError::shape("expected a real value, found a complex one")),
        }
    }

    /// Number of real coordinates.
    pub fn real_len(&self) -> usize {
        match self {
            Value::Complex(t) => 2 * t.len(),
            Value::Real(t) => t.len(),
        }
    }

    /// Real coordinate `k`: complex values interleave `(re, im)` per element.
    pub fn coord(&self, k: usize) -> T {
        match self {
            Value::Complex(t) => {
                if k % 2 == 0 {
                    t.re()[k / 2]
                } else {
                    t.im()[k / 2]
                }
            }
            Value::Real(t) => t.data()[k],
        }
    }

    pub fn set_coord(&mut self, k: usize, v: T) {
        match self {
            Value::Complex(t) => {
                let (re, im) = t.planes_mut();
                if k % 2 == 0 {
                    re[k / 2] = v;
                } else {
                    im[k / 2] = v;
                }
            }
            Value::Real(t) => t.data_mut()[k] = v,
        }
    }

    pub fn cast<U: Real>(&self) -> Value<U> {
        match self {
            Value::Complex(t) => Value::Complex(t.cast()),
            Value::Real(t) => Value::Real(t.cast()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamDomain {
    Complex,
    /// Only the real plane is meaningful; the imaginary plane stays zero.
    Real,
}

/// A named tensor paired with its accumulated cotangent.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: ComplexTensor<T>,
    pub grad: ComplexTensor<T>,
    pub domain: ParamDomain,
    /// Running statistics are stored as non-trainable parameters so they
    /// travel with checkpoints.
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn complex(name: &str, value: ComplexTensor<T>) -> Self {
        let grad = ComplexTensor::zeros(value.shape()).expect("shape already validated");
        Self { name: name.into(), value, grad, domain: ParamDomain::Complex, trainable: true }
    }

    pub fn real(name: &str, shape: &[usize], values: Vec<T>) -> Result<Self> {
        let n = values.len();
        let value = ComplexTensor::from_planes(shape, values, vec![T::zero(); n])?;
        let grad = ComplexTensor::zeros(shape)?;
        Ok(Self { name: name.into(), value, grad, domain: ParamDomain::Real, trainable: true })
    }

    pub fn buffer(name: &str, shape: &[usize], values: Vec<T>) -> Result<Self> {
        let mut p = Self::real(name, shape, values)?;
        p.trainable = false;
        Ok(p)
    }

    /// Learnable real coordinates.
    pub fn real_count(&self) -> usize {
        match self.domain {
            ParamDomain::Complex => 2 * self.value.len(),
            ParamDomain::Real => self.value.len(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }

    /// Adds `g` into the real plane of the cotangent.
    pub(crate) fn accumulate_real(&mut self, g: &[T]) {
        let (re, _) = self.grad.planes_mut();
        for (a, b) in re.iter_mut().zip(g) {
            *a += *b;
        }
    }

    pub(crate) fn accumulate(&mut self, g: &ComplexTensor<T>) -> Result<()> {
        match self.domain {
            ParamDomain::Complex => self.grad.add_assign(g),
            ParamDomain::Real => {
                self.accumulate_real(g.re());
                Ok(())
            }
        }
    }

    /// Real coordinate `k` of the value, interleaving `(re, im)` for complex
    /// parameters.
    pub fn coord(&self, k: usize) -> T {
        match self.domain {
            ParamDomain::Complex if k % 2 == 1 => self.value.im()[k / 2],
            ParamDomain::Complex => self.value.re()[k / 2],
            ParamDomain::Real => self.value.re()[k],
        }
    }

    pub fn set_coord(&mut self, k: usize, v: T) {
        let (re, im) = self.value.planes_mut();
        match self.domain {
            ParamDomain::Complex if k % 2 == 1 => im[k / 2] = v,
            ParamDomain::Complex => re[k / 2] = v,
            ParamDomain::Real => re[k] = v,
        }
    }

    pub fn grad_coord(&self, k: usize) -> T {
        match self.domain {
            ParamDomain::Complex if k % 2 == 1 => self.grad.im()[k / 2],
            ParamDomain::Complex => self.grad.re()[k / 2],
            ParamDomain::Real => self.grad.re()[k],
        }
    }
}

/// Context saved by a forward pass for the matching backward pass.
pub type Saved = Box<dyn Any + Send>;

pub(crate) fn saved<S: Any + Send>(s: S) -> Saved {
    Box::new(s)
}

pub(crate) fn restore<'a, S: Any>(s: &'a Saved, layer: &str) -> Result<&'a S> {
    s.downcast_ref::<S>()
        .ok_or_else(|| CdsError::State(format!("{layer}: backward received context from another layer")))
}

/// A differentiable layer.
///
/// `forward` returns the output with whatever it needs to replay the
/// backward rule; `backward` maps the output cotangent to the input cotangent
/// and adds parameter cotangents into the layer's own [`Param::grad`].
pub trait Layer<T: Real>: Send {
    fn spec(&self) -> LayerSpec;

    fn forward(&mut self, input: &Value<T>, mode: Mode) -> Result<(Value<T>, Saved)>;

    fn backward(&mut self, saved: &Saved, grad_out: &Value<T>) -> Result<Value<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    /// Discrete record of which smooth piece of the layer was active
    /// (ReLU sides, phase clipping, pooling winners). Finite differences are
    /// only meaningful while this stays constant.
    fn branch_signature(&self, _saved: &Saved) -> Vec<u32> {
        Vec::new()
    }

    /// Normalized distance to the nearest non-differentiable locus; values
    /// `>= 1` mean the forward point is safely inside a smooth region.
    fn smooth_margin(&self, _saved: &Saved) -> Option<f64> {
        None
    }
}

/// Ordered record of executed layers, replayed in reverse by `backward`.
pub struct Tape {
    entries: Vec<(usize, Saved)>,
}

impl Tape {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, layer: usize, saved: Saved) {
        self.entries.push((layer, saved));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &(usize, Saved)> {
        self.entries.iter()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A chain of layers executed in order.
pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer<T>>] {
        &mut self.layers
    }

    pub fn forward(&mut self, input: &Value<T>, mode: Mode) -> Result<(Value<T>, Tape)> {
        let mut tape = Tape::new();
        let mut x = input.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (y, s) = layer.forward(&x, mode)?;
            tape.push(i, s);
            x = y;
        }
        Ok((x, tape))
    }

    /// Replays `tape` in reverse, accumulating parameter cotangents, and
    /// returns the input cotangent.
    pub fn backward(&mut self, tape: &Tape, grad_out: &Value<T>) -> Result<Value<T>> {
        if tape.is_empty() {
            return Err(CdsError::State("backward called without a recorded forward pass".into()));
        }
        let mut g = grad_out.clone();
        for (i, s) in tape.entries().rev() {
            let layer = self
                .layers
                .get_mut(*i)
                .ok_or_else(|| CdsError::State(format!("tape refers to missing layer {i}")))?;
            g = layer.backward(s, &g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn branch_signature(&self, tape: &Tape) -> Vec<u32> {
        tape.entries().flat_map(|(i, s)| self.layers[*i].branch_signature(s)).collect()
    }

    pub fn smooth_margin(&self, tape: &Tape) -> Option<f64> {
        self.smooth_margin_where(tape, |_| true)
    }

    /// [`Self::smooth_margin`] restricted to layers accepted by `keep`.
    pub fn smooth_margin_where(&self, tape: &Tape, keep: impl Fn(&dyn Layer<T>) -> bool) -> Option<f64> {
        tape.entries()
            .filter(|(i, _)| keep(self.layers[*i].as_ref()))
            .filter_map(|(i, s)| self.layers[*i].smooth_margin(s))
            .reduce(f64::min)
    }
}
