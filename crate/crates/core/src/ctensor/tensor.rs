use num_complex::Complex;

use super::{polar, Real, Rng, MAG_FLOOR};
use crate::{CdsError, Result};

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(CdsError::shape("shape must have at least one dimension"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(CdsError::shape(format!("dimension {axis} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

/// Dense real tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![T::zero(); n] })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(CdsError::shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(CdsError::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }
}

/// N-dimensional complex array with planar storage.
///
/// `re` and `im` are separate contiguous row-major planes of identical
/// length. The element type fixes the precision; use [`ComplexTensor::cast`]
/// to change it explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<T> {
    shape: Vec<usize>,
    re: Vec<T>,
    im: Vec<T>,
}

pub enum Fill<'a> {
    Zeros,
    Ones,
    Gaussian { rng: &'a mut Rng, mean: f64, std: f64 },
}

/// Allocates a tensor of `shape` filled according to `fill`.
///
/// Gaussian fills draw the real plane first, then the imaginary plane, from
/// the same stream.
pub fn make_tensor<T: Real>(shape: &[usize], fill: Fill<'_>) -> Result<ComplexTensor<T>> {
    let n = check_shape(shape)?;
    let (re, im) = match fill {
        Fill::Zeros => (vec![T::zero(); n], vec![T::zero(); n]),
        Fill::Ones => (vec![T::one(); n], vec![T::zero(); n]),
        Fill::Gaussian { rng, mean, std } => {
            let re = (0..n).map(|_| T::lit(rng.normal(mean, std))).collect();
            let im = (0..n).map(|_| T::lit(rng.normal(mean, std))).collect();
            (re, im)
        }
    };
    Ok(ComplexTensor { shape: shape.to_vec(), re, im })
}

impl<T: Real> ComplexTensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        make_tensor(shape, Fill::Zeros)
    }

    pub fn from_planes(shape: &[usize], re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if re.len() != n || im.len() != n {
            return Err(CdsError::shape(format!(
                "plane lengths ({}, {}) do not match shape {shape:?}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), re, im })
    }

    pub fn from_complex(shape: &[usize], values: &[Complex<T>]) -> Result<Self> {
        let re = values.iter().map(|z| z.re).collect();
        let im = values.iter().map(|z| z.im).collect();
        Self::from_planes(shape, re, im)
    }

    pub fn from_real(t: &Tensor<T>) -> Self {
        Self { shape: t.shape().to_vec(), re: t.data().to_vec(), im: vec![T::zero(); t.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn precision(&self) -> super::Precision {
        T::PRECISION
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    /// Exclusive access to both planes.
    pub fn planes_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.re, &mut self.im)
    }

    pub fn into_planes(self) -> (Vec<T>, Vec<T>) {
        (self.re, self.im)
    }

    #[inline]
    pub fn get(&self, i: usize) -> Complex<T> {
        Complex::new(self.re[i], self.im[i])
    }

    #[inline]
    pub fn set(&mut self, i: usize, z: Complex<T>) {
        self.re[i] = z.re;
        self.im[i] = z.im;
    }

    pub fn iter(&self) -> impl Iterator<Item = Complex<T>> + '_ {
        self.re.iter().zip(&self.im).map(|(&re, &im)| Complex::new(re, im))
    }

    pub fn to_complex_vec(&self) -> Vec<Complex<T>> {
        self.iter().collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(CdsError::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(Complex<T>) -> Complex<T>) -> Self {
        let mut out = self.clone();
        for i in 0..self.len() {
            out.set(i, f(self.get(i)));
        }
        out
    }

    /// Multiplies every element by the scalar `s`.
    pub fn scale(&self, s: Complex<T>) -> Self {
        self.map(|z| z * s)
    }

    pub fn conj(&self) -> Self {
        Self { shape: self.shape.clone(), re: self.re.clone(), im: self.im.iter().map(|&x| -x).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(CdsError::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += *b;
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            *a += *b;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.re.iter_mut().for_each(|x| *x = T::zero());
        self.im.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn cast<U: Real>(&self) -> ComplexTensor<U> {
        ComplexTensor {
            shape: self.shape.clone(),
            re: self.re.iter().map(|x| U::lit(x.as_f64())).collect(),
            im: self.im.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Largest element magnitude.
    pub fn max_abs(&self) -> T {
        self.iter().map(|z| z.norm()).fold(T::zero(), T::max)
    }

    /// Sub-tensor along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(CdsError::shape(format!("cannot take item {i} of {:?}", self.shape)));
        }
        let inner: usize = self.shape[1..].iter().product();
        let range = i * inner..(i + 1) * inner;
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            re: self.re[range.clone()].to_vec(),
            im: self.im[range].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| CdsError::shape("cannot stack zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut re = Vec::with_capacity(first.len() * items.len());
        let mut im = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(CdsError::shape(format!("stack: {:?} vs {:?}", t.shape, first.shape)));
            }
            re.extend_from_slice(&t.re);
            im.extend_from_slice(&t.im);
        }
        Ok(Self { shape, re, im })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// Division with the denominator magnitude offset by `eps`:
    /// `a / b = |a| / (|b| + eps) · e^{i(∠a − ∠b)}`.
    Div(f64),
}

/// Axis along which a per-channel operand is broadcast.
fn channel_axis(shape: &[usize]) -> usize {
    match shape.len() {
        1 | 2 => shape.len() - 1,
        n => n - 3,
    }
}

/// Quotient `a / b` with the denominator magnitude offset by `eps`.
#[inline]
pub(crate) fn offset_div<T: Real>(a: Complex<T>, b: Complex<T>, eps: T) -> Complex<T> {
    let rho = super::abs(b);
    let denom = rho.max(T::lit(MAG_FLOOR)) * (rho + eps);
    a * b.conj() / denom
}

/// Elementwise complex arithmetic.
///
/// `b` must either match `a`'s shape, hold a single element, or be a vector
/// over `a`'s channel axis (axis `ndim-3` for image tensors, the last axis for
/// vectors and `[N, D]` batches).
pub fn complex_elementwise<T: Real>(
    a: &ComplexTensor<T>,
    b: &ComplexTensor<T>,
    op: ElementwiseOp,
) -> Result<ComplexTensor<T>> {
    let index: Box<dyn Fn(usize) -> usize> = if a.shape == b.shape {
        Box::new(|i| i)
    } else if b.len() == 1 {
        Box::new(|_| 0)
    } else {
        let axis = channel_axis(&a.shape);
        if b.shape.len() != 1 || b.shape[0] != a.shape[axis] {
            return Err(CdsError::shape(format!(
                "{:?} is not broadcastable against {:?}",
                b.shape, a.shape
            )));
        }
        let inner: usize = a.shape[axis + 1..].iter().product();
        let channels = a.shape[axis];
        Box::new(move |i| (i / inner) % channels)
    };
    let f: Box<dyn Fn(Complex<T>, Complex<T>) -> Complex<T>> = match op {
        ElementwiseOp::Add => Box::new(|x, y| x + y),
        ElementwiseOp::Sub => Box::new(|x, y| x - y),
        ElementwiseOp::Mul => Box::new(|x, y| x * y),
        ElementwiseOp::Div(eps) => {
            let eps = T::lit(eps);
            Box::new(move |x, y| offset_div(x, y, eps))
        }
    };
    let mut out = a.clone();
    for i in 0..a.len() {
        out.set(i, f(a.get(i), b.get(index(i))));
    }
    Ok(out)
}

/// Magnitude and principal phase planes; the phase of exact zero is zero.
pub fn magnitude_phase<T: Real>(z: &ComplexTensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (mag, phase): (Vec<T>, Vec<T>) = z.iter().map(polar).unzip();
    (
        Tensor { shape: z.shape.clone(), data: mag },
        Tensor { shape: z.shape.clone(), data: phase },
    )
}

/// Per-pixel mean over channels: `[C,H,W] → [1,H,W]`, `[N,C,H,W] → [N,1,H,W]`.
pub fn channel_mean<T: Real>(f: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let (batch, channels, pixels) = match f.shape.as_slice() {
        [c, h, w] => (1, *c, h * w),
        [n, c, h, w] => (*n, *c, h * w),
        other => return Err(CdsError::shape(format!("channel_mean expects [C,H,W] or [N,C,H,W], got {other:?}"))),
    };
    let mut shape = f.shape.clone();
    let axis = shape.len() - 3;
    shape[axis] = 1;
    let mut out = ComplexTensor::zeros(&shape)?;
    let inv = T::one() / T::lit(channels as f64);
    for n in 0..batch {
        for p in 0..pixels {
            let mut acc = Complex::new(T::zero(), T::zero());
            for c in 0..channels {
                acc = acc + f.get((n * channels + c) * pixels + p);
            }
            out.set(n * pixels + p, acc * inv);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn scalar(z: Complex<f64>) -> ComplexTensor<f64> {
        ComplexTensor::from_complex(&[1], &[z]).unwrap()
    }

    #[test]
    fn fills() {
        let z: ComplexTensor<f64> = make_tensor(&[2, 2], Fill::Zeros).unwrap();
        assert!(z.iter().all(|v| v == c(0.0, 0.0)));
        let o: ComplexTensor<f64> = make_tensor(&[1], Fill::Ones).unwrap();
        assert_eq!(o.get(0), c(1.0, 0.0));

        let mut r1 = Rng::new(7);
        let mut r2 = Rng::new(7);
        let g1: ComplexTensor<f64> = make_tensor(&[4], Fill::Gaussian { rng: &mut r1, mean: 0.0, std: 1.0 }).unwrap();
        let g2: ComplexTensor<f64> = make_tensor(&[4], Fill::Gaussian { rng: &mut r2, mean: 0.0, std: 1.0 }).unwrap();
        assert_eq!(g1, g2);
        assert_ne!(g1.re(), g1.im());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(make_tensor::<f64>(&[3, 0], Fill::Zeros), Err(CdsError::Shape(_))));
        assert!(matches!(make_tensor::<f64>(&[], Fill::Zeros), Err(CdsError::Shape(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mul = complex_elementwise(&scalar(c(1.0, 1.0)), &scalar(c(1.0, -1.0)), ElementwiseOp::Mul).unwrap();
        assert_eq!(mul.get(0), c(2.0, 0.0));
        let add = complex_elementwise(&scalar(c(2.0, 0.0)), &scalar(c(0.0, 3.0)), ElementwiseOp::Add).unwrap();
        assert_eq!(add.get(0), c(2.0, 3.0));
        let div = complex_elementwise(&scalar(c(1.0, 0.0)), &scalar(c(0.0, 1.0)), ElementwiseOp::Div(0.0)).unwrap();
        assert!((div.get(0) - c(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn elementwise_broadcasts_per_channel() {
        let a = ComplexTensor::from_complex(&[2, 1, 2], &[c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)]).unwrap();
        let b = ComplexTensor::from_complex(&[2], &[c(0.0, 1.0), c(10.0, 0.0)]).unwrap();
        let out = complex_elementwise(&a, &b, ElementwiseOp::Mul).unwrap();
        assert_eq!(out.to_complex_vec(), vec![c(0.0, 1.0), c(0.0, 2.0), c(30.0, 0.0), c(40.0, 0.0)]);
        let bad = ComplexTensor::<f64>::zeros(&[3]).unwrap();
        assert!(complex_elementwise(&a, &bad, ElementwiseOp::Add).is_err());
    }

    #[test]
    fn magnitude_phase_examples() {
        let z = ComplexTensor::from_complex(&[3], &[c(0.0, 1.0), c(-1.0, 0.0), c(0.0, 0.0)]).unwrap();
        let (m, p) = magnitude_phase(&z);
        assert_eq!(m.data(), &[1.0, 1.0, 0.0]);
        assert_eq!(p.data(), &[PI / 2.0, PI, 0.0]);
    }

    #[test]
    fn channel_mean_examples() {
        let f = ComplexTensor::from_complex(&[2, 1, 1], &[c(1.0, 0.0), c(0.0, 1.0)]).unwrap();
        assert_eq!(channel_mean(&f).unwrap().get(0), c(0.5, 0.5));
        let single = ComplexTensor::from_complex(&[1, 1, 2], &[c(1.5, -2.0), c(0.25, 3.0)]).unwrap();
        assert_eq!(channel_mean(&single).unwrap().to_complex_vec(), single.to_complex_vec());
        let z = c(0.3, -0.7);
        let same = ComplexTensor::from_complex(&[3, 1, 1], &[z, z, z]).unwrap();
        assert!((channel_mean(&same).unwrap().get(0) - z).norm() < 1e-15);
    }

    #[test]
    fn polar_round_trip() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let z = c(rng.normal(0.0, 1.0), rng.normal(0.0, 1.0));
            let (m, p) = polar(z);
            let back = super::super::from_polar(m, p);
            assert!((back - z).norm() <= 1e-14);
        }
    }
}
