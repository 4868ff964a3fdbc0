//! Complex tensor storage and the numeric kernels everything else is built on.
//!
//! Complex tensors are stored as two planar, row-major real buffers. All
//! arithmetic stays in the element type `T` (`f32` or `f64`); there is no
//! implicit promotion between precisions.

mod conv;
pub mod io;
mod rng;
mod tensor;

pub use conv::{
    conv2d, conv2d_backward, conv2d_direct, real_conv2d, real_conv2d_backward, Conv2dParams,
    ConvMethod,
};
pub use rng::Rng;
pub(crate) use tensor::offset_div;
pub use tensor::{
    channel_mean, complex_elementwise, magnitude_phase, make_tensor, ComplexTensor, ElementwiseOp,
    Fill, Tensor,
};

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::fmt::{Debug, Display};

/// A complex scalar; the polar angle is taken on the principal branch (−π, π].
pub type ComplexScalar<T> = Complex<T>;

/// Floor applied to magnitudes before division, normalization or `ln`.
pub const MAG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp64,
}

impl Precision {
    pub fn byte_width(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp64 => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::CdsError;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "fp32" | "f32" => Ok(Precision::Fp32),
            "fp64" | "f64" => Ok(Precision::Fp64),
            other => Err(crate::CdsError::Config(format!("unknown precision '{other}'"))),
        }
    }
}

/// Floating-point element type of a tensor.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    const PRECISION: Precision;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Row-major `c = alpha * a·b + beta * c` with `a: m×k`, `b: k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Row-major `c = alpha * aᵀ·b + beta * c` with `a: k×m`, `b: k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Row-major `c = alpha * a·bᵀ + beta * c` with `a: m×k`, `b: n×k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Real for $t {
            const PRECISION: Precision = $prec;

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: slice lengths checked above; strides describe dense row-major storage.
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: `a` is k×m row-major, read transposed via swapped strides.
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), 1, m as isize,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: `b` is n×k row-major, read transposed via swapped strides.
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), 1, k as isize,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, Precision::Fp32, matrixmultiply::sgemm);
impl_real!(f64, Precision::Fp64, matrixmultiply::dgemm);

/// Modulus without `hypot`'s overflow guard.
#[inline]
pub fn abs<T: Real>(z: Complex<T>) -> T {
    (z.re * z.re + z.im * z.im).sqrt()
}

/// Polar decomposition with the zero-phase convention at the origin.
#[inline]
pub fn polar<T: Real>(z: Complex<T>) -> (T, T) {
    let mag = abs(z);
    let phase = if z.re == T::zero() && z.im == T::zero() {
        T::zero()
    } else {
        z.im.atan2(z.re)
    };
    (mag, phase)
}

/// Scalar from magnitude and phase.
#[inline]
pub fn from_polar<T: Real>(mag: T, phase: T) -> Complex<T> {
    if phase == T::zero() {
        return Complex::new(mag, T::zero());
    }
    let (s, c) = phase.sin_cos();
    Complex::new(mag * c, mag * s)
}
