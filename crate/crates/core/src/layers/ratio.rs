use num_complex::Complex;

use super::{describe, grad_abs, layout, ComplexConv, ConvConfig, LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Param, Saved, Value};
use crate::ctensor::{ComplexTensor, Real, Rng, MAG_FLOOR};
use crate::{CdsError, Result};

/// Scalar division `|z1|/(|z2|+eps) · exp(i(∠z1 − ∠z2))`.
pub fn divide<T: Real>(z1: Complex<T>, z2: Complex<T>, eps: T) -> Complex<T> {
    crate::ctensor::offset_div(z1, z2, eps)
}

/// `z1 · conj(z2)`.
pub fn conjugate_multiply<T: Real>(z1: Complex<T>, z2: Complex<T>) -> Complex<T> {
    z1 * z2.conj()
}

/// Shared plumbing: a one-channel reference map from a bias-free convolution
/// of the input, paired with every input channel.
struct Reference<T> {
    conv: ComplexConv<T>,
    channels: usize,
}

impl<T: Real> Reference<T> {
    fn new(channels: usize, kernel: usize, padding: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 || kernel == 0 || 2 * padding + 1 != kernel {
            return Err(CdsError::Parameter(format!(
                "reference convolution must preserve the spatial size (kernel {kernel}, padding {padding})"
            )));
        }
        let cfg = ConvConfig::new(channels, 1, kernel).padding(padding);
        let mut conv = ComplexConv::new(LayerConfig::Econv(cfg.clone()), cfg, false, rng)?;
        for p in conv.params_mut() {
            p.name = format!("reference.{}", p.name);
        }
        Ok(Self { conv, channels })
    }

    fn compute(&self, f: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let (_, c, _) = layout(f.shape())?;
        if c != self.channels || f.shape().len() != 4 {
            return Err(CdsError::shape(format!("expected [N,{},H,W], got {:?}", self.channels, f.shape())));
        }
        self.conv.apply(f)
    }

    /// `out[k] = op(f[k], z2[pixel(k)])`.
    fn pair(f: &ComplexTensor<T>, z2: &ComplexTensor<T>, op: impl Fn(Complex<T>, Complex<T>) -> Complex<T>) -> Result<ComplexTensor<T>> {
        let (n, c, inner) = layout(f.shape())?;
        let mut out = Vec::with_capacity(f.len());
        for b in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    out.push(op(f.get((b * c + ch) * inner + p), z2.get(b * inner + p)));
                }
            }
        }
        ComplexTensor::from_complex(f.shape(), &out)
    }

    /// Given per-element `(g_f, g_z2)` contributions, sums the reference part
    /// over channels (on top of `gz2`, if non-empty) and pulls it back
    /// through the reference convolution.
    fn pullback(
        &mut self,
        f: &ComplexTensor<T>,
        z2: &ComplexTensor<T>,
        g: &ComplexTensor<T>,
        mut gz2: Vec<Complex<T>>,
        rule: impl Fn(usize, Complex<T>, Complex<T>, Complex<T>) -> (Complex<T>, Complex<T>),
    ) -> Result<ComplexTensor<T>> {
        let (n, c, inner) = layout(f.shape())?;
        let mut gf = Vec::with_capacity(f.len());
        if gz2.is_empty() {
            gz2 = vec![Complex::new(T::zero(), T::zero()); n * inner];
        }
        for b in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    let k = (b * c + ch) * inner + p;
                    let (a, r) = rule(b, f.get(k), z2.get(b * inner + p), g.get(k));
                    gf.push(a);
                    gz2[b * inner + p] += r;
                }
            }
        }
        let mut gf = ComplexTensor::from_complex(f.shape(), &gf)?;
        let gz2 = ComplexTensor::from_complex(z2.shape(), &gz2)?;
        gf.add_assign(&self.conv.pullback(f, &gz2)?)?;
        Ok(gf)
    }
}

struct RatioSaved<T> {
    f: ComplexTensor<T>,
    z2: ComplexTensor<T>,
    /// Per-sample denominator offsets (division only).
    offsets: Vec<T>,
}

/// Divides every channel by a learned reference channel; complex-scale invariant.
///
/// The denominator offset is `eps·R` with `R` the root-mean-square magnitude
/// of the sample's reference map, so scaling a sample leaves the output
/// exactly unchanged.
pub struct Division<T> {
    config: LayerConfig,
    reference: Reference<T>,
    eps: T,
}

impl<T: Real> Division<T> {
    pub(crate) fn new(config: LayerConfig, channels: usize, kernel: usize, padding: usize, eps: f64, rng: &mut Rng) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(CdsError::Parameter("division eps must be non-negative".into()));
        }
        Ok(Self { config, reference: Reference::new(channels, kernel, padding, rng)?, eps: T::lit(eps) })
    }

    /// `R` per sample, floored.
    fn rms(z2: &ComplexTensor<T>) -> Vec<T> {
        let n = z2.shape()[0];
        let inner = z2.len() / n.max(1);
        let floor = T::lit(MAG_FLOOR);
        (0..n)
            .map(|b| {
                let ss: T = (b * inner..(b + 1) * inner).map(|k| z2.get(k).norm_sqr()).sum();
                (ss / T::lit(inner as f64)).sqrt().max(floor)
            })
            .collect()
    }

    fn run(&self, f: &ComplexTensor<T>) -> Result<(ComplexTensor<T>, RatioSaved<T>)> {
        let z2 = self.reference.compute(f)?;
        let offsets: Vec<T> = Self::rms(&z2).into_iter().map(|r| self.eps * r).collect();
        let (n, c, inner) = layout(f.shape())?;
        let mut out = Vec::with_capacity(f.len());
        for b in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    out.push(divide(f.get((b * c + ch) * inner + p), z2.get(b * inner + p), offsets[b]));
                }
            }
        }
        let y = ComplexTensor::from_complex(f.shape(), &out)?;
        Ok((y, RatioSaved { f: f.clone(), z2, offsets }))
    }

    pub fn apply(&self, f: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        Ok(self.run(f)?.0)
    }
}

impl<T: Real> Layer<T> for Division<T> {
    fn spec(&self) -> LayerSpec {
        describe(&self.config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let (y, s) = self.run(input.as_complex()?)?;
        Ok((Value::Complex(y), saved(s)))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let s: &RatioSaved<T> = restore(s, "division")?;
        let g = grad_out.as_complex()?;
        let floor = T::lit(MAG_FLOOR);
        let (n, c, inner) = layout(s.f.shape())?;
        let h = |rho: T, e: T| T::one() / (rho.max(floor) * (rho + e));

        // Through the offset: ∂y/∂e = −y/(ρ + e), and e = eps·R with
        // ∂R/∂z2_p = z2_p/(P·R).
        let mut gz2 = vec![Complex::new(T::zero(), T::zero()); n * inner];
        if self.eps > T::zero() {
            let rms = Self::rms(&s.z2);
            for b in 0..n {
                if rms[b] <= floor {
                    continue;
                }
                let e = s.offsets[b];
                let mut g_e = T::zero();
                for ch in 0..c {
                    for p in 0..inner {
                        let k = (b * c + ch) * inner + p;
                        let z2 = s.z2.get(b * inner + p);
                        let rho = crate::ctensor::abs(z2);
                        let y = s.f.get(k) * z2.conj() * h(rho, e);
                        g_e -= (g.get(k).conj() * y).re / (rho + e);
                    }
                }
                let scale = g_e * self.eps / (T::lit(inner as f64) * rms[b]);
                for p in 0..inner {
                    gz2[b * inner + p] = s.z2.get(b * inner + p) * scale;
                }
            }
        }
        let rule = |b: usize, z1: Complex<T>, z2: Complex<T>, g: Complex<T>| {
            // y = z1·conj(z2)·h(ρ), h = 1/(max(ρ, floor)·(ρ + e)).
            let e = s.offsets[b];
            let rho = crate::ctensor::abs(z2);
            let hv = h(rho, e);
            let g1 = z2 * hv * g;
            let mut g2 = g.conj() * z1 * hv;
            if rho > floor {
                let dh = -(T::lit(2.0) * rho + e) * hv * hv;
                let g_rho = ((z1 * z2.conj() * dh).conj() * g).re;
                g2 += grad_abs(z2) * g_rho;
            }
            (g1, g2)
        };
        let gf = self.reference.pullback(&s.f, &s.z2, g, gz2, rule)?;
        Ok(Value::Complex(gf))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.reference.conv.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.reference.conv.params_mut()
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        s.downcast_ref::<RatioSaved<f64>>()?.z2.iter().map(|z| z.norm() / 0.1).reduce(f64::min)
    }
}

/// Multiplies every channel by the conjugate of a learned reference channel;
/// invariant to unit phase factors.
pub struct Conjugate<T> {
    config: LayerConfig,
    reference: Reference<T>,
}

impl<T: Real> Conjugate<T> {
    pub(crate) fn new(config: LayerConfig, channels: usize, kernel: usize, padding: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self { config, reference: Reference::new(channels, kernel, padding, rng)? })
    }

    pub fn apply(&self, f: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let z2 = self.reference.compute(f)?;
        Reference::pair(f, &z2, conjugate_multiply)
    }
}

impl<T: Real> Layer<T> for Conjugate<T> {
    fn spec(&self) -> LayerSpec {
        describe(&self.config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let f = input.as_complex()?;
        let z2 = self.reference.compute(f)?;
        let y = Reference::pair(f, &z2, conjugate_multiply)?;
        Ok((Value::Complex(y), saved(RatioSaved { f: f.clone(), z2, offsets: Vec::new() })))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let s: &RatioSaved<T> = restore(s, "conjugate")?;
        let rule = |_: usize, z1: Complex<T>, z2: Complex<T>, g: Complex<T>| (z2 * g, z1 * g.conj());
        let gf = self.reference.pullback(&s.f, &s.z2, grad_out.as_complex()?, Vec::new(), rule)?;
        Ok(Value::Complex(gf))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.reference.conv.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.reference.conv.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctensor::{make_tensor, Fill};
    use num_complex::Complex64;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn scalar_division() {
        let y = divide(Complex64::new(0.0, 2.0), Complex64::new(1.0, 0.0), 1e-7);
        let want = Complex64::from_polar(2.0 / (1.0 + 1e-7), FRAC_PI_2);
        assert!((y - want).norm() < 1e-15);
        let z = Complex64::new(0.3, -1.2);
        let y = divide(z, z, 1e-7);
        assert!((y.norm() - z.norm() / (z.norm() + 1e-7)).abs() < 1e-15);
        assert!(y.im.abs() < 1e-15);
        let s = Complex64::from_polar(3.0, std::f64::consts::FRAC_PI_3);
        let (z1, z2) = (Complex64::new(0.2, 0.9), Complex64::from_polar(1.0, -0.4));
        let a = divide(s * z1, s * z2, 1e-7);
        let b = divide(z1, z2, 1e-7);
        assert!((a - b).norm() / b.norm() <= 1e-6);
    }

    #[test]
    fn scalar_conjugate() {
        let z = Complex64::new(1.0, 1.0);
        assert_eq!(conjugate_multiply(z, z), Complex64::new(2.0, 0.0));
        let (z1, z2) = (Complex64::new(0.5, -0.1), Complex64::new(-1.5, 2.0));
        let two = Complex64::new(2.0, 0.0);
        assert!((conjugate_multiply(two * z1, two * z2) - 4.0 * conjugate_multiply(z1, z2)).norm() < 1e-15);
    }

    #[test]
    fn layer_is_scale_invariant() {
        let mut rng = Rng::new(12);
        let cfg = LayerConfig::Division { channels: 3, kernel: 3, padding: 1, eps: 1e-7 };
        let layer = Division::<f64>::new(cfg, 3, 3, 1, 1e-7, &mut rng).unwrap();
        let f: ComplexTensor<f64> = make_tensor(&[1, 3, 4, 4], Fill::Gaussian { rng: &mut rng, mean: 0.0, std: 1.0 }).unwrap();
        let s = Complex64::from_polar(0.4, 2.5);
        let y = layer.apply(&f).unwrap();
        let ys = layer.apply(&f.scale(s)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        for (a, b) in ys.iter().zip(y.iter()) {
            assert!((a - b).norm() <= 1e-5 * b.norm());
        }
    }

    #[test]
    fn offset_follows_the_reference_rms() {
        let mut rng = Rng::new(4);
        let cfg = LayerConfig::Division { channels: 2, kernel: 1, padding: 0, eps: 0.5 };
        let mut layer = Division::<f64>::new(cfg, 2, 1, 0, 0.5, &mut rng).unwrap();
        // Reference = first channel only.
        layer.reference.conv.params_mut()[0].value =
            ComplexTensor::from_complex(&[1, 2, 1, 1], &[Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
        let z2 = [Complex64::new(3.0, 0.0), Complex64::new(0.0, 1.0)];
        let z1 = [Complex64::new(1.0, 1.0), Complex64::new(-2.0, 0.5)];
        let f = ComplexTensor::from_complex(&[1, 2, 1, 2], &[z2[0], z2[1], z1[0], z1[1]]).unwrap();
        let y = layer.apply(&f).unwrap();
        // R = sqrt((9 + 1)/2) = √5, offset 0.5·√5.
        let e = 0.5 * 5f64.sqrt();
        let want = |a: Complex64, b: Complex64| Complex64::from_polar(a.norm() / (b.norm() + e), a.arg() - b.arg());
        for (k, a) in [z2[0], z2[1], z1[0], z1[1]].into_iter().enumerate() {
            assert!((y.get(k) - want(a, z2[k % 2])).norm() < 1e-14);
        }
    }

    #[test]
    fn reference_must_preserve_shape() {
        let mut rng = Rng::new(1);
        let cfg = LayerConfig::Division { channels: 3, kernel: 3, padding: 0, eps: 1e-7 };
        assert!(Division::<f64>::new(cfg, 3, 3, 0, 1e-7, &mut rng).is_err());
    }
}
