use num_complex::Complex;

use super::{cz, describe, grad_abs, grad_arg, layout, pixel_mean, LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Param, Saved, Value};
use crate::ctensor::{ComplexTensor, Real};
use crate::{CdsError, Result};

/// Pass-through layer.
pub struct Identity;

impl<T: Real> Layer<T> for Identity {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::Identity)
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        Ok((input.clone(), saved(())))
    }

    fn backward(&mut self, _s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        Ok(grad_out.clone())
    }
}

/// ReLU applied separately to the real and imaginary planes.
pub struct CRelu;

impl CRelu {
    pub fn apply<T: Real>(z: &ComplexTensor<T>) -> ComplexTensor<T> {
        z.map(|v| cz(v.re.max(T::zero()), v.im.max(T::zero())))
    }
}

impl<T: Real> Layer<T> for CRelu {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::Crelu)
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let z = input.as_complex()?;
        Ok((Value::Complex(Self::apply(z)), saved(z.clone())))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let z: &ComplexTensor<T> = restore(s, "crelu")?;
        let g = grad_out.as_complex()?;
        let keep = |x: T, d: T| if x > T::zero() { d } else { T::zero() };
        let re = z.re().iter().zip(g.re()).map(|(&x, &d)| keep(x, d)).collect();
        let im = z.im().iter().zip(g.im()).map(|(&x, &d)| keep(x, d)).collect();
        Ok(Value::Complex(ComplexTensor::from_planes(z.shape(), re, im)?))
    }

    fn branch_signature(&self, s: &Saved) -> Vec<u32> {
        let z: &ComplexTensor<f64> = match s.downcast_ref() {
            Some(z) => z,
            None => return Vec::new(),
        };
        z.iter().map(|v| (v.re > 0.0) as u32 | ((v.im > 0.0) as u32) << 1).collect()
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        let z: &ComplexTensor<f64> = s.downcast_ref()?;
        z.iter().map(|v| v.re.abs().min(v.im.abs()) / 0.05).reduce(f64::min)
    }
}

/// Generalized tangent ReLU:
/// `y = max(r, |c·x|) · exp(i·ω·max(∠(c·x), 0))` with per-channel `c`, `ω`.
pub struct GtRelu<T> {
    r: T,
    c: Param<T>,
    omega: Param<T>,
}

struct GtReluSaved<T> {
    x: ComplexTensor<T>,
    u: Vec<Complex<T>>,
    /// `(|u|, max(∠u, 0))`.
    polar: Vec<(T, T)>,
    y: Vec<Complex<T>>,
}

impl<T: Real> GtRelu<T> {
    pub fn new(channels: usize, r: f64) -> Result<Self> {
        if channels == 0 || !(r >= 0.0) {
            return Err(CdsError::Parameter(format!("gtrelu needs channels > 0 and r >= 0, got {channels}, {r}")));
        }
        let c = ComplexTensor::from_planes(&[channels], vec![T::one(); channels], vec![T::zero(); channels])?;
        Ok(Self {
            r: T::lit(r),
            c: Param::complex("c", c),
            omega: Param::real("omega", &[channels], vec![T::one(); channels])?,
        })
    }

    pub fn set_scale(&mut self, c: &[Complex<T>], omega: &[T]) -> Result<()> {
        let n = self.c.value.len();
        if c.len() != n || omega.len() != n {
            return Err(CdsError::shape("gtrelu parameters must have one entry per channel"));
        }
        self.c.value = ComplexTensor::from_complex(&[n], c)?;
        self.omega.value = ComplexTensor::from_planes(&[n], omega.to_vec(), vec![T::zero(); n])?;
        Ok(())
    }

    fn channels(&self, x: &ComplexTensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, inner) = layout(x.shape())?;
        if c != self.c.value.len() {
            return Err(CdsError::shape(format!("gtrelu has {} channels, input has {c}", self.c.value.len())));
        }
        Ok((n, c, inner))
    }

    fn eval(&self, x: &ComplexTensor<T>) -> Result<GtReluSaved<T>> {
        let (n, c, inner) = self.channels(x)?;
        let mut u = Vec::with_capacity(x.len());
        let mut polar = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for i in 0..n * c {
            let ch = i % c;
            let (cc, w) = (self.c.value.get(ch), self.omega.value.re()[ch]);
            for k in i * inner..(i + 1) * inner {
                let uk = cc * x.get(k);
                let rho = crate::ctensor::abs(uk);
                // Only the positive part of the phase is used.
                let theta = if uk.im < T::zero() { T::zero() } else { crate::ctensor::polar(uk).1 };
                let mag = rho.max(self.r);
                let ph = w * theta;
                u.push(uk);
                polar.push((rho, theta));
                y.push(crate::ctensor::from_polar(mag, ph));
            }
        }
        Ok(GtReluSaved { x: x.clone(), u, polar, y })
    }

    pub fn apply(&self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let s = self.eval(x)?;
        ComplexTensor::from_complex(x.shape(), &s.y)
    }
}

impl<T: Real> Layer<T> for GtRelu<T> {
    fn spec(&self) -> LayerSpec {
        let config = LayerConfig::Gtrelu { channels: self.c.value.len(), r: self.r.as_f64() };
        describe(&config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let s = self.eval(input.as_complex()?)?;
        let y = ComplexTensor::from_complex(s.x.shape(), &s.y)?;
        Ok((Value::Complex(y), saved(s)))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let s: &GtReluSaved<T> = restore(s, "gtrelu")?;
        let g = grad_out.as_complex()?;
        let (n, c, inner) = self.channels(&s.x)?;
        let mut gx = vec![Complex::new(T::zero(), T::zero()); s.x.len()];
        let mut gc = vec![Complex::new(T::zero(), T::zero()); c];
        let mut gw = vec![T::zero(); c];
        for i in 0..n * c {
            let ch = i % c;
            let (cc, w) = (self.c.value.get(ch), self.omega.value.re()[ch]);
            for k in i * inner..(i + 1) * inner {
                let (u, y, gy) = (s.u[k], s.y[k], g.get(k));
                let (rho, theta) = s.polar[k];
                let mag = rho.max(self.r);
                let dir = if mag > T::zero() { y / mag } else { cz(T::one(), T::zero()) };
                // y = mag·e^{iφ}: ∂L/∂mag = Re(conj(e^{iφ})·g), ∂L/∂φ = Im(conj(y)·g).
                let g_mag = (dir.conj() * gy).re;
                let g_ph = (y.conj() * gy).im;
                let mut gu = cz(T::zero(), T::zero());
                if rho > self.r {
                    gu += grad_abs(u) * g_mag;
                }
                if theta > T::zero() {
                    gw[ch] += g_ph * theta;
                    gu += grad_arg(u) * (g_ph * w);
                }
                gx[k] = cc.conj() * gu;
                gc[ch] += s.x.get(k).conj() * gu;
            }
        }
        self.c.accumulate(&ComplexTensor::from_complex(&[c], &gc)?)?;
        self.omega.accumulate_real(&gw);
        Ok(Value::Complex(ComplexTensor::from_complex(s.x.shape(), &gx)?))
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.c, &self.omega]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.c, &mut self.omega]
    }

    fn branch_signature(&self, s: &Saved) -> Vec<u32> {
        let Some(s) = s.downcast_ref::<GtReluSaved<f64>>() else { return Vec::new() };
        let r = self.r.as_f64();
        s.polar
            .iter()
            .map(|&(rho, theta)| {
                (rho > r) as u32 | ((theta > 0.0) as u32) << 1
            })
            .collect()
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        let s = s.downcast_ref::<GtReluSaved<f64>>()?;
        let r = self.r.as_f64();
        s.u.iter()
            .map(|u| {
                let (rho, theta) = crate::ctensor::polar(*u);
                let mag = if r > 0.0 { (rho - r).abs() / 0.05 } else { rho / 0.1 };
                let phase = theta.abs().min(std::f64::consts::PI - theta.abs()) / 0.05;
                mag.min(phase)
            })
            .reduce(f64::min)
    }
}

/// Equivariant wrapper `m̂ ⊙ N(f ⊙ m̂*)` with `m̂` the normalized per-pixel
/// channel mean. For `[N, D]` vectors the mean runs over `D`.
pub struct EquivariantWrap<T> {
    config: LayerConfig,
    inner: Box<dyn Layer<T>>,
}

struct WrapSaved<T> {
    f: ComplexTensor<T>,
    n_out: ComplexTensor<T>,
    unit: Vec<Complex<T>>,
    mag: Vec<T>,
    m: Vec<Complex<T>>,
    inner: Saved,
}

impl<T: Real> EquivariantWrap<T> {
    pub fn new(config: LayerConfig, inner: Box<dyn Layer<T>>) -> Self {
        Self { config, inner }
    }

    /// Applies `h(pixel, value)` to every element, pairing it with its pixel's
    /// entry in a per-pixel buffer.
    fn per_pixel(
        f: &ComplexTensor<T>,
        buf: &[Complex<T>],
        h: impl Fn(Complex<T>, Complex<T>) -> Complex<T>,
    ) -> Result<ComplexTensor<T>> {
        let (n, c, inner) = layout(f.shape())?;
        let mut out = Vec::with_capacity(f.len());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for p in 0..inner {
                    out.push(h(buf[b * inner + p], f.get(base + p)));
                }
            }
        }
        ComplexTensor::from_complex(f.shape(), &out)
    }
}

impl<T: Real> Layer<T> for EquivariantWrap<T> {
    fn spec(&self) -> LayerSpec {
        let mut spec = self.inner.spec();
        spec.config = self.config.clone();
        spec
    }

    fn forward(&mut self, input: &Value<T>, mode: Mode) -> Result<(Value<T>, Saved)> {
        let f = input.as_complex()?;
        let (m, unit, mag) = pixel_mean(f)?;
        let v = Self::per_pixel(f, &unit, |u, z| z * u.conj())?;
        let (n_out, inner) = self.inner.forward(&Value::Complex(v), mode)?;
        let n_out = n_out.into_complex()?;
        if n_out.shape() != f.shape() {
            return Err(CdsError::shape("equivariant wrapper needs a shape-preserving inner layer"));
        }
        let y = Self::per_pixel(&n_out, &unit, |u, z| z * u)?;
        Ok((Value::Complex(y), saved(WrapSaved { f: f.clone(), n_out, unit, mag, m, inner })))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let s: &WrapSaved<T> = restore(s, "eq_wrap")?;
        let gy = grad_out.as_complex()?;
        let (n, c, inner) = layout(s.f.shape())?;
        let g_n = Self::per_pixel(gy, &s.unit, |u, g| u.conj() * g)?;
        let g_v = self.inner.backward(&s.inner, &Value::Complex(g_n))?.into_complex()?;

        // Cotangent of the unit mean direction from both of its uses.
        let mut g_unit = vec![Complex::new(T::zero(), T::zero()); n * inner];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for p in 0..inner {
                    let k = base + p;
                    g_unit[b * inner + p] += s.n_out.get(k).conj() * gy.get(k) + s.f.get(k) * g_v.get(k).conj();
                }
            }
        }
        let floor = T::lit(crate::ctensor::MAG_FLOOR);
        let inv_c = T::one() / T::lit(c as f64);
        let g_mean: Vec<Complex<T>> = (0..n * inner)
            .map(|i| {
                let (u, gu, a) = (s.unit[i], g_unit[i], s.mag[i]);
                let g_m = if s.m[i].norm() > floor { (gu - u * (u.conj() * gu).re) / a } else { gu / a };
                g_m * inv_c
            })
            .collect();
        let mut gf = Self::per_pixel(&g_v, &s.unit, |u, g| u * g)?;
        let add = Self::per_pixel(&gf, &g_mean, |gm, _| gm)?;
        gf.add_assign(&add)?;
        Ok(Value::Complex(gf))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.inner.params_mut()
    }

    fn branch_signature(&self, s: &Saved) -> Vec<u32> {
        match s.downcast_ref::<WrapSaved<f64>>() {
            Some(w) => self.inner.branch_signature(&w.inner),
            None => Vec::new(),
        }
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        let w = s.downcast_ref::<WrapSaved<f64>>()?;
        let mean = w.mag.iter().map(|a| a / 0.1).reduce(f64::min);
        match (mean, self.inner.smooth_margin(&w.inner)) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}
