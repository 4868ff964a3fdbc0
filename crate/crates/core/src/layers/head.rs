use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::{describe, grad_arg, EqBatchNorm, LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Param, Saved, Value};
use crate::ctensor::{ComplexTensor, Real, Rng, Tensor, MAG_FLOOR};
use crate::{CdsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Manifold,
    Euclidean,
}

/// Signed log-magnitude gap and principal phase gap between two scalars.
#[inline]
fn gaps<T: Real>(z1: Complex<T>, z2: Complex<T>) -> (T, T) {
    let floor = T::lit(MAG_FLOOR);
    let a = z1.norm().max(floor).ln() - z2.norm().max(floor).ln();
    let (_, phi) = crate::ctensor::polar(z1 * z2.conj());
    (a, phi)
}

/// `sqrt((ln|z1| − ln|z2|)² + arcdist(∠z1, ∠z2)²)` with magnitudes floored
/// at 1e-12 and `arcdist` the geodesic distance on the circle.
pub fn manifold_distance<T: Real>(z1: Complex<T>, z2: Complex<T>) -> T {
    let (a, phi) = gaps(z1, z2);
    (a * a + phi * phi).sqrt()
}

/// Pullback of `a` and `φ` from [`gaps`] onto `z1` and `z2` (real-pair form).
#[inline]
pub(crate) fn gaps_pullback<T: Real>(z1: Complex<T>, z2: Complex<T>, g_a: T, g_phi: T) -> (Complex<T>, Complex<T>) {
    let floor = T::lit(MAG_FLOOR);
    let dlog = |z: Complex<T>| if z.norm() > floor { z / z.norm_sqr() } else { Complex::new(T::zero(), T::zero()) };
    let g1 = dlog(z1) * g_a + grad_arg(z1) * g_phi;
    let g2 = -(dlog(z2) * g_a + grad_arg(z2) * g_phi);
    (g1, g2)
}

/// Logits `L_i = −α·D(f, q_i)` against one learned complex prototype per
/// class. The invariant variant compares against `q_i = p_i·m` with `m` the
/// mean of `f` over its entries.
pub struct PrototypeHead<T> {
    config: LayerConfig,
    embed_dim: usize,
    num_classes: usize,
    metric: Metric,
    invariant: bool,
    prototypes: Param<T>,
    log_alpha: Param<T>,
    bn: Option<EqBatchNorm<T>>,
}

struct HeadSaved<T> {
    in_shape: Vec<usize>,
    f: ComplexTensor<T>,
    m: Vec<Complex<T>>,
    dist: Vec<T>,
    bn: Option<Saved>,
}

impl<T: Real> PrototypeHead<T> {
    pub(crate) fn new(
        config: LayerConfig,
        embed_dim: usize,
        num_classes: usize,
        metric: Metric,
        invariant: bool,
        batchnorm: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if embed_dim == 0 || num_classes == 0 {
            return Err(CdsError::Parameter("prototype head needs embed_dim > 0 and num_classes > 0".into()));
        }
        let protos: Vec<Complex<T>> = (0..num_classes * embed_dim)
            .map(|_| {
                let (a, b) = (rng.normal(0.0, 1.0), rng.normal(0.0, 1.0));
                let r = a.hypot(b).max(1e-300);
                Complex::new(T::lit(a / r), T::lit(b / r))
            })
            .collect();
        let prototypes = Param::complex("prototypes", ComplexTensor::from_complex(&[num_classes, embed_dim], &protos)?);
        let log_alpha = Param::real("log_alpha", &[1], vec![T::zero()])?;
        let bn = if batchnorm {
            let mut bn = EqBatchNorm::new(embed_dim, 0.1, 1e-5)?;
            for p in bn.params_mut() {
                p.name = format!("bn.{}", p.name);
            }
            Some(bn)
        } else {
            None
        };
        Ok(Self { config, embed_dim, num_classes, metric, invariant, prototypes, log_alpha, bn })
    }

    pub fn prototypes_mut(&mut self) -> &mut ComplexTensor<T> {
        &mut self.prototypes.value
    }

    pub fn set_log_alpha(&mut self, v: T) {
        self.log_alpha.value.planes_mut().0[0] = v;
    }

    fn alpha(&self) -> T {
        self.log_alpha.value.re()[0].exp()
    }

    fn flatten(&self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let n = *x.shape().first().ok_or_else(|| CdsError::shape("prototype head expects [N, D]"))?;
        if x.len() != n * self.embed_dim {
            return Err(CdsError::shape(format!("prototype head expects {} features, got {:?}", self.embed_dim, x.shape())));
        }
        x.clone().reshape(&[n, self.embed_dim])
    }

    #[inline]
    fn target(&self, i: usize, d: usize, m: Complex<T>) -> Complex<T> {
        let p = self.prototypes.value.get(i * self.embed_dim + d);
        if self.invariant {
            p * m
        } else {
            p
        }
    }

    fn run(&mut self, x: &ComplexTensor<T>, mode: Mode) -> Result<(Tensor<T>, HeadSaved<T>)> {
        let f = self.flatten(x)?;
        let (f, bn) = match &mut self.bn {
            Some(bn) => {
                let (y, s) = bn.forward_complex(&f, mode)?;
                (y, Some(s))
            }
            None => (f, None),
        };
        let (n, dd, k) = (f.shape()[0], self.embed_dim, self.num_classes);
        let inv_d = T::one() / T::lit(dd as f64);
        let m: Vec<Complex<T>> = (0..n)
            .map(|b| (0..dd).map(|d| f.get(b * dd + d)).fold(Complex::new(T::zero(), T::zero()), |a, z| a + z) * inv_d)
            .collect();
        let alpha = self.alpha();
        let mut dist = Vec::with_capacity(n * k);
        for b in 0..n {
            for i in 0..k {
                let mut s = T::zero();
                for d in 0..dd {
                    let (z, q) = (f.get(b * dd + d), self.target(i, d, m[b]));
                    s += match self.metric {
                        Metric::Manifold => {
                            let (a, phi) = gaps(z, q);
                            a * a + phi * phi
                        }
                        Metric::Euclidean => (z - q).norm_sqr(),
                    };
                }
                dist.push(s.sqrt());
            }
        }
        let logits = Tensor::from_vec(&[n, k], dist.iter().map(|&d| -alpha * d).collect())?;
        Ok((logits, HeadSaved { in_shape: x.shape().to_vec(), f, m, dist, bn }))
    }

    pub fn logits(&mut self, x: &ComplexTensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.run(x, mode)?.0)
    }
}

impl<T: Real> Layer<T> for PrototypeHead<T> {
    fn spec(&self) -> LayerSpec {
        describe(&self.config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, mode: Mode) -> Result<(Value<T>, Saved)> {
        let (logits, s) = self.run(input.as_complex()?, mode)?;
        Ok((Value::Real(logits), saved(s)))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let s: &HeadSaved<T> = restore(s, "prototype_head")?;
        let g = grad_out.as_real()?.data();
        let (n, dd, k) = (s.f.shape()[0], self.embed_dim, self.num_classes);
        let alpha = self.alpha();
        let zero = Complex::new(T::zero(), T::zero());
        let mut gf = vec![zero; n * dd];
        let mut gp = vec![zero; k * dd];
        let mut g_log_alpha = T::zero();
        for b in 0..n {
            let mut gm = zero;
            for i in 0..k {
                let (gl, dist) = (g[b * k + i], s.dist[b * k + i]);
                g_log_alpha += gl * (-alpha * dist);
                if dist <= T::zero() {
                    continue;
                }
                // L = −α·sqrt(S): ∂L/∂S = −α/(2·sqrt(S)).
                let g_s = -alpha * gl / (T::lit(2.0) * dist);
                for d in 0..dd {
                    let (z, q) = (s.f.get(b * dd + d), self.target(i, d, s.m[b]));
                    let (g_z, g_q) = match self.metric {
                        Metric::Manifold => {
                            let (a, phi) = gaps(z, q);
                            let two = T::lit(2.0);
                            gaps_pullback(z, q, two * a * g_s, two * phi * g_s)
                        }
                        Metric::Euclidean => {
                            let gd = (z - q) * (T::lit(2.0) * g_s);
                            (gd, -gd)
                        }
                    };
                    gf[b * dd + d] += g_z;
                    if self.invariant {
                        let p = self.prototypes.value.get(i * dd + d);
                        gp[i * dd + d] += s.m[b].conj() * g_q;
                        gm += p.conj() * g_q;
                    } else {
                        gp[i * dd + d] += g_q;
                    }
                }
            }
            if self.invariant {
                let share = gm / T::lit(dd as f64);
                for d in 0..dd {
                    gf[b * dd + d] += share;
                }
            }
        }
        self.prototypes.accumulate(&ComplexTensor::from_complex(&[k, dd], &gp)?)?;
        self.log_alpha.accumulate_real(&[g_log_alpha]);
        let mut gf = ComplexTensor::from_complex(&[n, dd], &gf)?;
        if let (Some(bn), Some(bs)) = (&mut self.bn, &s.bn) {
            gf = bn.backward_complex(bs, &gf)?;
        }
        Ok(Value::Complex(gf.reshape(&s.in_shape)?))
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.prototypes, &self.log_alpha];
        if let Some(bn) = &self.bn {
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.prototypes, &mut self.log_alpha];
        if let Some(bn) = &mut self.bn {
            v.extend(bn.params_mut());
        }
        v
    }

    fn branch_signature(&self, s: &Saved) -> Vec<u32> {
        let Some(s) = s.downcast_ref::<HeadSaved<f64>>() else { return Vec::new() };
        if self.metric != Metric::Manifold {
            return Vec::new();
        }
        let (n, dd, k) = (s.f.shape()[0], self.embed_dim, self.num_classes);
        let half = std::f64::consts::FRAC_PI_2;
        let mut sig = Vec::with_capacity(n * k * dd);
        for b in 0..n {
            for i in 0..k {
                for d in 0..dd {
                    let q = self.target_f64(i, d, s.m[b]);
                    let (_, phi) = gaps(s.f.get(b * dd + d), q);
                    sig.push(if phi > half { 1 } else if phi < -half { 2 } else { 0 });
                }
            }
        }
        sig
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        let s = s.downcast_ref::<HeadSaved<f64>>()?;
        let (n, dd, k) = (s.f.shape()[0], self.embed_dim, self.num_classes);
        let mut margin = f64::INFINITY;
        for b in 0..n {
            if self.invariant {
                margin = margin.min(s.m[b].norm() / 0.1);
            }
            for d in 0..dd {
                let z = s.f.get(b * dd + d);
                margin = margin.min(z.norm() / 0.1);
                if self.metric == Metric::Manifold {
                    for i in 0..k {
                        let (_, phi) = gaps(z, self.target_f64(i, d, s.m[b]));
                        margin = margin.min((std::f64::consts::PI - phi.abs()) / 0.05);
                    }
                }
            }
        }
        if let (Some(bn), Some(bs)) = (&self.bn, &s.bn) {
            if let Some(m) = Layer::<T>::smooth_margin(bn, bs) {
                margin = margin.min(m);
            }
        }
        Some(margin)
    }
}

impl<T: Real> PrototypeHead<T> {
    fn target_f64(&self, i: usize, d: usize, m: Complex<f64>) -> Complex<f64> {
        let p = self.prototypes.value.get(i * self.embed_dim + d);
        let p = Complex::new(p.re.as_f64(), p.im.as_f64());
        if self.invariant {
            p * m
        } else {
            p
        }
    }
}
