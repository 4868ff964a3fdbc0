use num_complex::Complex;

use super::head::{gaps_pullback, manifold_distance};
use super::{describe, layout, pixel_mean, ConvConfig, LayerConfig, LayerSpec};
use crate::autodiff::{restore, saved, Layer, Mode, Param, Saved, Value};
use crate::ctensor::{polar, ComplexTensor, Real, Rng, Tensor, MAG_FLOOR};
use crate::{CdsError, Result};

/// Geodesic distance between two angles on the unit circle.
pub fn arcdist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Weighted squared manifold distance from every `z_i` to `r·e^{iθ}` with
/// `r` given as a log-magnitude.
pub fn wfm_objective(zs: &[Complex<f64>], ws: &[f64], log_mag: f64, theta: f64) -> f64 {
    zs.iter()
        .zip(ws)
        .map(|(z, w)| {
            let (m, p) = polar(*z);
            let a = m.max(MAG_FLOOR).ln() - log_mag;
            let b = arcdist(p, theta);
            w * (a * a + b * b)
        })
        .sum()
}

/// Minimizes a 1-D function on `[lo, hi]` by dense grid search followed by
/// golden-section refinement around the best grid point.
pub fn grid_golden_minimize(f: impl Fn(f64) -> f64, lo: f64, hi: f64, grid: usize) -> f64 {
    let step = (hi - lo) / grid as f64;
    let (mut best, mut best_v) = (lo, f64::INFINITY);
    for k in 0..=grid {
        let x = lo + step * k as f64;
        let v = f(x);
        if v < best_v {
            best = x;
            best_v = v;
        }
    }
    let (mut a, mut b) = (best - step, best + step);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-13 * (1.0 + best.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    if f(x) <= best_v {
        x
    } else {
        best
    }
}

/// Weighted Fréchet mean of complex scalars under the manifold distance.
///
/// The magnitude uses the closed form `exp(Σ w_i ln|z_i|)`; the phase has no
/// closed form and is found numerically (10⁴-point grid plus golden-section
/// refinement).
pub fn wfm_layer(zs: &[Complex<f64>], ws: &[f64]) -> Result<Complex<f64>> {
    if zs.is_empty() || zs.len() != ws.len() {
        return Err(CdsError::Parameter("wFM needs one weight per point and at least one point".into()));
    }
    if ws.iter().any(|&w| !(w > 0.0 && w <= 1.0)) || (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CdsError::Parameter("wFM weights must lie in (0, 1] and sum to 1".into()));
    }
    let log_mag: f64 = zs.iter().zip(ws).map(|(z, w)| w * z.norm().max(MAG_FLOOR).ln()).sum();
    let pi = std::f64::consts::PI;
    let theta = grid_golden_minimize(|t| wfm_objective(zs, ws, log_mag, t), -pi, pi, 10_000);
    Ok(Complex::from_polar(log_mag.exp(), theta))
}

/// Convolution-shaped weighted mean: each output is `exp(Σ w ln|z|)` times the
/// direction of the weighted circular mean `Σ w z/|z|`, with positive weights
/// `softmax(θ)` per output channel and clamp-to-edge padding.
pub struct WfmConv<T> {
    config: LayerConfig,
    conv: ConvConfig,
    logits: Param<T>,
}

struct WfmSaved<T> {
    z: ComplexTensor<T>,
    w: Vec<T>,
    a: Vec<T>,
    u: Vec<Complex<T>>,
    out_shape: Vec<usize>,
}

impl<T: Real> WfmConv<T> {
    pub(crate) fn new(config: LayerConfig, conv: ConvConfig, rng: &mut Rng) -> Result<Self> {
        if conv.groups != 1 {
            return Err(CdsError::Parameter("wFM convolution does not support groups".into()));
        }
        let shape = conv.weight_shape();
        let n: usize = shape.iter().product();
        let logits = Param::real("logits", &shape, (0..n).map(|_| T::lit(rng.normal(0.0, 0.5))).collect())?;
        Ok(Self { config, conv, logits })
    }

    fn taps(&self) -> usize {
        self.conv.in_channels * self.conv.kernel * self.conv.kernel
    }

    fn softmax(&self) -> Vec<T> {
        let taps = self.taps();
        let mut out = Vec::with_capacity(self.logits.value.len());
        for row in self.logits.value.re().chunks(taps) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let s: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        out
    }

    /// Flat input index of tap `(ci, ky, kx)` for output pixel `(oy, ox)`.
    fn tap_indices(&self, shape: &[usize], b: usize, oy: usize, ox: usize, out: &mut Vec<usize>) {
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        out.clear();
        for ci in 0..c {
            for ky in 0..self.conv.kernel {
                for kx in 0..self.conv.kernel {
                    let iy = clamp((oy * self.conv.stride + ky) as isize - self.conv.padding as isize, h);
                    let ix = clamp((ox * self.conv.stride + kx) as isize - self.conv.padding as isize, w);
                    out.push(((b * c + ci) * h + iy) * w + ix);
                }
            }
        }
    }

    fn run(&self, z: &ComplexTensor<T>) -> Result<(ComplexTensor<T>, WfmSaved<T>)> {
        let &[n, c, h, w] = z.shape() else {
            return Err(CdsError::shape(format!("wFM convolution expects [N,C,H,W], got {:?}", z.shape())));
        };
        if c != self.conv.in_channels {
            return Err(CdsError::shape(format!("wFM convolution expects {} channels, got {c}", self.conv.in_channels)));
        }
        let (k, s, p) = (self.conv.kernel, self.conv.stride, self.conv.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(CdsError::shape("kernel larger than padded input"));
        }
        let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let floor = T::lit(MAG_FLOOR);
        let logs: Vec<T> = z.iter().map(|v| v.norm().max(floor).ln()).collect();
        let units: Vec<Complex<T>> = z
            .iter()
            .map(|v| if v.norm() > floor { v / v.norm() } else { Complex::new(T::one(), T::zero()) })
            .collect();
        let wts = self.softmax();
        let taps = self.taps();
        let co = self.conv.out_channels;
        let mut idx = Vec::with_capacity(taps);
        let mut a = Vec::with_capacity(n * co * ho * wo);
        let mut u = Vec::with_capacity(n * co * ho * wo);
        let mut out = Vec::with_capacity(n * co * ho * wo);
        for b in 0..n {
            for o in 0..co {
                let row = &wts[o * taps..(o + 1) * taps];
                for oy in 0..ho {
                    for ox in 0..wo {
                        self.tap_indices(z.shape(), b, oy, ox, &mut idx);
                        let mut acc_a = T::zero();
                        let mut acc_u = Complex::new(T::zero(), T::zero());
                        for (&j, &wj) in idx.iter().zip(row) {
                            acc_a += wj * logs[j];
                            acc_u += units[j] * wj;
                        }
                        let dir = if acc_u.norm() > floor { acc_u / acc_u.norm() } else { acc_u / floor };
                        out.push(dir * acc_a.exp());
                        a.push(acc_a);
                        u.push(acc_u);
                    }
                }
            }
        }
        let out_shape = vec![n, co, ho, wo];
        let y = ComplexTensor::from_complex(&out_shape, &out)?;
        Ok((y, WfmSaved { z: z.clone(), w: wts, a, u, out_shape }))
    }
}

impl<T: Real> Layer<T> for WfmConv<T> {
    fn spec(&self) -> LayerSpec {
        describe(&self.config, &self.params())
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let (y, s) = self.run(input.as_complex()?)?;
        Ok((Value::Complex(y), saved(s)))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let s: &WfmSaved<T> = restore(s, "wfm_conv")?;
        let g = grad_out.as_complex()?;
        let floor = T::lit(MAG_FLOOR);
        let (n, co, ho, wo) = (s.out_shape[0], s.out_shape[1], s.out_shape[2], s.out_shape[3]);
        let taps = self.taps();
        let zero = Complex::new(T::zero(), T::zero());
        let mut gz = vec![zero; s.z.len()];
        let mut g_w = vec![T::zero(); s.w.len()];
        let mut idx = Vec::with_capacity(taps);
        let mut k = 0;
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let (acc_a, acc_u, gy) = (s.a[k], s.u[k], g.get(k));
                        k += 1;
                        let un = acc_u.norm();
                        let v = if un > floor { acc_u / un } else { acc_u / floor };
                        let mag = acc_a.exp();
                        let g_mag = (v.conj() * gy).re;
                        let g_v = gy * mag;
                        let g_u = if un > floor { (g_v - v * (v.conj() * g_v).re) / un } else { g_v / floor };
                        let g_a = mag * g_mag;
                        self.tap_indices(&s.z.shape().to_vec(), b, oy, ox, &mut idx);
                        for (t, &j) in idx.iter().enumerate() {
                            let wj = s.w[o * taps + t];
                            let zj = s.z.get(j);
                            let r = zj.norm();
                            let (lj, uj) = if r > floor { (r.ln(), zj / r) } else { (floor.ln(), Complex::new(T::one(), T::zero())) };
                            g_w[o * taps + t] += g_a * lj + (uj.conj() * g_u).re;
                            if r > floor {
                                let gu_j = g_u * wj;
                                gz[j] += zj / (r * r) * (wj * g_a) + (gu_j - uj * (uj.conj() * gu_j).re) / r;
                            }
                        }
                    }
                }
            }
        }
        // Softmax pullback per output channel.
        let mut g_logits = vec![T::zero(); s.w.len()];
        for o in 0..co {
            let r = o * taps..(o + 1) * taps;
            let dot: T = s.w[r.clone()].iter().zip(&g_w[r.clone()]).map(|(&w, &g)| w * g).sum();
            for t in r {
                g_logits[t] = s.w[t] * (g_w[t] - dot);
            }
        }
        self.logits.accumulate_real(&g_logits);
        Ok(Value::Complex(ComplexTensor::from_complex(s.z.shape(), &gz)?))
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.logits]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.logits]
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        let s = s.downcast_ref::<WfmSaved<f64>>()?;
        let zin = s.z.iter().map(|z| z.norm() / 0.1);
        let means = s.u.iter().map(|u| u.norm() / 0.1);
        zin.chain(means).reduce(f64::min)
    }
}

/// Real features `d(f_c, m)`: the manifold distance of every channel to the
/// per-pixel channel mean. Invariant to complex scaling of `f`.
pub struct DistanceTransform;

struct DistSaved<T> {
    f: ComplexTensor<T>,
    m: Vec<Complex<T>>,
    d: Vec<T>,
}

impl DistanceTransform {
    pub fn apply<T: Real>(f: &ComplexTensor<T>) -> Result<Tensor<T>> {
        Ok(Self::run(f)?.0)
    }

    fn run<T: Real>(f: &ComplexTensor<T>) -> Result<(Tensor<T>, DistSaved<T>)> {
        let (n, c, inner) = layout(f.shape())?;
        let (m, _, _) = pixel_mean(f)?;
        let mut d = Vec::with_capacity(f.len());
        for b in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    d.push(manifold_distance(f.get((b * c + ch) * inner + p), m[b * inner + p]));
                }
            }
        }
        let out = Tensor::from_vec(f.shape(), d.clone())?;
        Ok((out, DistSaved { f: f.clone(), m, d }))
    }
}

impl<T: Real> Layer<T> for DistanceTransform {
    fn spec(&self) -> LayerSpec {
        LayerSpec::new(LayerConfig::DistanceTransform)
    }

    fn forward(&mut self, input: &Value<T>, _mode: Mode) -> Result<(Value<T>, Saved)> {
        let (y, s) = Self::run(input.as_complex()?)?;
        Ok((Value::Real(y), saved(s)))
    }

    fn backward(&mut self, s: &Saved, grad_out: &Value<T>) -> Result<Value<T>> {
        let s: &DistSaved<T> = restore(s, "distance_transform")?;
        let g = grad_out.as_real()?.data();
        let (n, c, inner) = layout(s.f.shape())?;
        let zero = Complex::new(T::zero(), T::zero());
        let mut gf = vec![zero; s.f.len()];
        let mut gm = vec![zero; n * inner];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    let k = (b * c + ch) * inner + p;
                    if s.d[k] <= T::zero() {
                        continue;
                    }
                    let (z, m) = (s.f.get(k), s.m[b * inner + p]);
                    let floor = T::lit(MAG_FLOOR);
                    let a = z.norm().max(floor).ln() - m.norm().max(floor).ln();
                    let (_, phi) = polar(z * m.conj());
                    let (g1, g2) = gaps_pullback(z, m, g[k] * a / s.d[k], g[k] * phi / s.d[k]);
                    gf[k] += g1;
                    gm[b * inner + p] += g2;
                }
            }
        }
        let inv_c = T::one() / T::lit(c as f64);
        for b in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    gf[(b * c + ch) * inner + p] += gm[b * inner + p] * inv_c;
                }
            }
        }
        Ok(Value::Complex(ComplexTensor::from_complex(s.f.shape(), &gf)?))
    }

    fn branch_signature(&self, s: &Saved) -> Vec<u32> {
        let Some(s) = s.downcast_ref::<DistSaved<f64>>() else { return Vec::new() };
        let Ok((_, c, inner)) = layout(s.f.shape()) else { return Vec::new() };
        let half = std::f64::consts::FRAC_PI_2;
        (0..s.f.len())
            .map(|k| {
                let m = s.m[(k / (c * inner)) * inner + k % inner];
                let (_, phi) = polar(s.f.get(k) * m.conj());
                if phi > half {
                    1
                } else if phi < -half {
                    2
                } else {
                    0
                }
            })
            .collect()
    }

    fn smooth_margin(&self, s: &Saved) -> Option<f64> {
        let s = s.downcast_ref::<DistSaved<f64>>()?;
        let (_, c, inner) = layout(s.f.shape()).ok()?;
        (0..s.f.len())
            .map(|k| {
                let m = s.m[(k / (c * inner)) * inner + k % inner];
                let z = s.f.get(k);
                let (_, phi) = polar(z * m.conj());
                let phase = (std::f64::consts::PI - phi.abs()) / 0.05;
                (z.norm() / 0.1).min(m.norm() / 0.1).min(phase).min(s.d[k] / 0.1)
            })
            .reduce(f64::min)
    }
}
