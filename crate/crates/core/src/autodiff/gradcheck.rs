use serde::Serialize;

use super::{Mode, Sequential, Value};
use crate::ctensor::{ComplexTensor, Rng, Tensor};
use crate::layers::{build_layer, sample_input, LayerSpec};
use crate::{CdsError, Result};

const REL_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-5;
const MAX_ATTEMPTS: usize = 100;
const ROUNDOFF_MARGIN: f64 = 16.0;

/// Central differences of `f` along every real coordinate of `p`.
///
/// The result uses the same layout as cotangents: the real plane holds
/// `∂f/∂re`, the imaginary plane `∂f/∂im`.
pub fn finite_diff_grad<F>(mut f: F, p: &ComplexTensor<f64>, h: f64) -> Result<ComplexTensor<f64>>
where
    F: FnMut(&ComplexTensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(CdsError::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut eval = |q: &ComplexTensor<f64>| -> Result<f64> {
        let v = f(q)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CdsError::Evaluation(format!("function returned non-finite value {v}")))
        }
    };
    let mut out = ComplexTensor::zeros(p.shape())?;
    let mut q = p.clone();
    for plane in 0..2 {
        for i in 0..p.len() {
            let base = if plane == 0 { p.re()[i] } else { p.im()[i] };
            let set = |q: &mut ComplexTensor<f64>, v: f64| {
                let (re, im) = q.planes_mut();
                if plane == 0 {
                    re[i] = v
                } else {
                    im[i] = v
                }
            };
            set(&mut q, base + h);
            let up = eval(&q)?;
            set(&mut q, base - h);
            let down = eval(&q)?;
            set(&mut q, base);
            let d = (up - down) / (2.0 * h);
            let (re, im) = out.planes_mut();
            if plane == 0 {
                re[i] = d
            } else {
                im[i] = d
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradStatus {
    Pass,
    Fail,
    Inconclusive,
}

impl std::fmt::Display for GradStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradStatus::Pass => "pass",
            GradStatus::Fail => "fail",
            GradStatus::Inconclusive => "inconclusive",
        })
    }
}

/// Error summary for one differentiated tensor.
#[derive(Debug, Clone, Serialize)]
pub struct CoordinateError {
    pub tensor: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Real-coordinate index; complex tensors interleave `(re, im)`.
    pub worst_index: usize,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub layer: String,
    pub tolerance: f64,
    pub entries: Vec<CoordinateError>,
    pub status: GradStatus,
    pub attempts: usize,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    /// `tensor[index]` of the worst coordinate, or empty if nothing was checked.
    pub fn worst_coordinate(&self) -> String {
        self.entries
            .iter()
            .filter(|e| e.checked > 0)
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|e| format!("{}[{}]", e.tensor, e.worst_index))
            .unwrap_or_default()
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().map(|e| e.skipped).sum()
    }

    fn inconclusive(layer: String, tolerance: f64, attempts: usize) -> Self {
        Self { layer, tolerance, entries: Vec::new(), status: GradStatus::Inconclusive, attempts }
    }
}

/// Scalar test loss `Σ r_k·y_k` with a fixed random direction `r`.
fn linear_loss(y: &Value<f64>, r: &Value<f64>) -> f64 {
    (0..y.real_len()).map(|k| y.coord(k) * r.coord(k)).sum()
}

fn random_direction(like: &Value<f64>, rng: &mut Rng) -> Value<f64> {
    let n = like.real_len().max(1) as f64;
    let s = 1.0 / n.sqrt();
    match like {
        Value::Complex(t) => {
            let re = (0..t.len()).map(|_| rng.normal(0.0, s)).collect();
            let im = (0..t.len()).map(|_| rng.normal(0.0, s)).collect();
            Value::Complex(ComplexTensor::from_planes(t.shape(), re, im).expect("same shape"))
        }
        Value::Real(t) => {
            let d = (0..t.len()).map(|_| rng.normal(0.0, s)).collect();
            Value::Real(Tensor::from_vec(t.shape(), d).expect("same shape"))
        }
    }
}

fn pick_coordinates(n: usize, max: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let mut p = rng.permutation(n);
            p.truncate(m);
            p.sort_unstable();
            p
        }
        _ => (0..n).collect(),
    }
}

struct Tally {
    entry: CoordinateError,
    floor: f64,
}

impl Tally {
    fn new(tensor: String, floor: f64) -> Self {
        Self {
            floor,
            entry: CoordinateError {
                tensor,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                worst_index: 0,
                checked: 0,
                skipped: 0,
            },
        }
    }

    fn record(&mut self, k: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(self.floor);
        let e = &mut self.entry;
        if e.checked == 0 || rel > e.max_rel_err {
            e.max_rel_err = rel;
            e.worst_index = k;
        }
        e.max_abs_err = e.max_abs_err.max(abs);
        e.checked += 1;
    }
}

/// Central difference of `f` at offset 0, where `f` returns `None` off the
/// reference branch. When the plain estimate disagrees with `analytic`, it is
/// replaced by Ridders' extrapolation over shrinking steps, whose answer is
/// chosen by its own error estimate. Strongly curved but smooth losses are
/// then not mistaken for wrong gradients.
fn central_difference(
    mut f: impl FnMut(f64) -> Result<Option<f64>>,
    analytic: f64,
    tolerance: f64,
    floor: f64,
) -> Result<Option<f64>> {
    let mut diff = |h: f64| -> Result<Option<f64>> {
        Ok(match (f(h)?, f(-h)?) {
            (Some(u), Some(d)) => Some((u - d) / (2.0 * h)),
            _ => None,
        })
    };
    let Some(plain) = diff(STEP)? else { return Ok(None) };
    let rel = (plain - analytic).abs() / plain.abs().max(analytic.abs()).max(floor);
    if rel <= tolerance {
        return Ok(Some(plain));
    }

    const SHRINK: f64 = 1.4;
    const ROUNDS: usize = 8;
    let mut table = vec![vec![0.0; ROUNDS]; ROUNDS];
    table[0][0] = plain;
    let (mut best, mut best_err) = (plain, f64::INFINITY);
    let mut h = STEP;
    for i in 1..ROUNDS {
        h /= SHRINK;
        let Some(d) = diff(h)? else { break };
        table[0][i] = d;
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let err = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if err <= best_err {
                best_err = err;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * best_err {
            break;
        }
    }
    Ok(Some(best))
}

/// Checks the analytic gradient of a whole chain against central differences.
///
/// Coordinates whose perturbation changes the chain's branch signature (a
/// ReLU side, a clipped phase, a pooling winner) straddle a kink and are
/// skipped. `max_coords` bounds the number of coordinates tested per tensor.
pub fn gradcheck_model(
    model: &mut Sequential<f64>,
    input: &Value<f64>,
    rng: &mut Rng,
    tolerance: f64,
    max_coords: Option<usize>,
    name: &str,
) -> Result<GradReport> {
    let mode = Mode::Train;
    let (y, tape) = model.forward(input, mode)?;
    let signature = model.branch_signature(&tape);
    let r = random_direction(&y, rng);
    model.zero_grad();
    let g_input = model.backward(&tape, &r)?;
    drop(tape);
    // A central difference cannot resolve derivatives below the rounding
    // noise of the loss, about eps·Σ|r_k·y_k| / STEP.
    let loss_l1: f64 = (0..y.real_len()).map(|k| (y.coord(k) * r.coord(k)).abs()).sum();
    let floor = REL_FLOOR.max(ROUNDOFF_MARGIN * f64::EPSILON * loss_l1 / (STEP * tolerance));

    let probe = |model: &mut Sequential<f64>, x: &Value<f64>| -> Result<Option<f64>> {
        let (y, tape) = model.forward(x, mode)?;
        if model.branch_signature(&tape) != signature {
            return Ok(None);
        }
        let l = linear_loss(&y, &r);
        if !l.is_finite() {
            return Err(CdsError::Evaluation(format!("{name}: non-finite loss during finite differences")));
        }
        Ok(Some(l))
    };

    let mut entries = Vec::new();

    // Parameters, addressed by (layer, slot) so the model can be re-borrowed.
    let mut slots = Vec::new();
    for (li, layer) in model.layers().iter().enumerate() {
        for (pi, p) in layer.params().iter().enumerate() {
            if p.trainable {
                slots.push((li, pi, format!("{}.{}", li, p.name), p.real_count()));
            }
        }
    }
    for (li, pi, tensor, count) in slots {
        let mut tally = Tally::new(tensor, floor);
        for k in pick_coordinates(count, max_coords, rng) {
            let (base, analytic) = {
                let p = &model.layers()[li].params()[pi];
                (p.coord(k), p.grad_coord(k))
            };
            let set = |model: &mut Sequential<f64>, v: f64| {
                model.layers_mut()[li].params_mut()[pi].set_coord(k, v);
            };
            let numeric = central_difference(
                |off| {
                    set(model, base + off);
                    probe(model, input)
                },
                analytic,
                tolerance,
                floor,
            );
            set(model, base);
            match numeric? {
                Some(n) => tally.record(k, analytic, n),
                None => tally.entry.skipped += 1,
            }
        }
        entries.push(tally.entry);
    }

    let mut tally = Tally::new("input".into(), floor);
    let mut x = input.clone();
    for k in pick_coordinates(input.real_len(), max_coords, rng) {
        let base = x.coord(k);
        let analytic = g_input.coord(k);
        let numeric = central_difference(
            |off| {
                x.set_coord(k, base + off);
                probe(model, &x)
            },
            analytic,
            tolerance,
            floor,
        );
        x.set_coord(k, base);
        match numeric? {
            Some(n) => tally.record(k, analytic, n),
            None => tally.entry.skipped += 1,
        }
    }
    entries.push(tally.entry);

    let checked: usize = entries.iter().map(|e| e.checked).sum();
    let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let status = if checked == 0 {
        GradStatus::Inconclusive
    } else if worst <= tolerance {
        GradStatus::Pass
    } else {
        GradStatus::Fail
    };
    Ok(GradReport { layer: name.into(), tolerance, entries, status, attempts: 1 })
}

/// Builds the layer described by `spec` with fresh parameters, samples a test
/// point away from its non-differentiable loci and compares gradients.
pub fn gradcheck(spec: &LayerSpec, rng: &mut Rng, tolerance: f64) -> Result<GradReport> {
    let name = spec.kind_name().to_string();
    for attempt in 1..=MAX_ATTEMPTS {
        let layer = build_layer::<f64>(&spec.config, rng)?;
        let mut model = Sequential::new(vec![layer]);
        let input = sample_input(&spec.config, rng)?;
        let (_, tape) = model.forward(&input, Mode::Train)?;
        let margin = model.smooth_margin(&tape);
        drop(tape);
        if margin.is_some_and(|m| m < 1.0) {
            continue;
        }
        let mut report = gradcheck_model(&mut model, &input, rng, tolerance, None, &name)?;
        report.attempts = attempt;
        if report.skipped() == 0 {
            return Ok(report);
        }
    }
    Ok(GradReport::inconclusive(name, tolerance, MAX_ATTEMPTS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn quadratic() {
        let p = ComplexTensor::from_planes(&[1], vec![3.0], vec![0.0]).unwrap();
        let g = finite_diff_grad(|q| Ok(q.re()[0] * q.re()[0]), &p, 1e-5).unwrap();
        assert!((g.re()[0] - 6.0).abs() <= 1e-9);
        assert_eq!(g.im()[0], 0.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = ComplexTensor::from_planes(&[2], vec![0.3, -1.0], vec![2.0, 0.1]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.25), &p, 1e-5).unwrap();
        assert!(g.max_abs() <= 1e-10);
    }

    #[test]
    fn norm_gradient() {
        let p = ComplexTensor::from_complex(&[1], &[Complex64::new(1.0, 1.0)]).unwrap();
        let g = finite_diff_grad(|q| Ok(q.get(0).norm()), &p, 1e-5).unwrap();
        let want = 1.0 / 2f64.sqrt();
        assert!((g.re()[0] - want).abs() <= 1e-8);
        assert!((g.im()[0] - want).abs() <= 1e-8);
    }

    #[test]
    fn non_finite_is_an_evaluation_error() {
        let p = ComplexTensor::<f64>::zeros(&[1]).unwrap();
        let r = finite_diff_grad(|_| Ok(f64::NAN), &p, 1e-5);
        assert!(matches!(r, Err(CdsError::Evaluation(_))));
        assert!(matches!(finite_diff_grad(|_| Ok(0.0), &p, 0.0), Err(CdsError::Parameter(_))));
    }

    #[test]
    fn relative_error_floor() {
        let mut t = Tally::new("x".into(), REL_FLOOR);
        t.record(0, 1e-9, 0.0);
        assert!((t.entry.max_rel_err - 1e-3).abs() < 1e-15);
        t.record(1, 2.0, 1.0);
        assert_eq!(t.entry.worst_index, 1);
        assert_eq!(t.entry.max_rel_err, 0.5);
    }

    #[test]
    fn every_layer_kind_passes_on_ten_seeds() {
        use crate::layers::LayerConfig;
        let mut failures = Vec::new();
        for config in LayerConfig::catalog() {
            for seed in 0..10 {
                let mut rng = Rng::new(seed);
                let r = gradcheck(&LayerSpec::new(config.clone()), &mut rng, 1e-4).unwrap();
                if r.status != GradStatus::Pass {
                    failures.push(format!("{} seed {seed}: {} {:.3e} at {}", r.layer, r.status, r.max_rel_err(), r.worst_coordinate()));
                }
            }
        }
        assert!(failures.is_empty(), "{failures:#?}");
    }

    struct WrongBackward;

    impl crate::autodiff::Layer<f64> for WrongBackward {
        fn spec(&self) -> LayerSpec {
            LayerSpec::new(crate::layers::LayerConfig::Identity)
        }

        fn forward(&mut self, x: &Value<f64>, _m: Mode) -> Result<(Value<f64>, crate::autodiff::Saved)> {
            let z = x.as_complex()?;
            Ok((Value::Complex(z.scale(Complex64::new(2.0, 0.0))), Box::new(())))
        }

        fn backward(&mut self, _s: &crate::autodiff::Saved, g: &Value<f64>) -> Result<Value<f64>> {
            Ok(g.clone())
        }
    }

    #[test]
    fn detects_a_wrong_rule() {
        let mut rng = Rng::new(0);
        let mut model = Sequential::new(vec![Box::new(WrongBackward)]);
        let x = Value::Complex(ComplexTensor::from_planes(&[1, 2], vec![0.5, -1.0], vec![0.3, 0.2]).unwrap());
        let r = gradcheck_model(&mut model, &x, &mut rng, 1e-4, None, "wrong").unwrap();
        assert_eq!(r.status, GradStatus::Fail);
        assert!((r.max_rel_err() - 0.5).abs() < 1e-6);
        assert!(r.worst_coordinate().starts_with("input["));
    }
}
