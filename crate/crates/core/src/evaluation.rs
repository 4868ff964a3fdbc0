//! Accuracy, complex-scaling robustness, bias-variance decomposition and the
//! wFM decomposability check.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::ctensor::{Real, Rng};
use crate::data::DatasetHandle;
use crate::encodings::{scale_items, RangeSpec};
use crate::layers::{arcdist, grid_golden_minimize, wfm_objective};
use crate::models::ModelGraph;
use crate::{CdsError, Result};

/// Eval-mode predictions over a split in dataset order. `scale` supplies a
/// complex factor for each item index when given.
pub fn predict_split<T: Real>(
    model: &mut ModelGraph<T>,
    split: &DatasetHandle,
    batch_size: usize,
    mut scale: Option<&mut dyn FnMut(usize) -> Complex64>,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(split.len());
    let mut offset = 0;
    for batch in split.sequential_batches::<T>(batch_size)? {
        let mut batch = batch?;
        if let Some(f) = scale.as_mut() {
            let scales: Vec<Complex64> = (offset..offset + batch.len()).map(|i| f(i)).collect();
            scale_items(&mut batch.inputs, &scales)?;
        }
        offset += batch.len();
        preds.extend(model.predict(&batch.inputs, Mode::Eval)?);
    }
    Ok(preds)
}

pub fn accuracy_of(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64
}

/// Top-1 accuracy in eval mode.
pub fn evaluate_accuracy<T: Real>(model: &mut ModelGraph<T>, split: &DatasetHandle, batch_size: usize) -> Result<f64> {
    let preds = predict_split(model, split, batch_size, None)?;
    Ok(accuracy_of(&preds, &split.labels()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub range: RangeSpec,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub draws: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub points: Vec<RobustnessPoint>,
}

impl RobustnessCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("theta_max,log_mag_min,log_mag_max,mean_accuracy,std_accuracy,draws\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.range.theta_max,
                p.range.log_mag_min,
                p.range.log_mag_max,
                p.mean_accuracy,
                p.std_accuracy,
                p.draws.len()
            ));
        }
        s
    }

    /// Largest deviation of any range's mean accuracy from the first range.
    pub fn max_deviation(&self) -> f64 {
        let base = self.points.first().map_or(0.0, |p| p.mean_accuracy);
        self.points.iter().map(|p| (p.mean_accuracy - base).abs()).fold(0.0, f64::max)
    }
}

/// Unit-magnitude phase ranges θ_max ∈ {0, π/8, π/4, π/2, π}.
pub fn default_ranges() -> Vec<RangeSpec> {
    use std::f64::consts::PI;
    [0.0, PI / 8.0, PI / 4.0, PI / 2.0, PI].into_iter().map(RangeSpec::phase).collect()
}

/// For each range, draws one random scale per image per draw and records the
/// accuracy on the scaled split.
pub fn robustness_sweep<T: Real>(
    model: &mut ModelGraph<T>,
    split: &DatasetHandle,
    ranges: &[RangeSpec],
    draws: usize,
    seed: u64,
    batch_size: usize,
) -> Result<RobustnessCurve> {
    if ranges.is_empty() || draws == 0 {
        return Err(CdsError::Parameter("robustness sweep needs at least one range and one draw".into()));
    }
    let labels = split.labels();
    let mut points = Vec::new();
    for (r, range) in ranges.iter().enumerate() {
        let mut accs = Vec::with_capacity(draws);
        for d in 0..draws {
            let mut rng = Rng::stream(seed, ((r as u64) << 32) | d as u64);
            let mut scale = |_: usize| range.sample(&mut rng);
            let preds = predict_split(model, split, batch_size, Some(&mut scale))?;
            accs.push(accuracy_of(&preds, &labels));
        }
        let mean = accs.iter().sum::<f64>() / draws as f64;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / draws as f64;
        points.push(RobustnessPoint { range: *range, mean_accuracy: mean, std_accuracy: var.sqrt(), draws: accs });
    }
    Ok(RobustnessCurve { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBiasVariance {
    pub class: usize,
    pub count: usize,
    pub bias: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceTable {
    pub replicas: usize,
    pub classes: Vec<ClassBiasVariance>,
    /// Means over all instances.
    pub bias: f64,
    pub variance: f64,
}

impl BiasVarianceTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,count,bias,variance\n");
        for c in &self.classes {
            s.push_str(&format!("{},{},{},{}\n", c.class, c.count, c.bias, c.variance));
        }
        s.push_str(&format!("all,{},{},{}\n", self.classes.iter().map(|c| c.count).sum::<usize>(), self.bias, self.variance));
        s
    }
}

/// Most frequent prediction, ties resolved to the smallest class.
pub fn modal_prediction(votes: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &v in votes {
        counts[v] += 1;
    }
    counts.iter().enumerate().fold(0, |best, (c, &n)| if n > counts[best] { c } else { best })
}

/// 0-1 loss bias-variance decomposition. `predictions[k][i]` is replica
/// `k`'s prediction for instance `i`.
pub fn bias_variance(predictions: &[Vec<usize>], labels: &[usize], num_classes: usize) -> Result<BiasVarianceTable> {
    let n = predictions.len();
    if n < 2 {
        return Err(CdsError::Parameter("bias-variance needs at least two replicas".into()));
    }
    if predictions.iter().any(|p| p.len() != labels.len()) {
        return Err(CdsError::shape("every replica must predict every instance"));
    }
    if predictions.iter().flatten().chain(labels).any(|&c| c >= num_classes) {
        return Err(CdsError::Parameter(format!("class index outside 0..{num_classes}")));
    }
    let mut sums = vec![(0usize, 0.0, 0.0); num_classes];
    let (mut bias_total, mut var_total) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let votes: Vec<usize> = predictions.iter().map(|p| p[i]).collect();
        let mode = modal_prediction(&votes, num_classes);
        let bias = if mode == y { 0.0 } else { 1.0 };
        let var = votes.iter().filter(|&&v| v != mode).count() as f64 / n as f64;
        let e = &mut sums[y];
        e.0 += 1;
        e.1 += bias;
        e.2 += var;
        bias_total += bias;
        var_total += var;
    }
    let classes = sums
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(class, (count, b, v))| ClassBiasVariance { class, count, bias: b / count as f64, variance: v / count as f64 })
        .collect();
    let m = labels.len().max(1) as f64;
    Ok(BiasVarianceTable { replicas: n, classes, bias: bias_total / m, variance: var_total / m })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WfmTrial {
    pub points: usize,
    pub closed_form_log_mag: f64,
    pub brute_log_mag: f64,
    pub phase: f64,
    pub joint_log_mag: f64,
    pub joint_phase: f64,
    /// Objective at the separated minimizer minus the joint grid minimum.
    pub joint_gap: f64,
    pub separable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WfmReport {
    pub trials: Vec<WfmTrial>,
    pub max_log_mag_error: f64,
    pub all_separable: bool,
    pub tolerance: f64,
}

impl WfmReport {
    pub fn passed(&self) -> bool {
        self.all_separable && self.max_log_mag_error <= self.tolerance
    }
}

const JOINT_GRID: usize = 200;

/// Random weighted point sets; checks that the wFM objective's minimizer in
/// log-magnitude is the weighted mean of log-magnitudes, and that a joint
/// grid search over (log-magnitude, phase) lands on the two 1-D minima.
pub fn wfm_decomposability_check(rng: &mut Rng, trials: usize) -> Result<WfmReport> {
    if trials == 0 {
        return Err(CdsError::Parameter("need at least one trial".into()));
    }
    let pi = std::f64::consts::PI;
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let n = 1 + rng.below(6);
        let zs: Vec<Complex64> =
            (0..n).map(|_| Complex64::from_polar(rng.uniform(-2.0, 2.0).exp(), rng.uniform(-pi, pi))).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform(0.05, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        let ws: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let closed: f64 = zs.iter().zip(&ws).map(|(z, w)| w * z.norm().ln()).sum();

        let (lo, hi) = (-3.0, 3.0);
        let brute = grid_golden_minimize(|r| wfm_objective(&zs, &ws, r, 0.0), lo, hi, 10_000);
        let phase = grid_golden_minimize(|t| wfm_objective(&zs, &ws, brute, t), -pi, pi, 10_000);

        let (dr, dt) = ((hi - lo) / JOINT_GRID as f64, 2.0 * pi / JOINT_GRID as f64);
        let (mut jr, mut jt, mut jv) = (0.0, 0.0, f64::INFINITY);
        for a in 0..=JOINT_GRID {
            for b in 0..=JOINT_GRID {
                let (r, t) = (lo + dr * a as f64, -pi + dt * b as f64);
                let v = wfm_objective(&zs, &ws, r, t);
                if v < jv {
                    (jr, jt, jv) = (r, t, v);
                }
            }
        }
        let sep = wfm_objective(&zs, &ws, brute, phase);
        let phase_cost = |t| wfm_objective(&zs, &ws, brute, t);
        // The joint grid point must sit in the cell of the 1-D log-magnitude
        // minimum, and in the cell of the 1-D phase minimum unless another
        // phase is equally good up to grid resolution.
        let phase_ok = arcdist(jt, phase) <= dt || phase_cost(jt) - phase_cost(phase) <= dt * dt;
        let separable = sep <= jv + 1e-12 && (jr - brute).abs() <= dr && phase_ok;
        out.push(WfmTrial {
            points: n,
            closed_form_log_mag: closed,
            brute_log_mag: brute,
            phase,
            joint_log_mag: jr,
            joint_phase: jt,
            joint_gap: sep - jv,
            separable,
        });
    }
    let max_err = out.iter().map(|t| (t.closed_form_log_mag - t.brute_log_mag).abs()).fold(0.0, f64::max);
    let all_separable = out.iter().all(|t| t.separable);
    Ok(WfmReport { trials: out, max_log_mag_error: max_err, all_separable, tolerance: 1e-3 })
}
