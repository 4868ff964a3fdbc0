use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cds::autodiff::{gradcheck, GradReport, GradStatus};
use cds::ctensor::io::write_tensor;
use cds::ctensor::{Real, Rng};
use cds::data::{load_cifar100_bin, load_cifar10_bin, synth_complex_dataset, DatasetHandle, Splits, SynthSpec};
use cds::encodings::{encode, read_ppm, Encoding, RangeSpec};
use cds::evaluation::{bias_variance, evaluate_accuracy, predict_split, robustness_sweep, wfm_decomposability_check};
use cds::layers::{LayerConfig, LayerSpec};
use cds::models::{gradcheck_network, ModelGraph, ModelKind};
use cds::training::{train_loop, Checkpoint, TrainOutcome};
use num_complex::Complex64;
use serde::Serialize;

use crate::config::{DataSource, EvalSplit, Precision, RunConfig};

/// A failure caused by the invocation (bad input, missing data, failed
/// check) rather than by a fault in the program; exits with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Runs `$body` with `$t` bound to the configured float type.
macro_rules! with_precision {
    ($cfg:expr, $t:ident => $body:expr) => {
        match $cfg.precision {
            Precision::Fp32 => {
                type $t = f32;
                $body
            }
            Precision::Fp64 => {
                type $t = f64;
                $body
            }
        }
    };
}

pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().ok_or_else(|| invalid("--out is required"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

const CIFAR10_FILES: [&str; 6] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"];
const CIFAR100_FILES: [&str; 2] = ["train.bin", "test.bin"];

/// Finds the directory holding the binary batches under the configured root
/// (or `CDS_DATA_DIR`), accepting the root itself or the archive's folder.
fn cifar_dir(cfg: &RunConfig, folder: &str, files: &[&str]) -> Result<PathBuf> {
    let root = cfg.data_root.clone().or_else(|| std::env::var_os("CDS_DATA_DIR").map(PathBuf::from));
    let layout = format!(
        "expected layout: <root>/{folder}/{{{}}} (or the files directly in <root>); \
         set data.root / --data-dir or the CDS_DATA_DIR environment variable",
        files.join(",")
    );
    let Some(root) = root else {
        bail!(invalid(format!("no dataset root configured; {layout}")));
    };
    for dir in [root.join(folder), root.clone()] {
        if files.iter().all(|f| dir.join(f).is_file()) {
            return Ok(dir);
        }
    }
    let missing: Vec<&str> = files.iter().copied().filter(|f| !root.join(folder).join(f).is_file()).collect();
    bail!(invalid(format!("dataset files missing under {} ({}); {layout}", root.display(), missing.join(", "))))
}

pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    let mut splits = match cfg.data {
        DataSource::Synth => {
            let mut spec = SynthSpec::new(cfg.classes, cfg.per_class, cfg.size, cfg.data_seed);
            spec.noise = cfg.noise;
            synth_complex_dataset(spec)?
        }
        DataSource::Cifar10 => load_cifar10_bin(&cifar_dir(cfg, "cifar-10-batches-bin", &CIFAR10_FILES)?)?,
        DataSource::Cifar100 => load_cifar100_bin(&cifar_dir(cfg, "cifar-100-binary", &CIFAR100_FILES)?)?,
    };
    if let Some(enc) = cfg.encoding {
        let native = splits.train.encoding == Encoding::Native;
        if native != (enc == Encoding::Native) {
            bail!(invalid(format!("encoding {enc:?} does not apply to the {:?} dataset", cfg.data)));
        }
        splits = splits.with_encoding(enc);
    }
    if let Some(n) = cfg.subset {
        if n == 0 || n > splits.train.len() {
            bail!(invalid(format!("data.subset must be in 1..={}", splits.train.len())));
        }
        splits.train = splits.train.subset(n);
    }
    Ok(splits.with_seed(cfg.data_seed))
}

#[derive(Serialize)]
struct TrainSummary {
    model: ModelKind,
    parameters: usize,
    steps_run: usize,
    best_val_accuracy: Option<f64>,
    best_step: u64,
    test_accuracy: Option<f64>,
    divergence: Option<String>,
}

fn train_one<T: Real>(cfg: &RunConfig, kind: ModelKind, seed: u64, splits: &Splits, dir: &Path) -> Result<(TrainSummary, TrainOutcome)> {
    fs::create_dir_all(dir)?;
    let mc = cfg.model_config(kind, splits.train.num_classes, splits.train.channels(), splits.train.image_size(), seed);
    let mut model = ModelGraph::<T>::build(&mc)?;
    let mut metrics = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
    let outcome = train_loop(&mut model, &splits.train, &splits.val, &cfg.train_config(seed), &mut metrics)?;
    metrics.flush()?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    outcome.last.save(&dir.join("last.ckpt"))?;
    let test_accuracy = if outcome.divergence.is_none() {
        let mut best = outcome.best.build_model::<T>()?;
        Some(evaluate_accuracy(&mut best, &splits.test, cfg.eval_batch_size)?)
    } else {
        None
    };
    let summary = TrainSummary {
        model: kind,
        parameters: model.parameter_count(),
        steps_run: outcome.steps_run,
        best_val_accuracy: outcome.best_val_accuracy,
        best_step: outcome.best.step,
        test_accuracy,
        divergence: outcome.divergence.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((summary, outcome))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let splits = load_data(cfg)?;
    let (summary, _) = with_precision!(cfg, T => train_one::<T>(cfg, cfg.model, cfg.seed, &splits, &out)?);
    println!(
        "{}: {} parameters, {} steps, best val accuracy {}, test accuracy {}",
        summary.model,
        summary.parameters,
        summary.steps_run,
        fmt_opt(summary.best_val_accuracy),
        fmt_opt(summary.test_accuracy)
    );
    if let Some(reason) = summary.divergence {
        bail!(invalid(format!("training diverged: {reason}; last validated checkpoint saved to {}", out.join("last.ckpt").display())));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |a| format!("{a:.4}"))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| invalid("--checkpoint is required"))?;
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn eval_split<'a>(cfg: &RunConfig, splits: &'a Splits) -> &'a DatasetHandle {
    match cfg.eval_split {
        EvalSplit::Val => &splits.val,
        EvalSplit::Test => &splits.test,
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let ckpt = load_checkpoint(cfg)?;
    let splits = load_data(cfg)?;
    #[derive(Serialize)]
    struct EvalResult {
        model: ModelKind,
        step: u64,
        split: EvalSplit,
        items: usize,
        accuracy: f64,
    }
    let split = eval_split(cfg, &splits);
    let accuracy = with_precision!(cfg, T => {
        let mut model = ckpt.build_model::<T>()?;
        evaluate_accuracy(&mut model, split, cfg.eval_batch_size)?
    });
    let r = EvalResult { model: ckpt.model.builder, step: ckpt.step, split: cfg.eval_split, items: split.len(), accuracy };
    write_json(&out.join("eval.json"), &r)?;
    println!("{} at step {}: accuracy {:.4} on {} items", r.model, r.step, r.accuracy, r.items);
    Ok(())
}

pub fn robustness(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let ckpt = load_checkpoint(cfg)?;
    let splits = load_data(cfg)?;
    let ranges: Vec<RangeSpec> = cfg.theta_max.iter().map(|&t| RangeSpec::phase(t)).collect();
    let split = eval_split(cfg, &splits);
    let curve = with_precision!(cfg, T => {
        let mut model = ckpt.build_model::<T>()?;
        robustness_sweep(&mut model, split, &ranges, cfg.draws, cfg.seed, cfg.eval_batch_size)?
    });
    fs::write(out.join("robustness.csv"), curve.to_csv())?;
    for p in &curve.points {
        println!("theta_max {:.4}: accuracy {:.4} ± {:.4}", p.range.theta_max, p.mean_accuracy, p.std_accuracy);
    }
    println!("max deviation across ranges: {:.4}", curve.max_deviation());
    Ok(())
}

pub fn biasvar(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let splits = load_data(cfg)?;
    let split = eval_split(cfg, &splits);
    let predictions: Vec<Vec<usize>> = with_precision!(cfg, T => {
        let mut models: Vec<ModelGraph<T>> = Vec::new();
        if cfg.replica_checkpoints.is_empty() {
            for r in 0..cfg.replicas {
                let seed = cfg.seed + r as u64;
                let dir = out.join(format!("replica_{r}"));
                let (summary, outcome) = train_one::<T>(cfg, cfg.model, seed, &splits, &dir)?;
                if let Some(reason) = summary.divergence {
                    bail!(invalid(format!("replica {r} diverged: {reason}")));
                }
                models.push(outcome.best.build_model::<T>()?);
            }
        } else {
            for p in &cfg.replica_checkpoints {
                models.push(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.build_model::<T>()?);
            }
        }
        models.iter_mut().map(|m| predict_split(m, split, cfg.eval_batch_size, None)).collect::<cds::Result<_>>()?
    });
    let table = bias_variance(&predictions, &split.labels(), split.num_classes)?;
    fs::write(out.join("biasvar.csv"), table.to_csv())?;
    println!("{} replicas: bias {:.4}, variance {:.4}", table.replicas, table.bias, table.variance);
    Ok(())
}

struct GradRow {
    layer: String,
    seed: usize,
    report: GradReport,
}

/// Per-layer-kind checks over the catalog, aggregating the catalog's
/// variants of one kind into one row per seed.
fn layer_rows(cfg: &RunConfig, filter: &dyn Fn(&str) -> bool) -> Result<Vec<GradRow>> {
    let mut kinds: Vec<(String, Vec<LayerConfig>)> = Vec::new();
    for c in LayerConfig::catalog() {
        let name = c.kind_name();
        if !filter(&name) {
            continue;
        }
        match kinds.iter_mut().find(|(k, _)| *k == name) {
            Some((_, v)) => v.push(c),
            None => kinds.push((name, vec![c])),
        }
    }
    let mut rows = Vec::new();
    for (name, configs) in kinds {
        for seed in 0..cfg.gradcheck_seeds {
            let mut rng = Rng::stream(cfg.seed, seed as u64);
            let mut worst: Option<GradReport> = None;
            for c in &configs {
                let r = gradcheck(&LayerSpec::new(c.clone()), &mut rng, cfg.gradcheck_tolerance)?;
                let replace = match &worst {
                    None => true,
                    Some(w) => rank(&r) > rank(w) || (rank(&r) == rank(w) && r.max_rel_err() > w.max_rel_err()),
                };
                if replace {
                    worst = Some(r);
                }
            }
            rows.push(GradRow { layer: name.clone(), seed, report: worst.expect("at least one config per kind") });
        }
    }
    Ok(rows)
}

fn rank(r: &GradReport) -> u8 {
    match r.status {
        GradStatus::Pass => 0,
        GradStatus::Inconclusive => 1,
        GradStatus::Fail => 2,
    }
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    if !cfg.gradcheck_all && cfg.gradcheck_layers.is_empty() {
        bail!(invalid("nothing to check: pass --all or --layer <kind>"));
    }
    let known: Vec<String> = LayerConfig::catalog().iter().map(|c| c.kind_name()).collect();
    let nets: Vec<String> = ModelKind::ALL.iter().map(|k| format!("network:{k}")).collect();
    for l in &cfg.gradcheck_layers {
        if !known.contains(l) && !nets.contains(l) {
            bail!(invalid(format!("unknown layer kind '{l}'; known: {}, {}", known.join(", "), nets.join(", "))));
        }
    }
    let wanted = |name: &str| cfg.gradcheck_all || cfg.gradcheck_layers.iter().any(|l| l == name);
    let mut rows = layer_rows(cfg, &wanted)?;
    for kind in ModelKind::ALL {
        let name = format!("network:{kind}");
        if wanted(&name) {
            for seed in 0..cfg.gradcheck_seeds {
                let report = gradcheck_network(kind, cfg.seed.wrapping_add(seed as u64), cfg.gradcheck_tolerance, 8)?;
                rows.push(GradRow { layer: name.clone(), seed, report });
            }
        }
    }
    let mut csv = String::from("layer,seed,max_rel_err,worst_coordinate,status\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.3e},{},{}\n", r.layer, r.seed, r.report.max_rel_err(), r.report.worst_coordinate(), r.report.status));
    }
    fs::write(out.join("gradcheck.csv"), &csv)?;
    print!("{csv}");
    let bad = rows.iter().filter(|r| r.report.status != GradStatus::Pass).count();
    if bad > 0 {
        bail!(invalid(format!("{bad} of {} gradient checks did not pass", rows.len())));
    }
    Ok(())
}

pub fn encode_cmd(cfg: &RunConfig) -> Result<()> {
    let input = cfg.encode_input.as_ref().ok_or_else(|| invalid("--in is required"))?;
    let out = cfg.out.as_ref().ok_or_else(|| invalid("--out is required"))?;
    let enc = cfg.encoding.unwrap_or(Encoding::Lab);
    if enc == Encoding::Native {
        bail!(invalid("encode needs a colour encoding (sliding, lab or rgb)"));
    }
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let rgb = read_ppm(&bytes)?;
    let encoded = encode(&rgb, enc)?;
    let s = Complex64::from_polar(cfg.scale_mag, cfg.scale_phase);
    let tensor = encoded.tensor.scale(s);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_tensor(&tensor, BufWriter::new(fs::File::create(out)?))?;
    println!("{:?} encoding of {:?}, scaled by {:.4}∠{:.4}, written to {}", enc, rgb.shape(), cfg.scale_mag, cfg.scale_phase, out.display());
    Ok(())
}

pub fn wfmcheck(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let mut rng = Rng::new(cfg.seed);
    let report = wfm_decomposability_check(&mut rng, cfg.wfm_trials)?;
    write_json(&out.join("wfmcheck.json"), &report)?;
    println!(
        "{} trials: max log-magnitude error {:.2e} (tolerance {:.0e}), joint minimum separable in all trials: {}",
        report.trials.len(),
        report.max_log_mag_error,
        report.tolerance,
        report.all_separable
    );
    if !report.passed() {
        bail!(invalid("wFM decomposability check failed"));
    }
    Ok(())
}

pub fn reproduce_table(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let splits = load_data(cfg)?;
    let mut csv = String::from("model,parameters,steps,best_val_accuracy,test_accuracy\n");
    for &kind in &cfg.table_models {
        let dir = out.join(kind.name());
        let (s, _) = with_precision!(cfg, T => train_one::<T>(cfg, kind, cfg.seed, &splits, &dir)?);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            kind,
            s.parameters,
            s.steps_run,
            s.best_val_accuracy.map_or(String::new(), |a| format!("{a:.4}")),
            s.test_accuracy.map_or(String::new(), |a| format!("{a:.4}"))
        ));
    }
    fs::write(out.join("table.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
