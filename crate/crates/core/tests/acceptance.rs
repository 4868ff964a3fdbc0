//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion, and exits non-zero if any criterion fails.
//!
//! Set `CDS_DATA_DIR` to a directory holding `cifar-10-batches-bin/` to run
//! the CIFAR robustness criterion; without it that line reports BLOCKED.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use cds::autodiff::{gradcheck, GradStatus, Layer, Mode, Value};
use cds::ctensor::{conv2d, conv2d_direct, make_tensor, ComplexTensor, Conv2dParams, ConvMethod, Fill, Rng, Tensor};
use cds::data::{load_cifar10_bin, synth_complex_dataset, SynthSpec};
use cds::encodings::{lab_complex_to_rgb, rgb_to_lab_complex, rgb_to_sliding, Encoding};
use cds::evaluation::{bias_variance, default_ranges, robustness_sweep, wfm_decomposability_check};
use cds::layers::{build_layer, wfm_layer, ConvConfig, EqBatchNorm, EqMaxPool, GtRelu, LayerConfig, LayerSpec, Metric};
use cds::models::{gradcheck_network, ModelConfig, ModelGraph, ModelKind};
use cds::training::{train_loop, TrainConfig};
use num_complex::Complex64;

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
    Info(String),
}

use Verdict::*;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn gaussian(shape: &[usize], rng: &mut Rng) -> ComplexTensor<f64> {
    make_tensor(shape, Fill::Gaussian { rng, mean: 0.0, std: 1.0 }).unwrap()
}

/// `|s|` log-uniform in [0.1, 10], phase uniform.
fn random_scale(rng: &mut Rng) -> Complex64 {
    Complex64::from_polar(10f64.powf(rng.uniform(-1.0, 1.0)), rng.uniform(-PI, PI))
}

fn forward(layer: &mut Box<dyn Layer<f64>>, x: &ComplexTensor<f64>, mode: Mode) -> ComplexTensor<f64> {
    layer.forward(&Value::Complex(x.clone()), mode).unwrap().0.into_complex().unwrap()
}

fn max_norm(z: &ComplexTensor<f64>) -> f64 {
    z.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// `‖a − b‖∞ / ‖b‖∞`.
fn rel_inf(a: &ComplexTensor<f64>, b: &ComplexTensor<f64>) -> f64 {
    let d = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    d / max_norm(b).max(f64::MIN_POSITIVE)
}

// 1 ------------------------------------------------------------------------

fn equivariance_suite() -> Verdict {
    const TRIALS: usize = 100;
    let mut rng = Rng::new(101);
    let mut worst = [0.0f64; 5];

    for _ in 0..TRIALS {
        let cin = 1 + rng.below(4);
        let cout = 1 + rng.below(4);
        let k = 1 + rng.below(3);
        let pad = rng.below(k);
        let cfg = LayerConfig::Econv(ConvConfig::new(cin, cout, k).padding(pad).stride(1 + rng.below(2)));
        let mut layer = build_layer::<f64>(&cfg, &mut rng).unwrap();
        let z = gaussian(&[2, cin, 5, 5], &mut rng);
        let s = random_scale(&mut rng);
        let y = forward(&mut layer, &z, Mode::Eval).scale(s);
        let ys = forward(&mut layer, &z.scale(s), Mode::Eval);
        worst[0] = worst[0].max(rel_inf(&ys, &y));
    }

    let mut wrap = build_layer::<f64>(&LayerConfig::EqWrap { inner: Box::new(LayerConfig::Crelu) }, &mut rng).unwrap();
    for _ in 0..TRIALS {
        let c = 1 + rng.below(4);
        let (h, w) = (4, 4);
        let f = gaussian(&[1, c, h, w], &mut rng);
        let s = random_scale(&mut rng);
        let y = forward(&mut wrap, &f, Mode::Eval);
        let ys = forward(&mut wrap, &f.scale(s), Mode::Eval);
        for p in 0..h * w {
            let m: Complex64 = (0..c).map(|ch| f.get(ch * h * w + p)).sum::<Complex64>() / c as f64;
            if m.norm() < 1e-3 {
                continue;
            }
            let scale = (0..c).map(|ch| y.get(ch * h * w + p).norm()).fold(0.0, f64::max) * s.norm();
            for ch in 0..c {
                let i = ch * h * w + p;
                let err = (ys.get(i) - s * y.get(i)).norm() / scale.max(f64::MIN_POSITIVE);
                worst[1] = worst[1].max(err);
            }
        }
    }

    for _ in 0..TRIALS {
        let c = 1 + rng.below(3);
        let mut g = GtRelu::<f64>::new(c, 0.0).unwrap();
        let cs: Vec<Complex64> = (0..c).map(|_| Complex64::from_polar(rng.uniform(0.2, 3.0), rng.uniform(-PI, PI))).collect();
        let omegas: Vec<f64> = (0..c).map(|_| rng.uniform(0.0, 2.0)).collect();
        g.set_scale(&cs, &omegas).unwrap();
        let x = gaussian(&[2, c, 3, 3], &mut rng);
        let lambda = 10f64.powf(rng.uniform(-1.0, 1.0));
        let y = g.apply(&x).unwrap().scale(Complex64::new(lambda, 0.0));
        let yl = g.apply(&x.scale(Complex64::new(lambda, 0.0))).unwrap();
        worst[2] = worst[2].max(rel_inf(&yl, &y));
    }

    let mut pool_mismatch = 0usize;
    let mut pool_trials = 0usize;
    while pool_trials < TRIALS {
        let pool = EqMaxPool::new(2, 2).unwrap();
        let f = gaussian(&[1, 2, 6, 6], &mut rng);
        // Unique maxima: the two largest magnitudes of every window must be
        // well separated, or rounding in |s·z| could legitimately swap them.
        let near_tie = (0..2).any(|c| {
            (0..3).any(|wy| {
                (0..3).any(|wx| {
                    let mut mags: Vec<f64> = (0..4)
                        .map(|t| f.get(c * 36 + (2 * wy + t / 2) * 6 + 2 * wx + t % 2).norm())
                        .collect();
                    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    mags[0] - mags[1] <= 1e-9 * mags[0]
                })
            })
        });
        if near_tie {
            continue;
        }
        pool_trials += 1;
        let s = random_scale(&mut rng);
        let (_, a) = pool.pool(&f).unwrap();
        let (_, b) = pool.pool(&f.scale(s)).unwrap();
        pool_mismatch += (a != b) as usize;
    }

    for _ in 0..TRIALS {
        let c = 1 + rng.below(3);
        let mut bn = EqBatchNorm::<f64>::new(c, 0.1, 1e-5).unwrap();
        let gamma: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.uniform(-0.5, 0.5)).collect();
        bn.set_affine(&gamma, &beta);
        let f = gaussian(&[3, c, 3, 3], &mut rng);
        let y = bn.apply(&f, Mode::Train).unwrap();
        let rot = Complex64::from_polar(1.0, rng.uniform(-PI, PI));
        let yr = bn.apply(&f.scale(rot), Mode::Train).unwrap();
        let lam = 10f64.powf(rng.uniform(-1.0, 1.0));
        let yl = bn.apply(&f.scale(Complex64::new(lam, 0.0)), Mode::Train).unwrap();
        worst[3] = worst[3].max(rel_inf(&yr, &y.scale(rot)));
        worst[4] = worst[4].max(rel_inf(&yl, &y));
    }

    // "Exact" phase equivariance and homogeneity are held to a few ulps:
    // |e^{iθ}z| itself is only correct to rounding.
    let ok = worst[0] <= 1e-12 && worst[1] <= 1e-11 && worst[2] <= 1e-14 && pool_mismatch == 0 && worst[3] <= 1e-13 && worst[4] <= 1e-12;
    check(
        ok,
        format!(
            "{TRIALS} trials each; econv {:.1e} (<=1e-12), wrap(crelu) {:.1e} (<=1e-11), gtrelu r=0 homogeneity {:.1e} (<=1e-14), \
             maxpool index mismatches {pool_mismatch}, batchnorm phase {:.1e} (<=1e-13) / scale {:.1e} (<=1e-12)",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn invariance_suite() -> Verdict {
    let mut rng = Rng::new(202);
    let mut div_worst = 0.0f64;
    let mut div_points = 0usize;
    let cfg = LayerConfig::Division { channels: 3, kernel: 3, padding: 1, eps: 1e-7 };
    for _ in 0..50 {
        let mut layer = build_layer::<f64>(&cfg, &mut rng).unwrap();
        let w = layer.params().iter().find(|p| p.name.ends_with("weight")).expect("reference weight").value.clone();
        let f = gaussian(&[1, 3, 5, 5], &mut rng);
        let s = random_scale(&mut rng);
        // Reference map recomputed outside the layer to select |z2| >= 1e-2.
        let z2 = conv2d_direct(&f, &w, Conv2dParams { stride: 1, padding: 1, groups: 1 }).unwrap();
        let y = forward(&mut layer, &f, Mode::Eval);
        let ys = forward(&mut layer, &f.scale(s), Mode::Eval);
        for c in 0..3 {
            for p in 0..25 {
                let r = z2.get(p).norm();
                if r < 1e-2 || r * s.norm() < 1e-2 {
                    continue;
                }
                let i = c * 25 + p;
                div_points += 1;
                div_worst = div_worst.max((ys.get(i) - y.get(i)).norm() / y.get(i).norm());
            }
        }
    }

    let mut conj_phase = 0.0f64;
    let mut conj_mag = 0.0f64;
    let ccfg = LayerConfig::Conjugate { channels: 2, kernel: 3, padding: 1 };
    for _ in 0..50 {
        let mut layer = build_layer::<f64>(&ccfg, &mut rng).unwrap();
        let f = gaussian(&[1, 2, 4, 4], &mut rng);
        let u = Complex64::from_polar(1.0, rng.uniform(-PI, PI));
        let m = 10f64.powf(rng.uniform(-1.0, 1.0));
        let y = forward(&mut layer, &f, Mode::Eval);
        let yu = forward(&mut layer, &f.scale(u), Mode::Eval);
        let ym = forward(&mut layer, &f.scale(Complex64::new(m, 0.0)), Mode::Eval);
        conj_phase = conj_phase.max(rel_inf(&yu, &y));
        conj_mag = conj_mag.max(rel_inf(&ym, &y.scale(Complex64::new(m * m, 0.0))));
    }

    // Manifold distances compare log-magnitudes and phases, so the
    // invariant head ignores any s. With batch norm on its inputs this needs
    // batch statistics (train mode). The Euclidean variant is only
    // phase-invariant: |s·f − p·s·m| = |s|·|f − p·m|.
    let mut head_worst = 0.0f64;
    let mut euclid_phase = 0.0f64;
    let mut argmax_changed = 0usize;
    let head_out = |head: &mut Box<dyn Layer<f64>>, f: &ComplexTensor<f64>, mode| {
        head.forward(&Value::Complex(f.clone()), mode).unwrap().0.into_real().unwrap()
    };
    for (metric, batchnorm, mode) in
        [(Metric::Manifold, false, Mode::Eval), (Metric::Manifold, true, Mode::Train), (Metric::Euclidean, false, Mode::Eval)]
    {
        let hcfg = LayerConfig::PrototypeHead { embed_dim: 6, num_classes: 4, metric, invariant: true, batchnorm };
        let mut head = build_layer::<f64>(&hcfg, &mut rng).unwrap();
        for _ in 0..50 {
            let f = gaussian(&[3, 6], &mut rng);
            let s = match metric {
                Metric::Manifold => random_scale(&mut rng),
                Metric::Euclidean => Complex64::from_polar(1.0, rng.uniform(-PI, PI)),
            };
            let a = head_out(&mut head, &f, mode);
            let b = head_out(&mut head, &f.scale(s), mode);
            let dev = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            match metric {
                Metric::Manifold => head_worst = head_worst.max(dev),
                Metric::Euclidean => euclid_phase = euclid_phase.max(dev),
            }
            argmax_changed += (cds::models::argmax_rows(&a) != cds::models::argmax_rows(&b)) as usize;
        }
    }

    // Logits as used for prediction (running statistics), 100 random s.
    // Train-mode logits (batch statistics) are reported alongside.
    let data = synth_complex_dataset(SynthSpec::new(10, 4, 32, 7)).unwrap();
    let x = data.test.batch::<f32>(&[0, 1, 2, 3]).unwrap().inputs;
    let mut e2e = Vec::new();
    let mut e2e_train = Vec::new();
    for kind in [ModelKind::TypeI, ModelKind::TypeE] {
        let mut model = ModelGraph::<f32>::build(&ModelConfig::new(kind, 10, 2).seed(5)).unwrap();
        for (mode, trials, out) in [(Mode::Eval, 100, &mut e2e), (Mode::Train, 10, &mut e2e_train)] {
            let base = model.logits(&x, mode).unwrap();
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let s = random_scale(&mut rng);
                let sx = x.scale(num_complex::Complex32::new(s.re as f32, s.im as f32));
                let logits = model.logits(&sx, mode).unwrap();
                worst = base.data().iter().zip(logits.data()).map(|(a, b)| (a - b).abs() as f64).fold(worst, f64::max);
            }
            out.push(worst);
        }
    }

    let ok = div_worst <= 1e-5
        && div_points > 0
        && conj_phase <= 1e-14
        && conj_mag <= 1e-14
        && head_worst <= 1e-10
        && euclid_phase <= 1e-10
        && argmax_changed == 0
        && e2e.iter().all(|&d| d <= 1e-4);
    check(
        ok,
        format!(
            "division {div_worst:.1e} over {div_points} outputs (<=1e-5), conjugate unit phase {conj_phase:.1e} / |s|^2 law {conj_mag:.1e}, \
             invariant manifold head {head_worst:.1e} abs (<=1e-10), euclidean head unit phase {euclid_phase:.1e}, argmax changes {argmax_changed}, \
             fp32 logits over 100 s: type_i {:.1e} / type_e {:.1e} abs (<=1e-4); with batch statistics {:.1e} / {:.1e}",
            e2e[0], e2e[1], e2e_train[0], e2e_train[1]
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn gradient_checks() -> Verdict {
    const SEEDS: u64 = 10;
    const TOL: f64 = 1e-4;
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    let mut kinds = std::collections::BTreeSet::new();
    let mut checks = 0;
    for cfg in LayerConfig::catalog() {
        kinds.insert(cfg.kind_name());
        for seed in 0..SEEDS {
            let mut rng = Rng::stream(303, seed);
            let r = gradcheck(&LayerSpec::new(cfg.clone()), &mut rng, TOL).unwrap();
            checks += 1;
            worst = worst.max(r.max_rel_err());
            if r.status != GradStatus::Pass {
                bad.push(format!("{} seed {seed}: {} {:.1e} at {}", cfg.kind_name(), r.status, r.max_rel_err(), r.worst_coordinate()));
            }
        }
    }
    let mut net_worst = 0.0f64;
    for kind in [ModelKind::TypeI, ModelKind::TypeE] {
        for seed in 0..SEEDS {
            let r = gradcheck_network(kind, 300 + seed, TOL, 8).unwrap();
            checks += 1;
            net_worst = net_worst.max(r.max_rel_err());
            if r.status != GradStatus::Pass {
                bad.push(format!("network {kind} seed {seed}: {} {:.1e} at {}", r.status, r.max_rel_err(), r.worst_coordinate()));
            }
        }
    }
    check(
        bad.is_empty(),
        format!(
            "{} layer kinds ({} configs) x {SEEDS} seeds and type_i/type_e networks x {SEEDS} seeds at fp64: {checks} checks, \
             worst layer {worst:.1e}, worst network {net_worst:.1e} (<=1e-4){}",
            kinds.len(),
            LayerConfig::catalog().len(),
            if bad.is_empty() { String::new() } else { format!("; failures: {}", bad.join("; ")) }
        ),
    )
}

// 4 ------------------------------------------------------------------------

/// Textbook complex convolution with four real products per tap.
fn naive_conv(z: &ComplexTensor<f64>, w: &ComplexTensor<f64>, p: Conv2dParams) -> (Vec<usize>, Vec<Complex64>) {
    let (n, cin, h, wd) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    let (cout, cg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let ho = (h + 2 * p.padding - k) / p.stride + 1;
    let wo = (wd + 2 * p.padding - k) / p.stride + 1;
    let og = cout / p.groups;
    let mut out = vec![Complex64::new(0.0, 0.0); n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            let g = o / og;
            for y in 0..ho {
                for x in 0..wo {
                    let (mut re, mut im) = (0.0, 0.0);
                    for c in 0..cg {
                        let ci = g * cg + c;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * p.stride + ky) as isize - p.padding as isize;
                                let ix = (x * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let a = z.get(((b * cin + ci) * h + iy as usize) * wd + ix as usize);
                                let v = w.get(((o * cg + c) * k + ky) * k + kx);
                                re += a.re * v.re - a.im * v.im;
                                im += a.re * v.im + a.im * v.re;
                            }
                        }
                    }
                    out[((b * cout + o) * ho + y) * wo + x] = Complex64::new(re, im);
                }
            }
        }
    }
    (vec![n, cout, ho, wo], out)
}

fn gauss_equivalence() -> Verdict {
    let mut rng = Rng::new(404);
    let (mut gd, mut gn) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let groups = 1 + rng.below(2);
        let cin = groups * (1 + rng.below(3));
        let cout = groups * (1 + rng.below(3));
        let k = 1 + rng.below(4);
        let p = Conv2dParams { stride: 1 + rng.below(2), padding: rng.below(k), groups };
        let (h, w) = (k + rng.below(6), k + rng.below(6));
        let z = gaussian(&[1 + rng.below(3), cin, h, w], &mut rng);
        let wt = gaussian(&[cout, cin / groups, k, k], &mut rng);
        let gauss = conv2d(&z, &wt, p, ConvMethod::Gauss).unwrap();
        let direct = conv2d(&z, &wt, p, ConvMethod::Direct).unwrap();
        let (shape, naive) = naive_conv(&z, &wt, p);
        assert_eq!(gauss.shape(), &shape[..]);
        let naive = ComplexTensor::from_complex(&shape, &naive).unwrap();
        gd = gd.max(rel_inf(&gauss, &direct));
        gn = gn.max(rel_inf(&gauss, &naive));
    }
    check(gd <= 1e-12 && gn <= 1e-12, format!("50 random configurations: gauss vs direct {gd:.1e}, gauss vs nested loops {gn:.1e} (<=1e-12)"))
}

// 5 ------------------------------------------------------------------------

fn wfm_check() -> Verdict {
    let mut rng = Rng::new(505);
    let report = wfm_decomposability_check(&mut rng, 100).unwrap();
    let closed_ok = report.trials.iter().all(|t| (t.closed_form_log_mag - t.brute_log_mag).abs() <= 1e-3);
    // The layer's magnitude against the weighted mean of log-magnitudes
    // computed here.
    let mut layer_err = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(6);
        let zs: Vec<Complex64> = (0..n).map(|_| Complex64::from_polar(rng.uniform(-2.0, 2.0).exp(), rng.uniform(-PI, PI))).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform(0.05, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        let ws: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let want: f64 = zs.iter().zip(&ws).map(|(z, w)| w * z.norm().ln()).sum();
        layer_err = layer_err.max((wfm_layer(&zs, &ws).unwrap().norm().ln() - want).abs());
    }
    check(
        report.passed() && closed_ok && layer_err <= 1e-3 && report.trials.len() == 100,
        format!(
            "100 trials: closed form vs brute force {:.1e} (<=1e-3), joint grid separable {}, wFM layer magnitude {layer_err:.1e}",
            report.max_log_mag_error, report.all_separable
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn encoding_checks() -> Verdict {
    let mut rng = Rng::new(606);
    let (h, w) = (8, 8);
    let rgb: Vec<f64> = (0..3 * h * w).map(|_| rng.uniform01()).collect();
    let img = Tensor::from_vec(&[3, h, w], rgb.clone()).unwrap();
    let back = lab_complex_to_rgb(&rgb_to_lab_complex(&img).unwrap()).unwrap();
    let round = back.data().iter().zip(&rgb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let pixel = |v: [f64; 3]| Tensor::from_vec(&[3, 1, 1], v.to_vec()).unwrap();
    let white = rgb_to_lab_complex(&pixel([1.0; 3])).unwrap().tensor;
    let black = rgb_to_lab_complex(&pixel([0.0; 3])).unwrap().tensor;
    let white_ok = (white.get(0) - Complex64::new(1.0, 0.0)).norm() <= 1e-3 && white.get(1).norm() <= 1e-3;
    let black_ok = black.get(0).norm() <= 1e-9 && black.get(1).norm() <= 1e-9;
    let white_back = lab_complex_to_rgb(&rgb_to_lab_complex(&pixel([1.0; 3])).unwrap()).unwrap();
    let white_rt = white_back.data().iter().all(|v| (v - 1.0).abs() <= 1e-3);

    let sliding = rgb_to_sliding(&img).unwrap();
    let p = h * w;
    let sliding_exact = sliding.encoding == Encoding::Sliding
        && (0..p).all(|k| {
            sliding.tensor.get(k) == Complex64::new(rgb[k], rgb[p + k])
                && sliding.tensor.get(p + k) == Complex64::new(rgb[p + k], rgb[2 * p + k])
        });
    let example = rgb_to_sliding(&pixel([0.2, 0.5, 0.8])).unwrap().tensor;
    let example_ok = example.get(0) == Complex64::new(0.2, 0.5) && example.get(1) == Complex64::new(0.5, 0.8);

    check(
        round <= 1e-3 && white_ok && black_ok && white_rt && sliding_exact && example_ok,
        format!(
            "LAB round trip {round:.1e} (<=1e-3), white anchor {white_ok}, black anchor {black_ok}, white round trip {white_rt}, \
             sliding exact {}",
            sliding_exact && example_ok
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn cifar_dir() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("CDS_DATA_DIR")?);
    [root.join("cifar-10-batches-bin"), root].into_iter().find(|d| d.join("data_batch_1.bin").is_file() && d.join("test_batch.bin").is_file())
}

fn cifar_robustness() -> Verdict {
    let Some(dir) = cifar_dir() else {
        return Blocked("CIFAR-10 binaries not found; set CDS_DATA_DIR to a directory containing cifar-10-batches-bin/".into());
    };
    let splits = load_cifar10_bin(&dir).unwrap().with_encoding(Encoding::Lab);
    let train = splits.train.subset(5000);
    let mut drops = Vec::new();
    for kind in [ModelKind::TypeI, ModelKind::Dcn] {
        let mut model = ModelGraph::<f32>::build(&ModelConfig::new(kind, 10, 2).seed(0)).unwrap();
        let cfg = TrainConfig { steps: 5000, batch_size: 256, validate_every: 500, seed: 0, ..TrainConfig::default() };
        let out = train_loop(&mut model, &train, &splits.val, &cfg, &mut std::io::sink()).unwrap();
        let mut best = out.best.build_model::<f32>().unwrap();
        let curve = robustness_sweep(&mut best, &splits.test, &default_ranges(), 3, 0, 256).unwrap();
        let acc: Vec<f64> = curve.points.iter().map(|p| p.mean_accuracy).collect();
        drops.push((kind, curve.max_deviation(), acc[0] - acc[acc.len() - 1]));
    }
    let (ti, dcn) = (drops[0], drops[1]);
    check(
        ti.1 <= 0.001 && dcn.2 > 0.05,
        format!("type_i max deviation {:.2} pp (<=0.1), dcn drop at pi {:.2} pp (>5)", 100.0 * ti.1, 100.0 * dcn.2),
    )
}

// 8 ------------------------------------------------------------------------

fn synthetic_learning() -> Verdict {
    let data = synth_complex_dataset(SynthSpec::new(10, 500, 32, 0)).unwrap();
    let mut model = ModelGraph::<f32>::build(&ModelConfig::new(ModelKind::TypeI, 10, 2).seed(0)).unwrap();
    let cfg = TrainConfig { steps: 2000, batch_size: 64, validate_every: 100, seed: 0, ..TrainConfig::default() };
    let out = train_loop(&mut model, &data.train, &data.val, &cfg, &mut std::io::sink()).unwrap();
    let best = out.best_val_accuracy.unwrap_or(0.0);
    check(
        out.divergence.is_none() && best >= 0.90,
        format!("type_i, synthetic 10 classes x 500, 2000 steps of batch 64: best validation accuracy {best:.3} (>=0.90)"),
    )
}

// 9 ------------------------------------------------------------------------

fn published_numbers() -> Verdict {
    let count = |k| ModelGraph::<f32>::build(&ModelConfig::new(k, 10, 2)).unwrap().parameter_count();
    let ti = count(ModelKind::TypeI);
    let dev = 100.0 * (ti as f64 - 24_241.0) / 24_241.0;
    Info(format!(
        "not claimed at desk scale; full protocol available via `cds reproduce-table --preset full-protocol`. \
         type_i has {ti} parameters ({dev:+.1}% vs 24,241), type_e {}, dcn {}, real {}",
        count(ModelKind::TypeE),
        count(ModelKind::Dcn),
        count(ModelKind::Real)
    ))
}

// 10 -----------------------------------------------------------------------

fn bias_variance_harness() -> Verdict {
    let labels = vec![0, 1, 2, 1, 0, 2];
    let same = vec![1, 1, 0, 2, 0, 2];
    let a = bias_variance(&[same.clone(), same.clone(), same.clone()], &labels, 3).unwrap();
    let b = bias_variance(&[labels.clone(), labels.clone()], &labels, 3).unwrap();
    let (cat, dog) = (0, 1);
    let c = bias_variance(&[vec![cat], vec![cat], vec![dog]], &[cat], 2).unwrap();
    // Identical replicas: the mode is the prediction itself; bias is the
    // plain error rate, 3 of 6 wrong.
    let identical = a.variance == 0.0 && a.bias == 0.5;
    let correct = b.bias == 0.0 && b.variance == 0.0;
    let worked = c.bias == 0.0 && c.variance == 1.0 / 3.0;
    check(
        identical && correct && worked,
        format!(
            "identical replicas variance {}, always-correct bias {}, (cat,cat,dog) bias {} variance {}",
            a.variance, b.bias, c.bias, c.variance
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Verdict); 10] = [
        (1, "equivariance suite", 60, equivariance_suite),
        (2, "invariance suite", 120, invariance_suite),
        (3, "gradient checks", 300, gradient_checks),
        (4, "gauss-trick equivalence", 30, gauss_equivalence),
        (5, "wFM decomposition", 60, wfm_check),
        (6, "encodings", 60, encoding_checks),
        (7, "CIFAR-10 robustness", 1800, cifar_robustness),
        (8, "synthetic learning", 600, synthetic_learning),
        (9, "published numbers", 60, published_numbers),
        (10, "bias-variance harness", 10, bias_variance_harness),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t = Instant::now();
        let verdict = run();
        let took = t.elapsed();
        let slow = took > Duration::from_secs(limit);
        let (tag, detail) = match verdict {
            Pass(d) if slow => ("FAIL", format!("{d}; too slow")),
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            Blocked(d) => ("BLOCKED", d),
            Info(d) => ("INFO", d),
        };
        failed += (tag == "FAIL") as usize;
        println!("[{tag}] criterion {id} ({name}): {detail} [{:.1} s, limit {limit} s]", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
