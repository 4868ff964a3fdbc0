use std::f64::consts::PI;

use cds::ctensor::{conv2d, conv2d_direct, ComplexTensor, Conv2dParams, ConvMethod};
use cds::encodings::{lab_to_srgb, srgb_to_lab};
use cds::layers::{arcdist, manifold_distance, wfm_layer};
use num_complex::Complex64;
use proptest::prelude::*;

fn nonzero() -> impl Strategy<Value = Complex64> {
    (-3.0f64..3.0, -PI..PI).prop_map(|(l, p)| Complex64::from_polar(l.exp(), p))
}

fn scale() -> impl Strategy<Value = Complex64> {
    (-1.0f64..1.0, -PI..PI).prop_map(|(l, p)| Complex64::from_polar(10f64.powf(l), p))
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = ComplexTensor<f64>> {
    let n: usize = shape.iter().product();
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n).prop_map(move |v| {
        let z: Vec<Complex64> = v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect();
        ComplexTensor::from_complex(&shape, &z).unwrap()
    })
}

proptest! {
    #[test]
    fn manifold_distance_is_a_metric(a in nonzero(), b in nonzero(), c in nonzero()) {
        let d = manifold_distance::<f64>;
        prop_assert!(d(a, a) < 1e-12);
        prop_assert!((d(a, b) - d(b, a)).abs() < 1e-12);
        prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-12);
    }

    #[test]
    fn manifold_distance_ignores_joint_scaling(a in nonzero(), b in nonzero(), s in scale()) {
        prop_assert!((manifold_distance(a * s, b * s) - manifold_distance(a, b)).abs() < 1e-10);
    }

    #[test]
    fn arcdist_stays_on_half_circle(a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let d = arcdist(a, b);
        prop_assert!((0.0..=PI + 1e-12).contains(&d));
        prop_assert!((arcdist(a + 2.0 * PI, b) - d).abs() < 1e-9);
    }

    // Phases within one radian keep the mean unique.
    #[test]
    fn wfm_follows_complex_scaling(
        pts in proptest::collection::vec((-2.0f64..2.0, -0.5f64..0.5, 0.1f64..1.0), 1..6),
        s in scale(),
    ) {
        let zs: Vec<Complex64> = pts.iter().map(|&(l, p, _)| Complex64::from_polar(l.exp(), p)).collect();
        let total: f64 = pts.iter().map(|p| p.2).sum();
        let mut ws: Vec<f64> = pts.iter().map(|p| p.2 / total).collect();
        let drift = 1.0 - ws.iter().sum::<f64>();
        ws[0] += drift;
        let m = wfm_layer(&zs, &ws).unwrap();
        let scaled: Vec<Complex64> = zs.iter().map(|z| z * s).collect();
        let ms = wfm_layer(&scaled, &ws).unwrap();
        prop_assert!((ms - m * s).norm() <= 1e-6 * (m * s).norm(), "{ms} vs {}", m * s);
    }

    #[test]
    fn lab_round_trips_in_gamut(r in 0.0f64..1.0, g in 0.0f64..1.0, b in 0.0f64..1.0) {
        let back = lab_to_srgb(srgb_to_lab([r, g, b]));
        for (x, y) in [r, g, b].iter().zip(back) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn convolution_is_complex_linear(
        x in tensor(vec![1, 2, 5, 5]),
        w in tensor(vec![3, 2, 3, 3]),
        s in scale(),
        padding in 0usize..2,
        stride in 1usize..3,
    ) {
        let params = Conv2dParams { stride, padding, groups: 1 };
        let base = conv2d(&x, &w, params, ConvMethod::Gauss).unwrap();
        let direct = conv2d_direct(&x, &w, params).unwrap();
        let scaled = conv2d(&x.scale(s), &w, params, ConvMethod::Gauss).unwrap();
        for i in 0..base.len() {
            prop_assert!((base.get(i) - direct.get(i)).norm() < 1e-12);
            prop_assert!((scaled.get(i) - base.get(i) * s).norm() < 1e-11);
        }
    }
}
