//! Browser-side operations for the demo page. Images cross the boundary as
//! RGBA bytes in row-major order, the layout of `ImageData`.

use cds::autodiff::Mode;
use cds::ctensor::{ComplexTensor, Tensor};
use cds::encodings::{lab_complex_to_rgb, rgb_to_lab_complex, EncodedImage, Encoding};
use cds::layers::GtRelu;
use cds::models::{ModelConfig, ModelGraph, ModelKind};
use num_complex::Complex64;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba_to_rgb(rgba: &[u8], width: usize, height: usize) -> Result<Tensor<f64>, JsError> {
    let p = width * height;
    if rgba.len() != 4 * p {
        return Err(js_err(format!("expected {} RGBA bytes for {width}×{height}, got {}", 4 * p, rgba.len())));
    }
    let mut planes = vec![0.0; 3 * p];
    for k in 0..p {
        for c in 0..3 {
            planes[c * p + k] = rgba[4 * k + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, height, width], planes).map_err(js_err)
}

fn rgb_to_rgba(rgb: &Tensor<f64>) -> Vec<u8> {
    let p = rgb.len() / 3;
    let d = rgb.data();
    let mut out = vec![255u8; 4 * p];
    for k in 0..p {
        for c in 0..3 {
            out[4 * k + c] = (d[c * p + k] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Multiplies the LAB encoding of an image by `mag·e^{i·phase}` and decodes
/// it again. With `chroma_only` the luminance channel is left alone, so the
/// phase becomes a pure hue rotation in the a*b* plane.
#[wasm_bindgen]
pub fn lab_distort(rgba: &[u8], width: usize, height: usize, mag: f64, phase: f64, chroma_only: bool) -> Result<Vec<u8>, JsError> {
    let enc = rgb_to_lab_complex(&rgba_to_rgb(rgba, width, height)?).map_err(js_err)?;
    let s = Complex64::from_polar(mag, phase);
    let p = width * height;
    let scaled: Vec<Complex64> =
        enc.tensor.iter().enumerate().map(|(k, z)| if chroma_only && k < p { z } else { z * s }).collect();
    let tensor = ComplexTensor::from_complex(enc.tensor.shape(), &scaled).map_err(js_err)?;
    let rgb = lab_complex_to_rgb(&EncodedImage { tensor, encoding: Encoding::Lab }).map_err(js_err)?;
    Ok(rgb_to_rgba(&rgb))
}

/// HSV-style colour for a complex value: hue from the phase, brightness
/// rising with the magnitude.
fn domain_color(z: Complex64) -> [u8; 3] {
    let (r, theta) = z.to_polar();
    let hue = (theta.rem_euclid(std::f64::consts::TAU)) / std::f64::consts::TAU * 6.0;
    let value = 1.0 - 0.85 / (1.0 + r * r);
    let grid = (r.fract() - 0.5).abs() * 2.0;
    let value = value * (0.8 + 0.2 * grid);
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (a, b, c) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [a, b, c].map(|v| (v * value * 255.0).round() as u8)
}

/// Domain colouring of the plane `[-extent, extent]²` (left half of the
/// output) next to its image under GTReLU with the given `r`, `c` and `ω`
/// (right half). Returns `2·size × size` RGBA bytes.
#[wasm_bindgen]
pub fn gtrelu_domain(size: usize, extent: f64, r: f64, c_mag: f64, c_phase: f64, omega: f64) -> Result<Vec<u8>, JsError> {
    if size == 0 {
        return Err(js_err("size must be positive"));
    }
    let mut layer = GtRelu::<f64>::new(1, r).map_err(js_err)?;
    layer.set_scale(&[Complex64::from_polar(c_mag, c_phase)], &[omega]).map_err(js_err)?;
    let coord = |i: usize| extent * (2.0 * (i as f64 + 0.5) / size as f64 - 1.0);
    let plane: Vec<Complex64> =
        (0..size * size).map(|k| Complex64::new(coord(k % size), -coord(k / size))).collect();
    let x = ComplexTensor::from_complex(&[1, 1, size, size], &plane).map_err(js_err)?;
    let y = layer.apply(&x).map_err(js_err)?;
    let w = 2 * size;
    let mut out = vec![255u8; 4 * w * size];
    for (k, (zin, zout)) in plane.iter().zip(y.iter()).enumerate() {
        let (row, col) = (k / size, k % size);
        for (offset, z) in [(0, *zin), (size, zout)] {
            let px = 4 * (row * w + col + offset);
            out[px..px + 3].copy_from_slice(&domain_color(z));
        }
    }
    Ok(out)
}

/// Relative change of the logits when the input is multiplied by a complex
/// scalar, for an untrained invariant network and a plain complex network.
#[wasm_bindgen]
pub struct InvarianceProbe {
    size: usize,
    models: Vec<(ModelKind, ModelGraph<f64>)>,
}

#[wasm_bindgen]
impl InvarianceProbe {
    /// Networks for `size × size` LAB images and 10 classes, seeded.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u32) -> Result<InvarianceProbe, JsError> {
        let models = [ModelKind::TypeI, ModelKind::Dcn]
            .into_iter()
            .map(|kind| {
                let cfg = ModelConfig::new(kind, 10, 2).image_size(size).seed(seed as u64);
                ModelGraph::build(&cfg).map(|m| (kind, m))
            })
            .collect::<cds::Result<_>>()
            .map_err(js_err)?;
        Ok(Self { size, models })
    }

    /// JSON list of `{model, parameters, relative_change, class, scaled_class}`.
    pub fn probe(&mut self, rgba: &[u8], mag: f64, phase: f64) -> Result<String, JsError> {
        let enc = rgb_to_lab_complex(&rgba_to_rgb(rgba, self.size, self.size)?).map_err(js_err)?;
        let x = enc.tensor.reshape(&[1, 2, self.size, self.size]).map_err(js_err)?;
        let sx = x.scale(Complex64::from_polar(mag, phase));
        let mut rows = Vec::new();
        for (kind, model) in &mut self.models {
            let a = model.logits(&x, Mode::Eval).map_err(js_err)?;
            let b = model.logits(&sx, Mode::Eval).map_err(js_err)?;
            let norm = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            rows.push(serde_json::json!({
                "model": kind.name(),
                "parameters": model.parameter_count(),
                "relative_change": diff / norm.max(f64::MIN_POSITIVE),
                "class": cds::models::argmax_rows(&a)[0],
                "scaled_class": cds::models::argmax_rows(&b)[0],
            }));
        }
        Ok(serde_json::Value::Array(rows).to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize) -> Vec<u8> {
        (0..w * h).flat_map(|k| [(k * 37 % 256) as u8, (k * 91 % 256) as u8, (k * 13 % 256) as u8, 255]).collect()
    }

    #[test]
    fn identity_scale_round_trips_colours() {
        let img = test_image(5, 3);
        let out = lab_distort(&img, 5, 3, 1.0, 0.0, false).unwrap();
        for (a, b) in img.iter().zip(&out) {
            assert!((*a as i32 - *b as i32).abs() <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn chroma_rotation_keeps_grey_pixels() {
        let img: Vec<u8> = [90u8, 90, 90, 255, 200, 200, 200, 255].to_vec();
        let out = lab_distort(&img, 2, 1, 1.0, 2.0, true).unwrap();
        for (a, b) in img.iter().zip(&out) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn gtrelu_panel_shapes_and_lower_half_plane() {
        let size = 8;
        let out = gtrelu_domain(size, 2.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(out.len(), 4 * 2 * size * size);
        // Points with non-negative phase pass through unchanged at r = 0,
        // so the top row looks the same in both panels.
        let w = 2 * size;
        for col in 0..size {
            assert_eq!(out[4 * col..4 * col + 3], out[4 * (col + size)..4 * (col + size) + 3]);
        }
        // The lower half plane is folded onto the positive real axis.
        let row = size - 1;
        let px = 4 * (row * w + size);
        assert_eq!(out[px..px + 3], domain_color(Complex64::new(2f64.hypot(2.0) * (7.0 / 8.0), 0.0)));
    }

    #[test]
    fn probe_separates_invariant_and_plain_networks() {
        let size = 16;
        let mut probe = InvarianceProbe::new(size, 3).unwrap();
        let rows: serde_json::Value = serde_json::from_str(&probe.probe(&test_image(size, size), 0.5, 1.3).unwrap()).unwrap();
        let change = |i: usize| rows[i]["relative_change"].as_f64().unwrap();
        assert_eq!(rows[0]["model"], "type_i");
        assert!(change(0) < 1e-6, "{}", change(0));
        assert!(change(1) > 1e-3, "{}", change(1));
    }
}
