//! Complex colour encodings, complex-scale augmentation and phase
//! normalization.
//!
//! Images are real `[3, H, W]` tensors with sRGB values in `[0, 1]`; encoded
//! images are complex `[C, H, W]` tensors.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ctensor::{polar, ComplexTensor, Real, Rng, Tensor};
use crate::{CdsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Three channels carrying the RGB values as real parts.
    #[serde(alias = "rgb")]
    RgbAsReal,
    /// `[R + iG, G + iB]`.
    Sliding,
    /// `[L*/100, (a* + i·b*)/128]`.
    #[serde(alias = "lab_complex")]
    Lab,
    /// Already complex (synthetic data); no colour conversion.
    Native,
}

impl Encoding {
    pub fn channels(self) -> usize {
        match self {
            Encoding::RgbAsReal => 3,
            Encoding::Sliding | Encoding::Lab | Encoding::Native => 2,
        }
    }
}

impl std::str::FromStr for Encoding {
    type Err = CdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" | "rgb_as_real" => Ok(Encoding::RgbAsReal),
            "sliding" => Ok(Encoding::Sliding),
            "lab" | "lab_complex" => Ok(Encoding::Lab),
            "native" => Ok(Encoding::Native),
            other => Err(CdsError::Config(format!("unknown encoding '{other}' (expected sliding, lab or rgb)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub tensor: ComplexTensor<f64>,
    pub encoding: Encoding,
}

fn rgb_dims(rgb: &Tensor<f64>) -> Result<(usize, usize)> {
    match *rgb.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(CdsError::shape(format!("expected an RGB image [3,H,W], got {s:?}"))),
    }
}

fn clamped(rgb: &Tensor<f64>) -> Vec<f64> {
    let out_of_range = rgb.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    if out_of_range > 0 {
        log::warn!("{out_of_range} pixel values outside [0, 1] clamped");
    }
    rgb.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

pub fn rgb_to_real(rgb: &Tensor<f64>) -> Result<EncodedImage> {
    let (h, w) = rgb_dims(rgb)?;
    let n = 3 * h * w;
    let tensor = ComplexTensor::from_planes(&[3, h, w], clamped(rgb), vec![0.0; n])?;
    Ok(EncodedImage { tensor, encoding: Encoding::RgbAsReal })
}

pub fn rgb_to_sliding(rgb: &Tensor<f64>) -> Result<EncodedImage> {
    let (h, w) = rgb_dims(rgb)?;
    let p = h * w;
    let v = clamped(rgb);
    let (r, g, b) = (&v[..p], &v[p..2 * p], &v[2 * p..]);
    let re = [r, g].concat();
    let im = [g, b].concat();
    let tensor = ComplexTensor::from_planes(&[2, h, w], re, im)?;
    Ok(EncodedImage { tensor, encoding: Encoding::Sliding })
}

// sRGB primaries, D65 white.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

/// `(L*, a*, b*)` of one sRGB pixel.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| RGB_TO_XYZ[i][j] * lin[j]).sum());
    let f: [f64; 3] = std::array::from_fn(|i| lab_f(xyz[i] / WHITE[i]));
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Inverse of [`srgb_to_lab`], clamped to the sRGB gamut.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let xyz: [f64; 3] = std::array::from_fn(|i| WHITE[i] * lab_f_inv(f[i]));
    let m = invert3(&RGB_TO_XYZ);
    std::array::from_fn(|i| linear_to_srgb((0..3).map(|j| m[i][j] * xyz[j]).sum()).clamp(0.0, 1.0))
}

pub fn rgb_to_lab_complex(rgb: &Tensor<f64>) -> Result<EncodedImage> {
    let (h, w) = rgb_dims(rgb)?;
    let p = h * w;
    let v = clamped(rgb);
    let mut re = vec![0.0; 2 * p];
    let mut im = vec![0.0; 2 * p];
    for k in 0..p {
        let [l, a, b] = srgb_to_lab([v[k], v[p + k], v[2 * p + k]]);
        re[k] = l / 100.0;
        re[p + k] = a / 128.0;
        im[p + k] = b / 128.0;
    }
    let tensor = ComplexTensor::from_planes(&[2, h, w], re, im)?;
    Ok(EncodedImage { tensor, encoding: Encoding::Lab })
}

/// Decodes a LAB-encoded image back to sRGB. Only the real part of the
/// luminance channel is used.
pub fn lab_complex_to_rgb(enc: &EncodedImage) -> Result<Tensor<f64>> {
    if enc.encoding != Encoding::Lab {
        return Err(CdsError::Format(format!("expected a lab encoded image, got {:?}", enc.encoding)));
    }
    let &[2, h, w] = enc.tensor.shape() else {
        return Err(CdsError::shape(format!("lab image must be [2,H,W], got {:?}", enc.tensor.shape())));
    };
    let p = h * w;
    let (re, im) = (enc.tensor.re(), enc.tensor.im());
    let mut out = vec![0.0; 3 * p];
    for k in 0..p {
        let rgb = lab_to_srgb([re[k] * 100.0, re[p + k] * 128.0, im[p + k] * 128.0]);
        for c in 0..3 {
            out[c * p + k] = rgb[c];
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

pub fn encode(rgb: &Tensor<f64>, encoding: Encoding) -> Result<EncodedImage> {
    match encoding {
        Encoding::RgbAsReal => rgb_to_real(rgb),
        Encoding::Sliding => rgb_to_sliding(rgb),
        Encoding::Lab => rgb_to_lab_complex(rgb),
        Encoding::Native => Err(CdsError::Config("native encoding applies to complex data only".into())),
    }
}

/// Sampling range for a random complex scale `s = e^{ρ + iθ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    /// Phases are drawn uniformly from `[−theta_max, theta_max]`.
    pub theta_max: f64,
    /// Log-magnitudes are drawn uniformly from `[log_mag_min, log_mag_max]`.
    pub log_mag_min: f64,
    pub log_mag_max: f64,
}

impl RangeSpec {
    pub fn phase(theta_max: f64) -> Self {
        Self { theta_max, log_mag_min: 0.0, log_mag_max: 0.0 }
    }

    pub fn sample(&self, rng: &mut Rng) -> Complex64 {
        let theta = rng.uniform(-self.theta_max, self.theta_max);
        let rho = rng.uniform(self.log_mag_min, self.log_mag_max);
        Complex64::from_polar(rho.exp(), theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Fixed(Complex64),
    Range(RangeSpec),
}

impl Scale {
    pub fn resolve(&self, rng: &mut Rng) -> Complex64 {
        match self {
            Scale::Fixed(s) => *s,
            Scale::Range(r) => r.sample(rng),
        }
    }
}

/// Multiplies every channel by one complex scale (fixed or sampled).
pub fn complex_scale_transform(enc: &EncodedImage, scale: &Scale, rng: &mut Rng) -> EncodedImage {
    let s = scale.resolve(rng);
    EncodedImage { tensor: enc.tensor.scale(s), encoding: enc.encoding }
}

/// Multiplies item `i` of a batch `[N, ...]` by `scales[i]`.
pub fn scale_items<T: Real>(x: &mut ComplexTensor<T>, scales: &[Complex64]) -> Result<()> {
    let n = x.shape().first().copied().unwrap_or(0);
    if scales.len() != n || n == 0 {
        return Err(CdsError::shape(format!("{} scales for a batch of {n}", scales.len())));
    }
    let inner = x.len() / n;
    let (re, im) = x.planes_mut();
    for (i, s) in scales.iter().enumerate() {
        let (sr, si) = (T::lit(s.re), T::lit(s.im));
        for k in i * inner..(i + 1) * inner {
            let (a, b) = (re[k], im[k]);
            re[k] = a * sr - b * si;
            im[k] = a * si + b * sr;
        }
    }
    Ok(())
}

/// Rotates the image by `e^{−iφ̂}`, where `φ̂` is the circular mean phase of
/// its nonzero pixels. An all-zero image is returned unchanged.
pub fn phase_normalize(enc: &EncodedImage) -> EncodedImage {
    let sum = enc.tensor.iter().filter(|z| z.norm() > 0.0).fold(Complex64::new(0.0, 0.0), |acc, z| acc + z / z.norm());
    if sum.norm() == 0.0 {
        return enc.clone();
    }
    let (_, phi) = polar(sum);
    EncodedImage { tensor: enc.tensor.scale(Complex64::from_polar(1.0, -phi)), encoding: enc.encoding }
}

/// Parses a binary 8-bit PPM (`P6`) into `[3, H, W]` values in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CdsError::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(CdsError::Format("not a binary PPM (P6) file".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| CdsError::Format(format!("bad PPM header field '{s}'")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let max = num(token()?)?;
    if max != 255 || w == 0 || h == 0 {
        return Err(CdsError::Format("only non-empty 8-bit PPM images (maxval 255) are supported".into()));
    }
    let body = bytes.get(pos + 1..).unwrap_or(&[]);
    if body.len() < 3 * w * h {
        return Err(CdsError::Format("PPM pixel data truncated".into()));
    }
    let p = w * h;
    let mut out = vec![0.0; 3 * p];
    for k in 0..p {
        for c in 0..3 {
            out[c * p + k] = body[3 * k + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

/// Writes `[3, H, W]` values in `[0, 1]` as a binary 8-bit PPM.
pub fn write_ppm(rgb: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = rgb_dims(rgb)?;
    let p = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for k in 0..p {
        for c in 0..3 {
            out.push((rgb.data()[c * p + k].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn pixel(r: f64, g: f64, b: f64) -> Tensor<f64> {
        Tensor::from_vec(&[3, 1, 1], vec![r, g, b]).unwrap()
    }

    #[test]
    fn sliding_examples() {
        let e = rgb_to_sliding(&pixel(0.2, 0.5, 0.8)).unwrap().tensor;
        assert_eq!(e.get(0), Complex64::new(0.2, 0.5));
        assert_eq!(e.get(1), Complex64::new(0.5, 0.8));
        let g = rgb_to_sliding(&pixel(0.3, 0.3, 0.3)).unwrap().tensor;
        for z in g.iter() {
            assert_eq!(polar(z).1, FRAC_PI_4);
        }
        assert_eq!(rgb_to_sliding(&pixel(0.0, 0.0, 0.0)).unwrap().tensor.max_abs(), 0.0);
    }

    #[test]
    fn lab_anchor_pixels() {
        let w = rgb_to_lab_complex(&pixel(1.0, 1.0, 1.0)).unwrap().tensor;
        assert!((w.get(0) - Complex64::new(1.0, 0.0)).norm() <= 1e-3);
        assert!(w.get(1).norm() <= 1e-3);
        let b = rgb_to_lab_complex(&pixel(0.0, 0.0, 0.0)).unwrap().tensor;
        assert!(b.max_abs() <= 1e-12);
    }

    #[test]
    fn mid_red_is_first_quadrant() {
        let e = rgb_to_lab_complex(&pixel(0.5, 0.0, 0.0)).unwrap().tensor;
        let z = e.get(1);
        assert!(z.re > 0.0 && z.im > 0.0);
        // Lab of (0.5, 0, 0) is about (25.4, 47.9, 37.9).
        assert!((e.get(0).re * 100.0 - 25.42).abs() < 0.1);
        assert!((z.re * 128.0 - 47.9).abs() < 0.2 && (z.im * 128.0 - 37.9).abs() < 0.2);
    }

    #[test]
    fn lab_inverse_and_hue_rotation() {
        let img = Tensor::from_vec(&[3, 1, 3], vec![0.1, 0.9, 0.5, 0.7, 0.2, 0.5, 0.3, 0.4, 0.5]).unwrap();
        let enc = rgb_to_lab_complex(&img).unwrap();
        let back = lab_complex_to_rgb(&enc).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-3);
        }
        let white = lab_complex_to_rgb(&rgb_to_lab_complex(&pixel(1.0, 1.0, 1.0)).unwrap()).unwrap();
        assert!(white.data().iter().all(|v| (v - 1.0).abs() <= 1e-3));

        let mut rotated = enc.clone();
        let (re, im) = rotated.tensor.planes_mut();
        for k in 3..6 {
            let z = Complex64::new(re[k], im[k]) * Complex64::from_polar(1.0, 1.0);
            re[k] = z.re;
            im[k] = z.im;
        }
        assert_eq!(&rotated.tensor.re()[..3], &enc.tensor.re()[..3]);
        assert!(lab_complex_to_rgb(&rgb_to_sliding(&img).unwrap()).is_err());
    }

    #[test]
    fn scaling() {
        let enc = rgb_to_sliding(&pixel(0.2, 0.5, 0.8)).unwrap();
        let mut rng = Rng::new(0);
        assert_eq!(complex_scale_transform(&enc, &Scale::Fixed(Complex64::new(1.0, 0.0)), &mut rng), enc);
        let neg = complex_scale_transform(&enc, &Scale::Fixed(Complex64::from_polar(1.0, PI)), &mut rng);
        for (a, b) in neg.tensor.iter().zip(enc.tensor.iter()) {
            assert!((a + b).norm() < 1e-15);
        }
        let draw = |seed| {
            let mut r = Rng::new(seed);
            (0..5).map(|_| RangeSpec::phase(PI).sample(&mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert!(draw(4).iter().all(|s| (s.norm() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn phase_normalization() {
        let t = ComplexTensor::from_complex(&[1, 2, 2], &[Complex64::from_polar(1.0, FRAC_PI_4); 4]).unwrap();
        let enc = EncodedImage { tensor: t, encoding: Encoding::Sliding };
        let n = phase_normalize(&enc);
        for z in n.tensor.iter() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        let zero = EncodedImage { tensor: ComplexTensor::zeros(&[1, 2, 2]).unwrap(), encoding: Encoding::Sliding };
        assert_eq!(phase_normalize(&zero), zero);
    }

    #[test]
    fn ppm_round_trip() {
        let img = Tensor::from_vec(&[3, 1, 2], vec![0.0, 1.0, 51.0 / 255.0, 0.2, 1.0, 0.0]).unwrap();
        let bytes = write_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        let back = read_ppm(&bytes).unwrap();
        assert_eq!(back, img);
        let commented = b"P6 # c\n2 1\n# x\n255\n\x00\x00\x00\xff\xff\xff";
        assert_eq!(read_ppm(commented).unwrap().data()[1], 1.0);
        assert!(read_ppm(b"P3\n1 1\n255\n").is_err());
    }
}
