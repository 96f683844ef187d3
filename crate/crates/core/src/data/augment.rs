//! Cropping, normalization and colour jitter.

use rand::seq::SliceRandom;
use rand::Rng;

use super::ppm::RgbImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Top-left offset of the centred `size` window (rounded down).
pub fn center_offset(full: usize, size: usize) -> usize {
    (full - size) / 2
}

pub fn crop(img: &RgbImage, x0: usize, y0: usize, size: usize) -> Result<RgbImage> {
    if x0 + size > img.width || y0 + size > img.height || size == 0 {
        return Err(Error::dim(format!(
            "crop {size} at ({x0},{y0}) exceeds image {}x{}",
            img.width, img.height
        )));
    }
    let mut data = Vec::with_capacity(size * size * 3);
    for y in y0..y0 + size {
        let start = 3 * (y * img.width + x0);
        data.extend_from_slice(&img.data[start..start + 3 * size]);
    }
    Ok(RgbImage {
        width: size,
        height: size,
        data,
    })
}

pub fn center_crop(img: &RgbImage, size: usize) -> Result<RgbImage> {
    if size > img.width || size > img.height {
        return Err(Error::dim(format!("crop {size} exceeds image {}x{}", img.width, img.height)));
    }
    crop(img, center_offset(img.width, size), center_offset(img.height, size), size)
}

pub fn random_crop<R: Rng + ?Sized>(img: &RgbImage, size: usize, rng: &mut R) -> Result<RgbImage> {
    if size > img.width || size > img.height {
        return Err(Error::dim(format!("crop {size} exceeds image {}x{}", img.width, img.height)));
    }
    let x0 = rng.gen_range(0..=img.width - size);
    let y0 = rng.gen_range(0..=img.height - size);
    crop(img, x0, y0, size)
}

/// Planar `[3, H, W]` tensor with values mapped from `[0, 255]` to `[−1, 1]`.
pub fn to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (w * h), i % (w * h));
        T::lit(f64::from(img.data[3 * p + c]) / 127.5 - 1.0)
    })
}

/// Jitter strengths for brightness, contrast, saturation and hue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterStrengths {
    pub const NONE: Self = Self {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.brightness, self.contrast, self.saturation, self.hue];
        if all.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config(format!("jitter strengths must lie in [0,1], got {all:?}")));
        }
        Ok(())
    }
}

/// Concrete factors drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in radians.
    pub hue: f64,
    /// Application order: indices into (brightness, contrast, saturation, hue).
    pub order: [usize; 4],
}

impl JitterFactors {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
        order: [0, 1, 2, 3],
    };

    pub fn sample<R: Rng + ?Sized>(s: &JitterStrengths, rng: &mut R) -> Self {
        let mut factor = |k: f64| if k > 0.0 { rng.gen_range(1.0 - k..=1.0 + k) } else { 1.0 };
        let brightness = factor(s.brightness);
        let contrast = factor(s.contrast);
        let saturation = factor(s.saturation);
        let hue = if s.hue > 0.0 {
            rng.gen_range(-s.hue..=s.hue) * std::f64::consts::PI
        } else {
            0.0
        };
        let mut order = [0, 1, 2, 3];
        order.shuffle(rng);
        Self {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

const RGB_TO_YIQ: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.596, -0.274, -0.322],
    [0.211, -0.523, 0.312],
];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r: usize, k: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
        m[r1][k1] * m[r2][k2] - m[r1][k2] * m[r2][k1]
    };
    let det: f64 = (0..3).map(|k| m[0][k] * c(0, k)).sum();
    std::array::from_fn(|i| std::array::from_fn(|j| c(j, i) / det))
}

/// Applies colour jitter to a `[3, H, W]` image in `[−1, 1]`.
///
/// Work happens in `[0, 1]`. Brightness scales every channel; contrast blends
/// toward the mean luma of the image; saturation blends toward each pixel's
/// luma; hue rotates the chroma plane of YIQ,
///
/// ```text
/// Y =  0.299 R + 0.587 G + 0.114 B
/// I =  0.596 R − 0.274 G − 0.322 B
/// Q =  0.211 R − 0.523 G + 0.312 B
/// (I, Q) ← (I cos θ − Q sin θ, I sin θ + Q cos θ)
/// ```
///
/// and converts back with the exact inverse of that matrix, leaving Y untouched. Values are
/// clamped to `[0, 1]` after every step.
pub fn apply_jitter<T: Scalar>(img: &Tensor<T>, f: &JitterFactors) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("colour jitter expects [3,H,W], got {s:?}")));
    }
    if *f == JitterFactors::IDENTITY {
        return Ok(img.clone());
    }
    let n = s[1] * s[2];
    let d = img.data();
    let mut px: Vec<[f64; 3]> = (0..n)
        .map(|i| std::array::from_fn(|c| (d[c * n + i].as_f64() + 1.0) * 0.5))
        .collect();
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    for &op in &f.order {
        match op {
            0 if f.brightness != 1.0 => {
                for p in &mut px {
                    *p = p.map(|v| clamp(v * f.brightness));
                }
            }
            1 if f.contrast != 1.0 => {
                let mean = px.iter().map(|p| luma(p[0], p[1], p[2])).sum::<f64>() / n as f64;
                for p in &mut px {
                    *p = p.map(|v| clamp(mean + f.contrast * (v - mean)));
                }
            }
            2 if f.saturation != 1.0 => {
                for p in &mut px {
                    let y = luma(p[0], p[1], p[2]);
                    *p = p.map(|v| clamp(y + f.saturation * (v - y)));
                }
            }
            3 if f.hue != 0.0 => {
                let (sn, cs) = f.hue.sin_cos();
                let m = &RGB_TO_YIQ;
                let inv = invert3(m);
                for p in &mut px {
                    let yiq: [f64; 3] = std::array::from_fn(|r| (0..3).map(|k| m[r][k] * p[k]).sum());
                    let (i, q) = (yiq[1] * cs - yiq[2] * sn, yiq[1] * sn + yiq[2] * cs);
                    let rot = [yiq[0], i, q];
                    *p = std::array::from_fn(|r| clamp((0..3).map(|k| inv[r][k] * rot[k]).sum()));
                }
            }
            _ => {}
        }
    }
    let mut out = vec![T::zero(); 3 * n];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            out[c * n + i] = T::lit(p[c] * 2.0 - 1.0);
        }
    }
    Tensor::new(s, out)
}

/// Samples factors from `strengths` and applies them.
pub fn color_jitter<T: Scalar, R: Rng + ?Sized>(
    img: &Tensor<T>,
    strengths: &JitterStrengths,
    rng: &mut R,
) -> Result<Tensor<T>> {
    strengths.validate()?;
    if strengths.is_none() {
        return Ok(img.clone());
    }
    let f = JitterFactors::sample(strengths, rng);
    apply_jitter(img, &f)
}
