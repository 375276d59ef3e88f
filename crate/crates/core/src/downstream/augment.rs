//! Training-time image augmentation: random resized crop, rotation and color jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Smallest crop area as a fraction of the image.
    pub crop_scale_min: f64,
    /// Rotation range in degrees, applied symmetrically.
    pub rotation_deg: f64,
    /// Brightness, contrast and saturation factors are drawn from `1 +- jitter`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            crop_scale_min: 0.8,
            rotation_deg: 30.0,
            jitter: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(Error::config("downstream.augment.crop_scale_min", "must lie in (0, 1]"));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg <= 180.0) {
            return Err(Error::config("downstream.augment.rotation_deg", "must lie in [0, 180]"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config("downstream.augment.jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn bilinear(src: &[f32], side: usize, y: f64, x: f64, c: usize) -> f32 {
    let max = (side - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(side - 1), (x0 + 1).min(side - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let at = |yy: usize, xx: usize| src[(yy * side + xx) * 3 + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Crops a random square of area fraction `U(scale_min, 1)` and resizes it back.
pub fn random_resized_crop<R: Rng + ?Sized>(img: &[f32], side: usize, scale_min: f64, rng: &mut R) -> Vec<f32> {
    let frac = rng.random_range(scale_min..=1.0).sqrt();
    let crop = side as f64 * frac;
    let oy = rng.random_range(0.0..=(side as f64 - crop));
    let ox = rng.random_range(0.0..=(side as f64 - crop));
    let step = crop / side as f64;
    let mut out = Vec::with_capacity(img.len());
    for y in 0..side {
        for x in 0..side {
            let sy = oy + (y as f64 + 0.5) * step - 0.5;
            let sx = ox + (x as f64 + 0.5) * step - 0.5;
            for c in 0..3 {
                out.push(bilinear(img, side, sy, sx, c));
            }
        }
    }
    out
}

/// Rotates about the image center, replicating edge pixels.
pub fn rotate(img: &[f32], side: usize, degrees: f64) -> Vec<f32> {
    let (s, co) = degrees.to_radians().sin_cos();
    let mid = (side as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(img.len());
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - mid, x as f64 - mid);
            let sy = mid + co * dy - s * dx;
            let sx = mid + s * dy + co * dx;
            for c in 0..3 {
                out.push(bilinear(img, side, sy, sx, c));
            }
        }
    }
    out
}

/// Brightness, contrast and saturation jitter.
pub fn color_jitter<R: Rng + ?Sized>(img: &mut [f32], strength: f64, rng: &mut R) {
    if strength == 0.0 {
        return;
    }
    let mut draw = || rng.random_range(1.0 - strength..=1.0 + strength) as f32;
    let (b, c, s) = (draw(), draw(), draw());
    let n = (img.len() / 3) as f32;
    let mean = img.iter().sum::<f32>() / (3.0 * n);
    for px in img.chunks_exact_mut(3) {
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            let sat = gray + (*v - gray) * s;
            let con = mean + (sat - mean) * c;
            *v = (con * b).clamp(0.0, 1.0);
        }
    }
}

/// Applies the configured augmentations to one HWC image.
pub fn augment<R: Rng + ?Sized>(cfg: &AugmentConfig, img: &[f32], side: usize, rng: &mut R) -> Vec<f32> {
    if !cfg.enabled {
        return img.to_vec();
    }
    let mut out = random_resized_crop(img, side, cfg.crop_scale_min, rng);
    if cfg.rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        out = rotate(&out, side, deg);
    }
    color_jitter(&mut out, cfg.jitter, rng);
    out
}
