//! Stochastic augmentation, shared by training and test-time augmentation.
//!
//! A draw is split in two steps: [`sample_augmentation`] turns parameter
//! ranges into a concrete [`AugmentationSpec`], and [`apply_augmentation`]
//! applies it deterministically. Geometry runs first (rotate, translate,
//! flip, all zero-padded) followed by photometric shifts and contrast.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;

/// Augmentation ranges. Shifts are sampled symmetrically in `[-r, r]`,
/// contrast as a multiplier in `[1 - g, 1 + g]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub translate_px: u32,
    /// Rotation angles are drawn from `[0, rotate_deg)`.
    pub rotate_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub intensity_shift: f64,
    pub color_shift: f64,
    pub contrast_shift: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            translate_px: 20,
            rotate_deg: 360.0,
            flip_h: true,
            flip_v: true,
            intensity_shift: 20.0 / 256.0,
            color_shift: 30.0 / 256.0,
            contrast_shift: 0.1,
        }
    }
}

impl AugmentParams {
    /// Ranges that produce the identity transform.
    pub fn none() -> Self {
        Self {
            translate_px: 0,
            rotate_deg: 0.0,
            flip_h: false,
            flip_v: false,
            intensity_shift: 0.0,
            color_shift: 0.0,
            contrast_shift: 0.0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let reals = [
            self.rotate_deg,
            self.intensity_shift,
            self.color_shift,
            self.contrast_shift,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) || self.rotate_deg > 360.0 {
            return Err(crate::Error::InvalidConfig(format!(
                "augmentation ranges must be non-negative, rotation <= 360: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One concrete augmentation draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub dx: i32,
    pub dy: i32,
    /// Counter-clockwise rotation in degrees.
    pub theta: f64,
    pub do_flip_h: bool,
    pub do_flip_v: bool,
    pub di: f64,
    pub dc: [f64; 3],
    pub gamma_c: f64,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            dx: 0,
            dy: 0,
            theta: 0.0,
            do_flip_h: false,
            do_flip_v: false,
            di: 0.0,
            dc: [0.0; 3],
            gamma_c: 1.0,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, r: f64) -> f64 {
    r * (2.0 * rng.random::<f64>() - 1.0)
}

pub fn sample_augmentation<R: Rng + ?Sized>(params: &AugmentParams, rng: &mut R) -> AugmentationSpec {
    let t = params.translate_px as i32;
    let dx = rng.random_range(-t..=t);
    let dy = rng.random_range(-t..=t);
    let theta = params.rotate_deg * rng.random::<f64>();
    let do_flip_h = params.flip_h && rng.random_bool(0.5);
    let do_flip_v = params.flip_v && rng.random_bool(0.5);
    let di = symmetric(rng, params.intensity_shift);
    let dc = [
        symmetric(rng, params.color_shift),
        symmetric(rng, params.color_shift),
        symmetric(rng, params.color_shift),
    ];
    let gamma_c = 1.0 + symmetric(rng, params.contrast_shift);
    AugmentationSpec {
        dx,
        dy,
        theta,
        do_flip_h,
        do_flip_v,
        di,
        dc,
        gamma_c,
    }
}

/// Applies geometry then photometry. The identity spec returns the input
/// bit for bit.
pub fn apply_augmentation(image: &ImageTensor, spec: &AugmentationSpec) -> ImageTensor {
    let geo = apply_geometric(image, spec);
    apply_photometric(&geo, spec, mean_value(image))
}

/// Rotation, translation and flips.
pub fn apply_geometric(image: &ImageTensor, spec: &AugmentationSpec) -> ImageTensor {
    let mut out = rotate(image, spec.theta);
    if spec.dx != 0 || spec.dy != 0 {
        out = translate(&out, spec.dx, spec.dy);
    }
    if spec.do_flip_h {
        out = flip_horizontal(&out);
    }
    if spec.do_flip_v {
        out = flip_vertical(&out);
    }
    out
}

/// Additive intensity and per-channel color shift, then contrast scaling
/// about `mean` (the mean of the image before any photometric change).
pub fn apply_photometric(image: &ImageTensor, spec: &AugmentationSpec, mean: f64) -> ImageTensor {
    let mut out = image.clone();
    let c = out.channels();
    if spec.di != 0.0 || spec.dc.iter().any(|&v| v != 0.0) {
        for px in out.data_mut().chunks_exact_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v += spec.di + spec.dc.get(ch).copied().unwrap_or(0.0);
            }
        }
    }
    if spec.gamma_c != 1.0 {
        for v in out.data_mut() {
            *v = (*v - mean) * spec.gamma_c + mean;
        }
    }
    out
}

pub fn mean_value(image: &ImageTensor) -> f64 {
    image.data().iter().sum::<f64>() / image.data().len() as f64
}

pub fn flip_horizontal(image: &ImageTensor) -> ImageTensor {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    ImageTensor::from_fn(h, w, c, |y, x, ch| image.get(y, w - 1 - x, ch))
}

pub fn flip_vertical(image: &ImageTensor) -> ImageTensor {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    ImageTensor::from_fn(h, w, c, |y, x, ch| image.get(h - 1 - y, x, ch))
}

/// Shifts content by `(dx, dy)` pixels (positive = right/down), zero fill.
pub fn translate(image: &ImageTensor, dx: i32, dy: i32) -> ImageTensor {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    ImageTensor::from_fn(h, w, c, |y, x, ch| {
        let sy = y as i64 - dy as i64;
        let sx = x as i64 - dx as i64;
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            0.0
        } else {
            image.get(sy as usize, sx as usize, ch)
        }
    })
}

/// Counter-clockwise rotation about the image center. Exact quarter turns of
/// square images are index permutations; other angles use bilinear sampling
/// with zero padding.
pub fn rotate(image: &ImageTensor, theta_deg: f64) -> ImageTensor {
    let theta = theta_deg.rem_euclid(360.0);
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if theta == 0.0 {
        return image.clone();
    }
    if h == w && theta % 90.0 == 0.0 {
        let n = h - 1;
        return match theta as u32 {
            90 => ImageTensor::from_fn(h, w, c, |y, x, ch| image.get(x, n - y, ch)),
            180 => ImageTensor::from_fn(h, w, c, |y, x, ch| image.get(n - y, n - x, ch)),
            _ => ImageTensor::from_fn(h, w, c, |y, x, ch| image.get(n - x, y, ch)),
        };
    }
    let (sin, cos) = theta.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        let v = y as f64 - cy;
        for x in 0..w {
            let u = x as f64 - cx;
            let sx = u * cos - v * sin + cx;
            let sy = u * sin + v * cos + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            for ch in 0..c {
                let mut acc = 0.0;
                for &(ty, tx, wt) in &taps {
                    if wt != 0.0 && ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                        acc += wt * image.get(ty as usize, tx as usize, ch);
                    }
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}
