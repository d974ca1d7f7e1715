//! The fixed preprocessing chain: square bilinear resize, channel-wise global
//! contrast normalization, and center cropping.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Guard for constant channels in [`global_contrast_normalize`].
pub const GCN_EPSILON: f64 = 1e-8;

/// Resizes to `target x target` by bilinear interpolation with half-pixel
/// centers (no corner alignment). Same-size input is returned unchanged.
pub fn resize(image: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if target < 1 {
        return Err(Error::BadTarget(target));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if h == target && w == target {
        return Ok(image.clone());
    }
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    let coords = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let xs: Vec<_> = (0..target).map(|x| coords(x, sx, w)).collect();
    let mut out = ImageTensor::zeros(target, target, c);
    for y in 0..target {
        let (y0, y1, fy) = coords(y, sy, h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = image.get(y0, x0, ch) * (1.0 - fx) + image.get(y0, x1, ch) * fx;
                let bottom = image.get(y1, x0, ch) * (1.0 - fx) + image.get(y1, x1, ch) * fx;
                out.set(y, x, ch, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// Per channel: subtract the mean, divide by the population standard
/// deviation (at least [`GCN_EPSILON`]).
pub fn global_contrast_normalize(image: &ImageTensor) -> ImageTensor {
    let c = image.channels();
    let n = (image.height() * image.width()) as f64;
    let mut mean = vec![0.0; c];
    for px in image.data().chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for px in image.data().chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(GCN_EPSILON)).collect();
    // A constant channel maps to exact zeros even when its computed mean
    // carries rounding error.
    let constant: Vec<bool> = (0..c)
        .map(|ch| {
            let first = image.data()[ch];
            image.data().iter().skip(ch).step_by(c).all(|&v| v == first)
        })
        .collect();

    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = if constant[ch] { 0.0 } else { (*v - mean[ch]) / scale[ch] };
        }
    }
    out
}

/// Central `size x size` window; offsets are `floor((H - size) / 2)` and
/// `floor((W - size) / 2)`.
pub fn center_crop(image: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if size == 0 || size > h.min(w) {
        return Err(Error::CropTooLarge {
            size,
            height: h,
            width: w,
        });
    }
    if size == h && size == w {
        return Ok(image.clone());
    }
    let (oy, ox) = crop_offset(h, w, size);
    let mut data = Vec::with_capacity(size * size * c);
    for y in 0..size {
        let start = image.index(y + oy, ox, 0);
        data.extend_from_slice(&image.data()[start..start + size * c]);
    }
    ImageTensor::new(size, size, c, data)
}

pub fn crop_offset(height: usize, width: usize, size: usize) -> (usize, usize) {
    ((height - size) / 2, (width - size) / 2)
}

/// Resize followed by GCN: the stored, pre-augmentation form of an image.
pub fn prepare(image: &ImageTensor, resize_to: usize) -> Result<ImageTensor> {
    Ok(global_contrast_normalize(&resize(image, resize_to)?))
}
