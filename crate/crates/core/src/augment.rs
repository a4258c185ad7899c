//! Image transforms on `[C, H, W]` tensors with values in `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// Bilinear resize (half-pixel centers) of a square crop at `(top, left)`.
pub fn crop_resize(img: &Tensor, top: usize, left: usize, side: usize, out_side: usize) -> Tensor {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    assert!(top + side <= h && left + side <= w, "crop outside image");
    let scale = side as f64 / out_side as f64;
    let src_coord = |o: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - i0 as f64)
    };
    let rows: Vec<_> = (0..out_side).map(src_coord).collect();
    let cols = rows.clone();
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_side * out_side);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let at = |y: usize, x: usize| plane[(top + y) * w + left + x];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(a * (1.0 - fy) + b * fy);
            }
        }
    }
    Tensor::from_parts(vec![c, out_side, out_side], out).expect("sizes agree")
}

/// Random square crop of `frac` of the side, resized back to full size.
pub fn random_resized_crop(img: &Tensor, frac: f64, r: &mut impl Rng) -> Tensor {
    let s = img.shape()[1];
    let side = ((s as f64 * frac).round() as usize).clamp(1, s);
    if side == s {
        return img.clone();
    }
    let top = r.random_range(0..=s - side);
    let left = r.random_range(0..=s - side);
    crop_resize(img, top, left, side, s)
}

/// Scales brightness by `b` then stretches around the image mean by `k`,
/// independently per channel when `per_channel` is set.
pub fn color_jitter(img: &Tensor, strength: f64, per_channel: bool, r: &mut impl Rng) -> Tensor {
    let c = img.shape()[0];
    let plane = img.len() / c;
    let mut out = img.clone();
    let factors = |r: &mut dyn rand::RngCore| {
        (
            1.0 + r.random_range(-strength..=strength),
            1.0 + r.random_range(-strength..=strength),
        )
    };
    let shared = factors(r);
    for (ch, p) in out.data_mut().chunks_mut(plane).enumerate() {
        let (b, k) = if per_channel && ch > 0 { factors(r) } else { shared };
        let mean = p.iter().sum::<f64>() / plane as f64 * b;
        for v in p.iter_mut() {
            *v = ((*v * b - mean) * k + mean).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn grayscale(img: &Tensor) -> Tensor {
    let plane = img.len() / 3;
    let d = img.data();
    let mut out = vec![0.0; img.len()];
    for i in 0..plane {
        let g = 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
        for ch in 0..3 {
            out[ch * plane + i] = g;
        }
    }
    Tensor::from_parts(img.shape().to_vec(), out).expect("same shape")
}

/// Separable 3-tap Gaussian blur with edge replication.
pub fn gaussian_blur3(img: &Tensor, sigma: f64) -> Tensor {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let mut tmp = vec![0.0; img.len()];
    let mut out = vec![0.0; img.len()];
    let d = img.data();
    for ch in 0..c {
        let o = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                tmp[o + y * w + x] = k[0] * d[o + y * w + xm] + k[1] * d[o + y * w + x] + k[2] * d[o + y * w + xp];
            }
        }
        for y in 0..h {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            for x in 0..w {
                out[o + y * w + x] = k[0] * tmp[o + ym * w + x] + k[1] * tmp[o + y * w + x] + k[2] * tmp[o + yp * w + x];
            }
        }
    }
    Tensor::from_parts(img.shape().to_vec(), out).expect("same shape")
}

pub fn solarize(img: &Tensor, threshold: f64) -> Tensor {
    img.map(|v| if v >= threshold { 1.0 - v } else { v })
}

/// Augmentation recipe for one view. Probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the input side; 1 disables cropping.
    pub crop_frac: f64,
    pub hflip_prob: f64,
    pub jitter_strength: f64,
    pub jitter_per_channel: bool,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub solarize_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            crop_frac: 1.0,
            hflip_prob: 0.0,
            jitter_strength: 0.0,
            jitter_per_channel: false,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
        }
    }

    /// Views for the pseudo-labeler: crop, flip, per-channel jitter.
    pub fn labeler() -> Self {
        Self {
            crop_frac: 7.0 / 8.0,
            hflip_prob: 0.5,
            jitter_strength: 0.1,
            jitter_per_channel: true,
            jitter_prob: 1.0,
            ..Self::identity()
        }
    }

    /// Views for contrastive pretraining. Horizontal flip stays off.
    pub fn contrastive() -> Self {
        Self {
            crop_frac: 7.0 / 8.0,
            hflip_prob: 0.0,
            jitter_strength: 0.1,
            jitter_per_channel: false,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            solarize_prob: 0.1,
        }
    }

    pub fn apply(&self, img: &Tensor, r: &mut impl Rng) -> Tensor {
        let mut x = random_resized_crop(img, self.crop_frac, r);
        if r.random::<f64>() < self.hflip_prob {
            x = x.flip_last_axis();
        }
        if self.jitter_strength > 0.0 && r.random::<f64>() < self.jitter_prob {
            x = color_jitter(&x, self.jitter_strength, self.jitter_per_channel, r);
        }
        if x.shape()[0] == 3 && r.random::<f64>() < self.grayscale_prob {
            x = grayscale(&x);
        }
        if r.random::<f64>() < self.blur_prob {
            x = gaussian_blur3(&x, r.random_range(0.1..1.0));
        }
        if r.random::<f64>() < self.solarize_prob {
            x = solarize(&x, 0.5);
        }
        x
    }
}
