//! Training-time image augmentation on `[H, W, 3]` tensors.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrepMode {
    /// Random crop and horizontal flip.
    Vgg,
    /// Crop and flip plus brightness, contrast, saturation and hue jitter.
    Inception,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub mode: PrepMode,
    /// `(H, W)` of the crop.
    pub crop: (usize, usize),
    /// Raw pixel value that maps to 1.0.
    pub input_max: f64,
    /// Per-channel mean subtracted after scaling.
    pub mean: [f64; 3],
    /// Brightness offset drawn from `±brightness`, per channel.
    pub brightness: f64,
    /// Contrast factor range, per channel.
    pub contrast: (f64, f64),
    /// Saturation factor range.
    pub saturation: (f64, f64),
    /// Hue rotation drawn from `±hue`, as a fraction of a full turn.
    pub hue: f64,
}

impl Preprocessing {
    pub fn new(mode: PrepMode, crop: (usize, usize)) -> Self {
        Self {
            mode,
            crop,
            input_max: 1.0,
            mean: [0.5; 3],
            brightness: 32.0 / 255.0,
            contrast: (0.5, 1.5),
            saturation: (0.5, 1.5),
            hue: 0.2,
        }
    }
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

fn crop(img: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Tensor {
    let (w, c) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in top..top + ch {
        out.extend_from_slice(&img.data()[(y * w + left) * c..(y * w + left + cw) * c]);
    }
    Tensor::new(&[ch, cw, c], out).expect("crop shape")
}

fn wrap(x: f64, m: f64) -> f64 {
    x - m * math::floor(x / m)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        wrap((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = wrap(h, 1.0) * 6.0;
    let i = math::floor(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Crops (at a random offset), flips (with probability 1/2 unless `flip`
/// forces the decision), optionally jitters colours, scales to `[0, 1]` and
/// subtracts the channel means.
pub fn preprocess_image(img: &Tensor, prep: &Preprocessing, rng: &mut impl Rng, flip: Option<bool>) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Size(format!("expected an [H, W, 3] image, got {s:?}")));
    }
    let (ch, cw) = prep.crop;
    if s[0] < ch || s[1] < cw || ch == 0 || cw == 0 {
        return Err(Error::Size(format!("image {}x{} smaller than crop {ch}x{cw}", s[0], s[1])));
    }
    let top = rng.gen_range(0..=s[0] - ch);
    let left = rng.gen_range(0..=s[1] - cw);
    let mut out = crop(img, top, left, ch, cw);
    if flip.unwrap_or_else(|| rng.gen_bool(0.5)) {
        out = flip_horizontal(&out);
    }
    let scale = 1.0 / prep.input_max;
    for v in out.data_mut() {
        *v *= scale;
    }
    if prep.mode == PrepMode::Inception {
        let bright: [f64; 3] = core::array::from_fn(|_| rng.gen_range(-prep.brightness..=prep.brightness));
        let contrast: [f64; 3] = core::array::from_fn(|_| rng.gen_range(prep.contrast.0..=prep.contrast.1));
        let sat = rng.gen_range(prep.saturation.0..=prep.saturation.1);
        let hue = rng.gen_range(-prep.hue..=prep.hue);
        let n = ch * cw;
        let mut means = [0.0; 3];
        for px in out.data().chunks(3) {
            for k in 0..3 {
                means[k] += px[k] / n as f64;
            }
        }
        for px in out.data_mut().chunks_mut(3) {
            for k in 0..3 {
                px[k] = ((px[k] + bright[k] - means[k]) * contrast[k] + means[k]).clamp(0.0, 1.0);
            }
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb(h + hue, (s * sat).clamp(0.0, 1.0), v);
            px.copy_from_slice(&[r, g, b]);
        }
    }
    for px in out.data_mut().chunks_mut(3) {
        for k in 0..3 {
            px[k] -= prep.mean[k];
        }
    }
    Ok(out)
}
