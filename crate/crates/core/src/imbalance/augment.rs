//! Paired image/mask augmentation. Geometric operators resample both the
//! image (bilinear) and the mask (nearest) through the same inverse map;
//! photometric operators touch the image only. Out-of-frame pixels become
//! black in the image and background in the mask.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::IndexMask;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    HorizontalFlip,
    GaussianBlur,
    ColorJitter,
    Shear,
    Rotation,
    RandomNoise,
    RandomCrop,
}

impl AugOp {
    pub const ALL: [AugOp; 7] = [
        AugOp::HorizontalFlip,
        AugOp::GaussianBlur,
        AugOp::ColorJitter,
        AugOp::Shear,
        AugOp::Rotation,
        AugOp::RandomNoise,
        AugOp::RandomCrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::HorizontalFlip => "flip",
            AugOp::GaussianBlur => "blur",
            AugOp::ColorJitter => "jitter",
            AugOp::Shear => "shear",
            AugOp::Rotation => "rot",
            AugOp::RandomNoise => "noise",
            AugOp::RandomCrop => "crop",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, AugOp::HorizontalFlip | AugOp::Shear | AugOp::Rotation | AugOp::RandomCrop)
    }
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub ops: Vec<AugOp>,
    /// Rotation angle drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// Side fraction kept by a crop.
    pub crop_scale: [f64; 2],
    pub blur_sigma: [f64; 2],
    /// Brightness, contrast and saturation factors drawn from `1 ± jitter`.
    pub jitter: f64,
    /// Hue shift in turns, drawn from `[-hue_shift, hue_shift]`.
    pub hue_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            ops: AugOp::ALL.to_vec(),
            rotation_deg: 15.0,
            shear_deg: 10.0,
            crop_scale: [0.8, 1.0],
            blur_sigma: [0.5, 1.5],
            jitter: 0.2,
            hue_shift: 0.1,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("AugmentationSpec.{m}")));
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return bad(format!("rotation_deg {} is outside [0, 180]", self.rotation_deg));
        }
        if !(0.0..=45.0).contains(&self.shear_deg) {
            return bad(format!("shear_deg {} is outside [0, 45]", self.shear_deg));
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"));
        }
        let [slo, shi] = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi && shi <= 10.0) {
            return bad(format!("blur_sigma [{slo}, {shi}] must satisfy 0 < lo <= hi <= 10"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} is outside [0, 1)", self.jitter));
        }
        if !(0.0..=0.5).contains(&self.hue_shift) {
            return bad(format!("hue_shift {} is outside [0, 0.5]", self.hue_shift));
        }
        if !(0.0..=0.5).contains(&self.noise_std) {
            return bad(format!("noise_std {} is outside [0, 0.5]", self.noise_std));
        }
        Ok(())
    }
}

/// Applies every enabled operator in order with parameters drawn from
/// `draw_seed`.
pub fn augment_sample(image: &Tensor, mask: &IndexMask, spec: &AugmentationSpec, draw_seed: u64) -> Result<(Tensor, IndexMask)> {
    spec.validate()?;
    check_pair(image, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let (mut img, mut m) = (image.clone(), mask.clone());
    for &op in &spec.ops {
        (img, m) = apply_op(&img, &m, op, spec, &mut rng)?;
    }
    Ok((img, m))
}

fn check_pair(image: &Tensor, mask: &IndexMask) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.h != mask.height() || s.w != mask.width() {
        return Err(Error::data(format!(
            "image {s} is not aligned with a {}x{} mask",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

pub fn apply_op<R: Rng>(image: &Tensor, mask: &IndexMask, op: AugOp, spec: &AugmentationSpec, rng: &mut R) -> Result<(Tensor, IndexMask)> {
    check_pair(image, mask)?;
    let (h, w) = (mask.height(), mask.width());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    Ok(match op {
        AugOp::HorizontalFlip => {
            let s = image.shape();
            let img = Tensor::from_fn(s, |n, c, y, x| image.get(n, c, y, w - 1 - x));
            (img, IndexMask::from_fn(h, w, |y, x| mask.get(y, w - 1 - x)))
        }
        AugOp::Rotation => {
            let deg = rng.gen_range(-spec.rotation_deg..=spec.rotation_deg);
            rotate(image, mask, deg)
        }
        AugOp::Shear => {
            let t = rng.gen_range(-spec.shear_deg..=spec.shear_deg).to_radians().tan();
            warp(image, mask, |u, v| (u - t * v, v), cx, cy)
        }
        AugOp::RandomCrop => {
            let mut attempt = 0;
            let (ch, cw) = loop {
                let scale = rng.gen_range(spec.crop_scale[0]..=spec.crop_scale[1]);
                let (ch, cw) = ((scale * h as f64).round() as usize, (scale * w as f64).round() as usize);
                if ch > 0 && cw > 0 {
                    break (ch, cw);
                }
                attempt += 1;
                if attempt == 10 {
                    return Err(Error::data(format!("crop of a {h}x{w} image is empty after 10 draws")));
                }
            };
            let y0 = rng.gen_range(0..=h - ch) as f64;
            let x0 = rng.gen_range(0..=w - cw) as f64;
            let (sx, sy) = (cw as f64 / w as f64, ch as f64 / h as f64);
            resample(image, mask, |x, y| (x0 + x * sx, y0 + y * sy))
        }
        AugOp::GaussianBlur => {
            let sigma = rng.gen_range(spec.blur_sigma[0]..=spec.blur_sigma[1]);
            (gaussian_blur(image, sigma), mask.clone())
        }
        AugOp::ColorJitter => {
            let j = spec.jitter;
            let b = rng.gen_range(1.0 - j..=1.0 + j);
            let c = rng.gen_range(1.0 - j..=1.0 + j);
            let s = rng.gen_range(1.0 - j..=1.0 + j);
            let hue = rng.gen_range(-spec.hue_shift..=spec.hue_shift);
            (color_jitter(image, b, c, s, hue), mask.clone())
        }
        AugOp::RandomNoise => {
            let normal = rand_distr::Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
            let mut img = image.clone();
            for v in img.data_mut() {
                let n = if spec.noise_std > 0.0 { rng.sample(normal) } else { 0.0 };
                *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
            }
            (img, mask.clone())
        }
    })
}

/// Rotation by `deg` degrees about the image centre; at 90° the 2×2 mask
/// `[[1, 2], [3, 4]]` becomes `[[3, 1], [4, 2]]`.
pub fn rotate(image: &Tensor, mask: &IndexMask, deg: f64) -> (Tensor, IndexMask) {
    let (s, c) = deg.to_radians().sin_cos();
    let (cx, cy) = (mask.width() as f64 / 2.0, mask.height() as f64 / 2.0);
    warp(image, mask, |u, v| (c * u + s * v, -s * u + c * v), cx, cy)
}

/// Resamples through an inverse map given in centred coordinates.
fn warp(image: &Tensor, mask: &IndexMask, inv: impl Fn(f64, f64) -> (f64, f64), cx: f64, cy: f64) -> (Tensor, IndexMask) {
    resample(image, mask, |x, y| {
        let (u, v) = inv(x - cx, y - cy);
        (u + cx, v + cy)
    })
}

/// `src(x, y)` maps an output pixel centre to a continuous source position
/// (pixel `i` spans `[i, i + 1)`).
fn resample(image: &Tensor, mask: &IndexMask, src: impl Fn(f64, f64) -> (f64, f64)) -> (Tensor, IndexMask) {
    let (h, w) = (mask.height(), mask.width());
    let s = image.shape();
    let plane = h * w;
    let mut out = vec![0f32; s.numel()];
    let mut mdata = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let (xs, ys) = src(x as f64 + 0.5, y as f64 + 0.5);
            let (mx, my) = (xs.floor(), ys.floor());
            if mx >= 0.0 && my >= 0.0 && (mx as usize) < w && (my as usize) < h {
                mdata[y * w + x] = mask.get(my as usize, mx as usize);
            }
            // bilinear over pixel centres, zero outside the frame
            let (fx, fy) = (xs - 0.5, ys - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            for c in 0..s.c {
                let at = |yy: f64, xx: f64| -> f64 {
                    if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                        0.0
                    } else {
                        image.get(0, c, yy as usize, xx as usize) as f64
                    }
                };
                let v = (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x0 + 1.0))
                    + ay * ((1.0 - ax) * at(y0 + 1.0, x0) + ax * at(y0 + 1.0, x0 + 1.0));
                out[c * plane + y * w + x] = v as f32;
            }
        }
    }
    let img = Tensor::new(Shape::new(1, s.c, h, w), out).expect("same shape");
    (img, IndexMask::new(h, w, mdata).expect("same dims"))
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let s = image.shape();
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; s.numel()];
    let mut out = image.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    tmp[s.offset(n, c, y, x)] = kernel
                        .iter()
                        .enumerate()
                        .map(|(k, wk)| wk * image.get(n, c, y, clamp(x as isize + k as isize - r, s.w)) as f64)
                        .sum();
                }
            }
            for y in 0..s.h {
                for x in 0..s.w {
                    let v: f64 = kernel
                        .iter()
                        .enumerate()
                        .map(|(k, wk)| wk * tmp[s.offset(n, c, clamp(y as isize + k as isize - r, s.h), x)])
                        .sum();
                    out.set(n, c, y, x, v as f32);
                }
            }
        }
    }
    out
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Brightness, contrast and saturation factors plus a hue rotation (turns).
pub fn color_jitter(image: &Tensor, brightness: f64, contrast: f64, saturation: f64, hue: f64) -> Tensor {
    let s = image.shape();
    let plane = s.h * s.w;
    let px = |i: usize| -> [f64; 3] { [0, 1, 2].map(|c| image.data()[c * plane + i] as f64 * brightness) };
    let mean = (0..plane).map(|i| luma(px(i))).sum::<f64>() / plane as f64;
    let mut out = image.clone();
    for i in 0..plane {
        let mut rgb = px(i).map(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
        let g = luma(rgb);
        rgb = rgb.map(|v| (g + (v - g) * saturation).clamp(0.0, 1.0));
        let (hh, ss, vv) = rgb_to_hsv(rgb);
        rgb = hsv_to_rgb((hh + hue).rem_euclid(1.0), ss, vv);
        for c in 0..3 {
            out.data_mut()[c * plane + i] = rgb[c].clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
