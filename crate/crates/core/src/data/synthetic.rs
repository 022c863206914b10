//! Seeded synthetic defect images: a textured grey background with one
//! stereotyped shape family per class (thin polylines for cracks, ellipses
//! for holes, branched strokes for roots, ...). Masks are exact by
//! construction and pixel values are 8-bit quantised so PNG round trips are
//! lossless.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};
use crate::mask::IndexMask;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub num_samples: usize,
    /// Fraction of images containing each defect class (classes 1, 2, ...).
    /// Exactly `round(f · num_samples)` images receive the class.
    pub class_frequencies: Vec<f64>,
    /// Inclusive range of shapes drawn for each class an image contains.
    pub shapes_per_class: [usize; 2],
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_std: f64,
    pub seed: u64,
}

/// Relative class sizes with a 2340 : 104 extreme ratio; the intermediate
/// values only fill in a monotone profile.
pub const LONG_TAIL_COUNTS: [f64; 9] = [2340.0, 1700.0, 1300.0, 1000.0, 800.0, 600.0, 400.0, 250.0, 104.0];

impl SyntheticConfig {
    /// Every defect class in `frequency` of the images.
    pub fn uniform(num_classes: usize, frequency: f64, num_samples: usize, image_size: usize, seed: u64) -> Self {
        SyntheticConfig {
            image_size,
            num_samples,
            class_frequencies: vec![frequency; num_classes.saturating_sub(1)],
            shapes_per_class: [1, 2],
            noise_std: 0.02,
            seed,
        }
    }

    /// Nine defect classes following [`LONG_TAIL_COUNTS`], scaled so the most
    /// common class appears in `max_frequency` of the images.
    pub fn long_tail(max_frequency: f64, num_samples: usize, image_size: usize, seed: u64) -> Self {
        SyntheticConfig {
            class_frequencies: LONG_TAIL_COUNTS.iter().map(|c| max_frequency * c / LONG_TAIL_COUNTS[0]).collect(),
            ..Self::uniform(10, 0.0, num_samples, image_size, seed)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_frequencies.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config(format!("synthetic image_size {} is below 8", self.image_size)));
        }
        if self.class_frequencies.is_empty() || self.class_frequencies.len() > 255 {
            return Err(Error::config("synthetic data needs 1 to 255 defect classes"));
        }
        if let Some(f) = self.class_frequencies.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::config(format!("class frequency {f} is outside [0, 1]")));
        }
        if !self.class_frequencies.iter().any(|&f| f > 0.0) {
            return Err(Error::config("at least one class frequency must be positive"));
        }
        let [lo, hi] = self.shapes_per_class;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("shapes_per_class [{lo}, {hi}] is not a valid range")));
        }
        if !(0.0..=0.5).contains(&self.noise_std) {
            return Err(Error::config(format!("noise_std {} is outside [0, 0.5]", self.noise_std)));
        }
        Ok(())
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<SegSample>> {
    config.validate()?;
    let n = config.num_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut contains = vec![Vec::new(); n];
    for (j, &f) in config.class_frequencies.iter().enumerate() {
        let count = ((f * n as f64).round() as usize).min(n);
        for i in sample_indices(&mut rng, n, count).into_iter() {
            contains[i].push(j + 1);
        }
    }
    let freq = |c: usize| config.class_frequencies[c - 1];
    contains
        .into_iter()
        .enumerate()
        .map(|(i, mut classes)| {
            // rare classes are drawn last so they stay visible
            classes.sort_by(|&a, &b| freq(b).total_cmp(&freq(a)).then(a.cmp(&b)));
            let mut srng = ChaCha8Rng::seed_from_u64(config.seed);
            srng.set_stream(i as u64 + 1);
            render(config, &classes, &mut srng, format!("synth_{i:05}"))
        })
        .collect()
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
    mask: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, class: u8, color: [f64; 3]) {
        let i = y * self.size + x;
        self.mask[i] = class;
        self.rgb[i] = color;
    }

    /// Paints every pixel whose centre satisfies `inside`, within a bounding box.
    fn fill(&mut self, bbox: [f64; 4], class: u8, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let s = self.size as f64;
        let x0 = bbox[0].floor().clamp(0.0, s) as usize;
        let x1 = bbox[2].ceil().clamp(0.0, s) as usize;
        let y0 = bbox[1].floor().clamp(0.0, s) as usize;
        let y1 = bbox[3].ceil().clamp(0.0, s) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.paint(x, y, class, color);
                }
            }
        }
    }

    fn disk(&mut self, cx: f64, cy: f64, r: f64, class: u8, color: [f64; 3]) {
        self.fill([cx - r, cy - r, cx + r, cy + r], class, color, |x, y| {
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        });
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), r: f64, class: u8, color: [f64; 3]) {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let steps = (len / 0.5).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            self.disk(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), r, class, color);
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, theta: f64, class: u8, color: [f64; 3]) {
        let (s, c) = theta.sin_cos();
        let r = rx.max(ry);
        self.fill([cx - r, cy - r, cx + r, cy + r], class, color, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let u = (c * dx + s * dy) / rx;
            let v = (-s * dx + c * dy) / ry;
            u * u + v * v <= 1.0
        });
    }

    /// Elliptical arc band of the given thickness spanning `[a0, a0 + span]`.
    #[allow(clippy::too_many_arguments)]
    fn arc(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, thick: f64, a0: f64, span: f64, class: u8, color: [f64; 3]) {
        let r = rx.max(ry) + thick;
        self.fill([cx - r, cy - r, cx + r, cy + r], class, color, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let rho = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
            let ang = (dy.atan2(dx) - a0).rem_euclid(2.0 * PI);
            (rho - 1.0).abs() * rx.min(ry) <= thick / 2.0 && ang <= span
        });
    }
}

fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let hue = (class - 1) as f64 / (num_classes - 1).max(1) as f64 * 0.9;
    hsv(hue, 0.75, 0.85)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn draw_shape(canvas: &mut Canvas, class: usize, color: [f64; 3], rng: &mut ChaCha8Rng) {
    let s = canvas.size as f64;
    let c = class as u8;
    let thin = (s / 64.0).max(0.75);
    let mut centre = || (rng.gen_range(0.15 * s..0.85 * s), rng.gen_range(0.15 * s..0.85 * s));
    let (cx, cy) = centre();
    match (class - 1) % 9 {
        0 => {
            let mut p = (cx, cy);
            let mut ang = rng.gen_range(0.0..2.0 * PI);
            for _ in 0..rng.gen_range(3..=5) {
                ang += rng.gen_range(-0.6..0.6);
                let len = rng.gen_range(0.1 * s..0.2 * s);
                let q = (p.0 + len * ang.cos(), p.1 + len * ang.sin());
                canvas.segment(p, q, thin, c, color);
                p = q;
            }
        }
        1 => {
            let (rx, ry) = (rng.gen_range(0.06 * s..0.14 * s), rng.gen_range(0.06 * s..0.14 * s));
            canvas.ellipse(cx, cy, rx, ry, rng.gen_range(0.0..PI), c, color);
        }
        2 => {
            let ang = rng.gen_range(0.0..2.0 * PI);
            let len = rng.gen_range(0.25 * s..0.4 * s);
            let end = (cx + len * ang.cos(), cy + len * ang.sin());
            canvas.segment((cx, cy), end, (s / 48.0).max(0.75), c, color);
            for _ in 0..rng.gen_range(2..=3) {
                let t = rng.gen_range(0.2..0.9);
                let root = (cx + t * (end.0 - cx), cy + t * (end.1 - cy));
                let b = ang + rng.gen_range(0.5..1.2) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let bl = rng.gen_range(0.1 * s..0.2 * s);
                canvas.segment(root, (root.0 + bl * b.cos(), root.1 + bl * b.sin()), thin, c, color);
            }
        }
        3 => {
            let (rx, ry) = (rng.gen_range(0.2 * s..0.35 * s), rng.gen_range(0.2 * s..0.35 * s));
            let a0 = rng.gen_range(0.0..2.0 * PI);
            canvas.arc(cx, cy, rx, ry, s / 16.0, a0, rng.gen_range(1.5..3.0), c, color);
        }
        4 => {
            let ang = rng.gen_range(0.0..PI);
            let half = rng.gen_range(0.15 * s..0.3 * s);
            let (dx, dy) = (half * ang.cos(), half * ang.sin());
            canvas.segment((cx - dx, cy - dy), (cx + dx, cy + dy), (s / 32.0).max(1.0), c, color);
        }
        5 => {
            for _ in 0..rng.gen_range(3..=5) {
                let x = rng.gen_range(0.1 * s..0.9 * s);
                let y = rng.gen_range(0.75 * s..0.95 * s);
                canvas.disk(x, y, rng.gen_range(0.04 * s..0.08 * s).max(0.75), c, color);
            }
        }
        6 => {
            let h = rng.gen_range(0.05 * s..0.09 * s).max(1.0);
            canvas.fill([0.0, cy - h / 2.0, s, cy + h / 2.0], c, color, |_, y| (y - cy).abs() <= h / 2.0);
        }
        7 => {
            let (rx, ry) = (rng.gen_range(0.15 * s..0.3 * s), rng.gen_range(0.15 * s..0.3 * s));
            let a0 = rng.gen_range(0.0..2.0 * PI);
            canvas.arc(cx, cy, rx, ry, (s / 40.0).max(1.0), a0, rng.gen_range(2.0..4.0), c, color);
        }
        _ => {
            let (w, h) = (rng.gen_range(0.12 * s..0.25 * s), rng.gen_range(0.12 * s..0.25 * s));
            canvas.fill([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], c, color, |_, _| true);
        }
    }
}

fn render(config: &SyntheticConfig, classes: &[usize], rng: &mut ChaCha8Rng, id: String) -> Result<SegSample> {
    let size = config.image_size;
    let k = config.num_classes();
    let base = rng.gen_range(0.35..0.55);
    let tint: [f64; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    let freq = rng.gen_range(2.0..6.0) * 2.0 * PI / size as f64;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut canvas = Canvas {
        size,
        rgb: (0..size * size)
            .map(|i| {
                let v = base + 0.05 * ((i / size) as f64 * freq + phase).sin();
                [v + tint[0], v + tint[1], v + tint[2]]
            })
            .collect(),
        mask: vec![0; size * size],
    };
    let [lo, hi] = config.shapes_per_class;
    for &class in classes {
        let shade = rng.gen_range(0.85..1.0);
        let color = class_color(class, k).map(|v| v * shade);
        for _ in 0..rng.gen_range(lo..=hi) {
            draw_shape(&mut canvas, class, color, rng);
        }
    }
    // a later shape may have covered an earlier class entirely
    for _ in 0..8 {
        let missing: Vec<usize> = classes.iter().copied().filter(|&c| !canvas.mask.contains(&(c as u8))).collect();
        if missing.is_empty() {
            break;
        }
        for c in missing {
            draw_shape(&mut canvas, c, class_color(c, k), rng);
        }
    }
    let noise = rand_distr::Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in canvas.rgb.iter().enumerate() {
        for ch in 0..3 {
            let n = if config.noise_std > 0.0 { rng.sample(noise) } else { 0.0 };
            data[ch * plane + i] = ((px[ch] + n).clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0;
        }
    }
    let image = Tensor::new(Shape::new(1, 3, size, size), data)?;
    let mask = IndexMask::new(size, size, canvas.mask)?;
    SegSample::new(id, image, mask)
}
