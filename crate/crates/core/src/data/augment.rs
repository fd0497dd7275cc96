//! Photometric augmentations (grayscale, solarize, Gaussian blur) followed by
//! at most one of MixUp or CutMix, producing soft labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result, Violation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub grayscale_p: f64,
    pub solarize_p: f64,
    pub blur_p: f64,
    pub solarize_threshold: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    /// Probability of applying one of MixUp / CutMix (chosen by a fair coin).
    pub mix_p: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            grayscale_p: 0.33,
            solarize_p: 0.33,
            blur_p: 0.33,
            solarize_threshold: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            mix_p: 0.5,
            mixup_alpha: 1.0,
            cutmix_alpha: 1.0,
        }
    }
}

impl AugmentConfig {
    /// Everything off: `augment` becomes the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        for (name, p) in [
            ("grayscale_p", self.grayscale_p),
            ("solarize_p", self.solarize_p),
            ("blur_p", self.blur_p),
            ("mix_p", self.mix_p),
            ("solarize_threshold", self.solarize_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(Violation::new(
                    &[&format!("{prefix}{name}")],
                    format!("{name} = {p} must lie in [0, 1]"),
                ));
            }
        }
        if !(self.blur_sigma_min > 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            out.push(Violation::new(
                &[
                    &format!("{prefix}blur_sigma_min"),
                    &format!("{prefix}blur_sigma_max"),
                ],
                "blur sigma range must satisfy 0 < min <= max",
            ));
        }
        for (name, a) in [("mixup_alpha", self.mixup_alpha), ("cutmix_alpha", self.cutmix_alpha)] {
            if !(a > 0.0 && a.is_finite()) {
                out.push(Violation::new(
                    &[&format!("{prefix}{name}")],
                    format!("{name} = {a} must be positive"),
                ));
            }
        }
        out
    }
}

/// Luminance (0.299 R + 0.587 G + 0.114 B) replicated to all channels.
pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        let l = (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).clamp(0.0, 1.0);
        px.fill(l);
    }
    out
}

/// Invert every value at or above `threshold`.
pub fn solarize(img: &Image, threshold: f64) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

/// Normalized Gaussian taps truncated at radius `ceil(2σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = (x + t as isize - r).clamp(0, w - 1);
                    acc += kv * img.get(y as usize, xx as usize, c);
                }
                let i = tmp.idx(y as usize, x as usize, c);
                tmp.data[i] = acc;
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = (y + t as isize - r).clamp(0, h - 1);
                    acc += kv * tmp.get(yy as usize, x as usize, c);
                }
                let i = out.idx(y as usize, x as usize, c);
                out.data[i] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn blend_labels(y1: &[f64], y2: &[f64], weight: f64) -> Vec<f64> {
    y1.iter()
        .zip(y2)
        .map(|(a, b)| weight * a + (1.0 - weight) * b)
        .collect()
}

/// `x = λ·x₁ + (1−λ)·x₂`, `y = λ·y₁ + (1−λ)·y₂`.
pub fn mixup(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64], lambda: f64) -> (Image, Vec<f64>) {
    let mut out = x1.clone();
    for (o, (a, b)) in out.data.iter_mut().zip(x1.data.iter().zip(&x2.data)) {
        *o = (lambda * a + (1.0 - lambda) * b).clamp(0.0, 1.0);
    }
    (out, blend_labels(y1, y2, lambda))
}

/// Half-open pixel box `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Box with side ratio `√(1−λ)` at a uniformly random center, clipped to the image.
pub fn sample_cut_box(height: usize, width: usize, lambda: f64, rng: &mut impl Rng) -> CutBox {
    let ratio = (1.0 - lambda).clamp(0.0, 1.0).sqrt();
    let bh = (height as f64 * ratio).round() as isize;
    let bw = (width as f64 * ratio).round() as isize;
    let cy = rng.random_range(0..height) as isize;
    let cx = rng.random_range(0..width) as isize;
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    CutBox {
        y0: clip(cy - bh / 2, height),
        y1: clip(cy + bh - bh / 2, height),
        x0: clip(cx - bw / 2, width),
        x1: clip(cx + bw - bw / 2, width),
    }
}

/// Paste `cut` from `x2` into `x1`; label weight of `y1` is `1 − area/image_area`.
pub fn cutmix(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64], cut: CutBox) -> (Image, Vec<f64>) {
    let mut out = x1.clone();
    for y in cut.y0..cut.y1 {
        for x in cut.x0..cut.x1 {
            for c in 0..3 {
                let i = out.idx(y, x, c);
                out.data[i] = x2.data[i];
            }
        }
    }
    let weight = 1.0 - cut.area() as f64 / (x1.height * x1.width) as f64;
    (out, blend_labels(y1, y2, weight))
}

/// One-hot label distribution.
pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Deterministic per-sample stream keyed by (seed, epoch, item index).
pub fn item_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x1_0000_0000).wrapping_add(index));
    rng
}

/// Full augmentation pipeline for one sample.
pub fn augment(
    image: &Image,
    label: &[f64],
    partner: (&Image, &[f64]),
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Image, Vec<f64>)> {
    image.check_range()?;
    partner.0.check_range()?;
    if partner.0.height != image.height || partner.0.width != image.width {
        return Err(Error::Dimension("augmentation partner has a different size".into()));
    }
    if !cfg.enabled {
        return Ok((image.clone(), label.to_vec()));
    }
    let mut img = image.clone();
    if rng.random::<f64>() < cfg.grayscale_p {
        img = grayscale(&img);
    }
    if rng.random::<f64>() < cfg.solarize_p {
        img = solarize(&img, cfg.solarize_threshold);
    }
    if rng.random::<f64>() < cfg.blur_p {
        let sigma = if cfg.blur_sigma_max > cfg.blur_sigma_min {
            rng.random_range(cfg.blur_sigma_min..cfg.blur_sigma_max)
        } else {
            cfg.blur_sigma_min
        };
        img = gaussian_blur(&img, sigma);
    }
    if rng.random::<f64>() < cfg.mix_p {
        let (x2, y2) = partner;
        if rng.random::<bool>() {
            let lambda = sample_beta(cfg.mixup_alpha, rng)?;
            return Ok(mixup(&img, label, x2, y2, lambda));
        }
        let lambda = sample_beta(cfg.cutmix_alpha, rng)?;
        let cut = sample_cut_box(img.height, img.width, lambda, rng);
        return Ok(cutmix(&img, label, x2, y2, cut));
    }
    Ok((img, label.to_vec()))
}

fn sample_beta(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidParameter(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}
