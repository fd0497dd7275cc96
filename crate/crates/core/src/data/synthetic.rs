//! Two-class synthetic corpus whose label lives only in spatial structure.
//!
//! Every image is uniform noise in `[0.3, 0.7]`. Class 1 brightens two
//! squares inside the "eye band" (rows 25–45 % of height); class 0 brightens
//! two equally sized squares inside the "mouth band" (rows 65–80 %). The
//! brightened area is identical for both classes, so global brightness does
//! not separate them.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::item_rng;
use super::dataset::Split;
use super::image::Image;
use crate::error::{Error, Result};

pub const BRIGHTEN: f64 = 0.25;
pub const NOISE_LOW: f64 = 0.3;
pub const NOISE_HIGH: f64 = 0.7;

/// Directory names; lexicographic order assigns label 0 to the mouth class.
pub const CLASS_NAMES: [&str; 2] = ["0_mouth", "1_eye"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Pixel geometry of the two bands and their squares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandLayout {
    pub eye_band: Range<usize>,
    pub mouth_band: Range<usize>,
    pub eye_rows: Range<usize>,
    pub mouth_rows: Range<usize>,
    pub square_cols: [Range<usize>; 2],
}

fn frac(size: usize, f: f64) -> usize {
    (size as f64 * f).round() as usize
}

impl BandLayout {
    pub fn new(size: usize) -> Self {
        let side = frac(size, 0.15).max(1);
        let eye_band = frac(size, 0.25)..frac(size, 0.45);
        let mouth_band = frac(size, 0.65)..frac(size, 0.80);
        let centered = |band: &Range<usize>| {
            let pad = band.len().saturating_sub(side) / 2;
            let start = band.start + pad;
            start..(start + side).min(band.end.max(start + 1))
        };
        let col = |center: f64| {
            let start = (size as f64 * center - side as f64 / 2.0).round() as usize;
            start..start + side
        };
        BandLayout {
            eye_rows: centered(&eye_band),
            mouth_rows: centered(&mouth_band),
            eye_band,
            mouth_band,
            square_cols: [col(0.3), col(0.7)],
        }
    }

    fn rows_for(&self, label: usize) -> &Range<usize> {
        if label == 1 {
            &self.eye_rows
        } else {
            &self.mouth_rows
        }
    }

    /// Whether pixel `(y, x)` is brightened for `label`.
    pub fn is_bright(&self, label: usize, y: usize, x: usize) -> bool {
        self.rows_for(label).contains(&y) && self.square_cols.iter().any(|c| c.contains(&x))
    }
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

/// Render one synthetic image (before 8-bit quantization).
pub fn render(size: usize, label: usize, seed: u64, split: Split, index: usize) -> Image {
    let layout = BandLayout::new(size);
    let mut rng = item_rng(seed, split_salt(split), index as u64);
    let mut img = Image::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let bright = layout.is_bright(label, y, x);
            for c in 0..3 {
                let mut v = rng.random_range(NOISE_LOW..NOISE_HIGH);
                if bright {
                    v = (v + BRIGHTEN).min(1.0);
                }
                let i = img.idx(y, x, c);
                img.data[i] = v;
            }
        }
    }
    img
}

/// Write `root/{train,val,test}/{class}/img_NNNNN.ppm`. Each split is divided
/// between the two classes, class 0 receiving the odd item if any.
pub fn gen_synthetic(root: &Path, counts: SplitCounts, image_size: usize, seed: u64) -> Result<()> {
    if image_size < 8 {
        return Err(Error::InvalidParameter(format!(
            "synthetic images need at least 8 pixels per side, got {image_size}"
        )));
    }
    for split in Split::ALL {
        let n = counts.get(split);
        for class in CLASS_NAMES {
            let dir = root.join(split.dir_name()).join(class);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for i in 0..n {
            let label = i % 2;
            let img = render(image_size, label, seed, split, i);
            let path = root
                .join(split.dir_name())
                .join(CLASS_NAMES[label])
                .join(format!("img_{i:05}.ppm"));
            img.save_ppm(&path)?;
        }
    }
    Ok(())
}
