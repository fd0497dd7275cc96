//! Class-token attention heatmaps blended over the input image.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{batch_tensor, Image};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::train::trainer::write_file;
use crate::vit::AttentionStack;

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Blue (low) to red (high).
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// Rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Nearest-neighbor upscale of a `grid × grid` map to `size × size`.
pub fn upscale(grid_values: &[f64], grid: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y * grid / size;
        for x in 0..size {
            out.push(grid_values[gy * grid + x * grid / size]);
        }
    }
    out
}

/// Blend a `[0, 1]` heatmap over `image`.
pub fn overlay(image: &Image, heat: &[f64], alpha: f64) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let c = colormap(heat[y * image.width + x]);
            for ch in 0..3 {
                let i = out.idx(y, x, ch);
                out.data[i] = (1.0 - alpha) * image.data[i] + alpha * c[ch];
            }
        }
    }
    out
}

/// Class-token attention over patch tokens for one layer of sample 0,
/// averaged over heads (or for a single head).
pub fn patch_attention(stack: &AttentionStack, layer: usize, head: Option<usize>) -> Vec<f64> {
    let row = match head {
        Some(h) => stack.cls_row(layer, 0, h),
        None => stack.cls_row_mean(layer, 0),
    };
    row[1..].to_vec()
}

/// Mean of a pixel map inside and outside a band of rows.
pub fn band_contrast(map: &[f64], size: usize, rows: Range<usize>) -> (f64, f64) {
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0, 0.0, 0);
    for (i, v) in map.iter().enumerate() {
        if rows.contains(&(i / size)) {
            sin += v;
            nin += 1;
        } else {
            sout += v;
            nout += 1;
        }
    }
    (sin / nin.max(1) as f64, sout / nout.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMap {
    pub layer: usize,
    pub head: Option<usize>,
    /// Raw `grid × grid` class-token attention, row-major.
    pub grid: Vec<f64>,
    /// Sum of `grid`: one minus the class token's attention to itself.
    pub patch_mass: f64,
    pub min: f64,
    pub max: f64,
    /// Raw map upscaled to image pixels.
    #[serde(skip)]
    pub pixels: Vec<f64>,
    #[serde(skip)]
    pub file: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct VizOutput {
    pub normalization: &'static str,
    pub grid: usize,
    pub image_size: usize,
    pub layers: Vec<LayerMap>,
}

fn layer_map(stack: &AttentionStack, layer: usize, head: Option<usize>, grid: usize, size: usize) -> LayerMap {
    let values = patch_attention(stack, layer, head);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    LayerMap {
        layer,
        head,
        patch_mass: values.iter().sum(),
        pixels: upscale(&values, grid, size),
        grid: values,
        min,
        max,
        file: PathBuf::new(),
    }
}

/// Compute every layer's heatmap for `image`; with `out_dir`, write
/// `attn_layer{i}.png` (and `attn_layer{i}_head{h}.png` when `per_head`)
/// plus `attn_meta.json`.
pub fn attn_viz(model: &Classifier, image: &Image, out_dir: Option<&Path>, per_head: bool) -> Result<VizOutput> {
    let cfg = model.config();
    if image.height != cfg.image_size || image.width != cfg.image_size {
        return Err(Error::Dimension(format!(
            "image {}x{} does not match model input {}",
            image.height, image.width, cfg.image_size
        )));
    }
    image.check_range()?;
    let enc = model.vit.encode(&batch_tensor(&[image])?)?;
    let stack = &enc.attention;
    let (grid, size) = (cfg.grid(), cfg.image_size);
    let mut layers = Vec::new();
    for layer in 0..stack.depth() {
        let mut m = layer_map(stack, layer, None, grid, size);
        m.file = PathBuf::from(format!("attn_layer{layer}.png"));
        layers.push(m);
        if per_head {
            for h in 0..cfg.heads {
                let mut m = layer_map(stack, layer, Some(h), grid, size);
                m.file = PathBuf::from(format!("attn_layer{layer}_head{h}.png"));
                layers.push(m);
            }
        }
    }
    let out = VizOutput {
        normalization: "per-map min-max over patch tokens before the blue-to-red colormap",
        grid,
        image_size: size,
        layers,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for m in &out.layers {
            let heat = min_max(&m.pixels);
            overlay(image, &heat, OVERLAY_ALPHA).save_png(&dir.join(&m.file))?;
        }
        write_file(
            &dir.join("attn_meta.json"),
            serde_json::to_string_pretty(&out)?.as_bytes(),
        )?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(colormap(1.0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn min_max_range() {
        assert_eq!(min_max(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max(&[1.0, 1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn upscale_nearest() {
        let up = upscale(&[1.0, 2.0, 3.0, 4.0], 2, 4);
        assert_eq!(&up[0..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&up[12..16], &[3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn band_means() {
        let map: Vec<f64> = (0..16).map(|i| if i / 4 == 1 { 1.0 } else { 0.0 }).collect();
        assert_eq!(band_contrast(&map, 4, 1..2), (1.0, 0.0));
    }
}
