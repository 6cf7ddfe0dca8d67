//! Heatmap and LIME overlays as RGB images.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::xai::{Heatmap, LimeExplanation, SuperpixelMap};

const ANCHORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
];

const GREEN: [f64; 3] = [0.0, 1.0, 0.0];
const RED: [f64; 3] = [1.0, 0.0, 0.0];
const TINT: f64 = 0.45;

/// Blue, cyan, green, yellow, red at 0, 0.25, 0.5, 0.75 and 1.
pub fn colormap(v: f64) -> [f64; 3] {
    let t = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) } * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c @ (1 | 3), h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(Error::contract(format!(
            "expected a [1|3,H,W] or [H,W] image, got {:?}",
            image.shape()
        ))),
    }
}

fn rgb_at(image: &Tensor, c: usize, h: usize, w: usize, p: usize) -> [f64; 3] {
    let d = image.data();
    if c == 1 {
        [d[p]; 3]
    } else {
        [d[p], d[h * w + p], d[2 * h * w + p]]
    }
}

/// Values in `[0,1]` to 8-bit RGB; single-channel images become gray.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image_dims(image)?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(rgb_at(image, c, h, w, p).map(to_u8))
    }))
}

/// Colormapped heatmap blended over the image: `(1 - alpha) * image + alpha * color`.
pub fn render_overlay(image: &Tensor, heatmap: &Heatmap, alpha: f64) -> Result<RgbImage> {
    let (c, h, w) = image_dims(image)?;
    if heatmap.values.shape() != [h, w] {
        return Err(Error::contract(format!(
            "heatmap {:?} does not match image {h}x{w}",
            heatmap.values.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let hv = heatmap.values.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let base = rgb_at(image, c, h, w, p);
        let color = colormap(hv[p]);
        Rgb([0, 1, 2].map(|k| to_u8((1.0 - alpha) * base[k] + alpha * color[k])))
    }))
}

/// Tints the `top_regions` strongest regions green (positive weight) or red
/// (negative weight) and outlines their boundaries.
pub fn render_lime_overlay(
    image: &Tensor,
    sp: &SuperpixelMap,
    explanation: &LimeExplanation,
    top_regions: usize,
) -> Result<RgbImage> {
    let (c, h, w) = image_dims(image)?;
    if (sp.height, sp.width) != (h, w) {
        return Err(Error::contract(format!(
            "segmentation {}x{} does not match image {h}x{w}",
            sp.height, sp.width
        )));
    }
    let mut tint: Vec<Option<[f64; 3]>> = vec![None; sp.num_regions];
    for &(region, weight) in explanation.region_weights.iter().take(top_regions) {
        if region < sp.num_regions && weight != 0.0 {
            tint[region] = Some(if weight > 0.0 { GREEN } else { RED });
        }
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let p = y * w + x;
        let base = rgb_at(image, c, h, w, p);
        let px = match tint[sp.labels[p]] {
            Some(color) if sp.is_boundary(y, x) => color,
            Some(color) => [0, 1, 2].map(|k| (1.0 - TINT) * base[k] + TINT * color[k]),
            None => base,
        };
        Rgb(px.map(to_u8))
    }))
}

/// Lays images out left to right, `columns` per row, on a black canvas
/// sized to the largest tile.
pub fn compose_panel(tiles: &[RgbImage], columns: usize) -> Result<RgbImage> {
    if tiles.is_empty() || columns == 0 {
        return Err(Error::contract("panel needs at least one tile and one column"));
    }
    let tw = tiles.iter().map(|t| t.width()).max().unwrap_or(0);
    let th = tiles.iter().map(|t| t.height()).max().unwrap_or(0);
    let cols = columns.min(tiles.len()) as u32;
    let rows = tiles.len().div_ceil(columns) as u32;
    let mut out = RgbImage::new(tw * cols, th * rows);
    for (i, tile) in tiles.iter().enumerate() {
        let (ox, oy) = ((i as u32 % cols) * tw, (i as u32 / cols) * th);
        image::imageops::replace(&mut out, tile, ox.into(), oy.into());
    }
    Ok(out)
}
