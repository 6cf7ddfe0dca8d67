//! Image decoding, bilinear resizing, dataset directory ingestion and the
//! stratified train/validation/test split.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABEL_NO_TUMOR: u8 = 0;
pub const LABEL_TUMOR: u8 = 1;

/// Subdirectory name for each label under a dataset root.
pub const CLASS_DIRS: [(&str, u8); 2] = [("no", LABEL_NO_TUMOR), ("yes", LABEL_TUMOR)];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub pixels: Tensor,
    pub label: u8,
    pub source_path: String,
}

/// Decodes a PNG or JPEG into a `[3,H,W]` tensor with values `v/255`.
/// Grayscale sources are replicated across the three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        f64::from(raw[p * 3 + c]) / 255.0
    })
}

/// Half-pixel-center source coordinate, clamped to the valid range.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resize of a `[C,H,W]` tensor (or `[H,W]`) with half-pixel
/// centers.
pub fn resize_bilinear(pixels: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract(format!("target size {out_h}x{out_w} must be positive")));
    }
    let (c, h, w) = match *pixels.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => {
            return Err(Error::dim(format!(
                "resize expects [C,H,W] or [H,W], got {:?}",
                pixels.shape()
            )))
        }
    };
    if (h, w) == (out_h, out_w) {
        return Ok(pixels.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|y| source_coord(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    let src = pixels.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let shape = if pixels.rank() == 3 {
        vec![c, out_h, out_w]
    } else {
        vec![out_h, out_w]
    };
    Tensor::new(shape, out)
}

/// Adapts a `[C,H,W]` image to `channels`: 3 to 1 by channel mean, 1 to 3
/// by replication.
pub fn match_channels(pixels: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = match *pixels.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim(format!("expected [C,H,W], got {:?}", pixels.shape()))),
    };
    let plane = h * w;
    let d = pixels.data();
    match (c, channels) {
        (a, b) if a == b => Ok(pixels.clone()),
        (_, 1) => Ok(Tensor::from_fn(&[1, h, w], |p| {
            (0..c).map(|ch| d[ch * plane + p]).sum::<f64>() / c as f64
        })),
        (1, _) => Ok(Tensor::from_fn(&[channels, h, w], |i| d[i % plane])),
        _ => Err(Error::dim(format!("cannot convert {c} channels to {channels}"))),
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Image files under `<root>/no` (label 0) and `<root>/yes` (label 1),
/// sorted by path within each class.
pub fn list_dataset(root: impl AsRef<Path>) -> Result<[Vec<PathBuf>; 2]> {
    let root = root.as_ref();
    let mut out: [Vec<PathBuf>; 2] = Default::default();
    for (dir, label) in CLASS_DIRS {
        let class_dir = root.join(dir);
        let entries = std::fs::read_dir(&class_dir).map_err(|e| Error::Ingest {
            path: class_dir.clone(),
            reason: e.to_string(),
        })?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry?.path();
            if path.is_file() && is_image_file(&path) {
                files.push(path);
            }
        }
        files.sort();
        out[label as usize] = files;
    }
    Ok(out)
}

/// Loads and resizes every image in a dataset directory, grouped by label.
pub fn load_dataset(root: impl AsRef<Path>, height: usize, width: usize) -> Result<[Vec<ImageSample>; 2]> {
    let listed = list_dataset(root)?;
    let mut out: [Vec<ImageSample>; 2] = Default::default();
    for (label, paths) in listed.iter().enumerate() {
        out[label] = paths
            .par_iter()
            .map(|p| load_sample(p, label as u8, height, width))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(out)
}

pub fn load_sample(path: &Path, label: u8, height: usize, width: usize) -> Result<ImageSample> {
    let pixels = resize_bilinear(&load_image(path)?, height, width)?;
    Ok(ImageSample {
        pixels,
        label,
        source_path: path.to_string_lossy().into_owned(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

// Slack for products like 0.1 * 155 = 15.500000000000002.
const ROUNDING_SLACK: f64 = 1e-9;

impl SplitRatios {
    /// Per-class `(train, validation, test)` counts: train is floored,
    /// validation rounds half down, test takes the remainder.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::contract(format!("invalid split ratios {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("split ratios sum to {total}, not 1")));
        }
        let nf = n as f64;
        let train = ((nf * self.train + ROUNDING_SLACK).floor() as usize).min(n);
        let val_exact = nf * self.validation;
        let validation = ((val_exact - 0.5 - ROUNDING_SLACK).ceil().max(0.0) as usize).min(n - train);
        Ok((train, validation, n - train - validation))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T = ImageSample> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

impl<T> DatasetSplit<T> {
    pub fn part(&self, which: SplitPart) -> &[T] {
        match which {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    #[serde(rename = "val")]
    Validation,
    Test,
}

/// Stratified split: each class is shuffled with the seeded generator and
/// cut according to [`SplitRatios::counts`]. Parts list class 0 items first.
pub fn split_dataset<T>(classes: Vec<Vec<T>>, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (label, mut items) in classes.into_iter().enumerate() {
        if items.is_empty() {
            return Err(Error::contract(format!("class {label} has no samples")));
        }
        let (n_train, n_val, _) = ratios.counts(items.len())?;
        items.shuffle(&mut rng);
        let mut rest = items.split_off(n_train);
        let test = rest.split_off(n_val);
        split.train.extend(items);
        split.validation.extend(rest);
        split.test.extend(test);
    }
    Ok(split)
}

/// Source paths per split part, for exact replay of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(split: &DatasetSplit) -> Self {
        let paths = |v: &[ImageSample]| v.iter().map(|s| s.source_path.clone()).collect();
        SplitManifest {
            seed: split.seed,
            train: paths(&split.train),
            validation: paths(&split.validation),
            test: paths(&split.test),
        }
    }

    /// Rebuilds a split from already-loaded samples, matching by source path.
    pub fn apply(&self, samples: Vec<ImageSample>) -> Result<DatasetSplit> {
        let mut by_path: std::collections::HashMap<String, ImageSample> = samples
            .into_iter()
            .map(|s| (s.source_path.clone(), s))
            .collect();
        let mut take = |paths: &[String]| -> Result<Vec<ImageSample>> {
            paths
                .iter()
                .map(|p| {
                    by_path.remove(p).ok_or_else(|| {
                        Error::contract(format!("split manifest names unknown or repeated sample {p}"))
                    })
                })
                .collect()
        };
        Ok(DatasetSplit {
            train: take(&self.train)?,
            validation: take(&self.validation)?,
            test: take(&self.test)?,
            seed: self.seed,
        })
    }
}
