//! Grid-seeded local k-means superpixels (SLIC-style) over intensity and
//! position.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ITERATIONS: usize = 10;
/// Weight of a unit intensity difference relative to one cell of spatial
/// distance.
const INTENSITY_WEIGHT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major region id per pixel, in `0..num_regions`.
    pub labels: Vec<usize>,
    pub num_regions: usize,
}

impl SuperpixelMap {
    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_regions];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// True if the pixel has a 4-neighbor in a different region.
    pub fn is_boundary(&self, y: usize, x: usize) -> bool {
        let l = self.label(y, x);
        (y > 0 && self.label(y - 1, x) != l)
            || (y + 1 < self.height && self.label(y + 1, x) != l)
            || (x > 0 && self.label(y, x - 1) != l)
            || (x + 1 < self.width && self.label(y, x + 1) != l)
    }
}

/// Grid shape `(rows, cols)` with `rows * cols <= n`, cells close to square.
fn grid_shape(n: usize, h: usize, w: usize) -> (usize, usize) {
    let cols = ((n as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, n.min(w));
    let rows = (n / cols).clamp(1, h);
    (rows, cols)
}

fn bounds(len: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|i| i * len / parts).collect()
}

/// Segments a `[C,H,W]` (or `[H,W]`) image into at most `num_regions`
/// 4-connected regions.
///
/// Initialization is a fixed grid, so `_seed` does not change the result; it
/// is accepted to keep the call signature uniform with the sampling steps.
pub fn segment_superpixels(image: &Tensor, num_regions: usize, _seed: u64) -> Result<SuperpixelMap> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(Error::contract(format!("cannot segment shape {:?}", image.shape()))),
    };
    if num_regions == 0 || num_regions > h * w {
        return Err(Error::contract(format!(
            "num_regions {num_regions} must be in 1..={} for a {h}x{w} image",
            h * w
        )));
    }
    let intensity: Vec<f64> = (0..h * w)
        .map(|p| (0..c).map(|ch| image.data()[ch * h * w + p]).sum::<f64>() / c as f64)
        .collect();

    let (rows, cols) = grid_shape(num_regions, h, w);
    let (ys, xs) = (bounds(h, rows), bounds(w, cols));
    let (sy, sx) = (h as f64 / rows as f64, w as f64 / cols as f64);
    let mut labels = vec![0usize; h * w];
    for r in 0..rows {
        for cc in 0..cols {
            for y in ys[r]..ys[r + 1] {
                for x in xs[cc]..xs[cc + 1] {
                    labels[y * w + x] = r * cols + cc;
                }
            }
        }
    }

    let k = rows * cols;
    // (intensity, y, x) per center.
    let mut centers = vec![(0.0, 0.0, 0.0); k];
    for _ in 0..ITERATIONS {
        let mut acc = vec![(0.0, 0.0, 0.0, 0usize); k];
        for y in 0..h {
            for x in 0..w {
                let a = &mut acc[labels[y * w + x]];
                a.0 += intensity[y * w + x];
                a.1 += y as f64;
                a.2 += x as f64;
                a.3 += 1;
            }
        }
        for (center, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                *center = (a.0 / n, a.1 / n, a.2 / n);
            }
        }
        let mut best = vec![f64::INFINITY; h * w];
        let mut next = labels.clone();
        for (id, &(ci, cy, cx)) in centers.iter().enumerate() {
            if acc[id].3 == 0 {
                continue;
            }
            let y0 = (cy - sy).floor().max(0.0) as usize;
            let y1 = ((cy + sy).ceil() as usize).min(h - 1);
            let x0 = (cx - sx).floor().max(0.0) as usize;
            let x1 = ((cx + sx).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let di = INTENSITY_WEIGHT * (intensity[p] - ci);
                    let dy = (y as f64 - cy) / sy;
                    let dx = (x as f64 - cx) / sx;
                    let d = di * di + dy * dy + dx * dx;
                    if d < best[p] {
                        best[p] = d;
                        next[p] = id;
                    }
                }
            }
        }
        if next == labels {
            break;
        }
        labels = next;
    }

    let min_size = ((h * w) / (4 * k)).max(1);
    Ok(enforce_connectivity(&labels, h, w, min_size))
}

/// Relabels 4-connected components in row-major scan order. Components
/// smaller than `min_size` join the region of the already-labeled pixel to
/// the left of (or above) their first pixel.
fn enforce_connectivity(raw: &[usize], h: usize, w: usize, min_size: usize) -> SuperpixelMap {
    const UNSET: usize = usize::MAX;
    let mut labels = vec![UNSET; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if labels[start] != UNSET {
            continue;
        }
        component.clear();
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if labels[q] == UNSET && raw[q] == raw[start] {
                    labels[q] = next;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        let (y, x) = (start / w, start % w);
        let neighbor = if x > 0 {
            Some(start - 1)
        } else if y > 0 {
            Some(start - w)
        } else {
            None
        };
        match neighbor {
            Some(q) if component.len() < min_size => {
                let target = labels[q];
                for &p in &component {
                    labels[p] = target;
                }
            }
            _ => next += 1,
        }
    }
    SuperpixelMap {
        height: h,
        width: w,
        labels,
        num_regions: next,
    }
}
