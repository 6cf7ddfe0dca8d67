//! Local surrogate explanations over superpixel regions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_class, check_image, class_probability, segment_superpixels, SuperpixelMap};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    pub num_regions: usize,
    /// Total masked images evaluated, including the all-ones anchor.
    pub num_samples: usize,
    /// Defaults to `0.25 * sqrt(R)` for `R` regions.
    pub kernel_width: Option<f64>,
    pub ridge_lambda: f64,
    pub top_regions: usize,
    pub fill_value: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            num_regions: 50,
            num_samples: 1000,
            kernel_width: None,
            ridge_lambda: 1.0,
            top_regions: 5,
            fill_value: 0.0,
            seed: 0,
        }
    }
}

impl LimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_regions == 0 || self.num_samples == 0 || self.top_regions == 0 {
            return Err(Error::contract(
                "num_regions, num_samples and top_regions must be positive",
            ));
        }
        if let Some(kw) = self.kernel_width {
            if !(kw > 0.0 && kw.is_finite()) {
                return Err(Error::contract(format!("kernel width {kw} must be positive")));
            }
        }
        if !(self.ridge_lambda > 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::contract("ridge_lambda must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::contract("fill_value must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn kernel_width_for(&self, regions: usize) -> f64 {
        self.kernel_width.unwrap_or(0.25 * (regions as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeExplanation {
    /// `(region, weight)` sorted by `|weight|` descending, ties by region.
    pub region_weights: Vec<(usize, f64)>,
    pub intercept: f64,
    /// Weighted coefficient of determination of the surrogate.
    pub r2: f64,
}

impl LimeExplanation {
    pub fn weight(&self, region: usize) -> Option<f64> {
        self.region_weights.iter().find(|(r, _)| *r == region).map(|&(_, w)| w)
    }
}

/// Pixels of regions whose mask bit is 0 are set to `fill`.
pub fn apply_mask(image: &Tensor, sp: &SuperpixelMap, mask: &[u8], fill: f64) -> Result<Tensor> {
    if mask.len() != sp.num_regions {
        return Err(Error::contract(format!(
            "mask has {} entries for {} regions",
            mask.len(),
            sp.num_regions
        )));
    }
    let plane = sp.height * sp.width;
    if !image.len().is_multiple_of(plane) || image.shape()[image.rank() - 2..] != [sp.height, sp.width] {
        return Err(Error::dim(format!(
            "image {:?} does not match a {}x{} segmentation",
            image.shape(),
            sp.height,
            sp.width
        )));
    }
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask[sp.labels[i % plane]] == 0 {
            *v = fill;
        }
    }
    Ok(out)
}

/// Cosine distance between a mask and the all-ones vector; 1 for the empty
/// mask.
pub fn mask_distance(mask: &[u8]) -> f64 {
    let on = mask.iter().filter(|&&b| b != 0).count();
    if on == 0 {
        1.0
    } else {
        1.0 - (on as f64 / mask.len() as f64).sqrt()
    }
}

/// Weighted ridge regression of `responses` on mask bits with an
/// unpenalized intercept. Sample weights are `exp(-d^2 / kernel_width^2)`.
pub fn fit_surrogate(
    masks: &[Vec<u8>],
    responses: &[f64],
    distances: &[f64],
    kernel_width: f64,
    lambda: f64,
) -> Result<LimeExplanation> {
    let s = masks.len();
    if s == 0 {
        return Err(Error::contract("surrogate needs at least one sample"));
    }
    if responses.len() != s || distances.len() != s {
        return Err(Error::dim(format!(
            "{s} masks, {} responses, {} distances",
            responses.len(),
            distances.len()
        )));
    }
    let r = masks[0].len();
    if masks.iter().any(|m| m.len() != r) {
        return Err(Error::dim("masks have different lengths"));
    }
    if kernel_width.is_nan() || kernel_width <= 0.0 || lambda.is_nan() || lambda < 0.0 {
        return Err(Error::contract("kernel width must be positive and lambda nonnegative"));
    }
    let pi: Vec<f64> = distances
        .iter()
        .map(|d| (-d * d / (kernel_width * kernel_width)).exp())
        .collect();
    let x = DMatrix::from_fn(s, r + 1, |i, j| if j == 0 { 1.0 } else { f64::from(masks[i][j - 1]) });
    let xtw = DMatrix::from_fn(r + 1, s, |j, i| x[(i, j)] * pi[i]);
    let mut a = &xtw * &x;
    for j in 1..=r {
        a[(j, j)] += lambda;
    }
    let b = &xtw * DVector::from_column_slice(responses);

    let svd = a.clone().svd(false, false);
    let top = svd.singular_values.max();
    let rank = svd.rank(top * (r + 1) as f64 * f64::EPSILON * 16.0);
    if rank < r + 1 {
        return Err(Error::Solver(format!(
            "normal equations are rank deficient: rank {rank} of {} (rank defect {})",
            r + 1,
            r + 1 - rank
        )));
    }
    let beta = a
        .cholesky()
        .ok_or_else(|| Error::Solver("normal equations are not positive definite".into()))?
        .solve(&b);

    let fitted = &x * &beta;
    let wsum: f64 = pi.iter().sum();
    let ybar = pi.iter().zip(responses).map(|(p, y)| p * y).sum::<f64>() / wsum;
    let ss_res: f64 = (0..s).map(|i| pi[i] * (responses[i] - fitted[i]).powi(2)).sum();
    let ss_tot: f64 = (0..s).map(|i| pi[i] * (responses[i] - ybar).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let mut region_weights: Vec<(usize, f64)> = (0..r).map(|j| (j, beta[j + 1])).collect();
    region_weights.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    Ok(LimeExplanation {
        region_weights,
        intercept: beta[0],
        r2,
    })
}

/// Explains the `class` probability of `model` around `image`.
///
/// Draws `num_samples` masks (the first is all ones, the rest
/// Bernoulli(0.5) per region), evaluates each masked image as its own
/// batch, and fits the surrogate.
pub fn explain_lime(
    model: &impl Classifier,
    image: &Tensor,
    class: usize,
    config: &LimeConfig,
) -> Result<(LimeExplanation, SuperpixelMap)> {
    config.validate()?;
    check_class(model, class)?;
    check_image(model, image)?;
    let [_, h, w] = model.input_shape();
    let sp = segment_superpixels(image, config.num_regions.min(h * w), config.seed)?;
    let r = sp.num_regions;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut masks = vec![vec![1u8; r]];
    for _ in 1..config.num_samples {
        masks.push((0..r).map(|_| u8::from(rng.random_bool(0.5))).collect());
    }
    let responses = masks
        .par_iter()
        .map(|m| class_probability(model, &apply_mask(image, &sp, m, config.fill_value)?, class))
        .collect::<Result<Vec<_>>>()?;
    let distances: Vec<f64> = masks.iter().map(|m| mask_distance(m)).collect();
    let explanation = fit_surrogate(
        &masks,
        &responses,
        &distances,
        config.kernel_width_for(r),
        config.ridge_lambda,
    )?;
    Ok((explanation, sp))
}
