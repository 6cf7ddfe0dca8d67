//! Input-gradient methods: vanilla saliency, SmoothGrad and class model
//! visualization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{check_class, check_image, CamConfig, Heatmap, Method, ScoreGradient};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::train::mix_seed;

/// Per-pixel max over channels of `|grad|`, as an `[H,W]` map.
fn channel_max_abs(grad: &Tensor) -> Tensor {
    let [c, h, w] = [grad.shape()[0], grad.shape()[1], grad.shape()[2]];
    let g = grad.data();
    Tensor::from_fn(&[h, w], |p| {
        (0..c).map(|ch| g[ch * h * w + p].abs()).fold(0.0, f64::max)
    })
}

fn raw_saliency(model: &impl ScoreGradient, image: &Tensor, class: usize) -> Result<Tensor> {
    let (_, grad) = model.score_gradient(image, class)?;
    Ok(channel_max_abs(&grad))
}

pub fn vanilla_saliency(model: &impl ScoreGradient, image: &Tensor, class: usize) -> Result<Heatmap> {
    check_class(model, class)?;
    check_image(model, image)?;
    let raw = raw_saliency(model, image, class)?;
    Ok(Heatmap::from_raw(&raw, Method::Saliency, class))
}

/// Mean of saliency maps over Gaussian-perturbed copies of `image`.
///
/// Noise for sample `i` is drawn from its own seeded stream, and the maps
/// are averaged in sample order, so the result does not depend on thread
/// scheduling.
pub fn smoothgrad(
    model: &impl ScoreGradient,
    image: &Tensor,
    class: usize,
    config: &CamConfig,
) -> Result<Heatmap> {
    config.validate()?;
    check_class(model, class)?;
    check_image(model, image)?;
    let sigma = config.smoothgrad_sigma_fraction * (image.max() - image.min());
    let maps = (0..config.smoothgrad_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, i as u64, 0x5347));
            let mut noisy = image.clone();
            for v in noisy.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
            raw_saliency(model, &noisy, class)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Tensor::zeros(maps[0].shape());
    for (k, map) in maps.iter().enumerate() {
        let k = (k + 1) as f64;
        for (m, &x) in mean.data_mut().iter_mut().zip(map.data()) {
            *m += (x - *m) / k;
        }
    }
    Ok(Heatmap::from_raw(&mean, Method::SmoothGrad, class))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassModelImage {
    /// Final image clipped to `[0,1]`.
    pub image: Tensor,
    /// Final image before clipping.
    pub raw: Tensor,
    /// `S(I) - lambda * |I|^2` at every iterate, starting from the zero image.
    pub objective: Vec<f64>,
}

/// Synthesizes an image that maximizes the class score under an L2 penalty.
///
/// Starts from the zero image and takes `classmodel_steps` proximal ascent
/// steps `I <- (I + eta * dS/dI) / (1 + 2 * lambda * eta)`, which stays
/// stable for any penalty strength.
pub fn class_model_visualization(
    model: &impl ScoreGradient,
    class: usize,
    config: &CamConfig,
) -> Result<ClassModelImage> {
    config.validate()?;
    check_class(model, class)?;
    let lambda = config.classmodel_lambda;
    let eta = config.classmodel_step_size;
    let mut image = Tensor::zeros(&model.input_shape());
    let mut objective = Vec::with_capacity(config.classmodel_steps + 1);
    for step in 0..=config.classmodel_steps {
        let (score, grad) = model.score_gradient(&image, class)?;
        let norm2: f64 = image.data().iter().map(|v| v * v).sum();
        objective.push(score - lambda * norm2);
        if step == config.classmodel_steps {
            break;
        }
        let shrink = 1.0 + 2.0 * lambda * eta;
        image = image.zip_map(&grad, |v, g| (v + eta * g) / shrink)?;
    }
    Ok(ClassModelImage {
        image: image.map(|v| v.clamp(0.0, 1.0)),
        raw: image,
        objective,
    })
}
