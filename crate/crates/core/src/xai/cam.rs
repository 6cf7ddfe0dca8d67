//! Class activation maps: Grad-CAM, Grad-CAM++, Score-CAM and Faster
//! Score-CAM.

use rayon::prelude::*;

use super::{
    as_batch, check_class, check_image, normalize_map, FeatureGradient, FeatureMaps, Heatmap, Method,
};
use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(format!("expected a [C,h,w] activation, got {:?}", t.shape()))),
    }
}

/// Spatial mean of the gradient of each channel.
pub fn grad_cam_weights(grads: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = dims3(grads)?;
    let g = grads.data();
    Ok((0..c)
        .map(|i| g[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect())
}

/// Grad-CAM++ channel weights `sum_xy w_xy * relu(g_xy)` with
/// `w = g^2 / (2 g^2 + sum_xy(A) * g^3)` and zero denominators mapped to 0.
pub fn grad_cam_pp_weights(acts: &Tensor, grads: &Tensor) -> Result<Vec<f64>> {
    acts.expect_same_shape(grads)?;
    let (c, h, w) = dims3(grads)?;
    let n = h * w;
    Ok((0..c)
        .map(|i| {
            let a = &acts.data()[i * n..(i + 1) * n];
            let g = &grads.data()[i * n..(i + 1) * n];
            let total: f64 = a.iter().sum();
            g.iter()
                .map(|&d| {
                    let den = 2.0 * d * d + total * d * d * d;
                    let wxy = if den != 0.0 { d * d / den } else { 0.0 };
                    wxy * d.max(0.0)
                })
                .sum()
        })
        .collect())
}

/// `relu(sum_i weights[i] * acts[i])` as an `[h,w]` map.
pub fn weighted_activation_map(acts: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (c, h, w) = dims3(acts)?;
    if weights.len() != c {
        return Err(Error::dim(format!("{} weights for {c} channels", weights.len())));
    }
    let a = acts.data();
    let mut out = vec![0.0; h * w];
    for (i, &wi) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&a[i * h * w..(i + 1) * h * w]) {
            *o += wi * v;
        }
    }
    Tensor::new(vec![h, w], out.into_iter().map(|v| v.max(0.0)).collect())
}

fn upsampled_heatmap(
    model: &impl Classifier,
    map: &Tensor,
    method: Method,
    class: usize,
) -> Result<Heatmap> {
    let [_, h, w] = model.input_shape();
    Ok(Heatmap::from_raw(&resize_bilinear(map, h, w)?, method, class))
}

pub fn grad_cam(model: &impl FeatureGradient, image: &Tensor, class: usize, layer: &str) -> Result<Heatmap> {
    let (acts, grads) = model.feature_gradient(image, class, layer)?;
    let map = weighted_activation_map(&acts, &grad_cam_weights(&grads)?)?;
    upsampled_heatmap(model, &map, Method::GradCam, class)
}

pub fn grad_cam_pp(model: &impl FeatureGradient, image: &Tensor, class: usize, layer: &str) -> Result<Heatmap> {
    let (acts, grads) = model.feature_gradient(image, class, layer)?;
    let map = weighted_activation_map(&acts, &grad_cam_pp_weights(&acts, &grads)?)?;
    upsampled_heatmap(model, &map, Method::GradCamPlusPlus, class)
}

fn upsampled_channel(acts: &Tensor, channel: usize, h: usize, w: usize) -> Result<Tensor> {
    resize_bilinear(&acts.index_axis0(channel), h, w)
}

/// Increase in target-class probability when the image is masked by each
/// listed channel, relative to the all-zero baseline image.
///
/// Returns one score per entry of `channels`, in the same order.
pub fn score_cam_channel_scores(
    model: &impl Classifier,
    image: &Tensor,
    class: usize,
    acts: &Tensor,
    channels: &[usize],
) -> Result<Vec<f64>> {
    check_class(model, class)?;
    check_image(model, image)?;
    let (c, _, _) = dims3(acts)?;
    if let Some(&bad) = channels.iter().find(|&&i| i >= c) {
        return Err(Error::contract(format!("channel {bad} out of range for {c} channels")));
    }
    let [ch, h, w] = model.input_shape();
    let prob = |x: &Tensor| -> Result<f64> {
        Ok(model.predict_proba(&as_batch(x))?.data()[class])
    };
    let baseline = prob(&Tensor::zeros(&[ch, h, w]))?;
    channels
        .par_iter()
        .map(|&i| {
            let mask = normalize_map(&upsampled_channel(acts, i, h, w)?);
            let m = mask.data();
            let masked = Tensor::from_fn(&[ch, h, w], |p| image.data()[p] * m[p % (h * w)]);
            Ok(prob(&masked)? - baseline)
        })
        .collect()
}

fn score_cam_over(
    model: &impl FeatureMaps,
    image: &Tensor,
    class: usize,
    acts: &Tensor,
    channels: &[usize],
    method: Method,
) -> Result<Heatmap> {
    let scores = score_cam_channel_scores(model, image, class, acts, channels)?;
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    let [_, h, w] = model.input_shape();
    let mut sum = vec![0.0; h * w];
    for (&i, e) in channels.iter().zip(&exp) {
        let up = upsampled_channel(acts, i, h, w)?;
        for (s, &v) in sum.iter_mut().zip(up.data()) {
            *s += e / z * v;
        }
    }
    let map = Tensor::new(vec![h, w], sum.into_iter().map(|v| v.max(0.0)).collect())?;
    Ok(Heatmap::from_raw(&map, method, class))
}

/// Gradient-free CAM weighted by each channel's effect on the class
/// probability. Needs only forward passes.
pub fn score_cam(model: &impl FeatureMaps, image: &Tensor, class: usize, layer: &str) -> Result<Heatmap> {
    check_class(model, class)?;
    let acts = model.feature_maps(image, layer)?;
    let all: Vec<usize> = (0..acts.shape()[0]).collect();
    score_cam_over(model, image, class, &acts, &all, Method::ScoreCam)
}

/// Indices of the `k` channels with the largest spatial variance, in
/// ascending index order. Ties in variance go to the lower index.
pub fn top_variance_channels(acts: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (c, h, w) = dims3(acts)?;
    if k == 0 || k > c {
        return Err(Error::contract(format!("top-k {k} must be in 1..={c}")));
    }
    let n = (h * w) as f64;
    let var: Vec<f64> = (0..c)
        .map(|i| {
            let plane = &acts.data()[i * h * w..(i + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / n;
            plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
        })
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Score-CAM restricted to the `top_k` highest-variance channels.
pub fn faster_score_cam(
    model: &impl FeatureMaps,
    image: &Tensor,
    class: usize,
    layer: &str,
    top_k: usize,
) -> Result<Heatmap> {
    check_class(model, class)?;
    let acts = model.feature_maps(image, layer)?;
    let channels = top_variance_channels(&acts, top_k)?;
    score_cam_over(model, image, class, &acts, &channels, Method::FasterScoreCam)
}
