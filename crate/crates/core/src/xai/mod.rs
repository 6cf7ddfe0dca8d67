//! Explanation methods.
//!
//! Each method asks only for the capability it needs: perturbation methods
//! (Score-CAM, Faster Score-CAM, LIME) work through [`Classifier`] and
//! [`FeatureMaps`] and never touch gradients, while saliency-style methods
//! need [`ScoreGradient`] and the Grad-CAM family needs [`FeatureGradient`].

mod cam;
mod lime;
mod saliency;
mod superpixel;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Classifier, CnnModel};
use crate::tensor::Tensor;

pub use cam::{
    faster_score_cam, grad_cam, grad_cam_pp, grad_cam_pp_weights, grad_cam_weights, score_cam,
    score_cam_channel_scores, top_variance_channels, weighted_activation_map,
};
pub use lime::{apply_mask, explain_lime, fit_surrogate, mask_distance, LimeConfig, LimeExplanation};
pub use saliency::{class_model_visualization, smoothgrad, vanilla_saliency, ClassModelImage};
pub use superpixel::{segment_superpixels, SuperpixelMap};

/// Pre-softmax class scores and their gradient with respect to the input.
pub trait ScoreGradient: Classifier {
    /// Score of `class` for one `[C,H,W]` image, and d score / d image.
    fn score_gradient(&self, image: &Tensor, class: usize) -> Result<(f64, Tensor)>;
}

/// Access to intermediate conv activations.
pub trait FeatureMaps: Classifier {
    fn feature_layers(&self) -> Vec<String>;
    fn default_feature_layer(&self) -> String;
    /// `[C,h,w]` activation of `layer` for one `[C,H,W]` image.
    fn feature_maps(&self, image: &Tensor, layer: &str) -> Result<Tensor>;
}

pub trait FeatureGradient: FeatureMaps {
    /// Activation of `layer` and the gradient of the `class` score w.r.t. it.
    fn feature_gradient(&self, image: &Tensor, class: usize, layer: &str) -> Result<(Tensor, Tensor)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "saliency")]
    Saliency,
    #[serde(rename = "smoothgrad")]
    SmoothGrad,
    #[serde(rename = "grad-cam")]
    GradCam,
    #[serde(rename = "grad-cam++")]
    GradCamPlusPlus,
    #[serde(rename = "score-cam")]
    ScoreCam,
    #[serde(rename = "faster-score-cam")]
    FasterScoreCam,
    #[serde(rename = "lime")]
    Lime,
    #[serde(rename = "class-model")]
    ClassModel,
}

impl Method {
    /// Panel order used when all methods are rendered side by side.
    pub const ALL: [Method; 8] = [
        Method::Saliency,
        Method::SmoothGrad,
        Method::GradCam,
        Method::GradCamPlusPlus,
        Method::ScoreCam,
        Method::FasterScoreCam,
        Method::Lime,
        Method::ClassModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::SmoothGrad => "smoothgrad",
            Method::GradCam => "grad-cam",
            Method::GradCamPlusPlus => "grad-cam++",
            Method::ScoreCam => "score-cam",
            Method::FasterScoreCam => "faster-score-cam",
            Method::Lime => "lime",
            Method::ClassModel => "class-model",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown explanation method {s:?}")))
    }
}

/// A per-pixel relevance map normalized to `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H,W]`.
    pub values: Tensor,
    pub method: Method,
    pub target_class: usize,
    /// Range of the map before normalization.
    pub raw_min: f64,
    pub raw_max: f64,
}

impl Heatmap {
    pub fn from_raw(raw: &Tensor, method: Method, target_class: usize) -> Self {
        Heatmap {
            values: normalize_map(raw),
            method,
            target_class,
            raw_min: raw.min(),
            raw_max: raw.max(),
        }
    }
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize_map(raw: &Tensor) -> Tensor {
    let (lo, hi) = (raw.min(), raw.max());
    if hi > lo {
        raw.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(raw.shape())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    /// Conv layer to explain; the last one when `None`.
    pub target_layer: Option<String>,
    pub smoothgrad_samples: usize,
    pub smoothgrad_sigma_fraction: f64,
    pub scorecam_top_k: usize,
    pub classmodel_steps: usize,
    pub classmodel_lambda: f64,
    pub classmodel_step_size: f64,
    pub seed: u64,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig {
            target_layer: None,
            smoothgrad_samples: 25,
            smoothgrad_sigma_fraction: 0.15,
            scorecam_top_k: 10,
            classmodel_steps: 200,
            classmodel_lambda: 0.01,
            classmodel_step_size: 1.0,
            seed: 0,
        }
    }
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smoothgrad_samples == 0 {
            return Err(Error::contract("smoothgrad_samples must be at least 1"));
        }
        if !(self.smoothgrad_sigma_fraction >= 0.0 && self.smoothgrad_sigma_fraction.is_finite()) {
            return Err(Error::contract("smoothgrad_sigma_fraction must be a nonnegative number"));
        }
        if self.scorecam_top_k == 0 {
            return Err(Error::contract("scorecam_top_k must be at least 1"));
        }
        if !(self.classmodel_lambda >= 0.0 && self.classmodel_step_size > 0.0) {
            return Err(Error::contract(
                "classmodel_lambda must be >= 0 and classmodel_step_size > 0",
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_class(model: &impl Classifier, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::contract(format!(
            "class index {class} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

pub(crate) fn check_image(model: &impl Classifier, image: &Tensor) -> Result<()> {
    if image.shape() != model.input_shape() {
        return Err(Error::dim(format!(
            "image shape {:?} does not match model input {:?}",
            image.shape(),
            model.input_shape()
        )));
    }
    Ok(())
}

pub(crate) fn as_batch(image: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.clone().reshape(&shape).expect("same element count")
}

/// Probability of `class` for a single image.
pub fn class_probability(model: &impl Classifier, image: &Tensor, class: usize) -> Result<f64> {
    let probs = model.predict_proba(&as_batch(image))?;
    Ok(probs.data()[class])
}

/// Argmax class of one image; ties go to the lower index.
pub fn predicted_class(model: &impl Classifier, image: &Tensor) -> Result<(usize, Vec<f64>)> {
    let probs = model.predict_proba(&as_batch(image))?.into_data();
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok((best, probs))
}

impl ScoreGradient for CnnModel {
    fn score_gradient(&self, image: &Tensor, class: usize) -> Result<(f64, Tensor)> {
        check_class(self, class)?;
        check_image(self, image)?;
        let mut graph = Graph::new();
        let input = graph.leaf(as_batch(image));
        let (trace, _) = self.trace(&mut graph, input, false, 0)?;
        let score = graph.pick(trace.logits, &[0, class])?;
        let mut grads = graph.backward_for(score, &[input])?;
        let g = grads
            .take(input)
            .unwrap_or_else(|| Tensor::zeros(graph.value(input).shape()));
        Ok((graph.value(score).item(), g.reshape(image.shape())?))
    }
}

impl FeatureMaps for CnnModel {
    fn feature_layers(&self) -> Vec<String> {
        self.layer_names()
    }

    fn default_feature_layer(&self) -> String {
        self.last_conv_layer()
    }

    fn feature_maps(&self, image: &Tensor, layer: &str) -> Result<Tensor> {
        let li = self.layer_index(layer)?;
        check_image(self, image)?;
        let mut graph = Graph::new();
        let input = graph.leaf(as_batch(image));
        let (trace, _) = self.trace(&mut graph, input, false, 0)?;
        let act = graph.value(trace.activations[li]);
        Ok(act.index_axis0(0))
    }
}

impl FeatureGradient for CnnModel {
    fn feature_gradient(&self, image: &Tensor, class: usize, layer: &str) -> Result<(Tensor, Tensor)> {
        let li = self.layer_index(layer)?;
        check_class(self, class)?;
        check_image(self, image)?;
        let mut graph = Graph::new();
        let input = graph.leaf(as_batch(image));
        let (trace, _) = self.trace(&mut graph, input, false, 0)?;
        let act = trace.activations[li];
        let score = graph.pick(trace.logits, &[0, class])?;
        let mut grads = graph.backward_for(score, &[act])?;
        let a = graph.value(act);
        let g = grads.take(act).unwrap_or_else(|| Tensor::zeros(a.shape()));
        Ok((a.index_axis0(0), g.index_axis0(0)))
    }
}
