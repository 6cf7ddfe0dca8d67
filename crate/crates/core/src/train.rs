//! Minibatch training with Adam on plain or class-weighted log loss, and
//! model evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::loss::{self, compute_class_weights, ClassWeights};
use crate::metrics::{self, ConfusionMatrix, Metrics, RocCurve};
use crate::model::{Classifier, CnnModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cost_sensitive: bool,
    /// Explicit weights for the cost-sensitive branch; derived from the
    /// training-set class counts when absent.
    pub weights: Option<ClassWeights>,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Weights used by the cost-sensitive branch, if it ran.
    pub weights: Option<ClassWeights>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for i in 0..self.epochs() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                self.train_loss[i],
                self.train_accuracy[i],
                self.val_loss[i],
                self.val_accuracy[i]
            ));
        }
        s
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &CnnModel, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters are kept at single precision.
    pub fn update(&mut self, model: &mut CnnModel, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((param, g), m), v) in model
            .parameters_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = (*p - update) as f32 as f64;
            }
        }
    }
}

/// SplitMix64 finalizer, for deriving independent sub-seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Rough upper bound on the f64 values a traced forward + backward keeps per
// sample; used to split large batches into chunks.
fn floats_per_sample(model: &CnnModel) -> usize {
    let c = model.config();
    let mut total = c.input_channels * c.input_height * c.input_width;
    let (mut h, mut w) = (c.input_height, c.input_width);
    for &f in &c.conv_filters {
        h = h + 1 - c.kernel_size;
        w = w + 1 - c.kernel_size;
        total += 3 * f * h * w;
        h /= 2;
        w /= 2;
        total += 2 * f * h * w;
    }
    2 * total
}

const CHUNK_BUDGET_FLOATS: usize = 96 << 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// One optimizer step on a batch. `weights = None` is the standard log loss.
pub fn train_step(
    model: &mut CnnModel,
    optimizer: &mut Adam,
    batch: &Tensor,
    labels: &[u8],
    weights: Option<ClassWeights>,
    seed: u64,
) -> Result<StepStats> {
    if model.config().num_classes != 2 {
        return Err(Error::contract("training requires a two-class model"));
    }
    let n = batch.shape()[0];
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for a batch of {n}", labels.len())));
    }
    let chunk = (CHUNK_BUDGET_FLOATS / floats_per_sample(model)).clamp(1, n);
    let mut grads: Vec<Tensor> = model
        .parameters()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut loss = 0.0;
    let mut correct = 0;
    let per_image: usize = batch.shape()[1..].iter().product();
    for (ci, start) in (0..n).step_by(chunk).enumerate() {
        let end = (start + chunk).min(n);
        let part = if chunk == n {
            batch.clone()
        } else {
            let mut shape = batch.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, batch.data()[start * per_image..end * per_image].to_vec())?
        };
        let part_labels = &labels[start..end];
        let frac = (end - start) as f64 / n as f64;

        let mut graph = Graph::new();
        let input = graph.leaf(part);
        let (trace, params) = model.trace(&mut graph, input, true, mix_seed(seed, ci as u64, 0))?;
        let p1 = graph.column(trace.probs, 1)?;
        let chunk_loss = graph.bce(p1, part_labels, weights)?;
        let scaled = if chunk == n { chunk_loss } else { graph.scale(chunk_loss, frac) };
        loss += graph.value(scaled).item();
        correct += graph
            .value(p1)
            .data()
            .iter()
            .zip(part_labels)
            .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
            .count();
        let mut g = graph.backward_for(scaled, &params)?;
        for (acc, v) in grads.iter_mut().zip(&params) {
            if let Some(t) = g.take(*v) {
                acc.add_assign(&t);
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Evaluation(format!("training loss became {loss}")));
    }
    optimizer.update(model, &grads);
    Ok(StepStats { loss, correct })
}

pub fn stack_samples(samples: &[ImageSample]) -> Result<Tensor> {
    let pixels: Vec<Tensor> = samples.iter().map(|s| s.pixels.clone()).collect();
    Tensor::stack(&pixels)
}

const PREDICT_CHUNK: usize = 16;

/// Class-1 probabilities for each sample, in order.
pub fn predict_positive(model: &impl Classifier, samples: &[ImageSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let probs = model.predict_proba(&stack_samples(chunk)?)?;
        let k = probs.shape()[1];
        out.extend(probs.data().chunks(k).map(|row| row[1]));
    }
    Ok(out)
}

/// Trains `model` on `split.train`, reporting per-epoch train and
/// validation loss/accuracy. Deterministic for a fixed seed.
pub fn train(mut model: CnnModel, split: &DatasetSplit, config: &TrainConfig) -> Result<(CnnModel, TrainReport)> {
    config.validate()?;
    for (name, part) in [("train", &split.train), ("validation", &split.validation)] {
        if part.is_empty() {
            return Err(Error::contract(format!("{name} split is empty")));
        }
    }
    let mut report = TrainReport::default();
    let weights = if config.cost_sensitive {
        let w = match config.weights {
            Some(w) => w,
            None => {
                let pos = split.train.iter().filter(|s| s.label == 1).count();
                compute_class_weights(pos, split.train.len() - pos)?
            }
        };
        report.weights = Some(w);
        Some(w)
    } else {
        None
    };
    if config.epochs == 0 {
        return Ok((model, report));
    }

    let mut optimizer = Adam::new(&model, config.learning_rate);
    let val_labels: Vec<u8> = split.validation.iter().map(|s| s.label).collect();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, 1)));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<ImageSample> = idx.iter().map(|&i| split.train[i].clone()).collect();
            let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
            let batch = stack_samples(&samples)?;
            let stats = train_step(
                &mut model,
                &mut optimizer,
                &batch,
                &labels,
                weights,
                mix_seed(config.seed, epoch as u64, 2 + bi as u64),
            )?;
            loss_sum += stats.loss * idx.len() as f64;
            correct += stats.correct;
        }
        let n = split.train.len() as f64;
        report.train_loss.push(loss_sum / n);
        report.train_accuracy.push(correct as f64 / n);

        let val_probs = predict_positive(&model, &split.validation)?;
        let val_loss = match weights {
            None => loss::log_loss(&val_labels, &val_probs)?,
            Some(w) => loss::weighted_log_loss(&val_labels, &val_probs, w)?,
        };
        let val_correct = val_probs
            .iter()
            .zip(&val_labels)
            .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
            .count();
        report.val_loss.push(val_loss);
        report.val_accuracy.push(val_correct as f64 / val_labels.len() as f64);
    }
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub roc: RocCurve,
    /// Class-1 probability per sample.
    pub probs: Vec<f64>,
}

pub fn evaluate(model: &impl Classifier, samples: &[ImageSample], threshold: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate an empty sample set"));
    }
    let probs = predict_positive(model, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let confusion = metrics::confusion(&labels, &probs, threshold)?;
    let metrics = metrics::metrics_from_confusion(&confusion)?;
    let roc = metrics::roc_auc(&labels, &probs)?;
    Ok(Evaluation {
        confusion,
        metrics,
        roc,
        probs,
    })
}
