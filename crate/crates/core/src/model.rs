//! The standard CNN: two conv/ReLU/max-pool stages, a ReLU dense layer with
//! dropout, and a softmax output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Something that maps an NCHW batch to class probabilities.
///
/// This is the only capability perturbation methods (Score-CAM, LIME) need.
pub trait Classifier: Sync {
    /// `[channels, height, width]` of a single input image.
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    /// `[N,C,H,W]` batch to `[N,K]` probabilities.
    fn predict_proba(&self, batch: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv_filters: Vec<usize>,
    pub kernel_size: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 224,
            input_width: 224,
            input_channels: 3,
            conv_filters: vec![32, 64],
            kernel_size: 3,
            dense_units: 256,
            dropout_rate: 0.25,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// Spatial size after every conv + pool stage, or a contract error if a
    /// stage would shrink below the kernel.
    pub fn stage_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let positive = [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("input_channels", self.input_channels),
            ("kernel_size", self.kernel_size),
            ("dense_units", self.dense_units),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(Error::contract("conv_filters must be a nonempty list of positive counts"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::contract(format!(
                "dropout_rate {} not in [0,1)",
                self.dropout_rate
            )));
        }
        let k = self.kernel_size;
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut sizes = Vec::with_capacity(self.conv_filters.len());
        for (i, _) in self.conv_filters.iter().enumerate() {
            if h < k || w < k {
                return Err(Error::contract(format!(
                    "stage {} input {h}x{w} is smaller than the {k}x{k} kernel",
                    i + 1
                )));
            }
            h = (h - k).div_ceil(2);
            w = (w - k).div_ceil(2);
            if h == 0 || w == 0 {
                return Err(Error::contract(format!(
                    "stage {} pools to an empty feature map",
                    i + 1
                )));
            }
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    pub fn flatten_width(&self) -> Result<usize> {
        let (h, w) = *self.stage_sizes()?.last().expect("at least one stage");
        Ok(h * w * self.conv_filters.last().expect("at least one stage"))
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let flat = self.flatten_width()?;
        let k = self.kernel_size;
        let mut shapes = Vec::new();
        let mut channels = self.input_channels;
        for (i, &f) in self.conv_filters.iter().enumerate() {
            let name = conv_layer_name(i);
            shapes.push((format!("{name}.weight"), vec![f, channels, k, k]));
            shapes.push((format!("{name}.bias"), vec![f]));
            channels = f;
        }
        shapes.push(("dense.weight".into(), vec![flat, self.dense_units]));
        shapes.push(("dense.bias".into(), vec![self.dense_units]));
        shapes.push(("output.weight".into(), vec![self.dense_units, self.num_classes]));
        shapes.push(("output.bias".into(), vec![self.num_classes]));
        Ok(shapes)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .parameter_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

fn conv_layer_name(i: usize) -> String {
    format!("conv{}", i + 1)
}

/// Nodes of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub logits: Var,
    pub probs: Var,
    /// Post-ReLU output of each conv layer, in order.
    pub activations: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

impl CnnModel {
    /// He-normal (fan-in) weights, zero biases. Values are rounded to single
    /// precision so that checkpoints round-trip exactly.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.parameter_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("positive standard deviation");
                    let mut t = Tensor::from_fn(&shape, |_| normal.sample(&mut rng));
                    t.round_to_f32();
                    t
                };
                (name, t)
            })
            .collect();
        Ok(CnnModel { config, params })
    }

    /// Assembles a model from explicit parameters; shapes must match `config`.
    pub fn from_parameters(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let shapes = config.parameter_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in shapes.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::dim(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(CnnModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.config.conv_filters.len()).map(conv_layer_name).collect()
    }

    pub fn last_conv_layer(&self) -> String {
        conv_layer_name(self.config.conv_filters.len() - 1)
    }

    pub fn layer_index(&self, layer: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|n| n == layer)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown layer {layer:?}; available: {:?}",
                    self.layer_names()
                ))
            })
    }

    /// Adds every parameter to `graph` as a borrowed leaf.
    pub fn parameter_leaves<'a>(&'a self, graph: &mut Graph<'a>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| graph.leaf_ref(t)).collect()
    }

    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_height, c.input_width];
        match batch.shape() {
            [_, rest @ ..] if rest == expected => Ok(()),
            other => Err(Error::dim(format!(
                "batch shape {other:?} does not match model input [N, {}, {}, {}]",
                expected[0], expected[1], expected[2]
            ))),
        }
    }

    /// Records a forward pass using `params` (as produced by
    /// [`parameter_leaves`](Self::parameter_leaves)) as the weights.
    pub fn trace_with(
        &self,
        graph: &mut Graph<'_>,
        input: Var,
        params: &[Var],
        training: bool,
        seed: u64,
    ) -> Result<Trace> {
        self.check_batch(graph.value(input))?;
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter leaf count does not match the model"));
        }
        let n = graph.value(input).shape()[0];
        let mut x = input;
        let mut activations = Vec::new();
        let stages = self.config.conv_filters.len();
        for i in 0..stages {
            let conv = graph.conv2d(x, params[2 * i], params[2 * i + 1], 1)?;
            let act = graph.relu(conv);
            activations.push(act);
            x = graph.maxpool2d(act)?;
        }
        let flat = graph.value(x).len() / n;
        x = graph.reshape(x, &[n, flat])?;
        let d = 2 * stages;
        x = graph.dense(x, params[d], params[d + 1])?;
        x = graph.relu(x);
        x = graph.dropout(x, self.config.dropout_rate, training, seed)?;
        let logits = graph.dense(x, params[d + 2], params[d + 3])?;
        let probs = graph.softmax(logits)?;
        Ok(Trace {
            logits,
            probs,
            activations,
        })
    }

    /// Records a forward pass with the model's own parameters. Returns the
    /// trace together with the parameter leaves.
    pub fn trace<'a>(
        &'a self,
        graph: &mut Graph<'a>,
        input: Var,
        training: bool,
        seed: u64,
    ) -> Result<(Trace, Vec<Var>)> {
        let params = self.parameter_leaves(graph);
        let trace = self.trace_with(graph, input, &params, training, seed)?;
        Ok((trace, params))
    }

    /// Class probabilities for an NCHW batch.
    pub fn forward(&self, batch: &Tensor, training: bool, seed: u64) -> Result<Tensor> {
        self.forward_logits(batch, training, seed)
            .and_then(|logits| crate::ops::softmax(&logits))
    }

    /// Pre-softmax scores for an NCHW batch.
    pub fn forward_logits(&self, batch: &Tensor, training: bool, seed: u64) -> Result<Tensor> {
        let mut graph = Graph::new();
        let input = graph.leaf(batch.clone());
        let (trace, _) = self.trace(&mut graph, input, training, seed)?;
        Ok(graph.value(trace.logits).clone())
    }
}

impl Classifier for CnnModel {
    fn input_shape(&self) -> [usize; 3] {
        let c = &self.config;
        [c.input_channels, c.input_height, c.input_width]
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch, false, 0)
    }
}
