//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node appended after its inputs,
//! so node indices are already a topological order and the reverse pass is a
//! single sweep from the loss back to the leaves. Leaves may borrow their
//! values (model parameters) instead of copying them.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::loss::{self, ClassWeights};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    Softmax(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Sum(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Mul(Var, Var),
    Column {
        input: Var,
        column: usize,
    },
    Pick {
        input: Var,
        offset: usize,
    },
    Bce {
        probs: Var,
        labels: Vec<u8>,
        weights: Option<ClassWeights>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Column { .. } => "column",
            Op::Pick { .. } => "pick",
            Op::Bce { .. } => "bce",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar with respect to every node that influenced it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not influence the differentiated scalar.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Gradient of `var`, or zeros shaped like `like` if it had no influence.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that borrows its value, e.g. a model parameter.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op_tag(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.tag()
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernels), self.value(bias), stride)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax(self.value(input))?;
        Ok(self.push(out, Op::Softmax(input)))
    }

    /// Inverted dropout. Inference mode records an identity node.
    pub fn dropout(&mut self, input: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        let len = self.value(input).len();
        let mask = if training {
            ops::dropout_mask(len, rate, seed)?
        } else {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::contract(format!("dropout rate {rate} not in [0,1)")));
            }
            vec![1.0; len]
        };
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * mask[i]);
        Ok(self.push(out, Op::Dropout { input, mask }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum(input))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).scale(factor);
        self.push(out, Op::Scale(input, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Column `column` of a `[N,K]` tensor, as a `[N]` tensor.
    pub fn column(&mut self, input: Var, column: usize) -> Result<Var> {
        let x = self.value(input);
        let [n, k] = *x.shape() else {
            return Err(Error::dim(format!("column needs [N,K], got {:?}", x.shape())));
        };
        if column >= k {
            return Err(Error::contract(format!("column {column} out of range for K={k}")));
        }
        let out = Tensor::from_fn(&[n], |i| x.data()[i * k + column]);
        Ok(self.push(out, Op::Column { input, column }))
    }

    /// A single element as a scalar node.
    pub fn pick(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if index.len() != x.rank() || index.iter().zip(x.shape()).any(|(&i, &d)| i >= d) {
            return Err(Error::contract(format!(
                "index {index:?} out of range for shape {:?}",
                x.shape()
            )));
        }
        let offset = index
            .iter()
            .zip(x.shape())
            .fold(0, |acc, (&i, &d)| acc * d + i);
        let out = Tensor::scalar(x.data()[offset]);
        Ok(self.push(out, Op::Pick { input, offset }))
    }

    /// Mean binary cross-entropy of a `[N]` probability node; weighted when
    /// `weights` is given.
    pub fn bce(&mut self, probs: Var, labels: &[u8], weights: Option<ClassWeights>) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() != 1 {
            return Err(Error::dim(format!("bce needs [N] probabilities, got {:?}", p.shape())));
        }
        let value = match weights {
            None => loss::log_loss(labels, p.data())?,
            Some(w) => loss::weighted_log_loss(labels, p.data(), w)?,
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                weights,
            },
        ))
    }

    /// Reverse pass from a scalar node. Nodes recorded after `output` are
    /// ignored; every other node is visited once, in reverse order.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.backward_impl(output, None)
    }

    /// Like [`backward`](Self::backward) but only keeps the gradients of
    /// `keep`; intermediate gradients are freed as soon as they propagate.
    pub fn backward_for(&self, output: Var, keep: &[Var]) -> Result<Gradients> {
        let mut retain = vec![false; output.0 + 1];
        for v in keep {
            if v.0 <= output.0 {
                retain[v.0] = true;
            }
        }
        self.backward_impl(output, Some(&retain))
    }

    fn backward_impl(&self, output: Var, retain: Option<&[bool]>) -> Result<Gradients> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(out_val.shape()));

        fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    stride,
                } => {
                    let cg = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernels),
                        *stride,
                        &g,
                    );
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *kernels, cg.kernels);
                    accumulate(&mut grads, *bias, cg.bias);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut gin = Tensor::zeros(self.value(*input).shape());
                    let dst = gin.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dst[src] += gv;
                    }
                    accumulate(&mut grads, *input, gin);
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weights);
                    let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                    let mut gx = vec![0.0; n * d];
                    crate::tensor::gemm(n, m, d, 1.0, g.data(), false, w.data(), true, 0.0, &mut gx);
                    let mut gw = vec![0.0; d * m];
                    crate::tensor::gemm(d, n, m, 1.0, x.data(), true, g.data(), false, 0.0, &mut gw);
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, *input, Tensor::new(vec![n, d], gx)?);
                    accumulate(&mut grads, *weights, Tensor::new(vec![d, m], gw)?);
                    accumulate(&mut grads, *bias, Tensor::new(vec![m], gb)?);
                }
                Op::Relu(input) => {
                    let gin = self.value(*input).zip_map(&g, |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *input, gin);
                }
                Op::Softmax(input) => {
                    let y = &node.value;
                    let k = y.shape()[1];
                    let mut gin = vec![0.0; y.len()];
                    for ((yr, gr), out) in y
                        .data()
                        .chunks(k)
                        .zip(g.data().chunks(k))
                        .zip(gin.chunks_mut(k))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::new(y.shape().to_vec(), gin)?);
                }
                Op::Dropout { input, mask } => {
                    let gin = Tensor::from_fn(g.shape(), |i| g.data()[i] * mask[i]);
                    accumulate(&mut grads, *input, gin);
                }
                Op::Reshape(input) => {
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, g.clone().reshape(&shape)?);
                }
                Op::Sum(input) => {
                    let gin = Tensor::full(self.value(*input).shape(), g.item());
                    accumulate(&mut grads, *input, gin);
                }
                Op::Scale(input, factor) => {
                    accumulate(&mut grads, *input, g.scale(*factor));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Column { input, column } => {
                    let shape = self.value(*input).shape().to_vec();
                    let k = shape[1];
                    let mut gin = Tensor::zeros(&shape);
                    for (i, &gv) in g.data().iter().enumerate() {
                        gin.data_mut()[i * k + column] = gv;
                    }
                    accumulate(&mut grads, *input, gin);
                }
                Op::Pick { input, offset } => {
                    let mut gin = Tensor::zeros(self.value(*input).shape());
                    gin.data_mut()[*offset] = g.item();
                    accumulate(&mut grads, *input, gin);
                }
                Op::Bce {
                    probs,
                    labels,
                    weights,
                } => {
                    let p = self.value(*probs);
                    let gp = loss::bce_grad(labels, p.data(), *weights, g.item());
                    accumulate(&mut grads, *probs, Tensor::new(p.shape().to_vec(), gp)?);
                }
            }
            if retain.is_none_or(|r| r[idx]) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `f` at `x` with central differences.
///
/// `f` builds its computation on a fresh graph from the given input leaf and
/// returns the scalar output node. The result is the maximum over
/// coordinates of `|analytic - numeric| / max(1e-6, |analytic| + |numeric|)`;
/// the floor keeps finite-difference roundoff on near-zero gradients from
/// dominating.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if !val.is_scalar() {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok(val.item())
    };

    let mut g = Graph::new();
    let input = g.leaf(x.clone());
    let out = f(&mut g, input)?;
    let f0 = g.value(out).item();
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {f0} is not finite")));
    }
    let analytic = g.backward(out)?.get_or_zeros(input, x);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite value perturbing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[1.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn relu_gradient_at_negative_input_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-0.5]));
        let r = g.relu(x);
        let s = g.sum(r);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn maxpool_gradient_goes_to_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.maxpool2d(x).unwrap();
        let s = g.sum(p);
        assert_eq!(
            g.backward(s).unwrap().get(x).unwrap().data(),
            &[0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_inputs_accumulate() {
        // f = sum(x * x) → df/dx = 2x
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[2.0, -6.0]);
    }

    #[test]
    fn op_tags_are_recorded() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[1, 2]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.op_tag(x), "leaf");
        assert_eq!(g.op_tag(s), "softmax");
    }

    #[test]
    fn grad_check_trivial_cases() {
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 4.0, 2.2]).unwrap();
        let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-4).unwrap();
        assert!(err < 1e-9);
        // 0.5 * ||x||^2 at x = 3
        let half_sq = |g: &mut Graph<'_>, v: Var| {
            let sq = g.mul(v, v)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        };
        let err = grad_check(half_sq, &Tensor::from_vec(vec![3.0]), 1e-4).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn grad_check_flags_non_finite() {
        let x = Tensor::from_vec(vec![1.0]);
        let res = grad_check(
            |g, v| {
                let s = g.sum(v);
                Ok(g.scale(s, f64::INFINITY))
            },
            &x,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Evaluation(_))));
    }
}
