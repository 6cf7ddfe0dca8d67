//! Forward and backward kernels for the differentiable primitives. The
//! [`Graph`](crate::autodiff::Graph) records calls to these; they are also
//! usable directly on plain tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn conv_dims(
    input: &[usize],
    kernels: &[usize],
    bias: &[usize],
    stride: usize,
) -> Result<ConvDims> {
    let [n, c, h, w] = *input else {
        return Err(Error::dim(format!("conv2d input must be NCHW, got {input:?}")));
    };
    let [f, kc, kh, kw] = *kernels else {
        return Err(Error::dim(format!(
            "conv2d kernels must be FCHW, got {kernels:?}"
        )));
    };
    if kc != c {
        return Err(Error::dim(format!(
            "conv2d kernels expect {kc} channels, input has {c}"
        )));
    }
    if bias != [f] {
        return Err(Error::dim(format!(
            "conv2d bias must have shape [{f}], got {bias:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be positive"));
    }
    if kh > h || kw > w {
        return Err(Error::dim(format!(
            "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh: (h - kh) / stride + 1,
        ow: (w - kw) / stride + 1,
        stride,
    })
}

/// Unfolds one CHW image into a `[c*kh*kw, oh*ow]` patch matrix.
fn im2col(img: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let p = d.positions();
    for ch in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ch * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let src_row = (ch * d.h + oy * d.stride + ki) * d.w + kj;
                    for ox in 0..d.ow {
                        dst[oy * d.ow + ox] = img[src_row + ox * d.stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(cols: &[f64], d: &ConvDims, img: &mut [f64]) {
    let p = d.positions();
    for ch in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ch * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let dst_row = (ch * d.h + oy * d.stride + ki) * d.w + kj;
                    for ox in 0..d.ow {
                        img[dst_row + ox * d.stride] += src[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) 2-D cross-correlation of an NCHW batch with FCHW kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let d = conv_dims(input.shape(), kernels.shape(), bias.shape(), stride)?;
    let in_stride = d.c * d.h * d.w;
    let out_stride = d.f * d.positions();
    let mut out = vec![0.0; d.n * out_stride];
    out.par_chunks_mut(out_stride)
        .zip(input.data().par_chunks(in_stride))
        .for_each(|(dst, img)| {
            let mut cols = vec![0.0; d.patch() * d.positions()];
            im2col(img, &d, &mut cols);
            gemm(
                d.f,
                d.patch(),
                d.positions(),
                1.0,
                kernels.data(),
                false,
                &cols,
                false,
                0.0,
                dst,
            );
            for (row, &b) in dst.chunks_mut(d.positions()).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += b);
            }
        });
    Tensor::new(vec![d.n, d.f, d.oh, d.ow], out)
}

pub(crate) struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> ConvGrads {
    let d = conv_dims(input.shape(), kernels.shape(), &[kernels.shape()[0]], stride)
        .expect("shapes were validated in the forward pass");
    let in_stride = d.c * d.h * d.w;
    let out_stride = d.f * d.positions();
    let mut grad_in = vec![0.0; input.len()];
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_in
        .par_chunks_mut(in_stride)
        .zip(input.data().par_chunks(in_stride))
        .zip(grad_out.data().par_chunks(out_stride))
        .map(|((gimg, img), gout)| {
            let mut cols = vec![0.0; d.patch() * d.positions()];
            im2col(img, &d, &mut cols);
            let mut gk = vec![0.0; d.f * d.patch()];
            gemm(
                d.f,
                d.positions(),
                d.patch(),
                1.0,
                gout,
                false,
                &cols,
                true,
                0.0,
                &mut gk,
            );
            let gb: Vec<f64> = gout.chunks(d.positions()).map(|r| r.iter().sum()).collect();
            gemm(
                d.patch(),
                d.f,
                d.positions(),
                1.0,
                kernels.data(),
                true,
                gout,
                false,
                0.0,
                &mut cols,
            );
            col2im(&cols, &d, gimg);
            (gk, gb)
        })
        .collect();
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; d.f];
    for (k, b) in &partials {
        gk.iter_mut().zip(k).for_each(|(a, x)| *a += x);
        gb.iter_mut().zip(b).for_each(|(a, x)| *a += x);
    }
    ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in).unwrap(),
        kernels: Tensor::new(kernels.shape().to_vec(), gk).unwrap(),
        bias: Tensor::new(vec![d.f], gb).unwrap(),
    }
}

/// 2x2 max pooling with stride 2. Odd trailing rows and columns are dropped.
/// Returns the pooled tensor and, per output element, the flat input index
/// that won (first maximum in row-major window order).
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::dim(format!(
            "maxpool2d input must be NCHW, got {:?}",
            input.shape()
        )));
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::dim(format!("maxpool2d input {h}x{w} too small")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Affine map `input · weights + bias` for `[N,D] x [D,M]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, d] = *input.shape() else {
        return Err(Error::dim(format!(
            "dense input must be [N,D], got {:?}",
            input.shape()
        )));
    };
    let [wd, m] = *weights.shape() else {
        return Err(Error::dim(format!(
            "dense weights must be [D,M], got {:?}",
            weights.shape()
        )));
    };
    if wd != d {
        return Err(Error::dim(format!(
            "dense inner dimensions disagree: input {d}, weights {wd}"
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::dim(format!(
            "dense bias must have shape [{m}], got {:?}",
            bias.shape()
        )));
    }
    let mut out: Vec<f64> = bias.data().repeat(n);
    gemm(n, d, m, 1.0, input.data(), false, weights.data(), false, 1.0, &mut out);
    Tensor::new(vec![n, m], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Row-wise softmax over the last axis of a `[N,K]` tensor.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let [_, k] = *input.shape() else {
        return Err(Error::dim(format!(
            "softmax input must be [N,K], got {:?}",
            input.shape()
        )));
    };
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Per-element multipliers for inverted dropout: `0` for dropped elements,
/// `1/(1-rate)` for survivors.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate {rate} not in [0,1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

pub fn dropout(input: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate {rate} not in [0,1)")));
    }
    if !training {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.len(), rate, seed)?;
    Ok(Tensor::from_fn(input.shape(), |i| input.data()[i] * mask[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    // Straight nested loops, independent of the im2col + gemm path.
    fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let mut out = Tensor::zeros(&[n, f, oh, ow]);
        for i in 0..n {
            for o in 0..f {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b.data()[o];
                        for ch in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    s += x.get(&[i, ch, y * stride + a, xx * stride + bb])
                                        * k.get(&[o, ch, a, bb]);
                                }
                            }
                        }
                        out.set(&[i, o, y, xx], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_ones() {
        let out = conv2d(
            &Tensor::ones(&[1, 1, 3, 3]),
            &Tensor::ones(&[1, 1, 2, 2]),
            &Tensor::zeros(&[1]),
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = random(&[2, 3, 5, 6], 1);
        let out = conv2d(&x, &Tensor::zeros(&[4, 3, 3, 3]), &Tensor::full(&[4], 0.7), 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_4x4_against_nested_loops() {
        let x = Tensor::new(vec![1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let b = Tensor::zeros(&[1]);
        let expected = naive_conv(&x, &k, &b, 1);
        // Frozen from the nested-loop oracle above.
        assert_eq!(expected.data(), &[348.0, 393.0, 528.0, 573.0]);
        assert_eq!(conv2d(&x, &k, &b, 1).unwrap(), expected);
    }

    #[test]
    fn conv_random_and_strided_match_naive() {
        for (seed, stride) in [(0, 1), (1, 2), (2, 3)] {
            let x = random(&[2, 3, 9, 8], seed);
            let k = random(&[4, 3, 3, 2], seed + 10);
            let b = random(&[4], seed + 20);
            let fast = conv2d(&x, &k, &b, stride).unwrap();
            let slow = naive_conv(&x, &k, &b, stride);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let err = conv2d(
            &Tensor::ones(&[1, 2, 4, 4]),
            &Tensor::ones(&[1, 3, 2, 2]),
            &Tensor::zeros(&[1]),
            1,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_is_linear_in_input() {
        let x = random(&[1, 2, 7, 7], 3);
        let y = random(&[1, 2, 7, 7], 4);
        let k = random(&[3, 2, 3, 3], 5);
        let zero = Tensor::zeros(&[3]);
        let (a, b) = (1.7, -0.3);
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&combo, &k, &zero, 1).unwrap();
        let cx = conv2d(&x, &k, &zero, 1).unwrap();
        let cy = conv2d(&y, &k, &zero, 1).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = maxpool2d(&x).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);

        let (out, _) = maxpool2d(&Tensor::full(&[1, 2, 4, 4], 2.5)).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_odd_dims_floor_and_ties() {
        let x = Tensor::ones(&[1, 1, 5, 3]);
        let (out, argmax) = maxpool2d(&x).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 1]);
        // Ties resolve to the top-left of each window.
        assert_eq!(argmax, vec![0, 6]);
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = dense(&x, &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out, x);
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(dense(&x, &eye, &b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_random_against_triple_loop() {
        let x = random(&[2, 3], 7);
        let w = random(&[3, 2], 8);
        let b = random(&[2], 9);
        let out = dense(&x, &w, &b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = b.data()[j];
                for k in 0..3 {
                    s += x.get(&[i, k]) * w.get(&[k, j]);
                }
                assert!((out.get(&[i, j]) - s).abs() < 1e-12);
            }
        }
        assert!(dense(&x, &random(&[2, 2], 1), &b).is_err());
    }

    #[test]
    fn relu_softmax_dropout_examples() {
        assert_eq!(relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let s = softmax(&Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let x = random(&[3, 4], 2);
        assert_eq!(dropout(&x, 0.25, false, 9).unwrap(), x);
        assert!(dropout(&x, 1.0, true, 9).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let s = softmax(&Tensor::new(vec![1, 3], vec![1000.0, 1001.0, 999.0]).unwrap()).unwrap();
        assert!(s.all_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_expectation() {
        let x = Tensor::full(&[10], 2.0);
        let mut total = 0.0;
        let draws = 10_000;
        for seed in 0..draws {
            total += dropout(&x, 0.25, true, seed).unwrap().mean();
        }
        let mean = total / draws as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            row in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let k = row.len();
            let x = Tensor::new(vec![1, k], row.clone()).unwrap();
            let s = softmax(&x).unwrap();
            proptest::prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            proptest::prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            let shifted = softmax(&x.map(|v| v + shift)).unwrap();
            for (a, b) in s.data().iter().zip(shifted.data()) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
