//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. Nodes are only
//! ever appended after their inputs, so walking the tape backwards visits each
//! node after all of its consumers.

pub mod check;
pub(crate) mod conv;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use conv::ConvDims;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, as used for normalization.
    pub var: Vec<T>,
    /// Number of values per channel.
    pub count: usize,
}

pub enum NormStats<'a, T> {
    /// Normalize by the statistics of the batch itself.
    Batch,
    /// Normalize by fixed running statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, dims: ConvDims },
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, batch: bool },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: T },
    Concat { inputs: Vec<Var> },
    Mse(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.value(a).check_same_shape(self.value(b))
    }

    /// 3×3 convolution, stride 1, one pixel of zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (batch, in_ch, height, width) = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape();
        let out_ch = match *kshape {
            [o, c, 3, 3] if c == in_ch => o,
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d: kernel {kshape:?} incompatible with input {:?} (need Cout×{in_ch}×3×3)",
                    self.value(input).shape()
                )))
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [out_ch] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} does not match {out_ch} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let dims = ConvDims { batch, in_ch, out_ch, height, width };
        let out = conv::forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            dims,
        );
        let value = Tensor::from_vec(&[batch, out_ch, height, width], out)?;
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, dims }, needs))
    }

    /// Per-channel normalization over batch and spatial axes followed by `γ·x̂ + β`.
    ///
    /// Returns the batch statistics when normalizing by them.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (b, c, h, w) = self.value(input).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm: {name} {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        let plane = h * w;
        let count = b * plane;
        let x = self.value(input).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    // Accumulate in f64 so that f32 batches stay accurate.
                    let mut s = 0.0;
                    for n in 0..b {
                        s += x[(n * c + ch) * plane..(n * c + ch + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for n in 0..b {
                        ss += x[(n * c + ch) * plane..(n * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::from_f64(m);
                    var[ch] = T::from_f64(ss / count as f64);
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("batch_norm: running statistics do not match {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        for n in 0..b {
            for ch in 0..c {
                let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for (o, &xv) in out[r.clone()].iter_mut().zip(&x[r]) {
                    *o = gg * ((xv - m) * is) + bb;
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let stats = batch.then(|| BatchStats { mean: mean.clone(), var, count });
        let v = self.push(value, Op::BatchNorm { input, gamma, beta, mean, inv_std, batch }, needs);
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let needs = self.needs(x);
        self.push(value, Op::Affine { input: x, scale }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.affine(x, T::one(), c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        self.affine(x, c, T::zero())
    }

    /// `c − x`.
    pub fn scalar_sub(&mut self, c: T, x: Var) -> Var {
        self.affine(x, -T::one(), c)
    }

    /// Concatenates image tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let (bi, ci, hi, wi) = self.value(v).dims4()?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.value(v).shape(),
                    self.value(first).shape()
                )));
            }
            total_c += ci;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total_c * plane);
        for n in 0..b {
            for &v in inputs {
                let (_, ci, _, _) = self.value(v).dims4()?;
                out.extend_from_slice(&self.value(v).data()[n * ci * plane..(n + 1) * ci * plane]);
            }
        }
        let value = Tensor::from_vec(&[b, total_c, h, w], out)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, needs))
    }

    /// Mean of squared differences, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let s: f64 = va.iter().zip(vb).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
        let value = Tensor::scalar(T::from_f64(s / va.len() as f64));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mse(a, b), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), needs)
    }

    /// Propagates d(loss)/d(node) back to every leaf created with [`Tape::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e = *e + *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, dims } => {
                let need = (self.needs(*input), self.needs(*kernel), bias.is_some_and(|b| self.needs(b)));
                let cg = conv::backward(self.value(*input).data(), self.value(*kernel).data(), g.data(), *dims, need);
                if let Some(gi) = cg.input {
                    acc(*input, Tensor::from_vec(self.value(*input).shape(), gi)?);
                }
                if let Some(gk) = cg.kernel {
                    acc(*kernel, Tensor::from_vec(self.value(*kernel).shape(), gk)?);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    acc(*b, Tensor::from_vec(self.value(*b).shape(), gb)?);
                }
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std, batch } => {
                let x = self.value(*input);
                let (b, c, h, w) = x.dims4()?;
                let plane = h * w;
                let count = (b * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut d_gamma = vec![T::zero(); c];
                let mut d_beta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); x.len()];
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for n in 0..b {
                        let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                        for (&xv, &gv) in x.data()[r.clone()].iter().zip(&g.data()[r]) {
                            let xhat = ((xv - m) * is).as_f64();
                            sum_dy += gv.as_f64();
                            sum_dy_xhat += gv.as_f64() * xhat;
                        }
                    }
                    d_gamma[ch] = T::from_f64(sum_dy_xhat);
                    d_beta[ch] = T::from_f64(sum_dy);
                    let gis = gam[ch] * is;
                    for n in 0..b {
                        let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                        for ((o, &xv), &gv) in dx[r.clone()].iter_mut().zip(&x.data()[r.clone()]).zip(&g.data()[r]) {
                            if *batch {
                                let xhat = ((xv - m) * is).as_f64();
                                let v = gv.as_f64() - sum_dy / count - xhat * sum_dy_xhat / count;
                                *o = gis * T::from_f64(v);
                            } else {
                                *o = gis * gv;
                            }
                        }
                    }
                }
                acc(*input, Tensor::from_vec(x.shape(), dx)?);
                acc(*gamma, Tensor::from_vec(&[c], d_gamma)?);
                acc(*beta, Tensor::from_vec(&[c], d_beta)?);
            }
            Op::Relu(x) => {
                // Subgradient at exactly zero is zero.
                let d = self.value(*x).zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |s, gv| gv * s * (T::one() - s))?;
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?);
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av)?);
            }
            Op::Affine { input, scale } => {
                let s = *scale;
                acc(*input, g.map(|v| v * s));
            }
            Op::Concat { inputs } => {
                let (b, total_c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let (_, ci, _, _) = self.value(v).dims4()?;
                    let mut d = Vec::with_capacity(b * ci * plane);
                    for n in 0..b {
                        let start = (n * total_c + offset) * plane;
                        d.extend_from_slice(&g.data()[start..start + ci * plane]);
                    }
                    acc(v, Tensor::from_vec(self.value(v).shape(), d)?);
                    offset += ci;
                }
            }
            Op::Mse(a, b) => {
                let gv = g.item()?;
                let k = gv * T::from_f64(2.0 / self.value(*a).len() as f64);
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| k * (x - y))?;
                acc(*b, diff.map(|v| -v));
                acc(*a, diff);
            }
            Op::Sum(x) => {
                let gv = g.item()?;
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
        }
        Ok(())
    }
}

fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| tape.value(v).zeros_like())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|i| i as f64).collect()).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, k, Some(b)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_center_delta_is_identity() {
        let mut tape = Tape::<f64>::new();
        let input = Tensor::from_vec(&[2, 1, 3, 5], (0..30).map(|i| (i as f64).sin()).collect()).unwrap();
        let x = tape.constant(input.clone());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &kd));
        let b = tape_zero_bias(&mut tape, 1);
        let y = tape.conv2d(x, k, Some(b)).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    fn tape_zero_bias(tape: &mut Tape<f64>, n: usize) -> Var {
        tape.constant(Tensor::zeros(&[n]))
    }

    #[test]
    fn conv_all_ones_counts_neighbours() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, k, None).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None), Err(Error::Shape(_))));
        let k5 = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        assert!(tape.conv2d(x, k5, None).is_err());
    }

    #[test]
    fn batch_norm_constant_channel_goes_to_zero() {
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 2 * 2 * 4];
        for n in 0..2 {
            for c in 0..2 {
                for i in 0..4 {
                    data[(n * 2 + c) * 4 + i] = 3.0 + c as f64;
                }
            }
        }
        let x = tape.constant(t(&[2, 2, 2, 2], &data));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm(x, g, b, NormStats::Batch, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-6));
        assert_eq!(stats.unwrap().mean, vec![3.0, 4.0]);
    }

    #[test]
    fn batch_norm_standardized_input_passes_through() {
        let mut tape = Tape::<f64>::new();
        // Per channel: {-1, 1, -1, 1} has mean 0 and variance 1.
        let x0 = t(&[2, 1, 1, 2], &[-1.0, 1.0, 1.0, -1.0]);
        let x = tape.constant(x0.clone());
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let (y, _) = tape.batch_norm(x, g, b, NormStats::Batch, 1e-5).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(x0.data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_zero_gamma_yields_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|i| (i * i) as f64).collect()).unwrap());
        let g = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(t(&[2], &[0.25, -2.0]));
        let (y, _) = tape.batch_norm(x, g, b, NormStats::Batch, 1e-5).unwrap();
        let v = tape.value(y);
        for n in 0..2 {
            for i in 0..4 {
                assert_eq!(v.data()[n * 8 + i], 0.25);
                assert_eq!(v.data()[n * 8 + 4 + i], -2.0);
            }
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[-1.0, 2.0, 0.0, 30.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0, 30.0]);
        let s = tape.sigmoid(x);
        let sv = tape.value(s).data().to_vec();
        assert_eq!(sv[2], 0.5);
        assert!((sv[3] - 1.0).abs() < 1e-9);
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        for x in [-800.0f64, -30.0, -1.5, 0.0, 0.7, 40.0, 800.0] {
            let s = stable_sigmoid(x);
            assert!(s.is_finite());
            assert!((stable_sigmoid(-x) - (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[2.0, 3.0]));
        let b = tape.constant(t(&[2], &[4.0, 5.0]));
        let ones = tape.constant(Tensor::ones(&[2]));
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[8.0, 15.0]);
        let same = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(same).data(), &[2.0, 3.0]);
        let z = tape.sub(a, a).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);
        let c = tape.constant(Tensor::ones(&[3]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
        let r = tape.scalar_sub(1.0, a);
        assert_eq!(tape.value(r).data(), &[-1.0, -2.0]);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[1.0, 3.0]));
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 5.0);
        let same = tape.mse(b, b).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
        let c = tape.add_scalar(b, 0.5);
        let k = tape.mse(c, b).unwrap();
        assert_eq!(tape.value(k).item().unwrap(), 0.25);
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut tape = Tape::<f64>::new();
        let x0 = t(&[3], &[1.0, -2.0, 0.5]);
        let x = tape.param(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unreachable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[2], &[3.0, 4.0]));
        let r = tape.relu(x);
        assert!(matches!(tape.backward(r), Err(Error::NonScalarLoss(_))));
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(&tape, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_stacks_channels_per_batch_item() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 1, 1, 1], &[1.0, 2.0]));
        let b = tape.param(t(&[2, 2, 1, 1], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 1, 1]);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(t(&[2, 3, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
