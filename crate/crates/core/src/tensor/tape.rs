use std::collections::HashMap;

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor, TensorId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
        stride: usize,
    },
    Relu(Var),
    AddScaled {
        a: Var,
        b: Var,
        scale: T,
    },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    L1(Var, Var),
    Mse(Var, Var),
    /// `sum(x * weights)` against a constant weight tensor.
    Dot(Var, Tensor<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    source: Option<TensorId>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward sweep walks the list once in reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Tape::backward`], keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_id: HashMap<TensorId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        self.by_id.get(&tensor.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Accumulates into every trainable tensor in `params`. A trainable
    /// tensor the loss does not depend on receives a zero gradient.
    pub fn accumulate_into<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    ) -> Result<()> {
        for p in params {
            if !p.requires_grad() {
                continue;
            }
            match self.by_id.get(&p.id()) {
                Some(g) => p.accumulate_grad(g)?,
                None => {
                    let zeros = vec![T::zero(); p.len()];
                    p.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a copy of `tensor`. Gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let mut value = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        value.requires_grad = false;
        let var = self.push(value, Op::Leaf, tensor.requires_grad());
        if tensor.requires_grad() {
            self.nodes[var.0].source = Some(tensor.id());
        }
        var
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, pad: usize, stride: usize) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            pad,
            stride,
        )?;
        out.ensure_finite("conv2d output")?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
                stride,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// `a + scale * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: T) -> Result<Var> {
        let out = kernels::add_scaled(self.value(a), self.value(b), scale)?;
        out.ensure_finite("add")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddScaled { a, b, scale }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, T::one())
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(x), r)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::PixelShuffle(x, r), needs))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_unshuffle(self.value(x), r)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::PixelUnshuffle(x, r), needs))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&values)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Concat(xs.to_vec()), needs))
    }

    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::mean_of(&values)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Mean(xs.to_vec()), needs))
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = kernels::l1_loss(self.value(pred), self.value(target))?;
        let out = Tensor::scalar(loss);
        out.ensure_finite("l1 loss")?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(out, Op::L1(pred, target), needs))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = kernels::mse_loss(self.value(pred), self.value(target))?;
        let out = Tensor::scalar(loss);
        out.ensure_finite("mse loss")?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(out, Op::Mse(pred, target), needs))
    }

    /// Scalar `sum(x * weights)`; a random projection that turns any output into a loss.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            bail!(Dimension, "dot: {:?} vs {:?}", xv.shape(), weights.shape());
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights), needs))
    }

    /// Reverse sweep from a single-element `loss` with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with_seed(loss, T::one())
    }

    pub fn backward_with_seed(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        let node = match self.nodes.get(loss.0) {
            Some(n) => n,
            None => bail!(Usage, "variable does not belong to this tape"),
        };
        if node.value.len() != 1 {
            bail!(
                Usage,
                "backward needs a single-element loss, got shape {:?}",
                node.value.shape()
            );
        }
        if !node.needs_grad {
            bail!(Usage, "backward called on a value detached from every trainable leaf");
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(seed));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.source {
                        let slot = out.by_id.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
                        for (s, d) in slot.iter_mut().zip(g.data()) {
                            *s += *d;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                    stride,
                } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *pad,
                        *stride,
                        self.needs(*input),
                    )?;
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads, *input, gi)?;
                    }
                    if self.needs(*weight) {
                        accumulate(&mut grads, *weight, cg.weight)?;
                    }
                    if let Some(b) = bias {
                        if self.needs(*b) {
                            accumulate(&mut grads, *b, cg.bias)?;
                        }
                    }
                }
                Op::Relu(x) => {
                    let gi = kernels::relu_backward(self.value(*x), &g)?;
                    accumulate(&mut grads, *x, gi)?;
                }
                Op::AddScaled { a, b, scale } => {
                    if self.needs(*b) {
                        let gb = if *scale == T::one() { g.clone() } else { g.map(|v| v * *scale) };
                        accumulate(&mut grads, *b, gb)?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::PixelShuffle(x, r) => {
                    accumulate(&mut grads, *x, kernels::pixel_unshuffle(&g, *r)?)?;
                }
                Op::PixelUnshuffle(x, r) => {
                    accumulate(&mut grads, *x, kernels::pixel_shuffle(&g, *r)?)?;
                }
                Op::Concat(xs) => {
                    let channels: Vec<usize> = xs.iter().map(|&v| self.value(v).shape()[1]).collect();
                    for (v, part) in xs.iter().zip(kernels::split_channels(&g, &channels)?) {
                        if self.needs(*v) {
                            accumulate(&mut grads, *v, part)?;
                        }
                    }
                }
                Op::Mean(xs) => {
                    let inv = T::one() / T::lit(xs.len() as f64);
                    let part = g.map(|v| v * inv);
                    for v in xs {
                        if self.needs(*v) {
                            accumulate(&mut grads, *v, part.clone())?;
                        }
                    }
                }
                Op::L1(p, t) => {
                    let upstream = g.data()[0];
                    let gp = kernels::l1_loss_grad(self.value(*p), self.value(*t), upstream)?;
                    if self.needs(*t) {
                        accumulate(&mut grads, *t, gp.map(|v| -v))?;
                    }
                    if self.needs(*p) {
                        accumulate(&mut grads, *p, gp)?;
                    }
                }
                Op::Mse(p, t) => {
                    let upstream = g.data()[0];
                    let gp = kernels::mse_loss_grad(self.value(*p), self.value(*t), upstream)?;
                    if self.needs(*t) {
                        accumulate(&mut grads, *t, gp.map(|v| -v))?;
                    }
                    if self.needs(*p) {
                        accumulate(&mut grads, *p, gp)?;
                    }
                }
                Op::Dot(x, w) => {
                    let upstream = g.data()[0];
                    accumulate(&mut grads, *x, w.map(|v| v * upstream))?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                bail!(Dimension, "gradient shape {:?} vs {:?}", existing.shape(), g.shape());
            }
            for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *d;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_conv_passes_gradient_through() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64).into_param();
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let upstream = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| 0.5 + i as f64);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let loss = tape.dot(y, upstream.clone()).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), upstream.data());
    }

    #[test]
    fn detached_and_non_scalar_are_usage_errors() {
        let x = Tensor::<f64>::zeros(&[2]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.dot(xv, Tensor::full(&[2], 1.0)).unwrap();
        assert!(matches!(tape.backward(loss), Err(crate::Error::Usage(_))));
        let p = Tensor::<f64>::zeros(&[2]).into_param();
        let pv = tape.leaf(&p);
        assert!(matches!(tape.backward(pv), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn zero_seed_gives_zero_grads_and_repeated_calls_accumulate() {
        let mut p = Tensor::<f64>::from_fn(&[3], |i| i as f64 - 1.0).into_param();
        let mut tape = Tape::new();
        let pv = tape.leaf(&p);
        let r = tape.relu(pv);
        let loss = tape.dot(r, Tensor::full(&[3], 2.0)).unwrap();
        let zero = tape.backward_with_seed(loss, 0.0).unwrap();
        assert_eq!(zero.get(&p).unwrap(), &[0.0, 0.0, 0.0]);
        let g = tape.backward(loss).unwrap();
        g.accumulate_into([&mut p]).unwrap();
        g.accumulate_into([&mut p]).unwrap();
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn reused_value_sums_both_paths() {
        let p = Tensor::<f64>::full(&[1, 1, 1, 1], 3.0).into_param();
        let mut tape = Tape::new();
        let pv = tape.leaf(&p);
        let doubled = tape.add(pv, pv).unwrap();
        let loss = tape.dot(doubled, Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(&p).unwrap(), &[2.0]);
    }
}
