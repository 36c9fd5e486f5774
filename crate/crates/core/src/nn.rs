//! Layers shared by the SR models and the fusion network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Parameter access used by the optimizer, checkpoints and checksums.
pub trait Module<T: Scalar> {
    /// Parameters with stable dotted names, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;

    /// Same order as [`Module::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Square-kernel, stride-1, same-size convolution.
#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv<T> {
    /// He (fan-in) normal weights for a conv whose input comes through a ReLU;
    /// zero bias.
    pub fn he(in_ch: usize, out_ch: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self::fan_in(in_ch, out_ch, k, 2.0, rng)
    }

    /// Normal weights with variance `gain / fan_in`, zero bias. The He gain is
    /// 2 after a ReLU and 1 after a linear layer.
    pub fn fan_in(in_ch: usize, out_ch: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
        let weight = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| T::lit(normal.sample(rng)));
        Conv {
            weight: weight.into_param(),
            bias: Tensor::zeros(&[out_ch]).into_param(),
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Conv {
            weight: Tensor::zeros(&[out_ch, in_ch, k, k]).into_param(),
            bias: Tensor::zeros(&[out_ch]).into_param(),
        }
    }

    fn pad(&self) -> usize {
        self.weight.shape()[2] / 2
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = kernels::conv2d(x, &self.weight, Some(&self.bias), self.pad(), 1)?;
        y.ensure_finite("conv2d output")?;
        Ok(y)
    }

    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        tape.conv2d(x, w, Some(b), self.pad(), 1)
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// `x + res_scale * conv(relu(conv(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub res_scale: T,
}

impl<T: Scalar> ResBlock<T> {
    /// He initialization: gain 1 for the first conv (linear input), 2 for the
    /// second (ReLU input).
    pub fn he(features: usize, res_scale: T, rng1: &mut impl Rng, rng2: &mut impl Rng) -> Self {
        ResBlock {
            conv1: Conv::fan_in(features, features, 3, 1.0, rng1),
            conv2: Conv::he(features, features, 3, rng2),
            res_scale,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let branch = self.conv2.forward(&kernels::relu(&self.conv1.forward(x)?))?;
        kernels::add_scaled(x, &branch, self.res_scale)
    }

    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.conv1.record(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv2.record(tape, h)?;
        tape.add_scaled(x, h, self.res_scale)
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.conv1.push_named(&format!("{prefix}.conv1"), out);
        self.conv2.push_named(&format!("{prefix}.conv2"), out);
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.conv1.push_mut(out);
        self.conv2.push_mut(out);
    }
}

/// Hex SHA-256 over parameter names, shapes and little-endian values.
pub fn param_checksum<T: Scalar, M: Module<T> + ?Sized>(module: &M) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for (name, p) in module.named_params() {
        hasher.update(name.as_bytes());
        for d in p.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in p.data() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
