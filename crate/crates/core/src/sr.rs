//! EDSR-baseline style super-resolution networks and the model bank.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{param_checksum, Conv, Module, ResBlock};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrModelConfig {
    pub n_res_blocks: usize,
    pub n_features: usize,
    pub scale: usize,
    pub res_scale: f64,
    pub in_channels: usize,
    /// Subtracted from every input sample and added back to the output, so the
    /// first convolution sees roughly centred data. 0 disables the shift.
    pub mean_shift: f64,
}

impl SrModelConfig {
    /// 16 residual blocks, 64 features, x4.
    pub fn paper() -> Self {
        SrModelConfig {
            n_res_blocks: 16,
            n_features: 64,
            scale: 4,
            res_scale: 1.0,
            in_channels: 3,
            mean_shift: 0.5,
        }
    }

    /// 2 residual blocks, 8 features, x4.
    pub fn desk() -> Self {
        SrModelConfig {
            n_res_blocks: 2,
            n_features: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2..=4) {
            bail!(Config, "unsupported scale x{} (expected 2, 3 or 4)", self.scale);
        }
        if self.n_features == 0 || self.in_channels == 0 {
            bail!(Config, "feature and channel counts must be positive");
        }
        if !self.res_scale.is_finite() || !self.mean_shift.is_finite() {
            bail!(Config, "res_scale and mean_shift must be finite");
        }
        Ok(())
    }

    /// Pixel-shuffle factor of each upsampling stage.
    pub fn upsample_factors(&self) -> Vec<usize> {
        match self.scale {
            4 => vec![2, 2],
            s => vec![s],
        }
    }
}

/// Head conv, residual body with a long skip, pixel-shuffle upsampler, tail conv.
///
/// No mean-shift layers: inputs and outputs are plain `[0, 1]` RGB.
#[derive(Debug, Clone)]
pub struct SrModel<T> {
    config: SrModelConfig,
    class_label: String,
    pub head: Conv<T>,
    pub body: Vec<ResBlock<T>>,
    pub body_conv: Conv<T>,
    /// One conv `F -> r*r*F` per pixel-shuffle stage.
    pub upsample: Vec<Conv<T>>,
    pub tail: Conv<T>,
}

impl<T: Scalar> SrModel<T> {
    /// Deterministic He initialization (gain 2 only where the input comes
    /// through a ReLU); layer `i` (in parameter order) draws from the stream
    /// derived from `(seed, i)`.
    pub fn build(config: SrModelConfig, class_label: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.n_features;
        let mut layer = 0u64;
        let mut next = || {
            layer += 1;
            rng::stream(seed, &[layer - 1])
        };
        let head = Conv::fan_in(config.in_channels, f, 3, 1.0, &mut next());
        let res_scale = T::lit(config.res_scale);
        let body = (0..config.n_res_blocks)
            .map(|_| ResBlock::he(f, res_scale, &mut next(), &mut next()))
            .collect();
        let body_conv = Conv::fan_in(f, f, 3, 1.0, &mut next());
        let upsample = config
            .upsample_factors()
            .iter()
            .map(|r| Conv::fan_in(f, f * r * r, 3, 1.0, &mut next()))
            .collect();
        let tail = Conv::fan_in(f, config.in_channels, 3, 1.0, &mut next());
        Ok(SrModel {
            config,
            class_label: class_label.to_string(),
            head,
            body,
            body_conv,
            upsample,
            tail,
        })
    }

    pub fn config(&self) -> &SrModelConfig {
        &self.config
    }

    pub fn class_label(&self) -> &str {
        &self.class_label
    }

    pub fn set_class_label(&mut self, label: &str) {
        self.class_label = label.to_string();
    }

    pub fn pixel_shuffle_stages(&self) -> usize {
        self.upsample.len()
    }

    /// Inference forward pass; output is not clamped.
    pub fn super_resolve(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(lr)?;
        let shift = T::lit(self.config.mean_shift);
        let head = self.head.forward(&lr.map(|v| v - shift))?;
        let mut x = head.clone();
        for block in &self.body {
            x = block.forward(&x)?;
        }
        let x = self.body_conv.forward(&x)?;
        let mut x = kernels::add_scaled(&head, &x, T::one())?;
        for (conv, r) in self.upsample.iter().zip(self.config.upsample_factors()) {
            x = kernels::pixel_shuffle(&conv.forward(&x)?, r)?;
        }
        Ok(self.tail.forward(&x)?.map(|v| v + shift))
    }

    /// [`SrModel::super_resolve`] clamped to `[0, 1]` for evaluation and export.
    pub fn super_resolve_clamped(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.super_resolve(lr)?.clamp01())
    }

    /// Differentiable forward pass recorded on `tape`.
    pub fn record(&self, tape: &mut Tape<T>, lr: Var) -> Result<Var> {
        self.check_input(tape.value(lr))?;
        let shift = T::lit(self.config.mean_shift);
        let lr_shape = tape.value(lr).shape().to_vec();
        let offset = tape.constant(Tensor::full(&lr_shape, shift));
        let centred = tape.add_scaled(lr, offset, -T::one())?;
        let head = self.head.record(tape, centred)?;
        let mut x = head;
        for block in &self.body {
            x = block.record(tape, x)?;
        }
        let x = self.body_conv.record(tape, x)?;
        let mut x = tape.add(head, x)?;
        for (conv, r) in self.upsample.iter().zip(self.config.upsample_factors()) {
            let y = conv.record(tape, x)?;
            x = tape.pixel_shuffle(y, r)?;
        }
        let out = self.tail.record(tape, x)?;
        let out_shape = tape.value(out).shape().to_vec();
        let offset = tape.constant(Tensor::full(&out_shape, shift));
        tape.add(out, offset)
    }

    fn check_input(&self, lr: &Tensor<T>) -> Result<()> {
        let [_, c, _, _] = lr.dims4()?;
        if c != self.config.in_channels {
            bail!(Dimension, "model expects {} channels, got {c}", self.config.in_channels);
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for SrModel<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.head.push_named("head", &mut out);
        for (i, b) in self.body.iter().enumerate() {
            b.push_named(&format!("body.{i}"), &mut out);
        }
        self.body_conv.push_named("body.conv", &mut out);
        for (i, c) in self.upsample.iter().enumerate() {
            c.push_named(&format!("upsample.{i}"), &mut out);
        }
        self.tail.push_named("tail", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.head.push_mut(&mut out);
        for b in &mut self.body {
            b.push_mut(&mut out);
        }
        self.body_conv.push_mut(&mut out);
        for c in &mut self.upsample {
            c.push_mut(&mut out);
        }
        self.tail.push_mut(&mut out);
        out
    }
}

/// Closed-form parameter count of an [`SrModel`] built from `config`.
pub fn sr_param_count(config: &SrModelConfig) -> usize {
    let conv = |i: usize, o: usize| o * i * 9 + o;
    let f = config.n_features;
    let c = config.in_channels;
    conv(c, f)
        + config.n_res_blocks * 2 * conv(f, f)
        + conv(f, f)
        + config.upsample_factors().iter().map(|r| conv(f, f * r * r)).sum::<usize>()
        + conv(f, c)
}

/// Ordered SR models: the class-specific ones followed by the generic one.
#[derive(Debug, Clone)]
pub struct ModelBank<T> {
    models: Vec<SrModel<T>>,
    frozen: bool,
}

impl<T: Scalar> ModelBank<T> {
    pub fn new(models: Vec<SrModel<T>>) -> Result<Self> {
        if let Some(first) = models.first() {
            let scale = first.config().scale;
            if let Some(m) = models.iter().find(|m| m.config().scale != scale) {
                bail!(
                    Config,
                    "bank mixes scales x{scale} and x{} ({})",
                    m.config().scale,
                    m.class_label()
                );
            }
        }
        Ok(ModelBank { models, frozen: false })
    }

    /// Freezes every model: parameters stop requiring gradients for good.
    pub fn freeze(&mut self) {
        for m in &mut self.models {
            for p in m.params_mut() {
                p.set_requires_grad(false);
            }
        }
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[SrModel<T>] {
        &self.models
    }

    pub fn labels(&self) -> Vec<String> {
        self.models.iter().map(|m| m.class_label().to_string()).collect()
    }

    pub fn scale(&self) -> Option<usize> {
        self.models.first().map(|m| m.config().scale)
    }

    /// Mutable access for training a member; refused once frozen.
    pub fn model_mut(&mut self, index: usize) -> Result<&mut SrModel<T>> {
        if self.frozen {
            bail!(Usage, "model bank is frozen");
        }
        match self.models.get_mut(index) {
            Some(m) => Ok(m),
            None => bail!(Usage, "bank has no model {index}"),
        }
    }

    /// Runs every model on `lr` (inference path, nothing recorded), in bank order.
    pub fn forward(&self, lr: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if self.models.is_empty() {
            bail!(Usage, "empty model bank");
        }
        self.models.iter().map(|m| m.super_resolve(lr)).collect()
    }

    /// One checksum per model, in bank order.
    pub fn checksums(&self) -> Vec<String> {
        self.models.iter().map(|m| param_checksum(m)).collect()
    }
}
