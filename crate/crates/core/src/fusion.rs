//! Post-SR fusion network and the two fusion-training pair streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassDataset, ImagePair, PairSource};
use crate::error::{bail, Result};
use crate::nn::{Conv, Module, ResBlock};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Add the elementwise mean of the inputs to the network output.
    #[default]
    MeanSkip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_inputs: usize,
    pub n_features: usize,
    pub n_res_blocks: usize,
    #[serde(default)]
    pub skip_mode: SkipMode,
}

impl FusionConfig {
    pub fn new(n_inputs: usize) -> Self {
        FusionConfig {
            n_inputs,
            n_features: 32,
            n_res_blocks: 2,
            skip_mode: SkipMode::MeanSkip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_inputs == 0 {
            bail!(Config, "fusion needs at least one input");
        }
        if self.n_features == 0 {
            bail!(Config, "fusion feature count must be positive");
        }
        Ok(())
    }
}

/// `concat -> conv(3N -> F) -> ReLU -> res blocks -> conv(F -> 3) + mean(inputs)`.
///
/// The last conv starts at zero, so a fresh network returns the input mean.
#[derive(Debug, Clone)]
pub struct FusionNet<T> {
    config: FusionConfig,
    pub head: Conv<T>,
    pub body: Vec<ResBlock<T>>,
    pub tail: Conv<T>,
}

impl<T: Scalar> FusionNet<T> {
    pub fn build(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.n_features;
        let mut layer = 0u64;
        let mut next = || {
            layer += 1;
            rng::stream(seed, &[0xF05E, layer - 1])
        };
        let head = Conv::fan_in(3 * config.n_inputs, f, 3, 1.0, &mut next());
        let body = (0..config.n_res_blocks)
            .map(|_| ResBlock::he(f, T::one(), &mut next(), &mut next()))
            .collect();
        Ok(FusionNet {
            config,
            head,
            body,
            tail: Conv::zeros(f, 3, 3),
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn check_inputs(&self, shapes: &[&[usize]]) -> Result<()> {
        if shapes.len() != self.config.n_inputs {
            bail!(
                Usage,
                "fusion expects {} inputs, got {}",
                self.config.n_inputs,
                shapes.len()
            );
        }
        let first = shapes[0];
        if first.len() != 4 || first[1] != 3 {
            bail!(Usage, "fusion inputs must be [B, 3, H, W], got {:?}", first);
        }
        if let Some(s) = shapes.iter().find(|s| **s != first) {
            bail!(Usage, "fusion inputs differ in shape: {:?} vs {:?}", first, s);
        }
        Ok(())
    }

    /// Inference fusion of the N SR outputs.
    pub fn fuse(&self, sr_outputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = sr_outputs.iter().map(|t| t.shape()).collect();
        self.check_inputs(&shapes)?;
        let refs: Vec<&Tensor<T>> = sr_outputs.iter().collect();
        let x = kernels::concat_channels(&refs)?;
        let mut h = kernels::relu(&self.head.forward(&x)?);
        for block in &self.body {
            h = block.forward(&h)?;
        }
        let residual = self.tail.forward(&h)?;
        let mean = kernels::mean_of(&refs)?;
        kernels::add_scaled(&mean, &residual, T::one())
    }

    pub fn record(&self, tape: &mut Tape<T>, sr_outputs: &[Var]) -> Result<Var> {
        let shapes: Vec<&[usize]> = sr_outputs.iter().map(|&v| tape.value(v).shape()).collect();
        self.check_inputs(&shapes)?;
        let x = tape.concat_channels(sr_outputs)?;
        let h = self.head.record(tape, x)?;
        let mut h = tape.relu(h);
        for block in &self.body {
            h = block.record(tape, h)?;
        }
        let residual = self.tail.record(tape, h)?;
        let mean = tape.mean_of(sr_outputs)?;
        tape.add(mean, residual)
    }
}

impl<T: Scalar> Module<T> for FusionNet<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.head.push_named("head", &mut out);
        for (i, b) in self.body.iter().enumerate() {
            b.push_named(&format!("body.{i}"), &mut out);
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
        self.tail.push_mut(&mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Pairs from one class only.
    ClassSpecific,
    /// Uniform over classes, then uniform within the class.
    Generic,
}

impl std::str::FromStr for FusionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-specific" | "class_specific" => Ok(FusionMode::ClassSpecific),
            "generic" => Ok(FusionMode::Generic),
            other => bail!(Usage, "unknown fusion mode {other:?}"),
        }
    }
}

/// Training pairs for the fusion network drawn from one or several class sets.
#[derive(Debug, Clone)]
pub struct PairStream<'a, T> {
    mode: FusionMode,
    classes: Vec<&'a ClassDataset<T>>,
}

impl<'a, T: Scalar> PairStream<'a, T> {
    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.class_label.as_str()).collect()
    }
}

impl<T: Scalar> PairSource<T> for PairStream<'_, T> {
    fn scale(&self) -> usize {
        self.classes[0].scale
    }

    fn draw<'s>(&'s self, rng: &mut dyn rand::RngCore) -> (usize, &'s ImagePair<T>) {
        let class = if self.classes.len() == 1 {
            0
        } else {
            rng.random_range(0..self.classes.len())
        };
        let ds = self.classes[class];
        let item = rng.random_range(0..ds.items.len());
        (class, &ds.items[item])
    }

    fn class_labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class_label.clone()).collect()
    }
}

/// Builds the fusion-training stream.
///
/// `class_specific` takes exactly one class set (the one the fusion targets);
/// `generic` takes two or more and mixes them uniformly.
pub fn make_fusion_dataset<'a, T: Scalar>(
    mode: FusionMode,
    class_sets: &[&'a ClassDataset<T>],
) -> Result<PairStream<'a, T>> {
    if let Some(empty) = class_sets.iter().find(|c| c.items.is_empty()) {
        bail!(Data, "class set {:?} is empty", empty.class_label);
    }
    match mode {
        FusionMode::ClassSpecific if class_sets.len() != 1 => bail!(
            Usage,
            "class-specific fusion needs exactly one class, got {}",
            class_sets.len()
        ),
        FusionMode::Generic if class_sets.len() < 2 => bail!(
            Usage,
            "generic fusion needs at least two classes, got {}",
            class_sets.len()
        ),
        _ => {}
    }
    let scale = class_sets[0].scale;
    if class_sets.iter().any(|c| c.scale != scale) {
        bail!(Data, "class sets have different scales");
    }
    Ok(PairStream {
        mode,
        classes: class_sets.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(n: usize, seed: usize) -> Vec<Tensor<f32>> {
        (0..n)
            .map(|k| Tensor::from_fn(&[2, 3, 6, 5], |i| (((i + 7 * k + seed) * 2654435761) % 1000) as f32 / 1000.0))
            .collect()
    }

    #[test]
    fn fresh_net_returns_mean_exactly() {
        for n in 1..=4 {
            let net = FusionNet::<f32>::build(FusionConfig::new(n), 3).unwrap();
            let xs = inputs(n, n);
            let refs: Vec<&Tensor<f32>> = xs.iter().collect();
            let mean = kernels::mean_of(&refs).unwrap();
            let out = net.fuse(&xs).unwrap();
            assert_eq!(out.max_abs_diff(&mean).unwrap(), 0.0);
            if n == 1 {
                assert_eq!(out, xs[0]);
            }
        }
        let net = FusionNet::<f32>::build(FusionConfig::new(2), 3).unwrap();
        let x = inputs(1, 9).remove(0);
        assert_eq!(net.fuse(&[x.clone(), x.clone()]).unwrap(), x);
    }

    #[test]
    fn length_and_shape_mismatch_are_usage_errors() {
        let net = FusionNet::<f32>::build(FusionConfig::new(2), 0).unwrap();
        let xs = inputs(3, 0);
        assert!(matches!(net.fuse(&xs), Err(crate::Error::Usage(_))));
        let odd = vec![xs[0].clone(), Tensor::zeros(&[2, 3, 6, 6])];
        assert!(matches!(net.fuse(&odd), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn tape_path_matches_inference() {
        let mut net = FusionNet::<f64>::build(FusionConfig { n_features: 4, ..FusionConfig::new(3) }, 1).unwrap();
        net.tail = Conv::he(4, 3, 3, &mut rng::stream(0, &[1]));
        let xs: Vec<Tensor<f64>> = inputs(3, 2).iter().map(|t| t.cast()).collect();
        let direct = net.fuse(&xs).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = net.record(&mut tape, &vars).unwrap();
        assert!(tape.value(y).max_abs_diff(&direct).unwrap() < 1e-12);
    }
}
