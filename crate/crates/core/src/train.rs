//! Adam, the step-halving learning-rate schedule, and the SR / fusion training loops.

use serde::{Deserialize, Serialize};

use crate::data::{sample_minibatch, ClassDataset, PairSource, PatchSpec, Split};
use crate::error::{bail, Error, Result};
use crate::fusion::FusionNet;
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::sr::{ModelBank, SrModel};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update; gradients are zeroed afterwards.
    ///
    /// Nothing is modified if any gradient is missing or non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            bail!(
                Usage,
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            );
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.len() {
                bail!(Dimension, "parameter {i} changed size");
            }
            match p.grad() {
                None => bail!(Usage, "parameter {i} has no gradient"),
                Some(g) if g.iter().any(|x| !x.is_finite()) => {
                    bail!(Numeric, "non-finite gradient in parameter {i}")
                }
                Some(_) => {}
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let correction1 = T::lit(1.0 - c.beta1.powi(t));
        let correction2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(lr);
        let eps = T::lit(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.take_grad().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(&grad).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * *g;
                v[j] = b2 * v[j] + (one - b2) * *g * *g;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.accumulate_grad(&vec![T::zero(); grad.len()])?;
        }
        Ok(())
    }
}

/// `lr(t) = lr0 * 0.5^floor(t / half_life)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub half_life: u64,
    pub total_iters: u64,
}

impl TrainSchedule {
    /// 1e-4, halved every 50k, 130k iterations.
    pub fn paper() -> Self {
        TrainSchedule {
            lr0: 1e-4,
            half_life: 50_000,
            total_iters: 130_000,
        }
    }

    /// Full-size schedule compressed to 2.4k iterations (halving at 1k). The higher
    /// starting rate makes up for the 50x shorter run.
    pub fn desk() -> Self {
        TrainSchedule {
            lr0: 2e-3,
            half_life: 1_000,
            total_iters: 2_400,
        }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        let halvings = t / self.half_life.max(1);
        self.lr0 * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub loss: LossKind,
    /// Loss-curve resolution: one point per this many steps.
    pub log_every: u64,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            loss: LossKind::L1,
            log_every: 100,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the steps since the previous point.
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Loss of every step.
    pub per_step: Vec<f64>,
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    /// Tab-separated `step, lr, loss` with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tlr\tloss\n");
        for p in &self.points {
            out.push_str(&format!("{}\t{:e}\t{:.8}\n", p.step, p.lr, p.loss));
        }
        out
    }

    /// Mean per-step loss over a window at the start and at the end.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        if self.per_step.is_empty() {
            return None;
        }
        let w = window.clamp(1, self.per_step.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.per_step[..w]), mean(&self.per_step[self.per_step.len() - w..])))
    }
}

struct CurveBuilder {
    curve: LossCurve,
    log_every: u64,
    window: Vec<f64>,
}

impl CurveBuilder {
    fn new(log_every: u64) -> Self {
        CurveBuilder {
            curve: LossCurve::default(),
            log_every: log_every.max(1),
            window: Vec::new(),
        }
    }

    fn push(&mut self, step: u64, lr: f64, loss: f64) {
        self.curve.per_step.push(loss);
        self.window.push(loss);
        if (step + 1).is_multiple_of(self.log_every) {
            self.flush(step, lr);
        }
    }

    fn flush(&mut self, step: u64, lr: f64) {
        if self.window.is_empty() {
            return;
        }
        let loss = self.window.iter().sum::<f64>() / self.window.len() as f64;
        self.curve.points.push(LossPoint { step, lr, loss });
        self.window.clear();
    }

    fn finish(mut self, last_step: u64, lr: f64) -> LossCurve {
        self.flush(last_step, lr);
        self.curve
    }
}

fn record_loss<T: Scalar>(tape: &mut Tape<T>, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    match kind {
        LossKind::L1 => tape.l1_loss(pred, target),
        LossKind::L2 => tape.mse_loss(pred, target),
    }
}

fn at_step(step: u64, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("training diverged at step {step}: {msg}")),
        other => other,
    }
}

/// Called after each step with the step index; used for checkpoint cadence.
pub type StepHook<'a, M> = &'a mut dyn FnMut(u64, &M) -> Result<()>;

/// Trains one SR model on one training set with the given schedule.
pub fn train_sr<T: Scalar>(
    model: &mut SrModel<T>,
    ds: &ClassDataset<T>,
    spec: &PatchSpec,
    schedule: &TrainSchedule,
    options: &TrainOptions,
    mut hook: Option<StepHook<'_, SrModel<T>>>,
) -> Result<LossCurve> {
    if ds.split != Split::Train {
        bail!(Usage, "SR training needs a train split, got {}", ds.split.as_str());
    }
    if ds.is_empty() {
        bail!(Data, "training set {:?} is empty", ds.class_label);
    }
    ds.ensure_patchable(spec.hr_patch)?;
    let mut adam = Adam::new(options.adam);
    let mut curve = CurveBuilder::new(options.log_every);
    for step in 0..schedule.total_iters {
        let batch = sample_minibatch(ds, spec, step)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.lr);
        let y = model.record(&mut tape, x).map_err(|e| at_step(step, e))?;
        let target = tape.constant(batch.hr);
        let loss = record_loss(&mut tape, options.loss, y, target).map_err(|e| at_step(step, e))?;
        let value = tape.scalar_value(loss).as_f64();
        let grads = tape.backward(loss)?;
        drop(tape);
        grads.accumulate_into(model.params_mut())?;
        let lr = schedule.lr_at(step);
        adam.step(&mut model.params_mut(), lr).map_err(|e| at_step(step, e))?;
        curve.push(step, lr, value);
        if let Some(h) = hook.as_mut() {
            h(step, model)?;
        }
    }
    let last = schedule.total_iters.saturating_sub(1);
    Ok(curve.finish(last, schedule.lr_at(last)))
}

/// Trains the fusion network on top of a frozen bank.
pub fn train_fusion<T: Scalar, S: PairSource<T> + ?Sized>(
    net: &mut FusionNet<T>,
    bank: &ModelBank<T>,
    stream: &S,
    spec: &PatchSpec,
    schedule: &TrainSchedule,
    options: &TrainOptions,
    mut hook: Option<StepHook<'_, FusionNet<T>>>,
) -> Result<LossCurve> {
    if !bank.is_frozen() {
        bail!(Usage, "fusion training needs a frozen model bank");
    }
    if bank.len() != net.config().n_inputs {
        bail!(
            Usage,
            "fusion expects {} inputs but the bank has {} models",
            net.config().n_inputs,
            bank.len()
        );
    }
    let mut adam = Adam::new(options.adam);
    let mut curve = CurveBuilder::new(options.log_every);
    for step in 0..schedule.total_iters {
        let batch = sample_minibatch(stream, spec, step)?;
        let outputs = bank.forward(&batch.lr).map_err(|e| at_step(step, e))?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = outputs.into_iter().map(|o| tape.constant(o)).collect();
        let y = net.record(&mut tape, &vars).map_err(|e| at_step(step, e))?;
        let target = tape.constant(batch.hr);
        let loss = record_loss(&mut tape, options.loss, y, target).map_err(|e| at_step(step, e))?;
        let value = tape.scalar_value(loss).as_f64();
        let grads = tape.backward(loss)?;
        drop(tape);
        grads.accumulate_into(net.params_mut())?;
        let lr = schedule.lr_at(step);
        adam.step(&mut net.params_mut(), lr).map_err(|e| at_step(step, e))?;
        curve.push(step, lr, value);
        if let Some(h) = hook.as_mut() {
            h(step, net)?;
        }
    }
    let last = schedule.total_iters.saturating_sub(1);
    Ok(curve.finish(last, schedule.lr_at(last)))
}

/// Held-out losses of every bank model, their mean, and (optionally) the fusion
/// network, over the same minibatches `first_step..first_step + steps` of `stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamLosses {
    pub per_model: Vec<f64>,
    pub mean_baseline: f64,
    pub fusion: Option<f64>,
}

pub fn stream_losses<T: Scalar, S: PairSource<T> + ?Sized>(
    bank: &ModelBank<T>,
    net: Option<&FusionNet<T>>,
    stream: &S,
    spec: &PatchSpec,
    first_step: u64,
    steps: u64,
    kind: LossKind,
) -> Result<StreamLosses> {
    use crate::tensor::kernels;
    let loss_of = |p: &Tensor<T>, t: &Tensor<T>| -> Result<f64> {
        Ok(match kind {
            LossKind::L1 => kernels::l1_loss(p, t)?,
            LossKind::L2 => kernels::mse_loss(p, t)?,
        }
        .as_f64())
    };
    let mut per_model = vec![0.0; bank.len()];
    let mut mean_baseline = 0.0;
    let mut fusion = 0.0;
    for step in first_step..first_step + steps {
        let batch = sample_minibatch(stream, spec, step)?;
        let outputs = bank.forward(&batch.lr)?;
        for (acc, o) in per_model.iter_mut().zip(&outputs) {
            *acc += loss_of(o, &batch.hr)?;
        }
        let refs: Vec<&Tensor<T>> = outputs.iter().collect();
        mean_baseline += loss_of(&kernels::mean_of(&refs)?, &batch.hr)?;
        if let Some(net) = net {
            fusion += loss_of(&net.fuse(&outputs)?, &batch.hr)?;
        }
    }
    let n = steps.max(1) as f64;
    Ok(StreamLosses {
        per_model: per_model.into_iter().map(|v| v / n).collect(),
        mean_baseline: mean_baseline / n,
        fusion: net.map(|_| fusion / n),
    })
}
