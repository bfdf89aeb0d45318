//! L1 training with Adam and a step-decay learning rate.

use dmffn_tensor::ops::l1_loss;
use dmffn_tensor::{Element, Tensor};

use crate::checkpoint::OptimizerState;
use crate::data::PairStream;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    /// Total optimiser steps, counting any completed before a resume.
    pub steps: usize,
    /// The learning rate halves, and a checkpoint is written, every this many steps.
    pub decay_every: usize,
    /// LR patch side.
    pub patch: usize,
    /// LR grid step between patches.
    pub stride: usize,
    pub augment: bool,
    pub seed: u64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 4,
            steps: 2000,
            decay_every: 500,
            patch: 32,
            stride: 32,
            augment: true,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Sets one field from its text form. Returns `Ok(false)` for an
    /// unknown key. `grad_clip = none` disables clipping.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn parse<N: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<N, String> {
            v.parse().map_err(|_| format!("expected {what}, got '{v}'"))
        }
        let int = "a non-negative integer";
        let real = "a number";
        match key {
            "lr0" => self.lr0 = parse(value, real)?,
            "beta1" => self.beta1 = parse(value, real)?,
            "beta2" => self.beta2 = parse(value, real)?,
            "eps" => self.eps = parse(value, real)?,
            "batch" => self.batch = parse(value, int)?,
            "steps" => self.steps = parse(value, int)?,
            "decay_every" => self.decay_every = parse(value, int)?,
            "patch" => self.patch = parse(value, int)?,
            "stride" => self.stride = parse(value, int)?,
            "augment" => self.augment = parse(value, "true or false")?,
            "seed" => self.seed = parse(value, int)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(parse(v, real)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            problems.push(format!(
                "lr0 must be finite and non-negative, got {}",
                self.lr0
            ));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("decay_every", self.decay_every),
            ("patch", self.patch),
            ("stride", self.stride),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("betas must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            problems.push("eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                problems.push("grad_clip must be positive".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Learning rate for 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let halvings = (step / self.decay_every).min(1000) as i32;
        self.lr0 * 0.5f64.powi(halvings)
    }
}

/// Adam with bias correction. Moments are kept at the model precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect()
        };
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// One update of every parameter in `params` with `grads` (same order).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Data(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get(id);
            let g = &grads[i];
            if g.len() != p.numel() {
                return Err(Error::Data(format!(
                    "gradient for `{}` has {} values, parameter has {}",
                    params.name(id),
                    g.len(),
                    p.numel()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.to_vec();
            for k in 0..data.len() {
                m[k] = b1 * m[k] + one_b1 * g[k];
                v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let shape = p.shape().to_vec();
            params.set(id, Tensor::from_vec(shape, data)?)?;
        }
        Ok(())
    }

    /// Moments at 32 bits for a checkpoint.
    pub fn to_state(&self) -> OptimizerState {
        let down = |b: &Vec<Vec<T>>| -> Vec<Vec<f32>> {
            b.iter()
                .map(|x| x.iter().map(|v| v.as_f64() as f32).collect())
                .collect()
        };
        OptimizerState {
            step: self.step,
            m: down(&self.m),
            v: down(&self.v),
        }
    }

    pub fn from_state(state: &OptimizerState, cfg: &TrainConfig) -> Self {
        let up = |b: &Vec<Vec<f32>>| -> Vec<Vec<T>> {
            b.iter()
                .map(|x| x.iter().map(|&v| T::lit(v as f64)).collect())
                .collect()
        };
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: state.step,
            m: up(&state.m),
            v: up(&state.v),
        }
    }
}

/// Reported after every completed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// 1-based number of the step just completed.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Gradients of every parameter, zero where none reached it.
pub fn collect_grads<T: Element>(params: &ParamStore<T>) -> Vec<Vec<T>> {
    params
        .tensors()
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]))
        .collect()
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grads<T: Element>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|v| *v *= k);
    }
    norm
}

/// Runs steps `adam.step + 1 ..= cfg.steps`, drawing batches from `stream`.
///
/// The stream is first positioned after the pairs consumed by completed
/// steps, so a model and optimiser restored from a checkpoint continue
/// exactly as an uninterrupted run would. `on_step` sees the model after
/// each update and may stop training by returning an error.
pub fn train<T: Element>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    stream: &mut PairStream,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepInfo, &Model<T>, &Adam<T>) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let first = adam.step as usize;
    stream.seek(first as u64 * cfg.batch as u64);
    let mut history = Vec::with_capacity(cfg.steps.saturating_sub(first));
    for step in first..cfg.steps {
        let lr = cfg.lr_at(step);
        let (lr_batch, hr_batch) = stream.next_batch::<T>(cfg.batch);
        let pred = model.forward(&lr_batch)?;
        let loss = l1_loss(&pred, &hr_batch)?;
        let value = loss.item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        loss.backward()?;
        let mut grads = collect_grads(&model.params);
        if let Some(max_norm) = cfg.grad_clip {
            clip_grads(&mut grads, max_norm);
        }
        adam.step(&mut model.params, &grads, lr)?;
        history.push(value);
        on_step(
            &StepInfo {
                step: step + 1,
                loss: value,
                lr,
            },
            model,
            adam,
        )?;
    }
    Ok(history)
}

/// `step,loss` lines.
pub fn format_loss_log(first_step: usize, history: &[f64]) -> String {
    history
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{},{l:e}\n", first_step + i))
        .collect()
}
