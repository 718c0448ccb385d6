use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use super::layers::{Mode, Param};
use crate::error::{Error, Result};
use crate::rng;
use crate::sigproc::EpochTensor;
use crate::tensorkit::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-7,
            batch_size: 64,
            epochs: 500,
        }
    }
}

impl TrainConfig {
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lr", self.lr > 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("betas", (0.0..1.0).contains(&self.betas.0) && self.betas.0 > 0.0),
            ("betas", (0.0..1.0).contains(&self.betas.1) && self.betas.1 > 0.0),
            ("eps", self.eps > 0.0),
            ("batch_size", self.batch_size > 0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::validation(format!("train.{name}"), "out of range"));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update at timestep `t` (1-based) with decoupled weight decay.
pub fn adamw_step(w: &mut [f64], g: &[f64], state: &mut AdamState, t: u64, cfg: &TrainConfig) {
    if state.m.len() != w.len() {
        state.m = vec![0.0; w.len()];
        state.v = vec![0.0; w.len()];
    }
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..w.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps) + cfg.lr * cfg.weight_decay * w[i];
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamW {
    t: u64,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Param>, cfg: &TrainConfig) {
        self.t += 1;
        for (k, p) in params.enumerate() {
            if self.states.len() <= k {
                self.states.push(AdamState::default());
            }
            adamw_step(&mut p.value, &p.grad, &mut self.states[k], self.t, cfg);
        }
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
}

pub fn epochs_to_tensor(e: &EpochTensor) -> Result<Tensor> {
    Tensor::new(vec![e.n_trials, 1, e.n_channels, e.n_samples], e.data.clone())
}

/// Minibatch AdamW on mean BCE with max-norm projection after each step.
pub fn train(g: &mut ModelGraph, e: &EpochTensor, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let x = epochs_to_tensor(e)?;
    let y: Vec<f64> = e.labels.iter().map(|&l| l as f64).collect();
    train_arrays(g, &x, &y, cfg, seed)
}

pub fn train_arrays(g: &mut ModelGraph, x: &Tensor, y: &[f64], cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    let n = x.batch();
    if y.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} trials", y.len())));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let item = x.item_len();
    let mut shape = x.shape().to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut dropout = rng::stream(seed, "dropout");
    let mut opt = AdamW::default();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * item);
            batch.iter().for_each(|&i| data.extend_from_slice(x.item(i)));
            shape[0] = batch.len();
            let xb = Tensor::new(shape.clone(), data)?;
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let loss = g.forward_backward(&xb, &yb, Mode::Train, &mut dropout)?;
            total += loss * batch.len() as f64;
            opt.step(g.params_mut(), cfg);
            g.apply_max_norm();
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical("training diverged".into()));
        }
        trace.push(mean);
    }
    Ok(TrainReport { loss_trace: trace })
}
