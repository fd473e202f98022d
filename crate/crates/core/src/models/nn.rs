//! Shared training loop for the differentiable families.

use std::fmt::Debug;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    auto_positive_weight, sample_weights, sigmoid, weighted_loss, Dataset, Task, TrainConfig,
    TrainingMetadata,
};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::windowing::{fit_scaler, Scaler, SD_FLOOR};

/// A scalar-output network over a flat parameter vector.
pub trait Network: Clone + Debug + PartialEq + Serialize + DeserializeOwned + Send + Sync {
    const NAME: &'static str;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, x: &[f64]) -> f64;
    /// Runs the forward pass, asks `upstream` for dLoss/dOutput at the
    /// output, and accumulates dLoss/dParams into `grad`. Returns the output.
    fn backward(&self, x: &[f64], upstream: &mut dyn FnMut(f64) -> f64, grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub fn validate(&self, family: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(LabError::Config(format!("{family}: learning_rate must be in (0, 1]")));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config(format!("{family}: batch_size must be at least 1")));
        }
        Ok(())
    }
}

/// Per-sample loss on the raw network output and its derivative.
/// Classification uses log loss on logits, regression half squared error.
pub fn head_loss(task: Task, out: f64, target: f64) -> (f64, f64) {
    match task {
        Task::BinaryClassification => {
            let softplus = if out > 0.0 { out + (-out).exp().ln_1p() } else { out.exp().ln_1p() };
            (softplus - target * out, sigmoid(out) - target)
        }
        Task::Regression => {
            let e = out - target;
            (0.5 * e * e, e)
        }
    }
}

/// Weighted mean loss over rows and its gradient in parameter space, on
/// inputs and targets already in network units.
pub fn loss_and_grad<N: Network>(net: &N, x: &Matrix, y: &[f64], w: &[f64], task: Task) -> (f64, Vec<f64>) {
    let rows: Vec<usize> = (0..x.rows()).collect();
    batch_loss_and_grad(net, x, y, w, task, &rows)
}

fn batch_loss_and_grad<N: Network>(
    net: &N,
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    task: Task,
    rows: &[usize],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; net.params().len()];
    let wsum: f64 = rows.iter().map(|&r| w[r]).sum();
    let mut loss = 0.0;
    for &r in rows {
        let scale = w[r] / wsum;
        net.backward(
            x.row(r),
            &mut |out| {
                let (l, d) = head_loss(task, out, y[r]);
                loss += scale * l;
                scale * d
            },
            &mut grad,
        );
    }
    (loss, grad)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// A trained network with its input scaler and, for regression, the target
/// standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "N: Network")]
pub struct NeuralModel<N: Network> {
    pub task: Task,
    pub scaler: Scaler,
    pub target_mean: f64,
    pub target_sd: f64,
    pub net: N,
}

impl<N: Network> NeuralModel<N> {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(row.len());
        self.scaler.transform_row(row, &mut buf);
        let out = self.net.forward(&buf);
        match self.task {
            Task::BinaryClassification => sigmoid(out),
            Task::Regression => out * self.target_sd + self.target_mean,
        }
    }

    fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.iter_rows().map(|r| self.predict_row(r)).collect()
    }
}

pub(crate) fn train<N: Network>(
    build: impl Fn(usize, &mut ChaCha8Rng) -> N,
    opt: &OptimizerConfig,
    config: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
) -> Result<(NeuralModel<N>, TrainingMetadata)> {
    let task = config.task;
    let scaler = fit_scaler(&data.x.x, &data.continuous)?;
    let x = scaler.transform(&data.x.x);
    let (target_mean, target_sd) = match task {
        Task::BinaryClassification => (0.0, 1.0),
        Task::Regression => {
            let n = data.len() as f64;
            let mean = data.y.iter().sum::<f64>() / n;
            let var = data.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt().max(SD_FLOOR))
        }
    };
    let y: Vec<f64> = data.y.iter().map(|v| (v - target_mean) / target_sd).collect();
    let pw = config.positive_weight.unwrap_or_else(|| auto_positive_weight(&data.y));
    let w = sample_weights(task, &data.y, Some(pw));
    let val_w = val.map(|v| sample_weights(task, &v.y, Some(pw)));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = NeuralModel {
        task,
        scaler,
        target_mean,
        target_sd,
        net: build(data.n_features(), &mut rng),
    };
    let mut adam = Adam::new(model.net.params().len(), opt.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best: Option<(f64, N, usize)> = None;
    let mut since_best = 0;
    let mut epochs = 0;
    let mut last_loss = f64::NAN;

    for epoch in 0..config.max_rounds {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opt.batch_size) {
            let (loss, grad) = batch_loss_and_grad(&model.net, &x, &y, &w, task, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(LabError::Numeric(format!(
                    "{}: non-finite loss at epoch {epoch}",
                    N::NAME
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(model.net.params_mut(), &grad);
        }
        epochs = epoch + 1;
        last_loss = epoch_loss / data.len() as f64;
        if let (Some(v), Some(vw)) = (val, val_w.as_ref()) {
            let loss = weighted_loss(task, &model.predict(&v.x.x), &v.y, vw);
            if !loss.is_finite() {
                return Err(LabError::Numeric(format!(
                    "{}: non-finite validation loss at epoch {epoch}",
                    N::NAME
                )));
            }
            if best.as_ref().is_none_or(|b| loss < b.0) {
                best = Some((loss, model.net.clone(), epochs));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    let mut rounds_used = epochs;
    if let Some((_, net, at)) = best {
        model.net = net;
        rounds_used = at;
    }
    log::debug!("{}: {rounds_used} epochs, last batch loss {last_loss:.6}", N::NAME);
    let pred = model.predict(&data.x.x);
    let meta = TrainingMetadata {
        rounds_used,
        final_train_loss: weighted_loss(task, &pred, &data.y, &w),
        ..Default::default()
    };
    Ok((model, meta))
}

/// Uniform Xavier initialization bound.
pub(crate) fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Max relative error between analytic and central-difference gradients,
/// with the denominator floored to keep tiny components from dominating.
pub fn gradient_check<N: Network>(net: &N, x: &Matrix, y: &[f64], w: &[f64], task: Task, h: f64) -> f64 {
    let (_, analytic) = loss_and_grad(net, x, y, w, task);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &exact) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let (up, _) = loss_and_grad(&probe, x, y, w, task);
        probe.params_mut()[i] = orig - h;
        let (down, _) = loss_and_grad(&probe, x, y, w, task);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = exact.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((exact - numeric).abs() / denom);
    }
    worst
}
