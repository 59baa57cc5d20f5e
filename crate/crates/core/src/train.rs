//! Losses, optimisers and the training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::gradients;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::solver::{forward, forward_taped};
use crate::tensor::Tensor;

/// Mean squared error and its gradient `2(pred - target)/N`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let r = p - t;
            value += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((value / n, Tensor::vector(grad)))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub iterations: usize,
    /// `None` trains on the full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
    /// Steps between divergence checkpoints.
    pub checkpoint_every: usize,
    pub max_restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            iterations: 3000,
            batch_size: None,
            seed: 0,
            loss: LossKind::Mse,
            checkpoint_every: 100,
            max_restarts: 2,
        }
    }
}

/// Affine head `W z + b` on the data components of an observed state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Readout {
    /// Xavier-uniform weights, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: (0..out_dim)
                .map(|_| (0..in_dim).map(|_| rng.gen_range(-bound..=bound)).collect())
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn param_count(&self) -> usize {
        self.bias.len() * (1 + self.weight.first().map_or(0, Vec::len))
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for row in &self.weight {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.bias);
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for row in &mut self.weight {
            for w in row.iter_mut() {
                *w = it.next().expect("readout slice length");
            }
        }
        for b in &mut self.bias {
            *b = it.next().expect("readout slice length");
        }
    }
}

/// A continuous-depth model, optionally followed by a readout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub readout: Option<Readout>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Self {
        Self { spec, readout: None }
    }

    pub fn with_readout(mut self, readout: Readout) -> Self {
        self.readout = Some(readout);
        self
    }

    pub fn param_count(&self) -> usize {
        self.spec.params.param_count() + self.readout.as_ref().map_or(0, Readout::param_count)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.spec.params.flatten();
        if let Some(r) = &self.readout {
            r.write_flat(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.spec.params.param_count();
        if flat.len() != self.param_count() {
            return Err(Error::InvalidModel(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        self.spec.params.set_flat(&flat[..n])?;
        if let Some(r) = &mut self.readout {
            r.set_flat(&flat[n..]);
        }
        Ok(())
    }

    /// Outputs at `times`: readout of the data components, or the data
    /// components themselves.
    pub fn predict(&self, x: &Tensor, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        let rec = forward(&self.spec, x, times)?;
        let dd = self.spec.data_dim();
        Ok(rec
            .observations
            .iter()
            .map(|(_, z)| self.head(&z.data()[..dd]))
            .collect())
    }

    fn head(&self, z: &[f64]) -> Vec<f64> {
        match &self.readout {
            Some(r) => r.apply(z),
            None => z.to_vec(),
        }
    }

    /// Sum of squared errors on one sample and its gradient in the flat
    /// layout of [`flatten`](Self::flatten).
    pub fn sample_sse_grad(&self, sample: &Sample) -> Result<(f64, Vec<f64>)> {
        let times: Vec<f64> = sample.targets.iter().map(|(t, _)| *t).collect();
        let rec = forward_taped(&self.spec, &sample.x, &times)?;
        let dd = self.spec.data_dim();
        let sd = self.spec.state_dim();
        let mut sse = 0.0;
        let mut head_grad = vec![0.0; self.readout.as_ref().map_or(0, Readout::param_count)];
        let mut loss_grads = Vec::with_capacity(times.len());
        for ((t, z), (_, target)) in rec.observations.iter().zip(&sample.targets) {
            let zd = &z.data()[..dd];
            let pred = self.head(zd);
            if pred.len() != target.len() {
                return Err(Error::ShapeMismatch {
                    op: "training target",
                    lhs: vec![pred.len()],
                    rhs: target.shape().to_vec(),
                });
            }
            let g: Vec<f64> = pred
                .iter()
                .zip(target.data())
                .map(|(p, y)| {
                    sse += (p - y) * (p - y);
                    2.0 * (p - y)
                })
                .collect();
            let mut gz = vec![0.0; sd];
            match &self.readout {
                Some(r) => {
                    let cols = dd;
                    for (o, (row, go)) in r.weight.iter().zip(&g).enumerate() {
                        for c in 0..cols {
                            gz[c] += row[c] * go;
                            head_grad[o * cols + c] += go * zd[c];
                        }
                        head_grad[r.weight.len() * cols + o] += go;
                    }
                }
                None => gz[..dd].copy_from_slice(&g),
            }
            loss_grads.push((*t, Tensor::vector(gz)));
        }
        let mut grad = gradients(&rec, &loss_grads)?.params;
        grad.extend_from_slice(&head_grad);
        Ok((sse, grad))
    }

    /// Mean squared error over `samples` and, if asked, its gradient.
    pub fn loss_and_grad(&self, samples: &[&Sample], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let count: usize = samples.iter().map(|s| s.target_len()).sum();
        let n = count.max(1) as f64;
        if !with_grad {
            let sse = samples
                .par_iter()
                .map(|s| self.sample_sse(s))
                .collect::<Result<Vec<_>>>()?;
            return Ok((sse.iter().sum::<f64>() / n, Vec::new()));
        }
        let parts = samples
            .par_iter()
            .map(|s| self.sample_sse_grad(s))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; self.param_count()];
        let mut sse = 0.0;
        for (l, g) in parts {
            sse += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        for g in &mut grad {
            *g /= n;
        }
        Ok((sse / n, grad))
    }

    fn sample_sse(&self, sample: &Sample) -> Result<f64> {
        let times: Vec<f64> = sample.targets.iter().map(|(t, _)| *t).collect();
        let preds = self.predict(&sample.x, &times)?;
        Ok(preds
            .iter()
            .zip(&sample.targets)
            .flat_map(|(p, (_, y))| p.iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)))
            .sum())
    }

    pub fn loss(&self, samples: &[Sample]) -> Result<f64> {
        let refs: Vec<&Sample> = samples.iter().collect();
        Ok(self.loss_and_grad(&refs, false)?.0)
    }
}

/// One input and its targets at observation times.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub targets: Vec<(f64, Tensor)>,
}

impl Sample {
    fn target_len(&self) -> usize {
        self.targets.iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// `(step, loss before that step's update)`.
    pub train: Vec<(usize, f64)>,
    /// `(step, test losses)` whenever the monitor reports them.
    pub test: Vec<(usize, Vec<f64>)>,
    /// Full-batch loss of the returned parameters.
    pub final_loss: f64,
    pub restarts: usize,
}

impl TrainHistory {
    /// `step,train_loss[,test_loss_h…]`; test cells are empty on steps
    /// without a test evaluation.
    pub fn write_csv(&self, path: &Path, horizons: &[usize]) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "step,train_loss")?;
        for h in horizons {
            write!(w, ",test_loss_h{h}")?;
        }
        writeln!(w)?;
        let mut tests = self.test.iter().peekable();
        for &(step, loss) in &self.train {
            write!(w, "{step},{loss}")?;
            if !horizons.is_empty() {
                match tests.peek() {
                    Some((s, vals)) if *s == step => {
                        for v in vals {
                            write!(w, ",{v}")?;
                        }
                        tests.next();
                    }
                    _ => write!(w, "{}", ",".repeat(horizons.len()))?,
                }
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Hook called once per step with the parameters that produced `train_loss`.
/// Returning test losses records them in the history.
pub trait Monitor {
    fn on_step(&mut self, step: usize, model: &Model, train_loss: f64) -> Result<Option<Vec<f64>>>;
}

pub struct NoMonitor;

impl Monitor for NoMonitor {
    fn on_step(&mut self, _: usize, _: &Model, _: f64) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

impl<F: FnMut(usize, &Model, f64) -> Result<Option<Vec<f64>>>> Monitor for F {
    fn on_step(&mut self, step: usize, model: &Model, train_loss: f64) -> Result<Option<Vec<f64>>> {
        self(step, model, train_loss)
    }
}

pub fn train(model: Model, config: &TrainConfig, data: &[Sample]) -> Result<(Model, TrainHistory)> {
    train_with(model, config, data, &mut NoMonitor)
}

struct Checkpoint {
    step: usize,
    params: Vec<f64>,
    adam: AdamState,
    train_len: usize,
    test_len: usize,
}

fn diverged(e: &Error) -> bool {
    matches!(e, Error::NonFiniteState { .. } | Error::Divergence { .. })
}

/// Runs `config.iterations` optimiser steps. A non-finite loss rewinds to the
/// last checkpoint with the learning rate halved, at most
/// `config.max_restarts` times.
pub fn train_with(
    mut model: Model,
    config: &TrainConfig,
    data: &[Sample],
    monitor: &mut dyn Monitor,
) -> Result<(Model, TrainHistory)> {
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    if config.batch_size == Some(0) {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = model.flatten();
    let mut adam = AdamState::new(params.len());
    let mut history = TrainHistory::default();
    let mut lr = config.learning_rate;
    let batch = config.batch_size.unwrap_or(data.len()).min(data.len()).max(1);
    let per_epoch = data.len().div_ceil(batch).max(1);
    let mut epoch_perm: Option<(usize, Vec<usize>)> = None;
    let every = config.checkpoint_every.max(1);
    let mut ckpt = Checkpoint {
        step: 0,
        params: params.clone(),
        adam: adam.clone(),
        train_len: 0,
        test_len: 0,
    };

    let mut step = 0;
    while step < config.iterations {
        let samples: Vec<&Sample> = if batch >= data.len() {
            data.iter().collect()
        } else {
            let epoch = step / per_epoch;
            if epoch_perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(epoch as u64);
                let mut perm: Vec<usize> = (0..data.len()).collect();
                perm.shuffle(&mut rng);
                epoch_perm = Some((epoch, perm));
            }
            let perm = &epoch_perm.as_ref().unwrap().1;
            let b = step % per_epoch;
            perm[b * batch..((b + 1) * batch).min(data.len())]
                .iter()
                .map(|&i| &data[i])
                .collect()
        };
        let outcome = model.loss_and_grad(&samples, true).and_then(|(loss, grad)| {
            if loss.is_finite() && grad.iter().all(|g| g.is_finite()) {
                Ok((loss, grad))
            } else {
                Err(Error::Divergence { step })
            }
        });
        let (loss, grad) = match outcome {
            Ok(v) => v,
            Err(e) if diverged(&e) => {
                if history.restarts >= config.max_restarts {
                    return Err(Error::Divergence { step });
                }
                history.restarts += 1;
                lr /= 2.0;
                step = ckpt.step;
                params.clone_from(&ckpt.params);
                adam = ckpt.adam.clone();
                history.train.truncate(ckpt.train_len);
                history.test.truncate(ckpt.test_len);
                model.set_flat(&params)?;
                continue;
            }
            Err(e) => return Err(e),
        };
        if step % every == 0 && step != ckpt.step {
            ckpt = Checkpoint {
                step,
                params: params.clone(),
                adam: adam.clone(),
                train_len: history.train.len(),
                test_len: history.test.len(),
            };
        }
        history.train.push((step, loss));
        if let Some(test) = monitor.on_step(step, &model, loss)? {
            history.test.push((step, test));
        }
        match config.optimizer {
            Optimizer::Adam => adam_step(&mut params, &grad, &mut adam, lr),
            Optimizer::Sgd => sgd_step(&mut params, &grad, lr),
        }
        model.set_flat(&params)?;
        step += 1;
    }
    history.final_loss = model.loss(data)?;
    Ok((model, history))
}
