//! Minibatch training with MAE loss, global-norm clipping, step decay and
//! best-validation model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{GraphMode, ModelState, Moments, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::validation(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay`.
    pub decay_epochs: Vec<usize>,
    pub max_grad_norm: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Probability of feeding the ground truth to the next decoder step.
    pub teacher_forcing: f64,
    /// Worker threads for per-sample gradients; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 30,
            lr: 0.01,
            lr_decay: 0.1,
            decay_epochs: vec![10, 20],
            max_grad_norm: 5.0,
            optimizer: Optimizer::Adam,
            seed: 0,
            teacher_forcing: 0.0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::validation("lr must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::validation("lr_decay must lie in (0, 1]"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::validation("max_grad_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(Error::validation("teacher_forcing must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&m| m < epoch).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn best_val(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,wall_time_s\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.wall_time_s
            ));
        }
        out
    }
}

/// Sliding windows of `input_horizon` inputs followed by `output_horizon`
/// targets, stride 1. Each sample's adjacency comes from its own inputs.
pub fn make_samples(
    values: &Matrix,
    input_horizon: usize,
    output_horizon: usize,
    graph: &GraphMode,
    k: usize,
) -> Result<Vec<Sample>> {
    let need = input_horizon + output_horizon;
    if values.rows() < need {
        return Err(Error::validation(format!(
            "panel has {} steps, need at least {need} for one window",
            values.rows()
        )));
    }
    (0..=values.rows() - need)
        .map(|s| {
            let inputs = values.row_range(s, s + input_horizon);
            let targets = values.row_range(s + input_horizon, s + need);
            Sample::new(inputs, targets, graph, k)
        })
        .collect()
}

pub fn mae_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mae_loss",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    if pred.is_empty() {
        return Err(Error::validation("mae_loss of empty matrices"));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

pub fn sgd_step(params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], moments: &mut Moments, lr: f64) {
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.first.iter_mut())
        .zip(moments.second.iter_mut())
    {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

pub fn zero_moments(model: &ModelState) -> Moments {
    let zeros: Vec<Matrix> = model
        .params()
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    Moments {
        step: 0,
        first: zeros.clone(),
        second: zeros,
    }
}

/// Mean MAE over samples in scaled units.
pub fn evaluate_loss(model: &ModelState, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::validation("no samples to evaluate"));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| model.loss(s))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 33)
}

/// Trains `model`, returning the parameters with the lowest validation MAE.
pub fn train(
    model: ModelState,
    train_samples: &[Sample],
    val_samples: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::validation("training and validation sets must be nonempty"));
    }
    let run = || train_inner(model, train_samples, val_samples, config);
    if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    }
}

fn train_inner(
    mut model: ModelState,
    train_samples: &[Sample],
    val_samples: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut moments = model.moments.take().unwrap_or_else(|| zero_moments(&model));
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelState)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = config.lr_for_epoch(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let teacher = config.teacher_forcing;
            let results: Vec<(f64, Vec<Matrix>)> = batch
                .par_iter()
                .map(|&i| {
                    let tf = (teacher > 0.0).then(|| (teacher, mix_seed(config.seed, epoch as u64, i as u64)));
                    model.loss_and_grads(&train_samples[i], tf)
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            let mut batch_loss = 0.0;
            let mut grads: Option<Vec<Matrix>> = None;
            for (loss, g) in results {
                batch_loss += loss;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            let mut grads = grads.unwrap_or_default();
            grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / n));
            clip_gradients(&mut grads, config.max_grad_norm);
            let mut params = model.params_mut();
            match config.optimizer {
                Optimizer::Adam => adam_step(&mut params, &grads, &mut moments, lr),
                Optimizer::Sgd => sgd_step(&mut params, &grads, lr),
            }
            loss_sum += batch_loss * n;
        }
        let train_loss = loss_sum / train_samples.len() as f64;
        let val_loss = evaluate_loss(&model, val_samples)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            let mut snapshot = model.clone();
            snapshot.moments = Some(moments.clone());
            best = Some((val_loss, snapshot));
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, log))
}
