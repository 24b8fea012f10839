//! Two-stage training: weights for accuracy with `p` locked at 1, then a
//! shared trainable `p` for fast inference with the weights frozen.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{omega, omega_grad_rates};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::ops;
use crate::optim::Sgd;
use crate::rate_norm::{logit, Mode};
use crate::tensor::Tensor;

/// Shared group id used when tying all rate-norm layers for stage 2.
pub const SHARED_P_GROUP: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// SGD momentum for stage 1; stage 2 uses plain gradient descent.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Starting value of the shared `p` when stage 2 unlocks it.
    #[serde(default = "default_initial_p")]
    pub initial_p: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    32
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lambda() -> f64 {
    0.5
}
fn default_initial_p() -> f64 {
    0.95
}

impl StageConfig {
    pub fn new(epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            lr,
            batch_size: default_batch(),
            momentum: default_momentum(),
            lambda: default_lambda(),
            initial_p: default_initial_p(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.initial_p > 0.0 && self.initial_p < 1.0) {
            return bad(format!(
                "initial_p must be in (0, 1), got {}",
                self.initial_p
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub mean_omega: f64,
    pub p: f64,
    pub thetas: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path, layers: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = ["epoch", "loss", "acc", "mean_omega", "p"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=layers).map(|l| format!("theta_{l}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.loss.to_string(),
                r.acc.to_string(),
                r.mean_omega.to_string(),
                r.p.to_string(),
            ];
            rec.extend(r.thetas.iter().map(|t| t.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fraction of correct predictions.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let pred = net.predict(&data.inputs)?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Mean over rate-norm layers of Ω of the layer's outputs over the whole
/// batch, using each layer's current `p`.
pub fn mean_omega(net: &Network, x: &Tensor) -> Result<f64> {
    let outs = net.rate_norm_outputs(x, None)?;
    if outs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for o in &outs {
        sum += omega(o)?;
    }
    Ok(sum / outs.len() as f64)
}

/// `1 - cos(r_star, r_prime) + lambda * mean(omegas)`.
pub fn fast_loss(r_star: &Tensor, r_prime: &Tensor, omegas: &[f64], lambda: f64) -> Result<f64> {
    let cos = ops::cosine_similarity(r_star, r_prime)?;
    let penalty = if omegas.is_empty() {
        0.0
    } else {
        omegas.iter().sum::<f64>() / omegas.len() as f64
    };
    Ok(1.0 - cos.value + lambda * penalty)
}

fn shared_p(net: &Network) -> f64 {
    net.rate_norms().first().map_or(1.0, |r| r.state.p())
}

fn log_row(net: &Network, data: &Dataset, epoch: usize, loss: f64) -> Result<TrainLogRow> {
    Ok(TrainLogRow {
        epoch,
        loss,
        acc: accuracy(net, data)?,
        mean_omega: mean_omega(net, &data.inputs)?,
        p: shared_p(net),
        thetas: net.thresholds(),
    })
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Accuracy training: cross-entropy on the network output with momentum SGD
/// on weights and biases. Rate-norm layers must have `p` locked; their
/// running maxima update during training and are frozen afterwards.
pub fn stage1_train(net: &mut Network, data: &Dataset, cfg: &StageConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if net.rate_norms().iter().any(|r| !r.state.p_locked) {
        return Err(Error::State("stage 1 needs every p locked at 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        net.set_mode(Mode::Train);
        let mut total = 0.0;
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let x = data.inputs.select_rows(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            net.zero_grad();
            let outs = net.forward_train(&x)?;
            let (loss, grad) = ops::cross_entropy_with_grad(outs.last().expect("layers"), &y)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("epoch {epoch}: loss is {loss}")));
            }
            total += loss * idx.len() as f64;
            net.backward(&grad, &[])?;
            opt.step(&mut net.params_mut())
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
        }
        net.clear_caches();
        net.set_mode(Mode::Eval);
        log.rows
            .push(log_row(net, data, epoch, total / data.len() as f64)?);
    }
    net.set_mode(Mode::Eval);
    Ok(log)
}

/// Stage-2 objective and its gradient on a batch. The reference output uses
/// `p = 1`; the training pass uses the network's trainable `p`. Gradients
/// accumulate into the rate-norm `p_raw` accumulators (and, unused, into the
/// weight gradients).
pub fn stage2_objective(net: &mut Network, x: &Tensor, lambda: f64) -> Result<f64> {
    let reference = net.forward_with_p(x, Some(1.0))?;
    let outs = net.forward_train(x)?;
    let out = outs.last().expect("layers");
    let rnl = net.rate_norm_indices();

    let mut omegas = Vec::with_capacity(rnl.len());
    let mut injections = Vec::with_capacity(rnl.len());
    let weight = if rnl.is_empty() {
        0.0
    } else {
        lambda / rnl.len() as f64
    };
    for &i in &rnl {
        omegas.push(omega(&outs[i])?);
        injections.push((i, omega_grad_rates(&outs[i])?.scale(weight)));
    }
    let loss = fast_loss(&reference, out, &omegas, lambda)?;
    let grad_out = ops::cosine_grad_b(&reference, out)?.scale(-1.0);
    net.backward(&grad_out, &injections)?;
    Ok(loss)
}

/// Fast-inference training. Ties every rate-norm `p` into one group,
/// unlocks it at `cfg.initial_p` (unless already unlocked), freezes running
/// maxima and runs plain gradient descent on the shared `p_raw`. Weights and
/// biases are never modified.
pub fn stage2_train(net: &mut Network, data: &Dataset, cfg: &StageConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if net.rate_norms().is_empty() {
        return Err(Error::State(
            "stage 2 needs at least one rate-norm layer".into(),
        ));
    }
    if net.rate_norms().iter().all(|r| r.state.p_locked) {
        net.tie_all_p(SHARED_P_GROUP)?;
        net.unlock_p(logit(cfg.initial_p));
    }
    net.set_mode(Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let x = data.inputs.select_rows(&idx)?;
            net.zero_grad();
            let loss = stage2_objective(net, &x, cfg.lambda)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch}: stage-2 loss is {loss}"
                )));
            }
            total += loss * idx.len() as f64;
            net.threshold_step(cfg.lr)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
        }
        net.clear_caches();
        net.zero_grad();
        log.rows
            .push(log_row(net, data, epoch, total / data.len() as f64)?);
    }
    Ok(log)
}
