//! Rate Norm Layer: clip the pre-activation at a trainable threshold
//! `theta = p * running_max` and emit the normalized rate `clip(pre, 0, theta) / theta`.
//!
//! `p` is parameterized as `sigmoid(p_raw)` so it stays inside (0, 1). While
//! `p_locked` is set the layer behaves as if `p = 1`, which is how the
//! accuracy-training stage runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thresholds at or below this are treated as a dead layer.
pub const MIN_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const INITIAL_RUNNING_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateNormState {
    pub p_raw: f64,
    pub running_max: f64,
    #[serde(rename = "m")]
    pub momentum: f64,
    pub shared_group: Option<usize>,
    #[serde(default = "default_locked")]
    pub p_locked: bool,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_locked() -> bool {
    true
}

fn default_mode() -> Mode {
    Mode::Eval
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] for `p` in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl RateNormState {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Argument(format!(
                "rate-norm momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            p_raw: 0.0,
            running_max: INITIAL_RUNNING_MAX,
            momentum,
            shared_group: None,
            p_locked: true,
            mode: Mode::Train,
        })
    }

    /// Effective scale factor: 1 while locked, `sigmoid(p_raw)` otherwise.
    pub fn p(&self) -> f64 {
        if self.p_locked {
            1.0
        } else {
            sigmoid(self.p_raw)
        }
    }

    pub fn threshold(&self) -> f64 {
        self.p() * self.running_max
    }

    /// `running_max <- (1 - m) * running_max + m * batch_max`. A negative batch
    /// maximum counts as 0 so the statistic never goes below zero.
    pub fn update_running_max(&mut self, batch_max: f64) {
        let batch_max = batch_max.max(0.0);
        self.running_max = (1.0 - self.momentum) * self.running_max + self.momentum * batch_max;
    }

    /// Makes `p` trainable starting from `p_raw`.
    pub fn unlock_p(&mut self, p_raw: f64) {
        self.p_raw = p_raw;
        self.p_locked = false;
    }
}

/// `theta = p * running_max` of a state.
pub fn rnl_threshold(state: &RateNormState) -> f64 {
    state.threshold()
}

/// Ties the `p` of every listed state to the first one's value under `group`.
///
/// Fails once any state already has a trainable `p`: tying mid-training would
/// silently discard the diverged values.
pub fn tie_shared_p(states: &mut [&mut RateNormState], group: usize) -> Result<()> {
    if let Some(i) = states.iter().position(|s| !s.p_locked) {
        return Err(Error::State(format!(
            "cannot tie p: rate-norm state {i} is already trainable"
        )));
    }
    let Some(p_raw) = states.first().map(|s| s.p_raw) else {
        return Ok(());
    };
    for s in states.iter_mut() {
        s.p_raw = p_raw;
        s.shared_group = Some(group);
    }
    Ok(())
}

/// Gradients produced by [`RateNorm::backward`].
#[derive(Debug, Clone)]
pub struct RnlGrads {
    pub d_pre: Tensor,
    /// d loss / d p (zero while `p` is locked).
    pub d_p: f64,
    /// d loss / d p_raw through the sigmoid.
    pub d_p_raw: f64,
}

#[derive(Debug, Clone)]
struct Cache {
    pre: Tensor,
    rate: Tensor,
    theta: f64,
    p: f64,
}

#[derive(Debug, Clone)]
pub struct RateNorm {
    pub state: RateNormState,
    /// Accumulated d loss / d p_raw since the last reset.
    pub grad_p_raw: f64,
    cache: Option<Cache>,
}

impl RateNorm {
    pub fn new(state: RateNormState) -> Self {
        Self {
            state,
            grad_p_raw: 0.0,
            cache: None,
        }
    }

    /// Forward pass that caches what backward needs. In train mode the
    /// running maximum is updated from this batch before `theta` is formed.
    pub fn forward(&mut self, pre: &Tensor) -> Result<Tensor> {
        if self.state.mode == Mode::Train {
            self.state.update_running_max(pre.max());
        }
        let p = self.state.p();
        let (rate, theta) = normalize(pre, p, self.state.running_max)?;
        self.cache = Some(Cache {
            pre: pre.clone(),
            rate: rate.clone(),
            theta,
            p,
        });
        Ok(rate)
    }

    /// Stateless forward; `p_override` replaces the effective `p`.
    pub fn infer(&self, pre: &Tensor, p_override: Option<f64>) -> Result<Tensor> {
        let p = p_override.unwrap_or_else(|| self.state.p());
        normalize(pre, p, self.state.running_max).map(|(rate, _)| rate)
    }

    /// Backward through the clip-and-divide. The running maximum is treated as
    /// a constant. Saturated and negative entries contribute nothing.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<RnlGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("rate-norm backward called before forward".into()))?;
        grad_out.expect_same_shape(&cache.pre)?;
        let theta = cache.theta;
        let mut d_pre = Vec::with_capacity(grad_out.len());
        let mut d_p = 0.0;
        for ((&pre, &rate), &g) in cache
            .pre
            .data()
            .iter()
            .zip(cache.rate.data())
            .zip(grad_out.data())
        {
            if (0.0..=theta).contains(&pre) {
                d_pre.push(g / theta);
                d_p -= g * rate / cache.p;
            } else {
                d_pre.push(0.0);
            }
        }
        let (d_p, d_p_raw) = if self.state.p_locked {
            (0.0, 0.0)
        } else {
            (d_p, d_p * cache.p * (1.0 - cache.p))
        };
        self.grad_p_raw += d_p_raw;
        Ok(RnlGrads {
            d_pre: Tensor::new(grad_out.shape().to_vec(), d_pre)?,
            d_p,
            d_p_raw,
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

fn normalize(pre: &Tensor, p: f64, running_max: f64) -> Result<(Tensor, f64)> {
    let theta = p * running_max;
    if !(theta > MIN_THRESHOLD) {
        return Err(Error::DegenerateThreshold { layer: 0, theta });
    }
    Ok((pre.map(|v| v.clamp(0.0, theta) / theta), theta))
}
