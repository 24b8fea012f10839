//! Conversion-quality and latency measurements: K curves, the rate
//! inference loss Ω, the `2Ω/t` bound, accuracy over latency and energy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::SimulationTrace;
use crate::tensor::Tensor;

/// Joules per spike unless configured otherwise.
pub const DEFAULT_ALPHA: f64 = 1e-9;
/// One simulation step lasts one millisecond.
pub const STEP_SECONDS: f64 = 1e-3;

/// `K = ||r - r_hat||^2 / ||r_hat||^2`.
pub fn k_value(r_hat: &Tensor, r: &Tensor) -> Result<f64> {
    r_hat.expect_same_shape(r)?;
    let denom = r_hat.l2_norm_sq();
    if denom == 0.0 {
        return Err(Error::UndefinedK);
    }
    let num: f64 = r_hat
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(num / denom)
}

/// Rate inference loss `Ω = ||r_hat||_1 / ||r_hat||_2^2`.
pub fn omega(r_hat: &Tensor) -> Result<f64> {
    let denom = r_hat.l2_norm_sq();
    if denom == 0.0 {
        return Err(Error::UndefinedOmega);
    }
    Ok(r_hat.l1_norm() / denom)
}

/// `dΩ/dp = ||r_hat||_1 / (p ||r_hat||_2^2)` for rates that are all strictly
/// inside the clip interval.
pub fn omega_grad(r_hat: &Tensor, p: f64) -> Result<f64> {
    Ok(omega(r_hat)? / p)
}

/// Gradient of Ω with respect to the rates themselves.
pub fn omega_grad_rates(r_hat: &Tensor) -> Result<Tensor> {
    let s2 = r_hat.l2_norm_sq();
    if s2 == 0.0 {
        return Err(Error::UndefinedOmega);
    }
    let s1 = r_hat.l1_norm();
    Ok(r_hat.map(|r| r.signum() / s2 - 2.0 * r * s1 / (s2 * s2)))
}

/// Rates of the cumulate-and-floor firing model: `floor(r_hat t) / t`.
pub fn floor_rates(r_hat: &Tensor, t: usize) -> Tensor {
    let tf = t as f64;
    r_hat.map(|r| (r * tf).floor() / tf)
}

/// `2Ω/t - K(r_hat, floor(r_hat t)/t)`; positive whenever the bound holds.
pub fn bound_margin(r_hat: &Tensor, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Argument("bound_margin needs t >= 1".into()));
    }
    if r_hat.data().iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Argument("rates must lie in [0, 1]".into()));
    }
    let k = k_value(r_hat, &floor_rates(r_hat, t))?;
    Ok(2.0 * omega(r_hat)? / t as f64 - k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCurve {
    pub layer: usize,
    /// `values[t - 1]` is K at time-step `t`.
    pub values: Vec<f64>,
}

impl KCurve {
    pub fn at(&self, t: usize) -> f64 {
        self.values[t - 1]
    }

    /// First step with `K < threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.values
            .iter()
            .position(|&k| k < threshold)
            .map(|i| i + 1)
    }

    /// First step from which `K < threshold` holds for the rest of the run.
    pub fn settling_time(&self, threshold: f64) -> Option<usize> {
        let last_above = self.values.iter().rposition(|&k| k >= threshold);
        match last_above {
            None => Some(1),
            Some(i) if i + 1 < self.values.len() => Some(i + 2),
            Some(_) => None,
        }
    }
}

/// K curves of every recorded layer of `trace` against reference rates
/// (one tensor per spiking layer, same sizes).
pub fn k_curves_from_trace(reference: &[Tensor], trace: &SimulationTrace) -> Result<Vec<KCurve>> {
    if reference.len() != trace.num_layers() {
        return Err(Error::Argument(format!(
            "{} reference layers for a trace with {} layers",
            reference.len(),
            trace.num_layers()
        )));
    }
    let mut curves = Vec::with_capacity(reference.len());
    for (layer, r_hat) in reference.iter().enumerate() {
        if r_hat.len() != trace.layer_sizes[layer] {
            return Err(Error::Argument(format!(
                "layer {layer}: reference has {} units, trace has {}",
                r_hat.len(),
                trace.layer_sizes[layer]
            )));
        }
        let flat = r_hat.clone().reshape(vec![r_hat.len()])?;
        let mut values = Vec::with_capacity(trace.steps);
        trace.for_each_rate(layer, |_, r| {
            values.push(k_value(&flat, r)?);
            Ok(())
        })?;
        curves.push(KCurve { layer, values });
    }
    Ok(curves)
}

/// Pointwise mean over samples of per-sample K curves.
pub fn mean_k_curves(per_sample: &[Vec<KCurve>]) -> Result<Vec<KCurve>> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::Argument("no K curves to average".into()))?;
    let mut out: Vec<KCurve> = first
        .iter()
        .map(|c| KCurve {
            layer: c.layer,
            values: vec![0.0; c.values.len()],
        })
        .collect();
    for curves in per_sample {
        if curves.len() != out.len() {
            return Err(Error::Argument("samples disagree on layer count".into()));
        }
        for (acc, c) in out.iter_mut().zip(curves) {
            if c.values.len() != acc.values.len() {
                return Err(Error::Argument("samples disagree on horizon".into()));
            }
            for (a, v) in acc.values.iter_mut().zip(&c.values) {
                *a += v;
            }
        }
    }
    let n = per_sample.len() as f64;
    for c in &mut out {
        for v in &mut c.values {
            *v /= n;
        }
    }
    Ok(out)
}

/// Final-step check of `K_l(T) <= 2Ω_l/T` on a real trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub layer: usize,
    pub k_final: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn check_final_bound(reference: &[Tensor], curves: &[KCurve]) -> Result<Vec<BoundCheck>> {
    reference
        .iter()
        .zip(curves)
        .map(|(r_hat, c)| {
            let t = c.values.len();
            let k_final = c.at(t);
            let bound = 2.0 * omega(r_hat)? / t as f64;
            Ok(BoundCheck {
                layer: c.layer,
                k_final,
                bound,
                holds: k_final <= bound,
            })
        })
        .collect()
}

pub fn write_k_curves_csv(path: &Path, curves: &[KCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "layer", "K"])?;
    for c in curves {
        for (i, k) in c.values.iter().enumerate() {
            w.write_record(&[(i + 1).to_string(), c.layer.to_string(), k.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Smallest 1-based step with `accuracy >= target`.
pub fn time_to_accuracy(accuracy: &[f64], target: f64) -> Option<usize> {
    accuracy.iter().position(|&a| a >= target).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub alpha: f64,
    /// Watts during each step.
    pub power: Vec<f64>,
    /// Joules consumed through each step.
    pub energy: Vec<f64>,
    pub total_spikes: u64,
    pub target: Option<f64>,
    pub time_to_target: Option<usize>,
    pub energy_to_target: Option<f64>,
}

impl EnergyReport {
    pub fn final_energy(&self) -> f64 {
        *self.energy.last().unwrap_or(&0.0)
    }
}

/// Power and energy from per-step spike counts. `E(t)` is the cumulative
/// integer spike count times `alpha`, so `E(T) == total_spikes * alpha`.
pub fn power_series(spikes_per_step: &[u64], alpha: f64) -> Result<EnergyReport> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let mut cumulative = 0u64;
    let mut power = Vec::with_capacity(spikes_per_step.len());
    let mut energy = Vec::with_capacity(spikes_per_step.len());
    for &s in spikes_per_step {
        cumulative += s;
        power.push(s as f64 / STEP_SECONDS * alpha);
        energy.push(cumulative as f64 * alpha);
    }
    Ok(EnergyReport {
        alpha,
        power,
        energy,
        total_spikes: cumulative,
        target: None,
        time_to_target: None,
        energy_to_target: None,
    })
}

/// Like [`power_series`], also integrating energy until `accuracy` first
/// reaches `target`.
pub fn energy_to_accuracy(
    spikes_per_step: &[u64],
    accuracy: &[f64],
    alpha: f64,
    target: f64,
) -> Result<EnergyReport> {
    if accuracy.len() != spikes_per_step.len() {
        return Err(Error::Dimension(format!(
            "{} accuracy points for {} steps",
            accuracy.len(),
            spikes_per_step.len()
        )));
    }
    let mut report = power_series(spikes_per_step, alpha)?;
    let t = time_to_accuracy(accuracy, target);
    report.target = Some(target);
    report.time_to_target = t;
    report.energy_to_target = t.map(|t| report.energy[t - 1]);
    Ok(report)
}

pub fn energy_from_trace(trace: &SimulationTrace, alpha: f64) -> Result<EnergyReport> {
    let spikes: Vec<u64> = (1..=trace.steps).map(|t| trace.spikes_at_step(t)).collect();
    power_series(&spikes, alpha)
}

/// `t,P,E,accuracy` rows.
pub fn write_energy_csv(path: &Path, report: &EnergyReport, accuracy: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "P", "E", "accuracy"])?;
    for (i, (p, e)) in report.power.iter().zip(&report.energy).enumerate() {
        let acc = accuracy.get(i).map(|a| a.to_string()).unwrap_or_default();
        w.write_record(&[(i + 1).to_string(), p.to_string(), e.to_string(), acc])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
