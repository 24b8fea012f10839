//! Building spiking networks from trained ANNs: direct rate-norm conversion,
//! Max Norm, Robust Norm and post-hoc threshold scaling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::rate_norm::{Mode, MIN_THRESHOLD};
use crate::snn::{SnnStage, SpikingLayer, SpikingNetwork, SynapticOp};
use crate::tensor::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 99.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub scheme: String,
    /// `v_th` of each spiking layer.
    pub thresholds: Vec<f64>,
    /// Normalization factor per synaptic layer (`max_l`, a percentile, or
    /// the rate-norm threshold), readout last when present.
    pub scale_factors: Vec<f64>,
    pub input_scale: f64,
    pub calibration_size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub percentile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output_threshold: Option<f64>,
}

impl ConversionReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

enum Activation {
    Relu,
    RateNorm { theta: f64 },
}

enum Block {
    Synaptic {
        op: SynapticOp,
        op_index: usize,
        activation: Option<(usize, Activation)>,
    },
    Pool(usize),
    Flatten,
}

fn blocks(net: &Network) -> Result<Vec<Block>> {
    let layers = net.layers();
    let mut out = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let block = match &layers[i] {
            Layer::Affine { weight, bias, .. } => Some(SynapticOp::Affine {
                weight: weight.value.clone(),
                bias: bias.value.clone(),
            }),
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                ..
            } => Some(SynapticOp::Conv2d {
                kernel: kernel.value.clone(),
                bias: bias.value.clone(),
                stride: *stride,
            }),
            Layer::AvgPool2d { window, .. } => {
                out.push(Block::Pool(*window));
                None
            }
            Layer::Flatten { .. } => {
                out.push(Block::Flatten);
                None
            }
            Layer::Relu { .. } | Layer::RateNorm(_) => {
                return Err(Error::Conversion(format!(
                    "layer {i}: activation without a preceding affine or conv layer"
                )))
            }
        };
        if let Some(op) = block {
            let activation = match layers.get(i + 1) {
                Some(Layer::Relu { .. }) => Some((i + 1, Activation::Relu)),
                Some(Layer::RateNorm(r)) => Some((
                    i + 1,
                    Activation::RateNorm {
                        theta: r.state.threshold(),
                    },
                )),
                _ => None,
            };
            if activation.is_some() {
                i += 1;
            }
            out.push(Block::Synaptic {
                op,
                op_index: i,
                activation,
            });
        }
        i += 1;
    }
    let readouts = out
        .iter()
        .enumerate()
        .filter(|(_, b)| {
            matches!(
                b,
                Block::Synaptic {
                    activation: None,
                    ..
                }
            )
        })
        .map(|(k, _)| k)
        .collect::<Vec<_>>();
    match readouts.as_slice() {
        [] => {}
        [k] if *k == out.len() - 1 => {}
        _ => {
            return Err(Error::Conversion(
                "only the final affine or conv layer may lack an activation".into(),
            ))
        }
    }
    Ok(out)
}

/// Assembles the spiking network from blocks. `rule(k, op)` returns the
/// converted op and `v_th` of the k-th synaptic layer; the threshold is
/// ignored for the readout.
fn assemble(
    net: &Network,
    blocks: Vec<Block>,
    mut rule: impl FnMut(usize, SynapticOp) -> Result<(SynapticOp, f64)>,
) -> Result<SpikingNetwork> {
    let mut stages = Vec::new();
    let mut readout_op = None;
    let mut k = 0;
    for block in blocks {
        match block {
            Block::Synaptic {
                op,
                activation: Some(_),
                ..
            } => {
                let (op, v_th) = rule(k, op)?;
                if !(v_th > MIN_THRESHOLD) || !v_th.is_finite() {
                    return Err(Error::DegenerateThreshold {
                        layer: k,
                        theta: v_th,
                    });
                }
                stages.push(SnnStage::Spiking(SpikingLayer { op, v_th }));
                k += 1;
            }
            Block::Synaptic {
                op,
                activation: None,
                ..
            } => readout_op = Some(rule(k, op)?.0),
            Block::Pool(window) => stages.push(SnnStage::AvgPool { window }),
            Block::Flatten => stages.push(SnnStage::Flatten),
        }
    }
    Ok(SpikingNetwork {
        input_shape: net.input_shape().to_vec(),
        stages,
        readout: readout_op,
        output_threshold: None,
    })
}

/// Copies weights and biases and uses each rate-norm threshold as `v_th`.
pub fn convert_direct(net: &Network) -> Result<(SpikingNetwork, ConversionReport)> {
    let blocks = blocks(net)?;
    let mut thetas = Vec::new();
    for b in &blocks {
        match b {
            Block::Synaptic {
                activation: Some((i, Activation::Relu)),
                ..
            } => {
                return Err(Error::Conversion(format!(
                    "layer {i}: direct conversion needs rate-norm activations, found relu"
                )))
            }
            Block::Synaptic {
                activation: Some((_, Activation::RateNorm { theta })),
                ..
            } => thetas.push(*theta),
            _ => {}
        }
    }
    let snn = assemble(net, blocks, |k, op| {
        Ok((op, thetas.get(k).copied().unwrap_or(1.0)))
    })?;
    let report = ConversionReport {
        scheme: "direct".into(),
        thresholds: snn.thresholds(),
        scale_factors: thetas,
        input_scale: 1.0,
        calibration_size: 0,
        percentile: None,
        output_threshold: None,
    };
    Ok((snn, report))
}

/// Weight normalization: `W * s_{l-1} / s_l`, `b / s_l`, `v_th = 1`, where
/// `s_l` is the layer statistic picked by `stat` from the calibration
/// activations and `s_0 = input_scale`.
fn convert_normalized(
    net: &Network,
    calibration: &Tensor,
    input_scale: f64,
    scheme: &str,
    percentile: Option<f64>,
    stat: impl Fn(&mut Vec<f64>) -> f64,
) -> Result<(SpikingNetwork, ConversionReport)> {
    if calibration.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Conversion("empty calibration set".into()));
    }
    if !(input_scale > 0.0) {
        return Err(Error::Conversion(format!(
            "input scale must be positive, got {input_scale}"
        )));
    }
    let mut eval = net.clone();
    eval.set_mode(Mode::Eval);
    let acts = eval.activations(calibration, None)?;
    let blocks = blocks(net)?;

    // A rate-norm layer hands `a / theta` to the next layer rather than the
    // clipped activation `a`, so its outgoing scale is `s / theta`.
    let mut factors = Vec::new();
    let mut carried = Vec::new();
    for b in &blocks {
        if let Block::Synaptic {
            op_index,
            activation,
            ..
        } = b
        {
            let (index, rescale) = match activation {
                Some((i, Activation::RateNorm { theta })) => (*i, *theta),
                Some((i, Activation::Relu)) => (*i, 1.0),
                None => (*op_index, 1.0),
            };
            let mut values: Vec<f64> = acts[index].data().iter().map(|v| v * rescale).collect();
            let s = stat(&mut values);
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Conversion(format!(
                    "layer {index}: normalization factor {s} (dead layer)"
                )));
            }
            factors.push(s);
            carried.push(s / rescale);
        }
    }

    let mut snn = assemble(net, blocks, |k, op| {
        let prev = if k == 0 { input_scale } else { carried[k - 1] };
        let s = factors[k];
        Ok((op.scaled(prev / s, 1.0 / s), 1.0))
    })?;
    snn.output_threshold = snn.readout.as_ref().map(|_| 1.0);
    let report = ConversionReport {
        scheme: scheme.into(),
        thresholds: snn.thresholds(),
        scale_factors: factors,
        input_scale,
        calibration_size: calibration.shape()[0],
        percentile,
        output_threshold: snn.output_threshold,
    };
    Ok((snn, report))
}

/// Max Norm: each layer is normalized by its largest activation on the
/// calibration set.
pub fn convert_max_norm(
    net: &Network,
    calibration: &Tensor,
    input_scale: f64,
) -> Result<(SpikingNetwork, ConversionReport)> {
    convert_normalized(net, calibration, input_scale, "max_norm", None, |v| {
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    })
}

/// Robust Norm: like Max Norm with the maximum replaced by the nearest-rank
/// `percentile` of all activations of the layer.
pub fn convert_robust_norm(
    net: &Network,
    calibration: &Tensor,
    input_scale: f64,
    percentile: f64,
) -> Result<(SpikingNetwork, ConversionReport)> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Argument(format!(
            "percentile must be in (0, 100], got {percentile}"
        )));
    }
    convert_normalized(
        net,
        calibration,
        input_scale,
        "robust_norm",
        Some(percentile),
        |v| nearest_rank(v, percentile),
    )
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)` in sorted
/// order.
pub fn nearest_rank(values: &mut [f64], percentile: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// Multiplies every threshold, including the output threshold, by `factor`.
pub fn scale_thresholds(snn: &SpikingNetwork, factor: f64) -> Result<SpikingNetwork> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Argument(format!(
            "threshold factor must be positive, got {factor}"
        )));
    }
    let mut out = snn.clone();
    for l in out.spiking_layers_mut() {
        l.v_th *= factor;
    }
    out.output_threshold = out.output_threshold.map(|v| v * factor);
    Ok(out)
}

/// Sets each rate-norm layer's running maximum to the largest pre-activation
/// it sees on `calibration`, layer by layer (later layers see the updated
/// earlier thresholds).
pub fn recompute_running_max(net: &mut Network, calibration: &Tensor) -> Result<()> {
    let indices = net.rate_norm_indices();
    for &idx in &indices {
        let acts = net.activations(calibration, None)?;
        let pre = if idx == 0 {
            calibration
        } else {
            &acts[idx - 1]
        };
        let max = pre.max().max(0.0);
        if let Layer::RateNorm(r) = &mut net.layers_mut()[idx] {
            r.state.running_max = max;
        }
    }
    Ok(())
}

/// Sets the spiking-readout threshold to the largest readout current of the
/// rate model over `calibration`.
pub fn calibrate_output_threshold(snn: &mut SpikingNetwork, calibration: &Tensor) -> Result<f64> {
    if snn.readout.is_none() {
        return Err(Error::Conversion("network has no readout layer".into()));
    }
    let n = calibration.shape()[0];
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        let out = snn.rate_model(&calibration.row(i)?)?.output;
        max = max.max(out.max());
    }
    if !(max > 0.0) {
        return Err(Error::Conversion(format!(
            "readout never positive (max {max})"
        )));
    }
    snn.output_threshold = Some(max);
    Ok(max)
}
