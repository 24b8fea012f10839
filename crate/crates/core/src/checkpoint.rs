//! JSON checkpoints for ANNs and SNNs. Tensors are stored as nested lists
//! and every float round-trips exactly.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::network::{Layer, LayerSpec, Network, Param};
use crate::rate_norm::{RateNorm, RateNormState};
use crate::snn::{SnnStage, SpikingLayer, SpikingNetwork, SynapticOp};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Nested JSON arrays mirroring the tensor's shape.
pub fn to_nested(t: &Tensor) -> Value {
    fn build(shape: &[usize], data: &[f64]) -> Value {
        match shape {
            [] => Value::from(data[0]),
            [n] => Value::Array(data[..*n].iter().map(|&v| Value::from(v)).collect()),
            [n, rest @ ..] => {
                let stride: usize = rest.iter().product();
                Value::Array((0..*n).map(|i| build(rest, &data[i * stride..])).collect())
            }
        }
    }
    build(t.shape(), t.data())
}

pub fn from_nested(v: &Value) -> Result<Tensor> {
    let mut shape = Vec::new();
    let mut cur = v;
    while let Value::Array(items) = cur {
        shape.push(items.len());
        match items.first() {
            Some(first) => cur = first,
            None => return Err(Error::Format("empty array in tensor".into())),
        }
    }
    let mut data = Vec::with_capacity(shape.iter().product());
    fn walk(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<()> {
        match (v, shape) {
            (Value::Number(n), []) => {
                out.push(
                    n.as_f64()
                        .ok_or_else(|| Error::Format(format!("bad number {n}")))?,
                );
                Ok(())
            }
            (Value::Array(items), [n, rest @ ..]) if items.len() == *n => {
                items.iter().try_for_each(|i| walk(i, rest, out))
            }
            _ => Err(Error::Format("ragged or non-numeric tensor".into())),
        }
    }
    walk(v, &shape, &mut data)?;
    if shape.is_empty() {
        return Ok(Tensor::scalar(data[0]));
    }
    Tensor::new(shape, data)
}

mod nested {
    use super::*;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_nested(t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Tensor, D::Error> {
        let v = Value::deserialize(d)?;
        from_nested(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct Nested(#[serde(with = "nested")] Tensor);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnLayer {
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<Nested>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Nested>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<RateNormState>,
}

#[derive(Serialize, Deserialize)]
struct AnnFile {
    format_version: u32,
    kind: String,
    input_shape: Vec<usize>,
    layers: Vec<AnnLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum OpFile {
    Affine {
        weight: Nested,
        bias: Nested,
    },
    Conv2d {
        kernel: Nested,
        bias: Nested,
        stride: usize,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum StageFile {
    Spiking { op: OpFile, v_th: f64 },
    AvgPool { window: usize },
    Flatten,
}

#[derive(Serialize, Deserialize)]
struct SnnFile {
    format_version: u32,
    kind: String,
    input_shape: Vec<usize>,
    stages: Vec<StageFile>,
    readout: Option<OpFile>,
    output_threshold: Option<f64>,
}

fn check_header(version: u32, kind: &str, expected: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format_version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    if kind != expected {
        return Err(Error::Format(format!(
            "expected a {expected} checkpoint, found {kind}"
        )));
    }
    Ok(())
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("bad checkpoint: {e}")))
}

pub fn network_to_json(net: &Network) -> Result<String> {
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            let (weight, bias, state) = match l {
                Layer::Affine { weight, bias, .. } => {
                    (Some(weight.value.clone()), Some(bias.value.clone()), None)
                }
                Layer::Conv2d { kernel, bias, .. } => {
                    (Some(kernel.value.clone()), Some(bias.value.clone()), None)
                }
                Layer::RateNorm(r) => (None, None, Some(r.state.clone())),
                _ => (None, None, None),
            };
            AnnLayer {
                spec: l.spec(),
                weight: weight.map(Nested),
                bias: bias.map(Nested),
                state,
            }
        })
        .collect();
    let file = AnnFile {
        format_version: FORMAT_VERSION,
        kind: "ann".into(),
        input_shape: net.input_shape().to_vec(),
        layers,
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn network_from_json(text: &str) -> Result<Network> {
    let file: AnnFile = parse(text)?;
    check_header(file.format_version, &file.kind, "ann")?;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, l) in file.layers.into_iter().enumerate() {
        let missing = |what: &str| Error::Format(format!("layer {i}: missing {what}"));
        let layer = match l.spec {
            LayerSpec::Affine { inputs, outputs } => {
                let w = l.weight.ok_or_else(|| missing("weight"))?.0;
                let b = l.bias.ok_or_else(|| missing("bias"))?.0;
                if w.shape() != [outputs, inputs] || b.shape() != [outputs] {
                    return Err(Error::Format(format!(
                        "layer {i}: parameter shapes disagree with spec"
                    )));
                }
                Layer::Affine {
                    weight: Param::new(w),
                    bias: Param::new(b),
                    input: None,
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let k = l.weight.ok_or_else(|| missing("weight"))?.0;
                let b = l.bias.ok_or_else(|| missing("bias"))?.0;
                if k.shape() != [out_channels, in_channels, kernel, kernel]
                    || b.shape() != [out_channels]
                {
                    return Err(Error::Format(format!(
                        "layer {i}: parameter shapes disagree with spec"
                    )));
                }
                Layer::Conv2d {
                    kernel: Param::new(k),
                    bias: Param::new(b),
                    stride,
                    input: None,
                }
            }
            LayerSpec::AvgPool2d { window } => Layer::AvgPool2d {
                window,
                input_shape: None,
            },
            LayerSpec::RateNorm { .. } => {
                Layer::RateNorm(RateNorm::new(l.state.ok_or_else(|| missing("state"))?))
            }
            LayerSpec::Relu => Layer::Relu { input: None },
            LayerSpec::Flatten => Layer::Flatten { input_shape: None },
        };
        layers.push(layer);
    }
    Network::from_layers(&file.input_shape, layers).map_err(|e| Error::Format(e.to_string()))
}

fn op_to_file(op: &SynapticOp) -> OpFile {
    match op {
        SynapticOp::Affine { weight, bias } => OpFile::Affine {
            weight: Nested(weight.clone()),
            bias: Nested(bias.clone()),
        },
        SynapticOp::Conv2d {
            kernel,
            bias,
            stride,
        } => OpFile::Conv2d {
            kernel: Nested(kernel.clone()),
            bias: Nested(bias.clone()),
            stride: *stride,
        },
    }
}

fn op_from_file(op: OpFile) -> SynapticOp {
    match op {
        OpFile::Affine { weight, bias } => SynapticOp::Affine {
            weight: weight.0,
            bias: bias.0,
        },
        OpFile::Conv2d {
            kernel,
            bias,
            stride,
        } => SynapticOp::Conv2d {
            kernel: kernel.0,
            bias: bias.0,
            stride,
        },
    }
}

pub fn snn_to_json(snn: &SpikingNetwork) -> Result<String> {
    let stages = snn
        .stages
        .iter()
        .map(|s| match s {
            SnnStage::Spiking(l) => StageFile::Spiking {
                op: op_to_file(&l.op),
                v_th: l.v_th,
            },
            SnnStage::AvgPool { window } => StageFile::AvgPool { window: *window },
            SnnStage::Flatten => StageFile::Flatten,
        })
        .collect();
    let file = SnnFile {
        format_version: FORMAT_VERSION,
        kind: "snn".into(),
        input_shape: snn.input_shape.clone(),
        stages,
        readout: snn.readout.as_ref().map(op_to_file),
        output_threshold: snn.output_threshold,
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn snn_from_json(text: &str) -> Result<SpikingNetwork> {
    let file: SnnFile = parse(text)?;
    check_header(file.format_version, &file.kind, "snn")?;
    let stages = file
        .stages
        .into_iter()
        .map(|s| match s {
            StageFile::Spiking { op, v_th } => SnnStage::Spiking(SpikingLayer {
                op: op_from_file(op),
                v_th,
            }),
            StageFile::AvgPool { window } => SnnStage::AvgPool { window },
            StageFile::Flatten => SnnStage::Flatten,
        })
        .collect();
    let snn = SpikingNetwork {
        input_shape: file.input_shape,
        stages,
        readout: file.readout.map(op_from_file),
        output_threshold: file.output_threshold,
    };
    if let Some(v) = snn.thresholds().into_iter().find(|v| !(*v > 0.0)) {
        return Err(Error::Format(format!("non-positive threshold {v}")));
    }
    Ok(snn)
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, network_to_json(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: &Path) -> Result<Network> {
    network_from_json(&read(path)?)
}

pub fn save_snn(snn: &SpikingNetwork, path: &Path) -> Result<()> {
    std::fs::write(path, snn_to_json(snn)?).map_err(|e| Error::io(path, e))
}

pub fn load_snn(path: &Path) -> Result<SpikingNetwork> {
    snn_from_json(&read(path)?)
}
