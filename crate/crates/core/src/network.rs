//! Feed-forward networks built from a list of [`LayerSpec`]s, with cached
//! forward passes and layer-by-layer reverse-mode gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::rate_norm::{tie_shared_p, Mode, RateNorm, RateNormState, DEFAULT_MOMENTUM};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    AvgPool2d {
        window: usize,
    },
    RateNorm {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Relu,
    Flatten,
}

fn one() -> usize {
    1
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| {
            Err(Error::Dimension(format!(
                "{self:?} on input {input:?}: {why}"
            )))
        };
        match *self {
            LayerSpec::Affine { inputs, outputs } => {
                if input != [inputs] {
                    return bad("affine expects a flat input of matching width");
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let &[c, h, w] = input else {
                    return bad("conv expects [channels, h, w]");
                };
                if c != in_channels {
                    return bad("channel count differs");
                }
                if kernel == 0 || kernel > h || kernel > w {
                    return bad("kernel does not fit");
                }
                if stride == 0 {
                    return bad("stride must be positive");
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::AvgPool2d { window } => {
                let &[c, h, w] = input else {
                    return bad("pooling expects [channels, h, w]");
                };
                if window == 0 || h % window != 0 || w % window != 0 {
                    return bad("spatial dims not divisible by window");
                }
                Ok(vec![c, h / window, w / window])
            }
            LayerSpec::RateNorm { .. } | LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Affine {
        weight: Param,
        bias: Param,
        input: Option<Tensor>,
    },
    Conv2d {
        kernel: Param,
        bias: Param,
        stride: usize,
        input: Option<Tensor>,
    },
    AvgPool2d {
        window: usize,
        input_shape: Option<Vec<usize>>,
    },
    RateNorm(RateNorm),
    Relu {
        input: Option<Tensor>,
    },
    Flatten {
        input_shape: Option<Vec<usize>>,
    },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Affine { weight, .. } => LayerSpec::Affine {
                inputs: weight.value.shape()[1],
                outputs: weight.value.shape()[0],
            },
            Layer::Conv2d { kernel, stride, .. } => LayerSpec::Conv2d {
                in_channels: kernel.value.shape()[1],
                out_channels: kernel.value.shape()[0],
                kernel: kernel.value.shape()[2],
                stride: *stride,
            },
            Layer::AvgPool2d { window, .. } => LayerSpec::AvgPool2d { window: *window },
            Layer::RateNorm(r) => LayerSpec::RateNorm {
                momentum: r.state.momentum,
            },
            Layer::Relu { .. } => LayerSpec::Relu,
            Layer::Flatten { .. } => LayerSpec::Flatten,
        }
    }

    fn infer(&self, x: &Tensor, p_override: Option<f64>) -> Result<Tensor> {
        match self {
            Layer::Affine { weight, bias, .. } => {
                ops::affine_forward(&weight.value, x, &bias.value)
            }
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                ..
            } => ops::conv2d_forward(&kernel.value, x, &bias.value, *stride),
            Layer::AvgPool2d { window, .. } => ops::avgpool2d(x, *window),
            Layer::RateNorm(r) => r.infer(x, p_override),
            Layer::Relu { .. } => Ok(ops::relu(x)),
            Layer::Flatten { .. } => flatten(x),
        }
    }

    fn forward_cached(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Affine {
                weight,
                bias,
                input,
            } => {
                let y = ops::affine_forward(&weight.value, x, &bias.value)?;
                *input = Some(x.clone());
                Ok(y)
            }
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                input,
            } => {
                let y = ops::conv2d_forward(&kernel.value, x, &bias.value, *stride)?;
                *input = Some(x.clone());
                Ok(y)
            }
            Layer::AvgPool2d {
                window,
                input_shape,
            } => {
                let y = ops::avgpool2d(x, *window)?;
                *input_shape = Some(x.shape().to_vec());
                Ok(y)
            }
            Layer::RateNorm(r) => r.forward(x),
            Layer::Relu { input } => {
                *input = Some(x.clone());
                Ok(ops::relu(x))
            }
            Layer::Flatten { input_shape } => {
                *input_shape = Some(x.shape().to_vec());
                flatten(x)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let missing = || Error::State("backward called before forward".into());
        match self {
            Layer::Affine {
                weight,
                bias,
                input,
            } => {
                let x = input.as_ref().ok_or_else(missing)?;
                let (dx, dw, db) = ops::affine_backward(&weight.value, x, grad)?;
                weight.grad.add_assign(&dw)?;
                bias.grad.add_assign(&db)?;
                Ok(dx)
            }
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                input,
            } => {
                let x = input.as_ref().ok_or_else(missing)?;
                let (dx, dk, db) = ops::conv2d_backward(&kernel.value, x, *stride, grad)?;
                kernel.grad.add_assign(&dk)?;
                bias.grad.add_assign(&db)?;
                Ok(dx)
            }
            Layer::AvgPool2d {
                window,
                input_shape,
            } => ops::avgpool2d_backward(input_shape.as_ref().ok_or_else(missing)?, *window, grad),
            Layer::RateNorm(r) => r.backward(grad).map(|g| g.d_pre),
            Layer::Relu { input } => ops::relu_backward(input.as_ref().ok_or_else(missing)?, grad),
            Layer::Flatten { input_shape } => grad
                .clone()
                .reshape(input_shape.clone().ok_or_else(missing)?),
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Layer::Affine { input, .. } | Layer::Conv2d { input, .. } | Layer::Relu { input } => {
                *input = None
            }
            Layer::AvgPool2d { input_shape, .. } | Layer::Flatten { input_shape } => {
                *input_shape = None
            }
            Layer::RateNorm(r) => r.clear_cache(),
        }
    }
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    let batch = x.shape()[0];
    let rest = x.len() / batch;
    x.clone().reshape(vec![batch, rest])
}

#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds a network with Glorot-uniform weights, zero biases and fresh
    /// rate-norm states.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let next = spec.output_shape(&shape)?;
            let layer = match *spec {
                LayerSpec::Affine { inputs, outputs } => Layer::Affine {
                    weight: Param::new(glorot(&[outputs, inputs], inputs, outputs, &mut rng)),
                    bias: Param::new(Tensor::zeros(&[outputs])),
                    input: None,
                },
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let area = kernel * kernel;
                    Layer::Conv2d {
                        kernel: Param::new(glorot(
                            &[out_channels, in_channels, kernel, kernel],
                            in_channels * area,
                            out_channels * area,
                            &mut rng,
                        )),
                        bias: Param::new(Tensor::zeros(&[out_channels])),
                        stride,
                        input: None,
                    }
                }
                LayerSpec::AvgPool2d { window } => Layer::AvgPool2d {
                    window,
                    input_shape: None,
                },
                LayerSpec::RateNorm { momentum } => {
                    Layer::RateNorm(RateNorm::new(RateNormState::new(momentum)?))
                }
                LayerSpec::Relu => Layer::Relu { input: None },
                LayerSpec::Flatten => Layer::Flatten { input_shape: None },
            };
            layers.push(layer);
            shape = next;
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    /// Assembles a network from existing layers, validating the shape chain.
    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.spec().output_shape(&shape)?;
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .iter()
            .try_fold(self.input_shape.clone(), |s, l| l.spec().output_shape(&s))
            .expect("shape chain validated at construction")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() < 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "network expects [batch, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference without side effects. Rate-norm layers use their current
    /// `p`, or `p_override` when given.
    pub fn forward_with_p(&self, x: &Tensor, p_override: Option<f64>) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h, p_override).map_err(|e| at_layer(e, i))?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_p(x, None)
    }

    /// Output of every layer, in order, without side effects.
    pub fn activations(&self, x: &Tensor, p_override: Option<f64>) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let h = outs.last().unwrap_or(x);
            let y = layer.infer(h, p_override).map_err(|e| at_layer(e, i))?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// Simulated firing rates of every rate-norm layer.
    pub fn rate_norm_outputs(&self, x: &Tensor, p_override: Option<f64>) -> Result<Vec<Tensor>> {
        let acts = self.activations(x, p_override)?;
        Ok(self
            .rate_norm_indices()
            .into_iter()
            .map(|i| acts[i].clone())
            .collect())
    }

    /// Forward pass that caches inputs for [`Network::backward`]. Rate-norm
    /// layers in train mode update their running maximum. Returns the output
    /// of every layer.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let h = outs.last().unwrap_or(x);
            let y = layer.forward_cached(h).map_err(|e| at_layer(e, i))?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// Backpropagates `grad_out` through the cached pass, accumulating into
    /// parameter gradients. `injections` add extra gradient at the output of
    /// the given layer indices (used for per-layer penalties). Returns the
    /// gradient w.r.t. the network input.
    pub fn backward(
        &mut self,
        grad_out: &Tensor,
        injections: &[(usize, Tensor)],
    ) -> Result<Tensor> {
        let mut grad = grad_out.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            for (_, extra) in injections.iter().filter(|(j, _)| *j == i) {
                grad.add_assign(extra).map_err(|e| at_layer(e, i))?;
            }
            grad = layer.backward(&grad).map_err(|e| at_layer(e, i))?;
        }
        Ok(grad)
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
        for r in self.rate_norms_mut() {
            r.grad_p_raw = 0.0;
        }
    }

    /// Weights and biases with stable names like `layer0.weight`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Affine { weight, bias, .. } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                Layer::Conv2d { kernel, bias, .. } => {
                    out.push((format!("layer{i}.kernel"), kernel));
                    out.push((format!("layer{i}.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Affine { weight, bias, .. } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                Layer::Conv2d { kernel, bias, .. } => {
                    out.push((format!("layer{i}.kernel"), kernel));
                    out.push((format!("layer{i}.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn rate_norm_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::RateNorm(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn rate_norms(&self) -> Vec<&RateNorm> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::RateNorm(r) => Some(r),
                _ => None,
            })
            .collect()
    }

    pub fn rate_norms_mut(&mut self) -> Vec<&mut RateNorm> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::RateNorm(r) => Some(r),
                _ => None,
            })
            .collect()
    }

    /// Current `theta` of every rate-norm layer.
    pub fn thresholds(&self) -> Vec<f64> {
        self.rate_norms()
            .iter()
            .map(|r| r.state.threshold())
            .collect()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for r in self.rate_norms_mut() {
            r.state.mode = mode;
        }
    }

    /// Ties every rate-norm layer's `p` into one shared group.
    pub fn tie_all_p(&mut self, group: usize) -> Result<()> {
        let mut states: Vec<&mut RateNormState> = self
            .rate_norms_mut()
            .into_iter()
            .map(|r| &mut r.state)
            .collect();
        tie_shared_p(&mut states, group)
    }

    pub fn unlock_p(&mut self, p_raw: f64) {
        for r in self.rate_norms_mut() {
            r.state.unlock_p(p_raw);
        }
    }

    /// Accumulated `d loss / d p_raw` per trainable group. Layers in a shared
    /// group contribute to one entry; untied layers get their own.
    pub fn p_raw_gradients(&self) -> Vec<(PGroup, f64)> {
        let mut groups: BTreeMap<PGroup, f64> = BTreeMap::new();
        for (i, r) in self.rate_norms().iter().enumerate() {
            if r.state.p_locked {
                continue;
            }
            let key = match r.state.shared_group {
                Some(g) => PGroup::Shared(g),
                None => PGroup::Layer(i),
            };
            *groups.entry(key).or_insert(0.0) += r.grad_p_raw;
        }
        groups.into_iter().collect()
    }

    /// Plain gradient descent on every trainable `p_raw`; tied layers move
    /// together by the summed gradient of the group.
    pub fn threshold_step(&mut self, lr: f64) -> Result<()> {
        for (group, grad) in self.p_raw_gradients() {
            if !grad.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for p of {group:?}"
                )));
            }
            for (i, r) in self.rate_norms_mut().into_iter().enumerate() {
                if group.contains(i, &r.state) {
                    r.state.p_raw -= lr * grad;
                }
            }
        }
        Ok(())
    }

    /// Class predictions for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(x)?;
        let classes = *out.shape().last().expect("non-empty output");
        Ok(out
            .data()
            .chunks_exact(classes)
            .map(crate::tensor::argmax)
            .collect())
    }
}

/// Identifies a set of rate-norm layers sharing one trainable `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PGroup {
    Shared(usize),
    /// Position among the network's rate-norm layers.
    Layer(usize),
}

impl PGroup {
    fn contains(&self, rnl_index: usize, state: &RateNormState) -> bool {
        if state.p_locked {
            return false;
        }
        match *self {
            PGroup::Shared(g) => state.shared_group == Some(g),
            PGroup::Layer(i) => state.shared_group.is_none() && i == rnl_index,
        }
    }
}

fn at_layer(err: Error, layer: usize) -> Error {
    match err {
        Error::DegenerateThreshold { theta, .. } => Error::DegenerateThreshold { layer, theta },
        Error::Dimension(msg) => Error::Dimension(format!("layer {layer}: {msg}")),
        other => other,
    }
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data built together")
}

/// Compares analytic gradients with central differences.
///
/// `loss` maps the network output to `(loss, d loss / d output)`. All weights,
/// biases and trainable `p_raw` groups are checked, at most `max_per_param`
/// evenly spaced entries per tensor. Rate-norm layers run in eval mode for
/// the duration so the running maxima stay fixed. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    net: &mut Network,
    x: &Tensor,
    eps: f64,
    max_per_param: usize,
    loss: F,
) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let modes: Vec<Mode> = net.rate_norms().iter().map(|r| r.state.mode).collect();
    net.set_mode(Mode::Eval);

    net.zero_grad();
    let outs = net.forward_train(x)?;
    let (_, grad) = loss(outs.last().expect("network has layers"))?;
    net.backward(&grad, &[])?;

    let eval = |net: &Network| -> Result<f64> { Ok(loss(&net.forward(x)?)?.0) };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut worst = 0.0f64;

    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        let len = param_by_name(net, name).value.len();
        let step = (len / max_per_param.max(1)).max(1);
        for idx in (0..len).step_by(step) {
            let analytic = param_by_name(net, name).grad.data()[idx];
            let orig = param_by_name(net, name).value.data()[idx];
            param_by_name(net, name).value.data_mut()[idx] = orig + eps;
            let plus = eval(net)?;
            param_by_name(net, name).value.data_mut()[idx] = orig - eps;
            let minus = eval(net)?;
            param_by_name(net, name).value.data_mut()[idx] = orig;
            worst = worst.max(rel(analytic, (plus - minus) / (2.0 * eps)));
        }
    }

    for (group, analytic) in net.p_raw_gradients() {
        let shift = |net: &mut Network, delta: f64| {
            for (i, r) in net.rate_norms_mut().into_iter().enumerate() {
                if group.contains(i, &r.state) {
                    r.state.p_raw += delta;
                }
            }
        };
        shift(net, eps);
        let plus = eval(net)?;
        shift(net, -2.0 * eps);
        let minus = eval(net)?;
        shift(net, eps);
        worst = worst.max(rel(analytic, (plus - minus) / (2.0 * eps)));
    }

    for (r, mode) in net.rate_norms_mut().into_iter().zip(modes) {
        r.state.mode = mode;
    }
    net.clear_caches();
    Ok(worst)
}

fn param_by_name<'a>(net: &'a mut Network, name: &str) -> &'a mut Param {
    net.params_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| p)
        .expect("name taken from the same network")
}
