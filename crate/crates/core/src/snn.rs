//! Clock-driven simulation of reset-by-subtraction integrate-and-fire networks.
//!
//! Each step every spiking layer integrates `W s + b` into its membrane
//! potential, emits at most one spike per neuron when the potential reaches
//! the threshold, and subtracts the threshold from neurons that fired. The
//! output layer is by default a non-spiking integrator whose accumulated
//! potential divided by `t` is the readout.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{argmax, Tensor};

/// Relative slack on the firing condition. A potential that reaches the
/// threshold only up to accumulated rounding (e.g. ten additions of 0.1)
/// still fires, so constant inputs follow `floor(x t)` exactly.
pub const FIRING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum SynapticOp {
    Affine {
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
    },
}

impl SynapticOp {
    /// Applies the op to one sample (no batch axis).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            SynapticOp::Affine { weight, bias } => ops::affine_forward(weight, x, bias),
            SynapticOp::Conv2d {
                kernel,
                bias,
                stride,
            } => {
                let mut shape = vec![1];
                shape.extend_from_slice(x.shape());
                let y = ops::conv2d_forward(kernel, &x.clone().reshape(shape)?, bias, *stride)?;
                let out = y.shape()[1..].to_vec();
                y.reshape(out)
            }
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            SynapticOp::Affine { bias, .. } | SynapticOp::Conv2d { bias, .. } => bias,
        }
    }

    pub fn weight(&self) -> &Tensor {
        match self {
            SynapticOp::Affine { weight, .. } => weight,
            SynapticOp::Conv2d { kernel, .. } => kernel,
        }
    }

    /// Same op with weights and bias multiplied by separate factors.
    pub fn scaled(&self, weight_factor: f64, bias_factor: f64) -> SynapticOp {
        match self {
            SynapticOp::Affine { weight, bias } => SynapticOp::Affine {
                weight: weight.scale(weight_factor),
                bias: bias.scale(bias_factor),
            },
            SynapticOp::Conv2d {
                kernel,
                bias,
                stride,
            } => SynapticOp::Conv2d {
                kernel: kernel.scale(weight_factor),
                bias: bias.scale(bias_factor),
                stride: *stride,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikingLayer {
    pub op: SynapticOp,
    pub v_th: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SnnStage {
    Spiking(SpikingLayer),
    /// Fixed averaging of incoming spikes; passes rates through linearly.
    AvgPool {
        window: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikingNetwork {
    pub input_shape: Vec<usize>,
    pub stages: Vec<SnnStage>,
    /// Non-spiking output integrator. Without one, the last spiking layer's
    /// firing rates are the output.
    pub readout: Option<SynapticOp>,
    /// Threshold used when the readout is run as a spiking layer.
    pub output_threshold: Option<f64>,
}

impl SpikingNetwork {
    pub fn spiking_layers(&self) -> impl Iterator<Item = &SpikingLayer> {
        self.stages.iter().filter_map(|s| match s {
            SnnStage::Spiking(l) => Some(l),
            _ => None,
        })
    }

    pub fn spiking_layers_mut(&mut self) -> impl Iterator<Item = &mut SpikingLayer> {
        self.stages.iter_mut().filter_map(|s| match s {
            SnnStage::Spiking(l) => Some(l),
            _ => None,
        })
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.spiking_layers().map(|l| l.v_th).collect()
    }

    /// The `t -> infinity` firing rates: each spiking layer computes
    /// `clip((W r + b) / v_th, 0, 1)` of the previous layer's rates.
    pub fn rate_model(&self, x: &Tensor) -> Result<RateModel> {
        let mut h = x.clone();
        let mut layer_rates = Vec::new();
        for stage in &self.stages {
            h = match stage {
                SnnStage::Spiking(l) => {
                    let r = l.op.apply(&h)?.map(|v| (v / l.v_th).clamp(0.0, 1.0));
                    layer_rates.push(r.clone());
                    r
                }
                SnnStage::AvgPool { window } => pool_sample(&h, *window)?,
                SnnStage::Flatten => {
                    let n = h.len();
                    h.reshape(vec![n])?
                }
            };
        }
        let output = match &self.readout {
            Some(op) => op.apply(&h)?,
            None => h,
        };
        Ok(RateModel {
            layer_rates,
            output,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RateModel {
    pub layer_rates: Vec<Tensor>,
    pub output: Tensor,
}

fn pool_sample(h: &Tensor, window: usize) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(h.shape());
    let y = ops::avgpool2d(&h.clone().reshape(shape)?, window)?;
    let out = y.shape()[1..].to_vec();
    y.reshape(out)
}

/// Membrane state of one spiking layer during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingLayerState {
    pub v: Vec<f64>,
    pub cumulative_spikes: Vec<u32>,
}

impl SpikingLayerState {
    pub fn new(size: usize) -> Self {
        Self {
            v: vec![0.0; size],
            cumulative_spikes: vec![0; size],
        }
    }
}

/// Integrates `current` into the state and fires. Returns the indices of the
/// neurons that spiked.
pub fn integrate(
    state: &mut SpikingLayerState,
    current: &[f64],
    v_th: f64,
    layer: usize,
    step: usize,
) -> Result<Vec<u32>> {
    if current.len() != state.v.len() {
        return Err(Error::Simulation {
            layer,
            step,
            reason: format!(
                "current of size {} for {} neurons",
                current.len(),
                state.v.len()
            ),
        });
    }
    let fire_at = v_th * (1.0 - FIRING_TOLERANCE);
    let mut fired = Vec::new();
    for (i, (v, &c)) in state.v.iter_mut().zip(current).enumerate() {
        let m = *v + c;
        if !m.is_finite() {
            return Err(Error::Simulation {
                layer,
                step,
                reason: format!("non-finite membrane potential at neuron {i}"),
            });
        }
        if m >= fire_at {
            *v = m - v_th;
            state.cumulative_spikes[i] += 1;
            fired.push(i as u32);
        } else {
            *v = m;
        }
    }
    Ok(fired)
}

/// One step of a spiking layer: `m = v + W s + b`, `s = U(m - v_th)`,
/// `v = m - v_th s`. Returns the binary spike tensor.
pub fn if_step(
    layer: &SpikingLayer,
    state: &mut SpikingLayerState,
    input: &Tensor,
    layer_index: usize,
    step: usize,
) -> Result<Tensor> {
    let current = layer.op.apply(input)?;
    let fired = integrate(state, current.data(), layer.v_th, layer_index, step)?;
    let mut spikes = Tensor::zeros(current.shape());
    for i in fired {
        spikes.data_mut()[i as usize] = 1.0;
    }
    Ok(spikes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    #[default]
    Constant,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Accumulated output potential divided by `t`.
    #[default]
    Potential,
    /// Spike count of a spiking output layer divided by `t`.
    SpikeRate,
}

/// Constant coding: the input itself is injected as current every step.
pub fn encode_constant(x: &Tensor) -> Tensor {
    x.clone()
}

/// Poisson coding: one Bernoulli(x) spike per element for this step.
pub fn encode_poisson(x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!(
            "poisson coding needs intensities in [0, 1], got {v}"
        )));
    }
    let data = x
        .data()
        .iter()
        .map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub steps: usize,
    pub coding: Coding,
    pub readout: Readout,
    /// Keep per-step spike indices (needed for firing rates and K curves).
    pub record_spikes: bool,
    /// Keep the readout vector of every step.
    pub record_outputs: bool,
    pub seed: u64,
}

impl RunOptions {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            coding: Coding::Constant,
            readout: Readout::Potential,
            record_spikes: false,
            record_outputs: false,
            seed: 0,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_spikes = true;
        self.record_outputs = true;
        self
    }
}

/// Everything recorded for one input over `steps` time-steps. Index `t - 1`
/// of each series holds time-step `t`.
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub steps: usize,
    /// Neurons per recorded spiking layer (including a spiking readout).
    pub layer_sizes: Vec<usize>,
    /// Spikes emitted by each layer at each step.
    pub spike_counts: Vec<Vec<u32>>,
    /// Indices of the neurons that fired, per layer and step.
    pub spike_events: Option<Vec<Vec<Vec<u32>>>>,
    pub outputs: Option<Vec<Vec<f64>>>,
    pub predictions: Vec<usize>,
    /// Cumulative spikes over all layers through each step.
    pub total_spikes: Vec<u64>,
}

impl SimulationTrace {
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    /// Total spikes emitted during step `t` (1-based).
    pub fn spikes_at_step(&self, t: usize) -> u64 {
        self.spike_counts.iter().map(|c| u64::from(c[t - 1])).sum()
    }

    /// Cumulative spike counts of `layer` divided by `t`.
    pub fn firing_rate(&self, layer: usize, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.steps {
            return Err(Error::Argument(format!(
                "time-step {t} outside 1..={}",
                self.steps
            )));
        }
        let events = self.events(layer)?;
        let mut counts = vec![0u32; self.layer_sizes[layer]];
        for step in &events[..t] {
            for &i in step {
                counts[i as usize] += 1;
            }
        }
        Ok(Tensor::vector(
            counts
                .into_iter()
                .map(|c| f64::from(c) / t as f64)
                .collect(),
        ))
    }

    /// Calls `f(t, rates)` for every `t = 1..=steps` in one pass.
    pub fn for_each_rate(
        &self,
        layer: usize,
        mut f: impl FnMut(usize, &Tensor) -> Result<()>,
    ) -> Result<()> {
        let events = self.events(layer)?;
        let mut counts = vec![0u32; self.layer_sizes[layer]];
        for (k, step) in events.iter().enumerate() {
            for &i in step {
                counts[i as usize] += 1;
            }
            let t = k + 1;
            let rates = Tensor::vector(counts.iter().map(|&c| f64::from(c) / t as f64).collect());
            f(t, &rates)?;
        }
        Ok(())
    }

    fn events(&self, layer: usize) -> Result<&Vec<Vec<u32>>> {
        let events = self
            .spike_events
            .as_ref()
            .ok_or_else(|| Error::Argument("trace was recorded without spike events".into()))?;
        events
            .get(layer)
            .ok_or_else(|| Error::Argument(format!("trace has no layer {layer}")))
    }

    /// CSV with one row per step and layer: `t,layer,spikes,mean_rate`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "layer", "spikes", "mean_rate"])?;
        for (layer, counts) in self.spike_counts.iter().enumerate() {
            let mut cumulative = 0u64;
            for (k, &c) in counts.iter().enumerate() {
                cumulative += u64::from(c);
                let t = k + 1;
                let mean = cumulative as f64 / (t * self.layer_sizes[layer]) as f64;
                w.write_record(&[
                    t.to_string(),
                    layer.to_string(),
                    c.to_string(),
                    mean.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

enum Signal {
    Dense(Tensor),
    /// Binary tensor plus the indices of its ones.
    Spikes(Tensor, Vec<u32>),
}

impl Signal {
    fn tensor(&self) -> &Tensor {
        match self {
            Signal::Dense(t) | Signal::Spikes(t, _) => t,
        }
    }
}

/// Ops with transposed affine weights for event-driven accumulation.
struct Compiled<'a> {
    op: &'a SynapticOp,
    transposed: Option<Vec<f64>>,
}

impl<'a> Compiled<'a> {
    fn new(op: &'a SynapticOp) -> Self {
        let transposed = match op {
            SynapticOp::Affine { weight, .. } => {
                let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.data();
                let mut t = vec![0.0; w.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        t[c * rows + r] = w[r * cols + c];
                    }
                }
                Some(t)
            }
            SynapticOp::Conv2d { .. } => None,
        };
        Self { op, transposed }
    }

    fn current(&self, input: &Signal) -> Result<Tensor> {
        match (input, &self.transposed, self.op) {
            (Signal::Spikes(x, active), Some(wt), SynapticOp::Affine { weight, bias }) => {
                if x.shape() != [weight.shape()[1]] {
                    return self.op.apply(x);
                }
                let rows = weight.shape()[0];
                let mut out = bias.data().to_vec();
                for &j in active {
                    let col = &wt[j as usize * rows..(j as usize + 1) * rows];
                    for (o, w) in out.iter_mut().zip(col) {
                        *o += w;
                    }
                }
                Ok(Tensor::vector(out))
            }
            _ => self.op.apply(input.tensor()),
        }
    }
}

struct CompiledNetwork<'a> {
    snn: &'a SpikingNetwork,
    stages: Vec<Option<Compiled<'a>>>,
    readout: Option<Compiled<'a>>,
}

impl<'a> CompiledNetwork<'a> {
    fn new(snn: &'a SpikingNetwork) -> Self {
        let stages = snn
            .stages
            .iter()
            .map(|s| match s {
                SnnStage::Spiking(l) => Some(Compiled::new(&l.op)),
                _ => None,
            })
            .collect();
        Self {
            snn,
            stages,
            readout: snn.readout.as_ref().map(Compiled::new),
        }
    }

    fn run(&self, input: &Tensor, opts: &RunOptions, sample: u64) -> Result<SimulationTrace> {
        if opts.steps == 0 {
            return Err(Error::Argument("simulation needs at least one step".into()));
        }
        if input.shape() != self.snn.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "network expects input {:?}, got {:?}",
                self.snn.input_shape,
                input.shape()
            )));
        }
        let spiking_readout = opts.readout == Readout::SpikeRate && self.readout.is_some();
        let output_threshold = if spiking_readout {
            Some(self.snn.output_threshold.ok_or_else(|| {
                Error::Argument("spike-rate readout needs an output threshold".into())
            })?)
        } else {
            None
        };

        // Shapes and the constant-coding shortcut: with constant input, the
        // current into the first spiking layer never changes.
        let first_spiking = self
            .snn
            .stages
            .iter()
            .position(|s| matches!(s, SnnStage::Spiking(_)));
        let mut h = input.clone();
        let mut layer_sizes = Vec::new();
        let mut constant_current = None;
        for (k, stage) in self.snn.stages.iter().enumerate() {
            h = match stage {
                SnnStage::Spiking(l) => {
                    let c = l.op.apply(&h)?;
                    if opts.coding == Coding::Constant && Some(k) == first_spiking {
                        constant_current = Some(c.clone());
                    }
                    layer_sizes.push(c.len());
                    c
                }
                SnnStage::AvgPool { window } => pool_sample(&h, *window)?,
                SnnStage::Flatten => {
                    let n = h.len();
                    h.reshape(vec![n])?
                }
            };
        }
        let num_hidden = layer_sizes.len();
        let readout_size = match &self.snn.readout {
            Some(op) => op.apply(&h)?.len(),
            None => h.len(),
        };
        if spiking_readout {
            layer_sizes.push(readout_size);
        }

        let mut states: Vec<SpikingLayerState> = layer_sizes
            .iter()
            .map(|&n| SpikingLayerState::new(n))
            .collect();
        let mut spike_counts = vec![Vec::with_capacity(opts.steps); layer_sizes.len()];
        let mut spike_events = opts
            .record_spikes
            .then(|| vec![Vec::with_capacity(opts.steps); layer_sizes.len()]);
        let mut outputs = opts.record_outputs.then(|| Vec::with_capacity(opts.steps));
        let mut predictions = Vec::with_capacity(opts.steps);
        let mut total_spikes = Vec::with_capacity(opts.steps);
        let mut total = 0u64;
        let mut potential = vec![0.0; readout_size];

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(sample);

        for t in 1..=opts.steps {
            let mut signal = match opts.coding {
                Coding::Constant => Signal::Dense(encode_constant(input)),
                Coding::Poisson => {
                    let s = encode_poisson(input, &mut rng)?;
                    let active = active_indices(&s);
                    Signal::Spikes(s, active)
                }
            };
            let mut layer = 0;
            for (k, stage) in self.snn.stages.iter().enumerate() {
                signal = match stage {
                    SnnStage::Spiking(l) => {
                        let current = match (&constant_current, Some(k) == first_spiking) {
                            (Some(c), true) => c.clone(),
                            _ => self.stages[k]
                                .as_ref()
                                .expect("compiled")
                                .current(&signal)?,
                        };
                        let fired =
                            integrate(&mut states[layer], current.data(), l.v_th, layer, t)?;
                        let s = spikes_from(current.shape(), &fired);
                        self.record(
                            layer,
                            &fired,
                            &mut spike_counts,
                            &mut spike_events,
                            &mut total,
                        );
                        layer += 1;
                        Signal::Spikes(s, fired)
                    }
                    SnnStage::AvgPool { window } => {
                        Signal::Dense(pool_sample(signal.tensor(), *window)?)
                    }
                    SnnStage::Flatten => {
                        let n = signal.tensor().len();
                        match signal {
                            Signal::Spikes(s, a) => Signal::Spikes(s.reshape(vec![n])?, a),
                            Signal::Dense(d) => Signal::Dense(d.reshape(vec![n])?),
                        }
                    }
                };
            }

            let out: Vec<f64> = match (&self.readout, output_threshold) {
                (Some(op), Some(v_th)) => {
                    let current = op.current(&signal)?;
                    let fired =
                        integrate(&mut states[num_hidden], current.data(), v_th, num_hidden, t)?;
                    self.record(
                        num_hidden,
                        &fired,
                        &mut spike_counts,
                        &mut spike_events,
                        &mut total,
                    );
                    rates_of(&states[num_hidden].cumulative_spikes, t)
                }
                (Some(op), None) => {
                    let current = op.current(&signal)?;
                    for (p, c) in potential.iter_mut().zip(current.data()) {
                        *p += c;
                    }
                    potential.iter().map(|p| p / t as f64).collect()
                }
                (None, _) => match states.last() {
                    Some(last) => rates_of(&last.cumulative_spikes, t),
                    None => signal.tensor().data().to_vec(),
                },
            };
            predictions.push(argmax(&out));
            total_spikes.push(total);
            if let Some(o) = outputs.as_mut() {
                o.push(out);
            }
        }

        Ok(SimulationTrace {
            steps: opts.steps,
            layer_sizes,
            spike_counts,
            spike_events,
            outputs,
            predictions,
            total_spikes,
        })
    }

    fn record(
        &self,
        layer: usize,
        fired: &[u32],
        counts: &mut [Vec<u32>],
        events: &mut Option<Vec<Vec<Vec<u32>>>>,
        total: &mut u64,
    ) {
        counts[layer].push(fired.len() as u32);
        *total += fired.len() as u64;
        if let Some(e) = events.as_mut() {
            e[layer].push(fired.to_vec());
        }
    }
}

fn rates_of(counts: &[u32], t: usize) -> Vec<f64> {
    counts.iter().map(|&c| f64::from(c) / t as f64).collect()
}

fn spikes_from(shape: &[usize], fired: &[u32]) -> Tensor {
    let mut s = Tensor::zeros(shape);
    for &i in fired {
        s.data_mut()[i as usize] = 1.0;
    }
    s
}

fn active_indices(s: &Tensor) -> Vec<u32> {
    s.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Simulates one input sample (no batch axis) from zero membrane potential.
pub fn run(snn: &SpikingNetwork, input: &Tensor, opts: &RunOptions) -> Result<SimulationTrace> {
    CompiledNetwork::new(snn).run(input, opts, 0)
}

/// Accuracy and activity over time for a labelled evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub steps: usize,
    pub n_samples: usize,
    /// Fraction of samples classified correctly at each step.
    pub accuracy: Vec<f64>,
    /// Spikes emitted at each step, summed over samples.
    pub spikes_per_step: Vec<u64>,
}

impl Evaluation {
    pub fn final_accuracy(&self) -> f64 {
        *self.accuracy.last().unwrap_or(&0.0)
    }

    pub fn total_spikes(&self) -> u64 {
        self.spikes_per_step.iter().sum()
    }

    /// `{T, accuracy_series, total_spikes_series}` with cumulative spikes.
    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let mut cumulative = 0u64;
        let series: Vec<u64> = self
            .spikes_per_step
            .iter()
            .map(|&s| {
                cumulative += s;
                cumulative
            })
            .collect();
        let doc = serde_json::json!({
            "T": self.steps,
            "accuracy_series": self.accuracy,
            "total_spikes_series": series,
        });
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, &doc)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}

/// Runs every sample of `inputs` (leading axis) in parallel and aggregates
/// per-step accuracy and spike counts. Per-sample Poisson streams are derived
/// from `opts.seed` and the sample index, so results do not depend on
/// scheduling.
pub fn evaluate(
    snn: &SpikingNetwork,
    inputs: &Tensor,
    labels: &[usize],
    opts: &RunOptions,
) -> Result<Evaluation> {
    let n = inputs.shape()[0];
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} inputs",
            labels.len()
        )));
    }
    let compiled = CompiledNetwork::new(snn);
    let opts = RunOptions {
        record_spikes: false,
        record_outputs: false,
        ..*opts
    };
    let per_sample: Vec<(Vec<bool>, Vec<u64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = inputs.row(i)?;
            let trace = compiled.run(&x, &opts, i as u64)?;
            let correct = trace.predictions.iter().map(|&p| p == labels[i]).collect();
            let spikes = (1..=trace.steps).map(|t| trace.spikes_at_step(t)).collect();
            Ok((correct, spikes))
        })
        .collect::<Result<_>>()?;

    let mut correct = vec![0usize; opts.steps];
    let mut spikes = vec![0u64; opts.steps];
    for (c, s) in &per_sample {
        for t in 0..opts.steps {
            correct[t] += usize::from(c[t]);
            spikes[t] += s[t];
        }
    }
    Ok(Evaluation {
        steps: opts.steps,
        n_samples: n,
        accuracy: correct.into_iter().map(|c| c as f64 / n as f64).collect(),
        spikes_per_step: spikes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_neuron(weight: f64, bias: f64, v_th: f64) -> SpikingNetwork {
        SpikingNetwork {
            input_shape: vec![1],
            stages: vec![SnnStage::Spiking(SpikingLayer {
                op: SynapticOp::Affine {
                    weight: Tensor::matrix(&[vec![weight]]).unwrap(),
                    bias: Tensor::vector(vec![bias]),
                },
                v_th,
            })],
            readout: None,
            output_threshold: None,
        }
    }

    fn identity_layer(v_th: f64) -> SpikingLayer {
        SpikingLayer {
            op: SynapticOp::Affine {
                weight: Tensor::matrix(&[vec![1.0]]).unwrap(),
                bias: Tensor::vector(vec![0.0]),
            },
            v_th,
        }
    }

    #[test]
    fn if_step_soft_reset() {
        let layer = identity_layer(1.0);
        let mut st = SpikingLayerState::new(1);
        st.v[0] = 0.6;
        let s = if_step(&layer, &mut st, &Tensor::vector(vec![0.5]), 0, 1).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert!((st.v[0] - 0.1).abs() < 1e-12);

        let mut st = SpikingLayerState::new(1);
        let s = if_step(&layer, &mut st, &Tensor::vector(vec![0.0]), 0, 1).unwrap();
        assert_eq!((s.data()[0], st.v[0]), (0.0, 0.0));

        let mut st = SpikingLayerState::new(1);
        let s = if_step(&layer, &mut st, &Tensor::vector(vec![2.3]), 0, 1).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert!((st.v[0] - 1.3).abs() < 1e-12);
        let s = if_step(&layer, &mut st, &Tensor::vector(vec![0.0]), 0, 2).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert!((st.v[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn non_finite_potential_reports_layer_and_step() {
        let mut st = SpikingLayerState::new(1);
        let err = integrate(&mut st, &[f64::INFINITY], 1.0, 3, 7).unwrap_err();
        assert!(matches!(
            err,
            Error::Simulation {
                layer: 3,
                step: 7,
                ..
            }
        ));
    }

    #[test]
    fn constant_coding_pass_through_neuron() {
        let snn = single_neuron(1.0, 0.0, 1.0);
        let trace = run(
            &snn,
            &Tensor::vector(vec![0.3]),
            &RunOptions::new(10).recording(),
        )
        .unwrap();
        let fired: Vec<usize> = (1..=10)
            .filter(|&t| trace.spike_counts[0][t - 1] == 1)
            .collect();
        assert_eq!(fired, vec![4, 7, 10]);
        assert!((trace.firing_rate(0, 10).unwrap().data()[0] - 0.3).abs() < 1e-15);

        for (x, expect) in [(1.0, 1.0), (0.0, 0.0)] {
            let trace = run(
                &snn,
                &Tensor::vector(vec![x]),
                &RunOptions::new(50).recording(),
            )
            .unwrap();
            for t in 1..=50 {
                assert_eq!(trace.firing_rate(0, t).unwrap().data()[0], expect);
            }
        }
    }

    #[test]
    fn firing_rate_counts_and_range() {
        let snn = single_neuron(1.0, 0.0, 1.0);
        let trace = run(
            &snn,
            &Tensor::vector(vec![0.6]),
            &RunOptions::new(3).recording(),
        )
        .unwrap();
        // potentials 0.6, 1.2 -> spike, 0.8: spikes [0,1,0] -> rate 1/3 at t=3
        assert_eq!(trace.spike_counts[0], vec![0, 1, 0]);
        assert!((trace.firing_rate(0, 3).unwrap().data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(trace.firing_rate(0, 0).is_err());
        assert!(trace.firing_rate(0, 4).is_err());
        let bare = run(&snn, &Tensor::vector(vec![0.6]), &RunOptions::new(3)).unwrap();
        assert!(bare.firing_rate(0, 1).is_err());
    }

    #[test]
    fn poisson_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zeros = encode_poisson(&Tensor::zeros(&[64]), &mut rng).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        let ones = encode_poisson(&Tensor::full(&[64], 1.0), &mut rng).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        assert!(encode_poisson(&Tensor::vector(vec![1.2]), &mut rng).is_err());

        let half = Tensor::vector(vec![0.5]);
        let n = 10_000;
        let hits: f64 = (0..n)
            .map(|_| encode_poisson(&half, &mut rng).unwrap().data()[0])
            .sum();
        // 3 sigma of a binomial(1e4, 0.5) rate is 0.015.
        assert!((hits / n as f64 - 0.5).abs() <= 0.015);
    }

    #[test]
    fn potential_readout_averages_current() {
        let snn = SpikingNetwork {
            input_shape: vec![1],
            stages: vec![SnnStage::Spiking(identity_layer(1.0))],
            readout: Some(SynapticOp::Affine {
                weight: Tensor::matrix(&[vec![1.0], vec![-1.0]]).unwrap(),
                bias: Tensor::vector(vec![0.0, 0.5]),
            }),
            output_threshold: None,
        };
        let trace = run(
            &snn,
            &Tensor::vector(vec![0.5]),
            &RunOptions::new(4).recording(),
        )
        .unwrap();
        let out = trace.outputs.as_ref().unwrap();
        // spikes at t=2,4: potential/t = [0, 0.5], [0.5, 0], [1/3, 1/6], [0.5, 0]
        assert_eq!(out[0], vec![0.0, 0.5]);
        assert_eq!(out[3], vec![0.5, 0.0]);
        assert_eq!(trace.predictions, vec![1, 0, 0, 0]);
        // readout integrator does not spike
        assert_eq!(trace.total_spikes, vec![0, 1, 1, 2]);
    }

    #[test]
    fn zero_input_never_fires() {
        let snn = single_neuron(2.0, 0.0, 1.0);
        let trace = run(
            &snn,
            &Tensor::vector(vec![0.0]),
            &RunOptions::new(100).recording(),
        )
        .unwrap();
        assert_eq!(*trace.total_spikes.last().unwrap(), 0);
    }

    #[test]
    fn rejects_zero_steps_and_bad_shape() {
        let snn = single_neuron(1.0, 0.0, 1.0);
        assert!(run(&snn, &Tensor::vector(vec![0.5]), &RunOptions::new(0)).is_err());
        assert!(run(&snn, &Tensor::vector(vec![0.5, 0.1]), &RunOptions::new(5)).is_err());
    }

    #[test]
    fn evaluate_is_deterministic_under_poisson() {
        let snn = single_neuron(1.0, 0.0, 0.5);
        let inputs = Tensor::new(vec![6, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let labels = vec![0; 6];
        let opts = RunOptions {
            coding: Coding::Poisson,
            seed: 3,
            ..RunOptions::new(40)
        };
        let a = evaluate(&snn, &inputs, &labels, &opts).unwrap();
        let b = evaluate(&snn, &inputs, &labels, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.total_spikes() > 0);
    }
}
