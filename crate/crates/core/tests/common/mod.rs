#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ratenorm::network::{Layer, Param};
use ratenorm::rate_norm::Mode;
use ratenorm::{Network, RateNorm, RateNormState, Tensor};

pub fn affine(w: Tensor, b: Tensor) -> Layer {
    Layer::Affine {
        weight: Param::new(w),
        bias: Param::new(b),
        input: None,
    }
}

pub fn relu() -> Layer {
    Layer::Relu { input: None }
}

pub fn rate_norm(running_max: f64) -> Layer {
    let mut state = RateNormState::new(0.1).unwrap();
    state.running_max = running_max;
    state.mode = Mode::Eval;
    Layer::RateNorm(RateNorm::new(state))
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Affine layers of the given widths with `act` after every hidden layer and
/// a bare affine readout at the end.
pub fn random_net(rng: &mut ChaCha8Rng, widths: &[usize], act: impl Fn() -> Layer) -> Network {
    let mut layers = Vec::new();
    for l in 0..widths.len() - 1 {
        let bound = 1.5 / (widths[l] as f64).sqrt();
        layers.push(affine(
            uniform(rng, &[widths[l + 1], widths[l]], -bound, bound),
            uniform(rng, &[widths[l + 1]], 0.0, 0.2),
        ));
        if l + 2 < widths.len() {
            layers.push(act());
        }
    }
    Network::from_layers(&[widths[0]], layers).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
