#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ratenorm::snn::{
    evaluate, run, Coding, Readout, RunOptions, SnnStage, SpikingLayer, SpikingNetwork, SynapticOp,
};
use ratenorm::Tensor;

fn affine(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> SynapticOp {
    let w = (0..rows * cols)
        .map(|_| rng.gen_range(0.0..scale))
        .collect();
    let b = (0..rows).map(|_| rng.gen_range(0.0..0.05)).collect();
    SynapticOp::Affine {
        weight: Tensor::new(vec![rows, cols], w).unwrap(),
        bias: Tensor::vector(b),
    }
}

fn pass_through(v_th: f64) -> SpikingNetwork {
    SpikingNetwork {
        input_shape: vec![1],
        stages: vec![SnnStage::Spiking(SpikingLayer {
            op: SynapticOp::Affine {
                weight: Tensor::matrix(&[vec![1.0]]).unwrap(),
                bias: Tensor::vector(vec![0.0]),
            },
            v_th,
        })],
        readout: None,
        output_threshold: None,
    }
}

#[test]
fn constant_coding_follows_the_floor_model_exactly() {
    let steps = 3000;
    for v_th in [1.0, 0.5, 0.37, 2.3] {
        let snn = pass_through(v_th);
        for k in 0..=20 {
            let x = k as f64 / 20.0 * v_th;
            let trace = run(
                &snn,
                &Tensor::vector(vec![x]),
                &RunOptions::new(steps).recording(),
            )
            .unwrap();
            let mut count = 0u64;
            for t in 1..=steps {
                count += u64::from(trace.spike_counts[0][t - 1]);
                let expected = (k as u64 * t as u64) / 20;
                assert_eq!(count, expected, "v_th={v_th} x={x} t={t}");
            }
        }
    }
}

#[test]
fn single_layer_converges_within_one_over_t() {
    let snn = pass_through(1.0);
    let steps = 10_000;
    let trace = run(
        &snn,
        &Tensor::vector(vec![0.5]),
        &RunOptions::new(steps).recording(),
    )
    .unwrap();
    trace
        .for_each_rate(0, |t, r| {
            assert!((r.data()[0] - 0.5).abs() <= 1.0 / t as f64);
            Ok(())
        })
        .unwrap();
}

#[test]
fn random_nonnegative_nets_converge_to_clipped_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for depth in 1..=3 {
        for _ in 0..5 {
            let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(3..12)).collect();
            let stages = (0..depth)
                .map(|l| {
                    SnnStage::Spiking(SpikingLayer {
                        op: affine(widths[l + 1], widths[l], &mut rng, 2.0 / widths[l] as f64),
                        v_th: 1.0,
                    })
                })
                .collect();
            let snn = SpikingNetwork {
                input_shape: vec![widths[0]],
                stages,
                readout: None,
                output_threshold: None,
            };
            let x = Tensor::vector((0..widths[0]).map(|_| rng.gen_range(0.0..1.0)).collect());
            let limit = snn.rate_model(&x).unwrap().layer_rates;
            let trace = run(&snn, &x, &RunOptions::new(2000).recording()).unwrap();
            for (l, expected) in limit.iter().enumerate() {
                let r = trace.firing_rate(l, 2000).unwrap();
                let err = r
                    .data()
                    .iter()
                    .zip(expected.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err <= 0.02, "depth {depth} layer {l}: error {err}");
            }
        }
    }
}

#[test]
fn two_layer_net_matches_ann_rates_at_long_horizon() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let snn = SpikingNetwork {
        input_shape: vec![6],
        stages: vec![
            SnnStage::Spiking(SpikingLayer {
                op: affine(8, 6, &mut rng, 0.3),
                v_th: 1.0,
            }),
            SnnStage::Spiking(SpikingLayer {
                op: affine(4, 8, &mut rng, 0.25),
                v_th: 1.0,
            }),
        ],
        readout: None,
        output_threshold: None,
    };
    let x = Tensor::vector(vec![0.9, 0.1, 0.5, 0.3, 0.7, 0.2]);
    // Oracle: the ANN forward pass clip(W r + b, 0, 1) written out by hand.
    let mut r = x.data().to_vec();
    let mut expected = Vec::new();
    for stage in &snn.stages {
        let SnnStage::Spiking(l) = stage else {
            unreachable!()
        };
        let (w, b) = (l.op.weight(), l.op.bias());
        let cols = w.shape()[1];
        r = (0..w.shape()[0])
            .map(|i| {
                let z: f64 = (0..cols)
                    .map(|j| w.data()[i * cols + j] * r[j])
                    .sum::<f64>()
                    + b.data()[i];
                (z / l.v_th).clamp(0.0, 1.0)
            })
            .collect();
        expected.push(r.clone());
    }
    let trace = run(&snn, &x, &RunOptions::new(10_000).recording()).unwrap();
    for (l, e) in expected.iter().enumerate() {
        let got = trace.firing_rate(l, 10_000).unwrap();
        for (a, b) in got.data().iter().zip(e) {
            assert!((a - b).abs() <= 0.01, "layer {l}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_input_is_silent_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let snn = SpikingNetwork {
        input_shape: vec![4],
        stages: vec![SnnStage::Spiking(SpikingLayer {
            op: SynapticOp::Affine {
                weight: Tensor::new(
                    vec![3, 4],
                    (0..12).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap(),
                bias: Tensor::zeros(&[3]),
            },
            v_th: 1.0,
        })],
        readout: None,
        output_threshold: None,
    };
    let trace = run(
        &snn,
        &Tensor::zeros(&[4]),
        &RunOptions::new(200).recording(),
    )
    .unwrap();
    for t in 1..=200 {
        assert!(trace
            .firing_rate(0, t)
            .unwrap()
            .data()
            .iter()
            .all(|&r| r == 0.0));
    }
}

#[test]
fn firing_rates_match_a_recount_of_spike_events() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let snn = SpikingNetwork {
        input_shape: vec![5],
        stages: vec![
            SnnStage::Spiking(SpikingLayer {
                op: affine(7, 5, &mut rng, 0.6),
                v_th: 0.8,
            }),
            SnnStage::Spiking(SpikingLayer {
                op: affine(3, 7, &mut rng, 0.5),
                v_th: 0.6,
            }),
        ],
        readout: None,
        output_threshold: None,
    };
    let x = Tensor::vector((0..5).map(|_| rng.gen_range(0.0..1.0)).collect());
    let trace = run(&snn, &x, &RunOptions::new(300).recording()).unwrap();
    let events = trace.spike_events.as_ref().unwrap();
    for l in 0..2 {
        for t in [1, 17, 150, 300] {
            let mut counts = vec![0usize; trace.layer_sizes[l]];
            for step in &events[l][..t] {
                for &i in step {
                    counts[i as usize] += 1;
                }
            }
            let rate = trace.firing_rate(l, t).unwrap();
            for (c, r) in counts.iter().zip(rate.data()) {
                assert_eq!(*c as f64 / t as f64, *r);
                assert!((0.0..=1.0).contains(r));
            }
        }
    }
    assert!(trace.total_spikes.windows(2).all(|w| w[0] <= w[1]));
    for l in 0..2 {
        for step in &events[l] {
            let mut sorted = step.clone();
            sorted.dedup();
            assert_eq!(
                sorted.len(),
                step.len(),
                "at most one spike per neuron per step"
            );
        }
    }
}

#[test]
fn poisson_input_rate_tracks_intensity() {
    let snn = pass_through(1.0);
    let opts = RunOptions {
        coding: Coding::Poisson,
        seed: 99,
        ..RunOptions::new(10_000).recording()
    };
    let trace = run(&snn, &Tensor::vector(vec![0.5]), &opts).unwrap();
    let r = trace.firing_rate(0, 10_000).unwrap().data()[0];
    assert!((r - 0.5).abs() <= 0.015, "rate {r}");
}

#[test]
fn spike_rate_readout_needs_an_output_threshold() {
    let mut snn = pass_through(1.0);
    snn.readout = Some(SynapticOp::Affine {
        weight: Tensor::matrix(&[vec![1.0], vec![0.5]]).unwrap(),
        bias: Tensor::zeros(&[2]),
    });
    let opts = RunOptions {
        readout: Readout::SpikeRate,
        ..RunOptions::new(100).recording()
    };
    assert!(run(&snn, &Tensor::vector(vec![0.8]), &opts).is_err());
    snn.output_threshold = Some(1.0);
    let trace = run(&snn, &Tensor::vector(vec![0.8]), &opts).unwrap();
    assert_eq!(trace.num_layers(), 2);
    let out = trace.outputs.as_ref().unwrap().last().unwrap().clone();
    assert!((out[0] - 0.8).abs() <= 0.03);
    assert!((out[1] - 0.4).abs() <= 0.03);
}

#[test]
fn conv_pool_stack_runs_and_matches_its_rate_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kernel = Tensor::new(
        vec![2, 1, 3, 3],
        (0..18).map(|_| rng.gen_range(0.0..0.3)).collect(),
    )
    .unwrap();
    let snn = SpikingNetwork {
        input_shape: vec![1, 6, 6],
        stages: vec![
            SnnStage::Spiking(SpikingLayer {
                op: SynapticOp::Conv2d {
                    kernel,
                    bias: Tensor::zeros(&[2]),
                    stride: 1,
                },
                v_th: 1.0,
            }),
            SnnStage::AvgPool { window: 2 },
            SnnStage::Flatten,
        ],
        readout: Some(affine(3, 8, &mut rng, 1.0)),
        output_threshold: None,
    };
    let x = Tensor::new(
        vec![1, 6, 6],
        (0..36).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let model = snn.rate_model(&x).unwrap();
    let trace = run(&snn, &x, &RunOptions::new(4000).recording()).unwrap();
    let out = trace.outputs.as_ref().unwrap().last().unwrap();
    for (a, b) in out.iter().zip(model.output.data()) {
        assert!((a - b).abs() <= 0.01, "{a} vs {b}");
    }
}

#[test]
fn evaluate_matches_individual_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let snn = SpikingNetwork {
        input_shape: vec![4],
        stages: vec![SnnStage::Spiking(SpikingLayer {
            op: affine(6, 4, &mut rng, 0.8),
            v_th: 1.0,
        })],
        readout: Some(affine(3, 6, &mut rng, 1.0)),
        output_threshold: None,
    };
    let inputs = Tensor::new(
        vec![5, 4],
        (0..20).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let labels = vec![0, 1, 2, 1, 0];
    let opts = RunOptions::new(50);
    let ev = evaluate(&snn, &inputs, &labels, &opts).unwrap();
    let mut spikes = vec![0u64; 50];
    let mut correct = vec![0usize; 50];
    for i in 0..5 {
        let trace = run(&snn, &inputs.row(i).unwrap(), &opts).unwrap();
        for t in 0..50 {
            spikes[t] += trace.spikes_at_step(t + 1);
            correct[t] += usize::from(trace.predictions[t] == labels[i]);
        }
    }
    assert_eq!(ev.spikes_per_step, spikes);
    let acc: Vec<f64> = correct.iter().map(|&c| c as f64 / 5.0).collect();
    assert_eq!(ev.accuracy, acc);
}

#[test]
fn trace_exports() {
    let snn = pass_through(1.0);
    let trace = run(
        &snn,
        &Tensor::vector(vec![0.25]),
        &RunOptions::new(8).recording(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    trace.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,layer,spikes,mean_rate");
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[4], "4,0,1,0.25");

    let ev = evaluate(
        &snn,
        &Tensor::new(vec![1, 1], vec![0.25]).unwrap(),
        &[0],
        &RunOptions::new(8),
    )
    .unwrap();
    let json = dir.path().join("sim.json");
    ev.write_summary_json(&json).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["T"], 8);
    assert_eq!(v["total_spikes_series"][7], 2);
    assert_eq!(v["accuracy_series"].as_array().unwrap().len(), 8);
}
