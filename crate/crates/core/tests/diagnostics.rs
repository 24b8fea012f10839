use ratenorm::data::gen_synthetic;
use ratenorm::diagnostics::{
    check_final_bound, energy_from_trace, energy_to_accuracy, k_curves_from_trace, mean_k_curves,
    power_series, write_energy_csv, write_k_curves_csv,
};
use ratenorm::{
    convert_direct, run, stage1_train, Error, LayerSpec, Network, RunOptions, StageConfig, Tensor,
};

fn deep_snn() -> (ratenorm::SpikingNetwork, ratenorm::Dataset) {
    let data = gen_synthetic(31, 300, 4, 12).unwrap();
    let rnl = || LayerSpec::RateNorm { momentum: 0.1 };
    let mut net = Network::new(
        &[12],
        &[
            LayerSpec::Affine {
                inputs: 12,
                outputs: 32,
            },
            rnl(),
            LayerSpec::Affine {
                inputs: 32,
                outputs: 24,
            },
            rnl(),
            LayerSpec::Affine {
                inputs: 24,
                outputs: 16,
            },
            rnl(),
            LayerSpec::Affine {
                inputs: 16,
                outputs: 4,
            },
        ],
        31,
    )
    .unwrap();
    stage1_train(&mut net, &data, &StageConfig::new(20, 0.05)).unwrap();
    let (snn, _) = convert_direct(&net).unwrap();
    (snn, data)
}

#[test]
fn deeper_layers_settle_no_earlier() {
    let (snn, data) = deep_snn();
    let steps = 1000;
    let mut per_sample = Vec::new();
    for i in 0..24 {
        let x = data.inputs.row(i).unwrap();
        let reference = snn.rate_model(&x).unwrap().layer_rates;
        if reference.iter().any(|r| r.sum() == 0.0) {
            continue;
        }
        let trace = run(&snn, &x, &RunOptions::new(steps).recording()).unwrap();
        per_sample.push(k_curves_from_trace(&reference, &trace).unwrap());
    }
    assert!(per_sample.len() >= 16);
    let curves = mean_k_curves(&per_sample).unwrap();
    let settle: Vec<usize> = curves
        .iter()
        .map(|c| c.settling_time(0.1).expect("settles"))
        .collect();
    assert!(
        settle.windows(2).all(|w| w[0] <= w[1]),
        "settling times {settle:?}"
    );
}

#[test]
fn final_bound_is_checked_on_real_traces() {
    let (snn, data) = deep_snn();
    let steps = 2000;
    let x = data.inputs.row(0).unwrap();
    let reference = snn.rate_model(&x).unwrap().layer_rates;
    let trace = run(&snn, &x, &RunOptions::new(steps).recording()).unwrap();
    let curves = k_curves_from_trace(&reference, &trace).unwrap();
    let checks = check_final_bound(&reference, &curves).unwrap();
    assert_eq!(checks.len(), 3);
    for c in &checks {
        assert!(c.k_final.is_finite() && c.bound > 0.0);
        assert_eq!(c.holds, c.k_final <= c.bound);
    }
    // The first layer sees constant current, which is exactly the floor model.
    assert!(checks[0].holds, "{:?}", checks[0]);
}

#[test]
fn k_curves_reject_mismatched_layers() {
    let (snn, data) = deep_snn();
    let x = data.inputs.row(0).unwrap();
    let trace = run(&snn, &x, &RunOptions::new(5).recording()).unwrap();
    let short = vec![Tensor::zeros(&[32])];
    assert!(matches!(
        k_curves_from_trace(&short, &trace),
        Err(Error::Argument(_))
    ));
    let wrong = vec![
        Tensor::zeros(&[3]),
        Tensor::zeros(&[24]),
        Tensor::zeros(&[16]),
    ];
    assert!(matches!(
        k_curves_from_trace(&wrong, &trace),
        Err(Error::Argument(_))
    ));
}

#[test]
fn energy_identity_on_a_trace() {
    let (snn, data) = deep_snn();
    let x = data.inputs.row(1).unwrap();
    let trace = run(&snn, &x, &RunOptions::new(400)).unwrap();
    let alpha = 3e-9;
    let report = energy_from_trace(&trace, alpha).unwrap();
    assert_eq!(
        report.final_energy(),
        *trace.total_spikes.last().unwrap() as f64 * alpha
    );
    assert!(report.energy.windows(2).all(|w| w[0] <= w[1]));
    assert!(report.power.iter().all(|&p| p >= 0.0));
}

#[test]
fn energy_to_target_accuracy() {
    let spikes = [1000, 0, 500, 500];
    let acc = [0.1, 0.5, 0.92, 0.93];
    let report = energy_to_accuracy(&spikes, &acc, 1e-9, 0.9).unwrap();
    assert_eq!(report.time_to_target, Some(3));
    assert_eq!(report.energy_to_target, Some(1500.0 * 1e-9));
    assert!((report.power[0] - 1e-3).abs() < 1e-18);
    let missed = energy_to_accuracy(&spikes, &acc, 1e-9, 0.99).unwrap();
    assert_eq!(missed.time_to_target, None);
    assert_eq!(missed.energy_to_target, None);
    assert!(power_series(&spikes, 0.0).is_err());
}

#[test]
fn csv_writers() {
    let dir = tempfile::tempdir().unwrap();
    let report = energy_to_accuracy(&[2, 3], &[0.5, 1.0], 1e-9, 0.9).unwrap();
    let path = dir.path().join("energy.csv");
    write_energy_csv(&path, &report, &[0.5, 1.0]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,P,E,accuracy");
    assert_eq!(lines.len(), 3);

    let curves = vec![ratenorm::KCurve {
        layer: 0,
        values: vec![1.0, 0.5, 0.0],
    }];
    let path = dir.path().join("k.csv");
    write_k_curves_csv(&path, &curves).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().collect::<Vec<_>>(),
        ["t,layer,K", "1,0,1", "2,0,0.5", "3,0,0"]
    );
}
