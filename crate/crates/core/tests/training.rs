use ratenorm::data::gen_synthetic;
use ratenorm::rate_norm::logit;
use ratenorm::training::{accuracy, fast_loss, mean_omega, stage2_objective};
use ratenorm::{
    omega, stage1_train, stage2_train, Dataset, Error, LayerSpec, Network, StageConfig, Tensor,
};

fn mlp(dim: usize, hidden: usize, classes: usize, seed: u64) -> Network {
    Network::new(
        &[dim],
        &[
            LayerSpec::Affine {
                inputs: dim,
                outputs: hidden,
            },
            LayerSpec::RateNorm { momentum: 0.1 },
            LayerSpec::Affine {
                inputs: hidden,
                outputs: classes,
            },
        ],
        seed,
    )
    .unwrap()
}

fn deep(dim: usize, classes: usize, seed: u64) -> Network {
    Network::new(
        &[dim],
        &[
            LayerSpec::Affine {
                inputs: dim,
                outputs: 24,
            },
            LayerSpec::RateNorm { momentum: 0.1 },
            LayerSpec::Affine {
                inputs: 24,
                outputs: 16,
            },
            LayerSpec::RateNorm { momentum: 0.1 },
            LayerSpec::Affine {
                inputs: 16,
                outputs: classes,
            },
        ],
        seed,
    )
    .unwrap()
}

fn trained(seed: u64) -> (Network, Dataset, Dataset) {
    let data = gen_synthetic(seed, 300, 4, 12).unwrap();
    let (train, test) = data.split(seed, 200, 100).unwrap();
    let mut net = deep(12, 4, seed);
    stage1_train(&mut net, &train, &StageConfig::new(15, 0.05)).unwrap();
    (net, train, test)
}

fn weights(net: &Network) -> Vec<Vec<u64>> {
    net.params()
        .iter()
        .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn stage1_separates_two_classes() {
    let data = gen_synthetic(11, 200, 2, 8).unwrap();
    let mut net = mlp(8, 16, 2, 11);
    let log = stage1_train(&mut net, &data, &StageConfig::new(50, 0.05)).unwrap();
    assert_eq!(log.rows.len(), 50);
    let acc = accuracy(&net, &data).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
    assert!(net.rate_norms().iter().all(|r| r.state.p_locked));
}

#[test]
fn zero_epochs_is_a_no_op() {
    let data = gen_synthetic(1, 50, 3, 6).unwrap();
    let mut net = mlp(6, 8, 3, 1);
    let before = weights(&net);
    let max_before = net.rate_norms()[0].state.running_max;
    let log = stage1_train(&mut net, &data, &StageConfig::new(0, 0.1)).unwrap();
    assert!(log.rows.is_empty());
    assert_eq!(weights(&net), before);
    assert_eq!(net.rate_norms()[0].state.running_max, max_before);
}

#[test]
fn stage1_is_deterministic() {
    let data = gen_synthetic(4, 120, 3, 10).unwrap();
    let run = || {
        let mut net = mlp(10, 12, 3, 4);
        let mut cfg = StageConfig::new(5, 0.05);
        cfg.seed = 9;
        let log = stage1_train(&mut net, &data, &cfg).unwrap();
        (format!("{log:?}"), weights(&net))
    };
    assert_eq!(run(), run());
}

#[test]
fn stage1_requires_locked_p() {
    let data = gen_synthetic(1, 20, 2, 4).unwrap();
    let mut net = mlp(4, 4, 2, 1);
    net.unlock_p(2.0);
    assert!(matches!(
        stage1_train(&mut net, &data, &StageConfig::new(1, 0.1)),
        Err(Error::State(_))
    ));
}

#[test]
fn stage1_reports_divergence_with_epoch() {
    let data = gen_synthetic(2, 40, 2, 4).unwrap();
    let mut net = mlp(4, 4, 2, 2);
    let err = stage1_train(&mut net, &data, &StageConfig::new(3, 1e308)).unwrap_err();
    let Error::Training(msg) = err else {
        panic!("expected training error, got {err:?}")
    };
    assert!(msg.contains("epoch"), "{msg}");
}

#[test]
fn stage2_lowers_omega_and_keeps_weights() {
    let (mut net, train, test) = trained(5);
    let before_weights = weights(&net);
    let maxes: Vec<f64> = net
        .rate_norms()
        .iter()
        .map(|r| r.state.running_max)
        .collect();
    let before = mean_omega(&net, &test.inputs).unwrap();
    let log = stage2_train(&mut net, &train, &StageConfig::new(3, 0.05)).unwrap();
    let after = mean_omega(&net, &test.inputs).unwrap();
    assert!(after < before, "omega {before} -> {after}");
    assert_eq!(log.rows.len(), 3);
    assert_eq!(weights(&net), before_weights);
    let maxes_after: Vec<f64> = net
        .rate_norms()
        .iter()
        .map(|r| r.state.running_max)
        .collect();
    assert_eq!(maxes, maxes_after);
    let p = net.rate_norms()[0].state.p();
    assert!(p < 0.95);
    assert!(net.rate_norms().iter().all(|r| r.state.p() == p));
    for row in &log.rows {
        assert!(row.loss.is_finite() && row.mean_omega.is_finite());
    }
}

#[test]
fn stage2_without_penalty_stays_at_one() {
    let (mut net, train, _) = trained(6);
    let mut cfg = StageConfig::new(2, 0.05);
    cfg.lambda = 0.0;
    cfg.initial_p = 1.0 - 1e-9;
    stage2_train(&mut net, &train, &cfg).unwrap();
    let p = net.rate_norms()[0].state.p();
    assert!((1.0 - p).abs() <= 1e-8, "p moved to {p}");
}

fn objective_value(net: &Network, x: &Tensor, lambda: f64) -> f64 {
    let reference = net.forward_with_p(x, Some(1.0)).unwrap();
    let out = net.forward(x).unwrap();
    let omegas: Vec<f64> = net
        .rate_norm_outputs(x, None)
        .unwrap()
        .iter()
        .map(|r| omega(r).unwrap())
        .collect();
    fast_loss(&reference, &out, &omegas, lambda).unwrap()
}

fn unlocked(seed: u64, p: f64) -> (Network, Tensor) {
    let (mut net, _, test) = trained(seed);
    net.tie_all_p(0).unwrap();
    net.unlock_p(logit(p));
    (net, test.inputs.slice_rows(0, 32).unwrap())
}

#[test]
fn objective_equals_its_parts() {
    let (mut net, x) = unlocked(7, 0.8);
    let expected = objective_value(&net, &x, 0.5);
    net.zero_grad();
    let got = stage2_objective(&mut net, &x, 0.5).unwrap();
    assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
}

#[test]
fn p_gradient_matches_central_differences() {
    for (seed, p) in [(7, 0.8), (8, 0.6), (9, 0.9)] {
        let (mut net, x) = unlocked(seed, p);
        net.zero_grad();
        stage2_objective(&mut net, &x, 0.5).unwrap();
        let grads = net.p_raw_gradients();
        assert_eq!(grads.len(), 1);
        let analytic = grads[0].1;

        let h = 1e-6;
        let p_raw = logit(p);
        let mut probe = net.clone();
        probe.unlock_p(p_raw + h);
        let up = objective_value(&probe, &x, 0.5);
        probe.unlock_p(p_raw - h);
        let down = objective_value(&probe, &x, 0.5);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
        assert!(
            rel <= 1e-4,
            "seed {seed}: analytic {analytic}, numeric {numeric}"
        );
    }
}

#[test]
fn tied_and_untied_single_layer_agree() {
    let data = gen_synthetic(3, 120, 3, 8).unwrap();
    let mut base = mlp(8, 10, 3, 3);
    stage1_train(&mut base, &data, &StageConfig::new(5, 0.05)).unwrap();
    let cfg = StageConfig::new(2, 0.05);

    let mut tied = base.clone();
    let tied_log = stage2_train(&mut tied, &data, &cfg).unwrap();

    let mut untied = base.clone();
    untied.unlock_p(logit(cfg.initial_p));
    assert_eq!(untied.rate_norms()[0].state.shared_group, None);
    let untied_log = stage2_train(&mut untied, &data, &cfg).unwrap();

    assert_eq!(format!("{tied_log:?}"), format!("{untied_log:?}"));
    assert_eq!(
        tied.rate_norms()[0].state.p_raw,
        untied.rate_norms()[0].state.p_raw
    );
}

#[test]
fn train_log_csv_layout() {
    let (mut net, train, _) = trained(10);
    let log = stage2_train(&mut net, &train, &StageConfig::new(2, 0.05)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    log.write_csv(&path, 2).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,loss,acc,mean_omega,p,theta_1,theta_2"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn invalid_stage_configs() {
    let data = gen_synthetic(1, 20, 2, 4).unwrap();
    let mut net = mlp(4, 4, 2, 1);
    let mut cfg = StageConfig::new(1, 0.1);
    cfg.lambda = -0.5;
    assert!(stage2_train(&mut net, &data, &cfg).is_err());
    let mut cfg = StageConfig::new(1, 0.1);
    cfg.initial_p = 1.5;
    assert!(stage2_train(&mut net, &data, &cfg).is_err());
}
