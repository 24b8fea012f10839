//! End-to-end experiment: data, two-stage training, conversion, simulation
//! and diagnostics, with every artifact written to one directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_network, load_snn, save_network, save_snn};
use crate::config::{DatasetConfig, ExperimentConfig, Scheme};
use crate::conversion::{
    convert_direct, convert_max_norm, convert_robust_norm, scale_thresholds, ConversionReport,
};
use crate::data::{gen_synthetic, load_idx, Dataset};
use crate::diagnostics::{
    check_final_bound, energy_to_accuracy, k_curves_from_trace, mean_k_curves, time_to_accuracy,
    write_energy_csv, write_k_curves_csv, KCurve,
};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::snn::{evaluate, run, Evaluation, RunOptions, SpikingNetwork};
use crate::training::{accuracy, mean_omega, stage1_train, stage2_train, TrainLog};

pub const ANN_STAGE1_FILE: &str = "ann_stage1.json";
pub const ANN_FILE: &str = "ann.json";
pub const SNN_FILE: &str = "snn.json";
pub const SNN_BASELINE_FILE: &str = "snn_baseline.json";
pub const REPORT_FILE: &str = "conversion_report.json";
pub const STAGE1_LOG_FILE: &str = "train_log_stage1.csv";
pub const STAGE2_LOG_FILE: &str = "train_log_stage2.csv";
pub const K_CURVES_FILE: &str = "k_curves.csv";
pub const K_CURVES_BASELINE_FILE: &str = "k_curves_baseline.csv";
pub const ENERGY_FILE: &str = "energy.csv";
pub const ENERGY_BASELINE_FILE: &str = "energy_baseline.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Train and test splits described by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            n_train,
            n_test,
            classes,
            dim,
        } => {
            let all = gen_synthetic(cfg.seed, n_train + n_test, *classes, *dim)?;
            all.split(cfg.seed, *n_train, *n_test)
        }
        DatasetConfig::Idx {
            images,
            labels,
            n_train,
            n_test,
        } => load_idx(images, labels)?.split(cfg.seed, *n_train, *n_test),
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub stage1: Network,
    /// Equal to `stage1` when stage 2 did not run.
    pub network: Network,
    pub stage1_log: TrainLog,
    pub stage2_log: Option<TrainLog>,
    pub omega_before: Option<f64>,
    pub omega_after: Option<f64>,
}

/// Stage 1, then stage 2 when configured, not skipped and the network has
/// rate-norm layers. Ω before and after stage 2 is measured on `held_out`.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    held_out: &Dataset,
    stage1_only: bool,
) -> Result<Trained> {
    let mut net = Network::new(train_set.sample_shape(), &cfg.architecture, cfg.seed)?;
    let out = net.output_shape();
    if out != [train_set.classes] {
        return Err(Error::Config(format!(
            "architecture produces {out:?} outputs for {} classes",
            train_set.classes
        )));
    }
    let mut s1 = cfg.stage1.clone();
    s1.seed = cfg.seed;
    let stage1_log = stage1_train(&mut net, train_set, &s1)?;
    let stage1 = net.clone();

    let (mut stage2_log, mut omega_before, mut omega_after) = (None, None, None);
    if let (false, Some(s2), false) = (stage1_only, &cfg.stage2, net.rate_norms().is_empty()) {
        let mut s2 = s2.clone();
        s2.seed = cfg.seed.wrapping_add(1);
        omega_before = Some(mean_omega(&net, &held_out.inputs)?);
        stage2_log = Some(stage2_train(&mut net, train_set, &s2)?);
        omega_after = Some(mean_omega(&net, &held_out.inputs)?);
    }
    Ok(Trained {
        stage1,
        network: net,
        stage1_log,
        stage2_log,
        omega_before,
        omega_after,
    })
}

/// Converts with the configured scheme and applies the threshold scale.
pub fn convert(
    cfg: &ExperimentConfig,
    net: &Network,
    calibration: &Dataset,
) -> Result<(SpikingNetwork, ConversionReport)> {
    let c = &cfg.conversion;
    let calib = match c.calibration_size {
        Some(n) => calibration.head(n)?,
        None => calibration.clone(),
    };
    let (snn, mut report) = match c.scheme {
        Scheme::Direct => convert_direct(net)?,
        Scheme::MaxNorm => convert_max_norm(net, &calib.inputs, c.input_scale)?,
        Scheme::RobustNorm => convert_robust_norm(net, &calib.inputs, c.input_scale, c.percentile)?,
    };
    if c.threshold_scale == 1.0 {
        return Ok((snn, report));
    }
    let snn = scale_thresholds(&snn, c.threshold_scale)?;
    report.thresholds = snn.thresholds();
    report.output_threshold = snn.output_threshold;
    Ok((snn, report))
}

fn sim_options(cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        coding: cfg.simulation.coding,
        readout: cfg.simulation.readout,
        seed: cfg.seed,
        ..RunOptions::new(cfg.simulation.steps)
    }
}

pub fn eval_set(cfg: &ExperimentConfig, test: &Dataset) -> Result<Dataset> {
    match cfg.simulation.eval_samples {
        Some(n) => test.head(n),
        None => Ok(test.clone()),
    }
}

pub fn simulate(
    cfg: &ExperimentConfig,
    snn: &SpikingNetwork,
    test: &Dataset,
) -> Result<Evaluation> {
    let data = eval_set(cfg, test)?;
    evaluate(snn, &data.inputs, &data.labels, &sim_options(cfg))
}

/// Batch-mean K curves over the first `k_samples` test inputs, each against
/// the network's own limiting rates. Samples with an all-silent layer are
/// skipped. Also returns per-layer counts of final-step bound violations.
pub fn k_curves(
    cfg: &ExperimentConfig,
    snn: &SpikingNetwork,
    test: &Dataset,
) -> Result<KDiagnostics> {
    let n = cfg.diagnostics.k_samples.min(test.len());
    let opts = RunOptions {
        record_spikes: true,
        ..sim_options(cfg)
    };
    let per_sample: Vec<Option<(Vec<KCurve>, Vec<bool>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = test.inputs.row(i)?;
            let reference = snn.rate_model(&x)?.layer_rates;
            let trace = run(snn, &x, &opts)?;
            match k_curves_from_trace(&reference, &trace) {
                Ok(curves) => {
                    let holds = check_final_bound(&reference, &curves)?
                        .into_iter()
                        .map(|b| b.holds)
                        .collect();
                    Ok(Some((curves, holds)))
                }
                Err(Error::UndefinedK) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let used: Vec<_> = per_sample.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Argument(
            "no sample has K defined in every layer".into(),
        ));
    }
    let layers = used[0].0.len();
    let mut violations = vec![0usize; layers];
    for (_, holds) in &used {
        for (v, h) in violations.iter_mut().zip(holds) {
            *v += usize::from(!h);
        }
    }
    let curves: Vec<Vec<KCurve>> = used.into_iter().map(|(c, _)| c).collect();
    let mean = mean_k_curves(&curves)?;
    let settling = mean
        .iter()
        .map(|c| c.settling_time(cfg.diagnostics.k_threshold))
        .collect();
    Ok(KDiagnostics {
        samples: curves.len(),
        curves: mean,
        settling_times: settling,
        bound_violations: violations,
    })
}

#[derive(Debug, Clone)]
pub struct KDiagnostics {
    pub samples: usize,
    pub curves: Vec<KCurve>,
    pub settling_times: Vec<Option<usize>>,
    pub bound_violations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnSummary {
    pub final_accuracy: f64,
    pub time_to_latency_target: Option<usize>,
    pub time_to_energy_target: Option<usize>,
    pub energy_to_energy_target: Option<f64>,
    pub total_spikes: u64,
    pub final_energy: f64,
    pub thresholds: Vec<f64>,
    pub k_samples: usize,
    pub k_settling_times: Vec<Option<usize>>,
    pub k_bound_violations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub p: f64,
    pub omega_before: f64,
    pub omega_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub steps: usize,
    pub scheme: String,
    pub eval_samples: usize,
    pub ann_stage1_accuracy: f64,
    pub ann_accuracy: f64,
    pub latency_target: f64,
    pub energy_target: f64,
    pub alpha: f64,
    pub stage2: Option<Stage2Summary>,
    pub snn: SnnSummary,
    pub baseline: Option<SnnSummary>,
    /// Baseline time-to-target over this run's.
    pub speedup: Option<f64>,
    /// This run's energy-to-target over the baseline's.
    pub energy_ratio: Option<f64>,
}

struct Targets {
    latency: f64,
    energy: f64,
}

fn simulate_and_report(
    cfg: &ExperimentConfig,
    snn: &SpikingNetwork,
    test: &Dataset,
    targets: &Targets,
    out: &Path,
    energy_file: &str,
    k_file: &str,
) -> Result<SnnSummary> {
    let ev = simulate(cfg, snn, test)?;
    let energy = energy_to_accuracy(
        &ev.spikes_per_step,
        &ev.accuracy,
        cfg.diagnostics.alpha,
        targets.energy,
    )?;
    write_energy_csv(&out.join(energy_file), &energy, &ev.accuracy)?;
    let k = k_curves(cfg, snn, test)?;
    write_k_curves_csv(&out.join(k_file), &k.curves)?;
    Ok(SnnSummary {
        final_accuracy: ev.final_accuracy(),
        time_to_latency_target: time_to_accuracy(&ev.accuracy, targets.latency),
        time_to_energy_target: energy.time_to_target,
        energy_to_energy_target: energy.energy_to_target,
        total_spikes: energy.total_spikes,
        final_energy: energy.final_energy(),
        thresholds: snn.thresholds(),
        k_samples: k.samples,
        k_settling_times: k.settling_times,
        k_bound_violations: k.bound_violations,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOptions {
    pub stage1_only: bool,
}

/// Runs everything and writes the artifacts into `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    opts: PipelineOptions,
) -> Result<Summary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train_set, test) = load_dataset(cfg)?;
    log::info!(
        "{}: {} train / {} test samples",
        cfg.name,
        train_set.len(),
        test.len()
    );

    let trained = train(cfg, &train_set, &test, opts.stage1_only)?;
    let layers = trained.network.rate_norms().len();
    trained
        .stage1_log
        .write_csv(&out.join(STAGE1_LOG_FILE), layers)?;
    save_network(&trained.stage1, &out.join(ANN_STAGE1_FILE))?;
    save_network(&trained.network, &out.join(ANN_FILE))?;
    if let Some(log) = &trained.stage2_log {
        log.write_csv(&out.join(STAGE2_LOG_FILE), layers)?;
    }

    let ann_stage1_accuracy = accuracy(&trained.stage1, &test)?;
    let ann_accuracy = accuracy(&trained.network, &test)?;
    log::info!("ANN test accuracy {ann_stage1_accuracy:.4} (stage 1), {ann_accuracy:.4} (final)");
    let targets = Targets {
        latency: ann_stage1_accuracy - cfg.diagnostics.accuracy_drop,
        energy: ann_stage1_accuracy * cfg.diagnostics.energy_fraction,
    };

    let (snn, report) = convert(cfg, &trained.network, &train_set)?;
    save_snn(&snn, &out.join(SNN_FILE))?;
    report.write_json(&out.join(REPORT_FILE))?;
    let snn_summary =
        simulate_and_report(cfg, &snn, &test, &targets, out, ENERGY_FILE, K_CURVES_FILE)?;
    log::info!(
        "SNN accuracy at T={}: {:.4}",
        cfg.simulation.steps,
        snn_summary.final_accuracy
    );

    let baseline = if trained.stage2_log.is_some() && cfg.diagnostics.baseline {
        let (base, _) = convert(cfg, &trained.stage1, &train_set)?;
        save_snn(&base, &out.join(SNN_BASELINE_FILE))?;
        Some(simulate_and_report(
            cfg,
            &base,
            &test,
            &targets,
            out,
            ENERGY_BASELINE_FILE,
            K_CURVES_BASELINE_FILE,
        )?)
    } else {
        None
    };

    let speedup = baseline.as_ref().and_then(|b| {
        Some(b.time_to_latency_target? as f64 / snn_summary.time_to_latency_target? as f64)
    });
    let energy_ratio = baseline
        .as_ref()
        .and_then(|b| Some(snn_summary.energy_to_energy_target? / b.energy_to_energy_target?));
    let stage2 = match (trained.omega_before, trained.omega_after) {
        (Some(before), Some(after)) => Some(Stage2Summary {
            p: trained.network.rate_norms()[0].state.p(),
            omega_before: before,
            omega_after: after,
        }),
        _ => None,
    };
    let summary = Summary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        steps: cfg.simulation.steps,
        scheme: report.scheme.clone(),
        eval_samples: eval_set(cfg, &test)?.len(),
        ann_stage1_accuracy,
        ann_accuracy,
        latency_target: targets.latency,
        energy_target: targets.energy,
        alpha: cfg.diagnostics.alpha,
        stage2,
        snn: snn_summary,
        baseline,
        speedup,
        energy_ratio,
    };
    write_summary(&summary, &out.join(SUMMARY_FILE))?;
    Ok(summary)
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_csv(path: &Path, expected: &[&str], prefix_only: bool) -> Result<usize> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let matches = if prefix_only {
        header.len() >= expected.len() && header[..expected.len()] == *expected
    } else {
        header == expected
    };
    if !matches {
        return Err(Error::Format(format!(
            "{}: header {header:?}, expected {expected:?}",
            path.display()
        )));
    }
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for (col, cell) in header.iter().zip(rec.iter()) {
            if !cell.is_empty() && cell.parse::<f64>().is_err() {
                return Err(Error::Format(format!(
                    "{}: row {}: {col} = {cell:?} is not numeric",
                    path.display(),
                    rows + 1
                )));
            }
        }
        rows += 1;
    }
    Ok(rows)
}

/// Parses every known artifact in `dir` against its schema. Returns the
/// files that were checked.
pub fn validate_output_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let required = [
        SUMMARY_FILE,
        ANN_FILE,
        SNN_FILE,
        REPORT_FILE,
        STAGE1_LOG_FILE,
        K_CURVES_FILE,
        ENERGY_FILE,
    ];
    for f in required {
        if !dir.join(f).exists() {
            return Err(Error::MissingFile(dir.join(f)));
        }
    }
    let mut checked = Vec::new();
    let mut visit = |name: &str, check: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let p = dir.join(name);
        if p.exists() {
            check(&p)?;
            checked.push(p);
        }
        Ok(())
    };
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    visit(SUMMARY_FILE, &|p| {
        serde_json::from_str::<Summary>(&read(p)?)
            .map(drop)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    })?;
    visit(REPORT_FILE, &|p| {
        serde_json::from_str::<ConversionReport>(&read(p)?)
            .map(drop)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    })?;
    visit(ANN_STAGE1_FILE, &|p| load_network(p).map(drop))?;
    visit(ANN_FILE, &|p| load_network(p).map(drop))?;
    visit(SNN_FILE, &|p| load_snn(p).map(drop))?;
    visit(SNN_BASELINE_FILE, &|p| load_snn(p).map(drop))?;
    let train_cols = ["epoch", "loss", "acc", "mean_omega", "p"];
    visit(STAGE1_LOG_FILE, &|p| {
        check_csv(p, &train_cols, true).map(drop)
    })?;
    visit(STAGE2_LOG_FILE, &|p| {
        check_csv(p, &train_cols, true).map(drop)
    })?;
    visit(K_CURVES_FILE, &|p| {
        check_csv(p, &["t", "layer", "K"], false).map(drop)
    })?;
    visit(K_CURVES_BASELINE_FILE, &|p| {
        check_csv(p, &["t", "layer", "K"], false).map(drop)
    })?;
    visit(ENERGY_FILE, &|p| {
        check_csv(p, &["t", "P", "E", "accuracy"], false).map(drop)
    })?;
    visit(ENERGY_BASELINE_FILE, &|p| {
        check_csv(p, &["t", "P", "E", "accuracy"], false).map(drop)
    })?;
    Ok(checked)
}
