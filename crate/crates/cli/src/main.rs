use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ratenorm::checkpoint::{load_network, load_snn, save_network, save_snn};
use ratenorm::diagnostics::{energy_to_accuracy, write_energy_csv, write_k_curves_csv};
use ratenorm::pipeline::{self, PipelineOptions};
use ratenorm::training::accuracy;
use ratenorm::{Error, ExperimentConfig, Result, RunOptions};

#[derive(Parser)]
#[command(
    name = "ratenorm",
    version,
    about = "Train, convert and simulate rate-norm spiking networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training; writes checkpoints and training logs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1_only: bool,
    },
    /// Converts a trained checkpoint into a spiking network.
    Convert {
        #[command(flatten)]
        common: Common,
        /// ANN checkpoint; defaults to <out>/ann.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulates a spiking network on the test split.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// SNN checkpoint; defaults to <out>/snn.json.
        #[arg(long)]
        snn: Option<PathBuf>,
    },
    /// K curves and energy accounting for a spiking network.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snn: Option<PathBuf>,
    },
    /// The whole pipeline.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1_only: bool,
    },
    /// Checks every artifact in an output directory against its schema.
    Validate {
        #[arg(long)]
        out: PathBuf,
    },
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir());
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    Ok((cfg, out))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            stage1_only,
        } => {
            let (cfg, out) = setup(&common)?;
            let (train, test) = pipeline::load_dataset(&cfg)?;
            let trained = pipeline::train(&cfg, &train, &test, stage1_only)?;
            let layers = trained.network.rate_norms().len();
            trained
                .stage1_log
                .write_csv(&out.join(pipeline::STAGE1_LOG_FILE), layers)?;
            if let Some(log) = &trained.stage2_log {
                log.write_csv(&out.join(pipeline::STAGE2_LOG_FILE), layers)?;
            }
            save_network(&trained.stage1, &out.join(pipeline::ANN_STAGE1_FILE))?;
            save_network(&trained.network, &out.join(pipeline::ANN_FILE))?;
            println!("test accuracy {:.4}", accuracy(&trained.network, &test)?);
        }
        Command::Convert { common, checkpoint } => {
            let (cfg, out) = setup(&common)?;
            let net = load_network(&checkpoint.unwrap_or_else(|| out.join(pipeline::ANN_FILE)))?;
            let (train, _) = pipeline::load_dataset(&cfg)?;
            let (snn, report) = pipeline::convert(&cfg, &net, &train)?;
            save_snn(&snn, &out.join(pipeline::SNN_FILE))?;
            report.write_json(&out.join(pipeline::REPORT_FILE))?;
            println!("thresholds {:?}", report.thresholds);
        }
        Command::Simulate { common, snn } => {
            let (cfg, out) = setup(&common)?;
            let snn = load_snn(&snn.unwrap_or_else(|| out.join(pipeline::SNN_FILE)))?;
            let (_, test) = pipeline::load_dataset(&cfg)?;
            let ev = pipeline::simulate(&cfg, &snn, &test)?;
            ev.write_summary_json(&out.join("simulation.json"))?;
            let opts = RunOptions {
                coding: cfg.simulation.coding,
                readout: cfg.simulation.readout,
                seed: cfg.seed,
                ..RunOptions::new(cfg.simulation.steps)
            };
            let trace = ratenorm::run(&snn, &test.inputs.row(0)?, &opts)?;
            trace.write_csv(&out.join("trace.csv"))?;
            println!("accuracy at T={}: {:.4}", ev.steps, ev.final_accuracy());
        }
        Command::Diagnose { common, snn } => {
            let (cfg, out) = setup(&common)?;
            let snn = load_snn(&snn.unwrap_or_else(|| out.join(pipeline::SNN_FILE)))?;
            let (_, test) = pipeline::load_dataset(&cfg)?;
            let ev = pipeline::simulate(&cfg, &snn, &test)?;
            let target =
                ev.accuracy.iter().copied().fold(0.0, f64::max) * cfg.diagnostics.energy_fraction;
            let energy = energy_to_accuracy(
                &ev.spikes_per_step,
                &ev.accuracy,
                cfg.diagnostics.alpha,
                target,
            )?;
            write_energy_csv(&out.join(pipeline::ENERGY_FILE), &energy, &ev.accuracy)?;
            let k = pipeline::k_curves(&cfg, &snn, &test)?;
            write_k_curves_csv(&out.join(pipeline::K_CURVES_FILE), &k.curves)?;
            write_json(
                &out.join("diagnostics.json"),
                &serde_json::json!({
                    "final_accuracy": ev.final_accuracy(),
                    "energy_target": target,
                    "time_to_energy_target": energy.time_to_target,
                    "energy_to_energy_target": energy.energy_to_target,
                    "total_spikes": energy.total_spikes,
                    "final_energy": energy.final_energy(),
                    "k_samples": k.samples,
                    "k_settling_times": k.settling_times,
                    "k_bound_violations": k.bound_violations,
                }),
            )?;
            println!("settling times {:?}", k.settling_times);
        }
        Command::Run {
            common,
            stage1_only,
        } => {
            let (cfg, out) = setup(&common)?;
            let s = pipeline::run_experiment(&cfg, &out, PipelineOptions { stage1_only })?;
            println!(
                "ANN {:.4}, SNN {:.4} at T={}; artifacts in {}",
                s.ann_accuracy,
                s.snn.final_accuracy,
                s.steps,
                out.display()
            );
        }
        Command::Validate { out } => {
            for p in pipeline::validate_output_dir(&out)? {
                println!("ok {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}
