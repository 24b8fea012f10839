//! Declarative experiment description loaded from a JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conversion::DEFAULT_PERCENTILE;
use crate::diagnostics::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::network::LayerSpec;
use crate::snn::{Coding, Readout};
use crate::training::StageConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n_train: usize,
        n_test: usize,
        classes: usize,
        dim: usize,
    },
    /// IDX image/label files. Relative paths are resolved against the
    /// config file's directory.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        n_train: usize,
        n_test: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Direct,
    MaxNorm,
    RobustNorm,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Direct => "direct",
            Scheme::MaxNorm => "max_norm",
            Scheme::RobustNorm => "robust_norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionConfig {
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    /// Largest input value (`max_0`).
    #[serde(default = "one")]
    pub input_scale: f64,
    /// Applied to every threshold after conversion.
    #[serde(default = "one")]
    pub threshold_scale: f64,
    /// Training samples used for calibration; all of them when absent.
    #[serde(default)]
    pub calibration_size: Option<usize>,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Direct,
            percentile: DEFAULT_PERCENTILE,
            input_scale: 1.0,
            threshold_scale: 1.0,
            calibration_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub steps: usize,
    #[serde(default)]
    pub coding: Coding,
    #[serde(default)]
    pub readout: Readout,
    /// Test samples simulated; all of them when absent.
    #[serde(default)]
    pub eval_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Joules per spike.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Latency target is ANN accuracy minus this.
    #[serde(default = "default_drop")]
    pub accuracy_drop: f64,
    /// Energy target is this fraction of ANN accuracy.
    #[serde(default = "default_energy_fraction")]
    pub energy_fraction: f64,
    #[serde(default = "default_k_threshold")]
    pub k_threshold: f64,
    /// Test samples whose K curves are averaged.
    #[serde(default = "default_k_samples")]
    pub k_samples: usize,
    /// Also simulate the stage-1 network as a baseline.
    #[serde(default = "yes")]
    pub baseline: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            accuracy_drop: default_drop(),
            energy_fraction: default_energy_fraction(),
            k_threshold: default_k_threshold(),
            k_samples: default_k_samples(),
            baseline: true,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_percentile() -> f64 {
    DEFAULT_PERCENTILE
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_drop() -> f64 {
    0.02
}
fn default_energy_fraction() -> f64 {
    0.9
}
fn default_k_threshold() -> f64 {
    0.1
}
fn default_k_samples() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub architecture: Vec<LayerSpec>,
    pub stage1: StageConfig,
    #[serde(default)]
    pub stage2: Option<StageConfig>,
    #[serde(default)]
    pub conversion: ConversionConfig,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    /// Parses a config and resolves relative dataset and output paths against
    /// `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base_dir.join(&*out);
            }
        }
        if let DatasetConfig::Idx { images, labels, .. } = &mut cfg.dataset {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base_dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&text, base)
    }

    /// Checks value ranges and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.architecture.is_empty() {
            return bad("architecture is empty".into());
        }
        self.stage1.validate()?;
        if let Some(s2) = &self.stage2 {
            s2.validate()?;
        }
        if self.simulation.steps == 0 {
            return bad("simulation.steps must be positive".into());
        }
        let c = &self.conversion;
        if !(c.percentile > 0.0 && c.percentile <= 100.0) {
            return bad(format!(
                "conversion.percentile must be in (0, 100], got {}",
                c.percentile
            ));
        }
        if !(c.threshold_scale > 0.0) || !(c.input_scale > 0.0) {
            return bad("conversion scales must be positive".into());
        }
        let d = &self.diagnostics;
        if !(d.alpha > 0.0) {
            return bad(format!(
                "diagnostics.alpha must be positive, got {}",
                d.alpha
            ));
        }
        if d.k_samples == 0 {
            return bad("diagnostics.k_samples must be positive".into());
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                n_train,
                n_test,
                classes,
                dim,
            } => {
                if *classes == 0 || *dim == 0 || *n_train < *classes || *n_test == 0 {
                    return bad(
                        "synthetic dataset needs n_train >= classes >= 1, n_test >= 1, dim >= 1"
                            .into(),
                    );
                }
            }
            DatasetConfig::Idx {
                images,
                labels,
                n_train,
                n_test,
            } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(Error::MissingFile(p.clone()));
                    }
                }
                if *n_train == 0 || *n_test == 0 {
                    return bad("idx dataset needs positive n_train and n_test".into());
                }
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(&self.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"kind": "synthetic", "n_train": 20, "n_test": 10, "classes": 2, "dim": 3},
        "architecture": [{"kind": "affine", "inputs": 3, "outputs": 2}],
        "stage1": {"epochs": 1, "lr": 0.1},
        "simulation": {"steps": 10}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.conversion.scheme, Scheme::Direct);
        assert_eq!(c.diagnostics.alpha, DEFAULT_ALPHA);
        assert_eq!(c.stage1.lambda, 0.5);
        assert_eq!(c.output_dir(), PathBuf::from("out/experiment"));
    }

    #[test]
    fn unknown_field_is_config_error() {
        let text = MINIMAL
            .replace("\"seed_typo\"", "")
            .replacen('{', "{\"sede\": 1,", 1);
        assert!(matches!(
            ExperimentConfig::from_json(&text, Path::new(".")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_idx_file_names_the_path() {
        let text = MINIMAL.replace(
            r#"{"kind": "synthetic", "n_train": 20, "n_test": 10, "classes": 2, "dim": 3}"#,
            r#"{"kind": "idx", "images": "nowhere/img.idx", "labels": "nowhere/lab.idx", "n_train": 5, "n_test": 5}"#,
        );
        match ExperimentConfig::from_json(&text, Path::new("/tmp")) {
            Err(Error::MissingFile(p)) => assert_eq!(p, PathBuf::from("/tmp/nowhere/img.idx")),
            other => panic!("{other:?}"),
        }
    }
}
