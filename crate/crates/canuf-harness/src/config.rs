//! Experiment configuration: a TOML file in which every training constant,
//! loss weight, and ablation toggle is a named, defaulted key.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub constraints: ConstraintConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub training: TrainingConfig,
    pub extraction: ExtractionConfig,
    pub ablation: AblationConfig,
    pub harness: HarnessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            constraints: ConstraintConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            training: TrainingConfig::default(),
            extraction: ExtractionConfig::default(),
            ablation: AblationConfig::default(),
            harness: HarnessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// `synthetic` or `csv`.
    pub source: String,
    /// CSV with a header: feature columns named `x*`, target columns `y*`,
    /// optional `weight` column.
    pub csv_path: Option<PathBuf>,
    /// Synthetic generator id: `constrained-linear`, `constrained-quadratic`,
    /// `conservation-sum`, or `misspecified-shift`.
    pub generator: String,
    pub n_samples: usize,
    pub noise: f64,
    /// Distribution-shift severity s ∈ [0,1] applied to evaluation data.
    pub shift_severity: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: "synthetic".to_string(),
            csv_path: None,
            generator: "conservation-sum".to_string(),
            n_samples: 512,
            noise: 0.05,
            shift_severity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Manual constraint DSL file.
    pub file: Option<PathBuf>,
    /// Knowledge-record file (JSONL) for extraction.
    pub knowledge: Option<PathBuf>,
    /// Template library (JSON) for extraction.
    pub templates: Option<PathBuf>,
    /// Gold constraint DSL file for extraction metrics.
    pub gold: Option<PathBuf>,
    /// Explanation template library (JSON); built-in defaults when absent.
    pub explanation_templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths (the paper-scale default is four 256-unit layers;
    /// synthetic tasks use smaller nets via config).
    pub hidden: Vec<usize>,
    pub prior_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![256, 256, 256, 256],
            prior_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau_bin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.1,
            gamma: 10.0,
            lambda: 0.5,
            tau_bin: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Monte Carlo samples per training step.
    pub n_mc_train: usize,
    /// Monte Carlo samples at prediction time.
    pub mc_samples: usize,
    /// Linearization refresh cadence, in optimizer iterations.
    pub relinearize_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 500,
            learning_rate: 1e-3,
            batch_size: 128,
            n_mc_train: 1,
            mc_samples: 50,
            relinearize_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub tau_score: f64,
    pub sim_threshold: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            tau_score: 0.9,
            sim_threshold: 0.85,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub use_csl: bool,
    pub use_adjustment: bool,
    pub use_calibration_loss: bool,
    pub use_bayesian: bool,
    pub use_extraction: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_csl: true,
            use_adjustment: true,
            use_calibration_loss: true,
            use_bayesian: true,
            use_extraction: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Base RNG seed.
    pub seed: u64,
    /// Number of seeds for multi-seed commands (ablate, shift-sweep).
    pub seeds: usize,
    /// Calibration bins M.
    pub bins: usize,
    /// Shift-sweep severity grid.
    pub severities: Vec<f64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seed: 0,
            seeds: 5,
            bins: 10,
            severities: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("bad config {}", path.display()))?;
        cfg.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    /// Paths are resolved relative to the config file location; they must
    /// exist at load time.
    pub fn validate(&self, base: &Path) -> Result<()> {
        match self.dataset.source.as_str() {
            "synthetic" => {
                let known = [
                    "constrained-linear",
                    "constrained-quadratic",
                    "conservation-sum",
                    "misspecified-shift",
                ];
                if !known.contains(&self.dataset.generator.as_str()) {
                    bail!("unknown synthetic generator `{}`", self.dataset.generator);
                }
            }
            "csv" => {
                if self.dataset.csv_path.is_none() {
                    bail!("dataset.source = \"csv\" requires dataset.csv_path");
                }
            }
            other => bail!("unknown dataset source `{other}`"),
        }
        for p in [
            &self.dataset.csv_path,
            &self.constraints.file,
            &self.constraints.knowledge,
            &self.constraints.templates,
            &self.constraints.gold,
            &self.constraints.explanation_templates,
        ]
        .into_iter()
        .flatten()
        {
            let resolved = if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            };
            if !resolved.exists() {
                bail!("referenced path does not exist: {}", resolved.display());
            }
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            bail!("training.batch_size and training.epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.extraction.tau_score) {
            bail!("extraction.tau_score must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.extraction.sim_threshold) {
            bail!("extraction.sim_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    /// Resolve a configured path against the config file's directory.
    pub fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_toml() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.training.epochs, 500);
        assert_eq!(cfg.training.batch_size, 128);
        assert_eq!(cfg.training.learning_rate, 1e-3);
        assert_eq!(cfg.loss.alpha, 1.0);
        assert_eq!(cfg.loss.beta, 0.1);
        assert_eq!(cfg.loss.gamma, 10.0);
        assert_eq!(cfg.loss.lambda, 0.5);
        assert_eq!(cfg.extraction.sim_threshold, 0.85);
        assert_eq!(cfg.harness.seeds, 5);
        assert!(cfg.ablation.use_csl);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[training]\nepochz = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn unknown_generator_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.generator = "nope".to_string();
        assert!(cfg.validate(Path::new(".")).is_err());
    }
}
