//! Experiment configuration: one TOML file with a table per concern.

use std::path::{Path, PathBuf};

use bvad_core::dataset::SynthConfig;
use bvad_core::tsne::TsneConfig;
use bvad_core::{DatasetSplit, ModelSpec, ScoringConfig, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `train/normal`, `val/normal`, `test/normal` and
    /// `test/abnormal`. When absent the synthetic fixture is generated.
    pub dataset_dir: Option<PathBuf>,
    pub synth_seed: u64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            synth_seed: 7,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualizeConfig {
    pub restarts: usize,
    /// Columns per class in the reconstruction grid.
    pub grid_per_class: usize,
    pub tsne: TsneConfig,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self {
            restarts: 100,
            grid_per_class: 4,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. Run `r` trains with `seed + r`.
    pub seed: u64,
    /// Independent trainings per configuration.
    pub runs: usize,
    /// Default output root when neither `--out` nor `BVAD_OUT` is given.
    pub output_dir: PathBuf,
    /// β values trained by `sweep-beta`.
    pub sweep_betas: Vec<f64>,
    /// Snapshot a checkpoint every this many epochs; 0 keeps only best and final.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub training: TrainingConfig,
    pub scoring: ScoringConfig,
    pub visualize: VisualizeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 1,
            output_dir: PathBuf::from("runs"),
            sweep_betas: bvad_core::evaluation::DEFAULT_BETA_SWEEP.to_vec(),
            checkpoint_every: 10,
            data: DataConfig::default(),
            model: ModelSpec::default(),
            training: TrainingConfig::default(),
            scoring: ScoringConfig::default(),
            visualize: VisualizeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Configuration from `--config`, or defaults.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let field = |name: &str, e: bvad_core::Error| CliError::Config(format!("[{name}] {e}"));
        self.model.validate().map_err(|e| field("model", e))?;
        self.training.validate().map_err(|e| field("training", e))?;
        self.scoring.validate().map_err(|e| field("scoring", e))?;
        if self.data.dataset_dir.is_none() {
            self.data
                .synth
                .validate()
                .map_err(|e| field("data.synth", e))?;
        }
        if self.runs == 0 {
            return Err(CliError::Config("runs must be >= 1".into()).into());
        }
        if self.visualize.restarts == 0 {
            return Err(CliError::Config("visualize.restarts must be >= 1".into()).into());
        }
        if self.sweep_betas.is_empty()
            || self
                .sweep_betas
                .iter()
                .any(|b| !(*b >= 0.0 && b.is_finite()))
        {
            return Err(
                CliError::Config("sweep_betas must be a non-empty list of β >= 0".into()).into(),
            );
        }
        if let Some(dir) = &self.data.dataset_dir {
            if !dir.is_dir() {
                return Err(CliError::Config(format!(
                    "data.dataset_dir: `{}` does not exist or is not a directory",
                    dir.display()
                ))
                .into());
            }
        }
        Ok(())
    }

    /// Every field, defaults included, as TOML.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn dataset(&self) -> anyhow::Result<DatasetSplit> {
        Ok(match &self.data.dataset_dir {
            Some(dir) => bvad_core::load_split(dir)?,
            None => bvad_core::generate_synthetic(&self.data.synth, self.data.synth_seed),
        })
    }

    /// Training configuration of run `r`.
    pub fn training_for_run(&self, r: usize) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed.wrapping_add(r as u64),
            ..self.training.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.resolved_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[training]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 5\n[training]\nepochs = 3\n[model]\nkind = \"cae\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.batch_size, 64);
        assert_eq!(cfg.model.kind, bvad_core::ModelKind::Cae);
        assert_eq!(cfg.training_for_run(2).seed, 7);
    }

    #[test]
    fn missing_dataset_dir_names_the_key() {
        let cfg = ExperimentConfig::from_toml("[data]\ndataset_dir = \"/definitely/not/here\"\n")
            .unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("data.dataset_dir"));
        assert_eq!(crate::error::exit_code(&err), crate::error::exit::CONFIG);
    }
}
