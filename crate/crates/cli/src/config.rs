use std::fs;
use std::path::{Path, PathBuf};

use bsce_core::data::{DatasetSpec, Split};
use bsce_core::losses::LossKind;
use bsce_core::trainer::TrainConfig;
use bsce_core::tta::TtaConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One run: every section is optional and falls back to its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub sweep: SweepConfig,
    pub io: IoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
    /// Split scored by eval, tta and ensemble.
    pub split: Split,
    /// Run each ensemble member through TTA before voting.
    pub ensemble_tta: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            losses: vec![LossKind::Ce, LossKind::Bce, LossKind::Sce, LossKind::Bsce],
            seeds: (0..5).collect(),
            split: Split::Test,
            ensemble_tta: false,
        }
    }
}

/// Relative paths are resolved against the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Checkpoints voted by `ensemble`; empty means just `checkpoint`.
    pub ensemble: Vec<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
            dataset: "dataset.bin".into(),
            checkpoint: "model.ckpt".into(),
            ensemble: Vec::new(),
        }
    }
}

impl IoConfig {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.out_dir.join(path)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.tta.validate()?;
        if self.train.model.input_side > self.dataset.image_side {
            return Err(CliError::Config(format!(
                "train.model.input_side {} exceeds dataset.image_side {}",
                self.train.model.input_side, self.dataset.image_side
            )));
        }
        if self.sweep.losses.is_empty() || self.sweep.seeds.is_empty() {
            return Err(CliError::Config(
                "sweep.losses and sweep.seeds must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.initial_lr, 0.01);
        assert_eq!(cfg.sweep.losses.len(), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"train": {"loss": {"kind": "sce"}}, "sweep": {"split": "val"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.loss.kind, LossKind::Sce);
        assert_eq!(cfg.train.loss.beta, 0.7);
        assert_eq!(cfg.sweep.split, Split::Val);
        assert_eq!(cfg.sweep.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for doc in [
            r#"{"extra": 1}"#,
            r#"{"train": {"momentum": 0.9}}"#,
            r#"{"train": {"model": {"depth": 2}}}"#,
            r#"{"io": {"outdir": "x"}}"#,
            r#"{"tta": {"sides": [1]}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn model_larger_than_images_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.model.input_side = 40;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
