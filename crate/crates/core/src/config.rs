//! Engine settings, optionally read from `<data_root>/config.json`.

use crate::classifier::{HeadHyper, DEFAULT_THETA};
use crate::enrollment::Augment;
use crate::error::PipelineError;
use crate::haar::DetectParams;
use crate::neural::LayerSpec;
use crate::siamese::{default_embedder_spec, SiameseHyper, DEFAULT_CHIP_SIDE};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Samples required before a person can be finalized.
    pub k_min: u64,
    pub chip_side: u32,
    pub detect: DetectParams,
    pub nms_iou: f64,
    /// Minimum top probability for a named prediction.
    pub theta: f64,
    /// Default seconds between counted sightings of one person.
    pub debounce_s: u64,
    pub embedder_spec: Vec<LayerSpec>,
    pub siamese: SiameseHyper,
    pub head: HeadHyper,
    /// Seed for drawing cross-person training pairs and augmentations.
    pub pair_seed: u64,
    pub augment: Augment,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            k_min: 50,
            chip_side: DEFAULT_CHIP_SIDE,
            detect: DetectParams::default(),
            nms_iou: 0.3,
            theta: DEFAULT_THETA,
            debounce_s: 30,
            embedder_spec: default_embedder_spec(),
            siamese: SiameseHyper::default(),
            head: HeadHyper::default(),
            pair_seed: 7,
            augment: Augment::default(),
        }
    }
}

impl EngineConfig {
    /// Reads `config.json` under `root`, or returns defaults when absent.
    pub fn load(root: &Path) -> Result<Self, PipelineError> {
        match std::fs::read(root.join(CONFIG_FILE)) {
            Ok(bytes) => {
                let cfg: EngineConfig = serde_json::from_slice(&bytes)?;
                cfg.validate()?;
                Ok(cfg)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(EngineConfig::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidInput(m.to_string()));
        if self.chip_side == 0 {
            return bad("chip_side must be positive");
        }
        if !(self.detect.scale_factor > 1.0) || !(self.detect.step_fraction > 0.0 && self.detect.step_fraction <= 1.0) {
            return bad("detect.scale_factor must exceed 1 and detect.step_fraction lie in (0, 1]");
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad("nms_iou must lie in (0, 1)");
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad("theta must lie in (0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(EngineConfig::load(dir.path()).unwrap(), EngineConfig::default());
    }

    #[test]
    fn partial_file_overrides_fields() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(CONFIG_FILE), r#"{"k_min": 5, "detect": {"min_size": 30}}"#).unwrap();
        let cfg = EngineConfig::load(dir.path()).unwrap();
        assert_eq!(cfg.k_min, 5);
        assert_eq!(cfg.detect.min_size, 30);
        assert_eq!(cfg.detect.scale_factor, 1.2);
        assert_eq!(cfg.chip_side, 160);
    }

    #[test]
    fn rejects_bad_theta() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(CONFIG_FILE), r#"{"theta": 1.5}"#).unwrap();
        assert!(EngineConfig::load(dir.path()).is_err());
    }
}
