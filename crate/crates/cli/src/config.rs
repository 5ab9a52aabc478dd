use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tcam::cams::{CamMethod, ClassifierTrainConfig};
use tcam::data::manifest::Split;
use tcam::data::{SplitSpec, SynthConfig};
use tcam::decoder::TrainConfig;

/// Every knob of a run, as one document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub classifier: ClassifierSection,
    pub cam: CamMethod,
    pub decoder: TrainConfig,
    pub infer: InferConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing dataset: a directory holding `manifest.json`, or a
    /// YouTube-Objects style frame tree to ingest. Unset means synthetic
    /// data written by `gen-synth` into the run directory.
    pub root: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Used only when ingesting a frame tree.
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub train: ClassifierTrainConfig,
    /// Train on every `frame_stride`-th frame of each shot.
    pub frame_stride: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            train: ClassifierTrainConfig::default(),
            frame_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub split: Split,
    /// Fixed box threshold; unset selects it on the validation split.
    pub tau: Option<f32>,
    /// Predict every frame rather than only annotated ones.
    pub all_frames: bool,
    /// Also write PNG overlays of map, prediction and ground truth.
    pub overlays: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            tau: None,
            all_frames: false,
            overlays: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Hex SHA-256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn run_dir(&self, out: &Path) -> PathBuf {
        out.join(format!("{}-s{}", &self.hash()[..12], self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(root) = &self.data.root {
            if !root.exists() {
                bail!("data.root {} does not exist", root.display());
            }
        } else {
            self.data.synth.validate()?;
        }
        if self.classifier.frame_stride == 0 {
            bail!("classifier.frame_stride must be positive");
        }
        self.decoder.validate()?;
        if let Some(t) = self.infer.tau {
            if !(t > 0.0 && t < 1.0) {
                bail!("infer.tau must be in (0, 1)");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sed": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"decoder": {"nn": 2}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"decoder": {"n": 2}}"#).unwrap();
        assert_eq!(c.decoder.n, 2);
    }

    #[test]
    fn any_change_changes_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.decoder.loss.lambda_crf *= 2.0;
        let mut c = a.clone();
        c.seed = 1;
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn roundtrip() {
        let mut a = RunConfig::default();
        a.infer.tau = Some(0.3);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, back);
        assert_eq!(a.hash(), back.hash());
    }
}
