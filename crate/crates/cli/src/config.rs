//! The single JSON document that drives every subcommand.

use std::path::{Path, PathBuf};

use rapnet_core::data::{Subset, SyntheticSpec};
use rapnet_core::eval::EvalSettings;
use rapnet_core::model::ModelConfig;
use rapnet_core::postprocess::{NmsConfig, PemConfig, TagConfig};
use rapnet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSettings {
    pub k: usize,
    pub seed: u64,
}

impl Default for AnchorSettings {
    fn default() -> Self {
        AnchorSettings { k: 12, seed: 0 }
    }
}

/// Which optional post-processing stages run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSwitches {
    pub pem: bool,
    pub tag: bool,
}

impl Default for StageSwitches {
    fn default() -> Self {
        StageSwitches { pem: true, tag: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: SyntheticSpec,
    pub anchors: AnchorSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pem: PemConfig,
    pub nms: NmsConfig,
    pub tag: TagConfig,
    pub postprocess: StageSwitches,
    pub eval: EvalSettings,
    /// Subset scored by `eval`; `None` scores every annotated video.
    pub eval_subset: Option<Subset>,
    /// Root of the default file layout; see [`Layout`].
    pub work_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: SyntheticSpec::default(),
            anchors: AnchorSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pem: PemConfig::default(),
            nms: NmsConfig::default(),
            tag: TagConfig::default(),
            postprocess: StageSwitches::default(),
            eval: EvalSettings::default(),
            eval_subset: Some(Subset::Validation),
            work_dir: PathBuf::from("rapnet_run"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))
    }

    /// Checks every embedded section on its own terms.
    pub fn validate(&self) -> rapnet_core::Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.pem.validate()?;
        self.nms.validate()?;
        self.tag.validate()?;
        self.eval.validate()
    }

    /// Cross-section agreement needed before a model is built.
    pub fn validate_training(&self) -> Result<(), UsageError> {
        let m = &self.model;
        if self.anchors.k != m.levels * m.anchors_per_level {
            return Err(UsageError(format!(
                "anchors.k = {} but the model has {} levels × {} anchors",
                self.anchors.k, m.levels, m.anchors_per_level
            )));
        }
        if self.data.feature_dim != m.input_d {
            return Err(UsageError(format!(
                "data.feature_dim = {} but model.input_d = {}",
                self.data.feature_dim, m.input_d
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.work_dir.clone() }
    }
}

/// Default locations of every artifact under the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn annotations(&self) -> PathBuf {
        self.data_dir().join("annotations.json")
    }

    pub fn features(&self) -> PathBuf {
        self.data_dir().join("features")
    }

    pub fn anchors(&self) -> PathBuf {
        self.root.join("anchors.json")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model_dir().join("model.rapc")
    }

    pub fn infer_dir(&self) -> PathBuf {
        self.root.join("infer")
    }

    pub fn raw_proposals(&self) -> PathBuf {
        self.infer_dir().join("raw_proposals.json")
    }

    pub fn actionness(&self) -> PathBuf {
        self.infer_dir().join("actionness.json")
    }

    pub fn proposals(&self) -> PathBuf {
        self.root.join("proposals").join("proposals.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}
