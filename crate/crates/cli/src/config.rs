use std::fs;
use std::path::{Path, PathBuf};

use lxfuse::gradcheck::StackCheck;
use lxfuse::harness::{ModelConfig, SceneConfig, ToyModel, TrainConfig};
use lxfuse_annotate::remote::RemoteConfig;
use lxfuse_annotate::PromptTemplates;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    /// External pairs replace the synthetic sets when given.
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 2000,
            eval_scenes: 250,
            train_seed: 1,
            eval_seed: 2,
            train_manifest: None,
            eval_manifest: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPreset {
    /// 24x24 tokens of width 1024 feeding a 7B decoder.
    #[default]
    Full,
    /// The `[model]` section with its own decoder as the base path.
    Run,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub preset: BenchPreset,
    pub text_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    pub backend: Backend,
    pub rounds: usize,
    pub fanout: usize,
    /// Chat endpoint used as generator and selector.
    pub chat: RemoteConfig,
    /// Similarity endpoint.
    pub scorer: RemoteConfig,
    pub prompts: PromptTemplates,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            rounds: 9,
            fanout: 3,
            chat: RemoteConfig::default(),
            scorer: RemoteConfig::default(),
            prompts: PromptTemplates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Evaluation workers; 0 uses every available core.
    pub threads: usize,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
    pub gradcheck: StackCheck,
    pub annotate: AnnotateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("runs/default"),
            threads: 0,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            bench: BenchConfig::default(),
            gradcheck: StackCheck::default(),
            annotate: AnnotateConfig::default(),
        }
    }
}

fn invalid(field: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("config field `{field}`: {detail}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns validated defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate().map_err(|e| invalid("scene", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        if !(0.0..=1.0).contains(&self.train.fog_gray) {
            return Err(invalid(
                "train.fog_gray",
                format!("{} is outside [0, 1]", self.train.fog_gray),
            ));
        }
        if (self.model.image_size, self.model.patch) != (self.scene.image_size, self.scene.patch) {
            return Err(invalid(
                "model.image_size / model.patch",
                format!(
                    "{}/{} must match scene {}/{}",
                    self.model.image_size, self.model.patch, self.scene.image_size, self.scene.patch
                ),
            ));
        }
        ToyModel::new(self.model.clone(), self.seed).map_err(|e| invalid("model", e))?;
        if self.data.train_manifest.is_none() && self.data.train_scenes == 0 {
            return Err(invalid("data.train_scenes", "must be positive"));
        }
        if self.data.eval_manifest.is_none() && self.data.eval_scenes == 0 {
            return Err(invalid("data.eval_scenes", "must be positive"));
        }
        if self.gradcheck.grid == 0 || self.gradcheck.d == 0 || !(self.gradcheck.tolerance > 0.0) {
            return Err(invalid("gradcheck", "grid, d and tolerance must be positive"));
        }
        if self.annotate.rounds == 0 || self.annotate.fanout == 0 {
            return Err(invalid("annotate.rounds / annotate.fanout", "must be positive"));
        }
        Ok(())
    }
}
