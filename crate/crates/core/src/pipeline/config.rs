//! Declarative run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::extractor::FinetuneConfig;
use crate::metrics::LossWeights;
use crate::nerf::{FieldConfig, NerfTrainConfig, SamplingConfig};
use crate::nn::TrainConfig;
use crate::noise::{NoiseConfig, NoiseKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Directory holding `transforms_{train,val,test}.json`.
    pub root: PathBuf,
    pub downscale: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/scene"),
            downscale: 4,
        }
    }
}

/// Where the secret camera comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    /// Pose of a training frame.
    Frame(usize),
    /// Explicit camera-to-world matrix, row-major.
    Matrix([[f64; 4]; 4]),
}

/// Which training frames carry the watermark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedPolicy {
    /// The training frame nearest to the secret pose.
    Nearest,
    Indices(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecretConfig {
    pub pose: PoseSource,
    pub embed: EmbedPolicy,
    /// Rotations (degrees about the vertical axis) rendered as negatives
    /// when `finetune.lambda_neg` is positive.
    pub negative_angles: Vec<f64>,
}

impl Default for SecretConfig {
    fn default() -> Self {
        Self {
            pose: PoseSource::Frame(0),
            embed: EmbedPolicy::Nearest,
            negative_angles: vec![30.0, 90.0, 180.0, 270.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Embedder-only steps on the embedding loss before joint training.
    pub warmup_steps: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                batch_size: 2,
                ..TrainConfig::default()
            },
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerfConfig {
    #[serde(flatten)]
    pub train: NerfTrainConfig,
    /// Test-split views scored after training.
    pub eval_frames: usize,
    pub field: FieldConfig,
    pub sampling: SamplingConfig,
}

impl Default for NerfConfig {
    fn default() -> Self {
        Self {
            train: NerfTrainConfig::default(),
            eval_frames: 4,
            field: FieldConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Acceptance threshold on NC.
    pub tau: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { tau: 0.85 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub angles: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            angles: vec![0.0, 1.0, 3.0, 7.0, 10.0, 15.0, 30.0, 60.0, 90.0, 180.0, 300.0, 340.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kinds: Vec<NoiseKind>,
    /// Fine-tune the extractor on each retrained field's secret render.
    pub refit_extractor: bool,
    /// NeRF steps per attacked run; `None` uses the main NeRF schedule.
    pub nerf_steps: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kinds: NoiseKind::ATTACKS.to_vec(),
            refit_extractor: true,
            nerf_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output: PathBuf,
    /// Watermark image; the built-in pattern is used when absent.
    pub watermark: Option<PathBuf>,
    pub scene: SceneConfig,
    pub secret: SecretConfig,
    pub loss: LossWeights,
    pub noise: NoiseConfig,
    pub joint: JointConfig,
    pub nerf: NerfConfig,
    pub finetune: FinetuneConfig,
    pub verify: VerifyConfig,
    pub sweep: SweepConfig,
    pub attack: AttackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs/default"),
            watermark: None,
            scene: SceneConfig::default(),
            secret: SecretConfig::default(),
            loss: LossWeights::default(),
            noise: NoiseConfig::default(),
            joint: JointConfig::default(),
            nerf: NerfConfig::default(),
            finetune: FinetuneConfig::default(),
            verify: VerifyConfig::default(),
            sweep: SweepConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small networks and schedules sized for a single CPU core.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.nerf.field = FieldConfig::desk();
        cfg.nerf.sampling = SamplingConfig {
            n_coarse: 32,
            n_fine: 32,
            ..SamplingConfig::default()
        };
        cfg.nerf.train.train.batch_size = 256;
        cfg.nerf.train.train.steps = 5000;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene.downscale == 0 {
            return Err(Error::Config("scene.downscale must be at least 1".into()));
        }
        if !(self.verify.tau > 0.0 && self.verify.tau < 1.0) {
            return Err(Error::Config(format!("verify.tau must lie in (0, 1), got {}", self.verify.tau)));
        }
        if let PoseSource::Matrix(m) = &self.secret.pose {
            CameraPose::from_rows(*m).map_err(|e| Error::Config(format!("secret.pose: {e}")))?;
        }
        if let EmbedPolicy::Indices(v) = &self.secret.embed {
            if v.is_empty() {
                return Err(Error::Config("secret.embed indices must not be empty".into()));
            }
        }
        if self.sweep.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("sweep.angles must be finite".into()));
        }
        self.loss.validate()?;
        self.noise.validate()?;
        self.joint.train.validate("joint")?;
        self.nerf.train.validate()?;
        self.nerf.field.validate()?;
        self.nerf.sampling.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    /// Checks that every input path exists.
    pub fn check_inputs(&self) -> Result<()> {
        let transforms = self.scene.root.join("transforms_train.json");
        if !transforms.exists() {
            return Err(Error::Config(format!("scene file {} does not exist", transforms.display())));
        }
        if let Some(w) = &self.watermark {
            if !w.exists() {
                return Err(Error::Config(format!("watermark {} does not exist", w.display())));
            }
        }
        Ok(())
    }
}
