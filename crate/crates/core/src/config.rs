//! Run configuration: one TOML file per run.
//!
//! Every table may be omitted and falls back to the defaults documented on
//! each field. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::ExtractorConfig;
use crate::curator::CurationConfig;
use crate::degrade::{DegradationRanges, FlickerSpec};
use crate::error::{Error, Result};
use crate::training::{LossWeights, ModelConfig, OptimConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root: one subdirectory of `%06d.png` frames per video.
    pub root: PathBuf,
    /// Frames per training window; longer videos are chunked.
    pub clip_frames: usize,
    /// Videos held out for the final evaluation, taken from the end of the
    /// sorted video list.
    pub held_out: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            clip_frames: 24,
            held_out: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub iterations: u64,
    pub batch: usize,
    /// Frame size (square) clips are resized to.
    pub resolution: usize,
    pub checkpoint_every: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            iterations: 250_000,
            batch: 4,
            resolution: 256,
            checkpoint_every: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub iterations: u64,
    pub batch: usize,
    pub resolution: usize,
    pub checkpoint_every: u64,
    /// Trained Stage-I checkpoint; required by `train-stage2`.
    pub stage1_checkpoint: Option<PathBuf>,
    pub lr: f64,
    /// Leading share of iterations trained on noise-free degradations.
    pub noise_free_fraction: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            batch: 4,
            resolution: 512,
            checkpoint_every: 5_000,
            stage1_checkpoint: None,
            lr: 1e-4,
            noise_free_fraction: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecChoice {
    /// Deterministic in-process DCT codec.
    #[default]
    Proxy,
    /// libx264 through the binary named by `FACEVQ_FFMPEG` (or `ffmpeg`).
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub ranges: DegradationRanges,
    pub codec: CodecChoice,
    /// Flicker added on top of the degradation chain (de-flickering runs).
    pub flicker: Option<FlickerSpec>,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            ranges: DegradationRanges::default(),
            codec: CodecChoice::Proxy,
            flicker: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub degradation: DegradationConfig,
    /// Feature extractor shared by the perceptual loss and the critic.
    pub extractor: ExtractorConfig,
    pub curation: CurationConfig,
    /// Root under which run outputs are written.
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            degradation: DegradationConfig::default(),
            extractor: ExtractorConfig::default(),
            curation: CurationConfig::default(),
            output: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        // TOML integers are signed 64-bit.
        for (name, seed) in [("seed", self.seed), ("extractor.pyramid.seed", self.extractor.pyramid.seed)] {
            if seed > i64::MAX as u64 {
                return Err(Error::Config(format!("{name} {seed} exceeds {}", i64::MAX)));
            }
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.degradation.ranges.validate()?;
        if let Some(f) = &self.degradation.flicker {
            f.validate()?;
        }
        let b = &self.model.backbone;
        if self.data.clip_frames == 0 || self.data.clip_frames % b.temporal_ratio != 0 {
            return Err(Error::Config(format!(
                "data.clip_frames {} must be a positive multiple of the temporal ratio {}",
                self.data.clip_frames, b.temporal_ratio
            )));
        }
        for (name, res) in [("stage1", self.stage1.resolution), ("stage2", self.stage2.resolution)] {
            if res == 0 || res % b.spatial_ratio != 0 {
                return Err(Error::Config(format!(
                    "{name}.resolution {res} must be a positive multiple of the spatial ratio {}",
                    b.spatial_ratio
                )));
            }
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stage2.noise_free_fraction) {
            return Err(Error::Config("stage2.noise_free_fraction must lie in [0, 1]".into()));
        }
        if !(self.stage2.lr > 0.0) {
            return Err(Error::Config("stage2.lr must be > 0".into()));
        }
        Ok(())
    }

    /// Checks needed before Stage II can start.
    pub fn validate_stage2(&self) -> Result<&Path> {
        let p = self
            .stage2
            .stage1_checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("stage2.stage1_checkpoint is not set; train stage I first".into()))?;
        if !p.is_file() {
            return Err(Error::Config(format!("stage I checkpoint {} does not exist", p.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_echoes_model_configuration() {
        let c = RunConfig::default();
        assert_eq!(c.model.backbone.latent_dim, 256);
        assert_eq!(c.model.codebook_spatial, 1024);
        assert_eq!(c.model.codebook_temporal, 1024);
        assert_eq!(c.data.clip_frames, 24);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("version = 1\nbogus = 3\n").is_err());
        assert!(RunConfig::from_toml("version = 1\n[loss]\nbeta = 0.5\ngamma = 1.0\n").is_err());
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let c = RunConfig::from_toml("version = 1\nseed = 9\n[loss]\nbeta = 0.5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.loss.beta, 0.5);
        assert_eq!(c.loss.lambda_adv, 0.1);
    }

    #[test]
    fn version_and_weights_checked() {
        assert!(RunConfig::from_toml("version = 2\n").is_err());
        assert!(RunConfig::from_toml("version = 1\n[loss]\nbeta = -1.0\n").is_err());
    }

    #[test]
    fn oversized_seed_rejected() {
        let c = RunConfig {
            seed: u64::MAX,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage2_requires_checkpoint() {
        let c = RunConfig::default();
        assert!(matches!(c.validate_stage2(), Err(Error::Config(_))));
    }
}
