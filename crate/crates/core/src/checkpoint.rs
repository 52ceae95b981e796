//! Single-file checkpoints: named tensors in a safetensors archive with a
//! JSON manifest stored in the archive metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lookup::FLATTEN_ORDER;
use crate::training::{ModelConfig, Stage, Stage1Models, Stage2Models};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub stage: Stage,
    pub iteration: u64,
    pub spatial_ratio: usize,
    pub temporal_ratio: usize,
    pub latent_dim: usize,
    pub config: ModelConfig,
    pub seed: u64,
    /// Stage II only: `(T, H, W)` the lookup position embeddings were sized for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flatten_order: Option<String>,
}

impl Manifest {
    pub fn new(stage: Stage, iteration: u64, config: &ModelConfig, seed: u64) -> Self {
        Self {
            version: MANIFEST_VERSION,
            stage,
            iteration,
            spatial_ratio: config.backbone.spatial_ratio,
            temporal_ratio: config.backbone.temporal_ratio,
            latent_dim: config.backbone.latent_dim,
            config: config.clone(),
            seed,
            resolution: None,
            flatten_order: None,
        }
    }

    /// Version, self-consistency, and for Stage II the flattening order.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let b = &self.config.backbone;
        if (b.spatial_ratio, b.temporal_ratio, b.latent_dim) != (self.spatial_ratio, self.temporal_ratio, self.latent_dim) {
            return Err(Error::Config(format!(
                "manifest ratios {}/{} and D {} disagree with its config ({}/{}, D {})",
                self.spatial_ratio, self.temporal_ratio, self.latent_dim, b.spatial_ratio, b.temporal_ratio, b.latent_dim
            )));
        }
        if let Some(order) = &self.flatten_order {
            if order != FLATTEN_ORDER {
                return Err(Error::Config(format!("flatten order {order:?}, this build uses {FLATTEN_ORDER:?}")));
            }
        }
        Ok(())
    }

    /// Rejects a checkpoint whose compression ratios differ from `expected`.
    pub fn check_ratios(&self, spatial: usize, temporal: usize) -> Result<()> {
        if (self.spatial_ratio, self.temporal_ratio) != (spatial, temporal) {
            return Err(Error::Config(format!(
                "checkpoint ratios spatial {} temporal {} do not match the configured {spatial}/{temporal}",
                self.spatial_ratio, self.temporal_ratio
            )));
        }
        Ok(())
    }
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save(path: &Path, manifest: &Manifest, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?)]);
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(meta))
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| ckpt_err(path, "no file name"))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(bytes: &[u8], path: &Path) -> Result<Manifest> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| ckpt_err(path, "archive has no manifest"))?;
    let manifest: Manifest = serde_json::from_str(raw).map_err(|e| ckpt_err(path, format!("bad manifest: {e}")))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load(path: &Path, device: &Device) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    if !path.is_file() {
        return Err(ckpt_err(path, "no such checkpoint file"));
    }
    let bytes = fs::read(path)?;
    let manifest = read_manifest(&bytes, path)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| ckpt_err(path, e.to_string()))?
        .into_iter()
        .collect();
    Ok((manifest, tensors))
}

/// SHA-256 of the file bytes, for run manifests.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn save_stage1(path: &Path, models: &Stage1Models, iteration: u64, seed: u64, extra: BTreeMap<String, Tensor>) -> Result<()> {
    let mut tensors = models.tensors();
    tensors.extend(extra);
    save(path, &Manifest::new(Stage::I, iteration, &models.config, seed), &tensors)
}

pub fn save_stage2(path: &Path, models: &Stage2Models, iteration: u64, seed: u64, extra: BTreeMap<String, Tensor>) -> Result<()> {
    let mut m = Manifest::new(Stage::II, iteration, &models.config, seed);
    m.resolution = Some(models.resolution);
    m.flatten_order = Some(FLATTEN_ORDER.to_string());
    let mut tensors = models.tensors();
    tensors.extend(extra);
    save(path, &m, &tensors)
}

/// Restores Stage-I models. `expected` is the backbone the caller is
/// configured for, when it has one.
pub fn load_stage1(
    path: &Path,
    expected: Option<&ModelConfig>,
    extractor_channels: &[usize],
    device: &Device,
    dtype: candle_core::DType,
) -> Result<(Manifest, Stage1Models)> {
    let (manifest, tensors) = load(path, device)?;
    if let Some(cfg) = expected {
        manifest.check_ratios(cfg.backbone.spatial_ratio, cfg.backbone.temporal_ratio)?;
    }
    let models = Stage1Models::new(&manifest.config, extractor_channels, manifest.seed, device, dtype)?;
    models.load(&tensors).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok((manifest, models))
}

pub fn load_stage2(
    path: &Path,
    expected: Option<&ModelConfig>,
    device: &Device,
    dtype: candle_core::DType,
) -> Result<(Manifest, Stage2Models)> {
    let (manifest, tensors) = load(path, device)?;
    if manifest.stage != Stage::II {
        return Err(ckpt_err(path, "not a stage II checkpoint"));
    }
    if let Some(cfg) = expected {
        manifest.check_ratios(cfg.backbone.spatial_ratio, cfg.backbone.temporal_ratio)?;
    }
    let resolution = manifest
        .resolution
        .ok_or_else(|| ckpt_err(path, "stage II manifest lacks the training resolution"))?;
    // Heads are not part of a stage II archive.
    let s1 = Stage1Models::new(&manifest.config, &[], manifest.seed, device, dtype)?;
    let models = Stage2Models::from_stage1(s1, resolution, manifest.seed)?;
    models.load(&tensors).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok((manifest, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lookup::LookupConfig;
    use crate::stcodec::BackboneConfig;
    use candle_core::DType;

    fn toy() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::toy(8),
            codebook_spatial: 16,
            codebook_temporal: 16,
            head_hidden: 8,
            lookup: LookupConfig {
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn stage1_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.safetensors");
        let cfg = toy();
        let a = Stage1Models::new(&cfg, &[4, 8], 3, &Device::Cpu, DType::F32).unwrap();
        save_stage1(&path, &a, 17, 3, BTreeMap::new()).unwrap();
        let (m, b) = load_stage1(&path, Some(&cfg), &[4, 8], &Device::Cpu, DType::F32).unwrap();
        assert_eq!(m.iteration, 17);
        assert_eq!(m.stage, Stage::I);
        let (ta, tb) = (a.tensors(), b.tensors());
        assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
        for (k, t) in &ta {
            let d = (t - &tb[k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0, "{k}");
        }
        assert!(!dir.path().join(".s1.safetensors.tmp").exists());
    }

    #[test]
    fn ratio_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.safetensors");
        let cfg = toy();
        let a = Stage1Models::new(&cfg, &[], 0, &Device::Cpu, DType::F32).unwrap();
        save_stage1(&path, &a, 0, 0, BTreeMap::new()).unwrap();
        let mut other = cfg.clone();
        other.backbone.temporal_ratio = 4;
        let err = load_stage1(&path, Some(&other), &[], &Device::Cpu, DType::F32).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn missing_file_and_bad_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope.safetensors");
        assert!(matches!(load(&path, &Device::Cpu), Err(Error::Checkpoint { .. })));
        fs::write(&path, b"not an archive").unwrap();
        assert!(matches!(load(&path, &Device::Cpu), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn stage1_archive_is_not_stage2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.safetensors");
        let a = Stage1Models::new(&toy(), &[], 0, &Device::Cpu, DType::F32).unwrap();
        save_stage1(&path, &a, 0, 0, BTreeMap::new()).unwrap();
        assert!(load_stage2(&path, None, &Device::Cpu, DType::F32).is_err());
    }

    #[test]
    fn stage2_round_trip_keeps_frozen_parts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s2.safetensors");
        let s1 = Stage1Models::new(&toy(), &[], 5, &Device::Cpu, DType::F32).unwrap();
        let a = Stage2Models::from_stage1(s1, [4, 16, 16], 5).unwrap();
        save_stage2(&path, &a, 9, 5, BTreeMap::new()).unwrap();
        let (m, b) = load_stage2(&path, None, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(m.resolution, Some([4, 16, 16]));
        assert_eq!(m.flatten_order.as_deref(), Some(FLATTEN_ORDER));
        assert_eq!(a.frozen_checksums().unwrap(), b.frozen_checksums().unwrap());
    }
}
