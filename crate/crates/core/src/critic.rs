//! Discriminator: a frozen multi-scale feature network followed by small
//! trainable heads, one per feature scale.

use std::fmt::Debug;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conv::conv2d;
use crate::error::{Error, Result};
use crate::layers::{softplus, Linear};
use crate::params::ParamStore;
use crate::video::VideoTensor;

/// Per-frame multi-scale features. Implementations must be frozen: the same
/// input always yields the same output, and no parameters are trained.
pub trait FeatureExtractor: Debug + Send + Sync {
    /// `frames`: `(N, 3, H, W)` in `[0, 1]`. Returns one `(N, C_k, h_k, w_k)`
    /// tensor per scale.
    fn extract(&self, frames: &Tensor) -> Result<Vec<Tensor>>;

    /// Channel count of each scale.
    fn channels(&self) -> Vec<usize>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    /// Stem kernel size and stride, i.e. the patch size of the first scale.
    pub patch: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            patch: 14,
            widths: vec![32, 64, 128],
            seed: 0x5eed,
        }
    }
}

/// Where a feature extractor's weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Safetensors file with pretrained pyramid weights.
    pub weights: Option<PathBuf>,
    /// Use seeded random weights when `weights` is absent.
    pub allow_fallback: bool,
    pub pyramid: PyramidConfig,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            weights: None,
            allow_fallback: true,
            pyramid: PyramidConfig::default(),
        }
    }
}

/// Patchify stem followed by stride-2 convolutions; each stage output is one scale.
#[derive(Debug, Clone)]
pub struct FrozenPyramid {
    patch: usize,
    convs: Vec<(Tensor, Tensor)>,
}

impl FrozenPyramid {
    pub fn random(cfg: &PyramidConfig, device: &Device, dtype: DType) -> Result<Self> {
        if cfg.patch == 0 || cfg.widths.is_empty() {
            return Err(Error::Config("pyramid needs a positive patch size and at least one scale".into()));
        }
        let mut store = ParamStore::new(cfg.seed, device, dtype);
        let mut root = store.root();
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.widths.iter().enumerate() {
            let k = if i == 0 { cfg.patch } else { 3 };
            let fan_in = (c_in * k * k) as f64;
            let mut init = root.push(&format!("levels.{i}"));
            let w = init.normal("weight", &[c_out, c_in, k, k], (2.0 / fan_in).sqrt())?;
            let b = init.constant("bias", &[c_out], 0.0)?;
            convs.push((w.detach(), b.detach()));
            c_in = c_out;
        }
        Ok(Self {
            patch: cfg.patch,
            convs,
        })
    }

    /// Loads `levels.{i}.weight` / `levels.{i}.bias` from a safetensors file.
    pub fn from_safetensors(path: &std::path::Path, cfg: &PyramidConfig, device: &Device, dtype: DType) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)?;
        let mut convs = Vec::new();
        for i in 0..cfg.widths.len() {
            let get = |name: &str| {
                tensors
                    .get(&format!("levels.{i}.{name}"))
                    .ok_or_else(|| Error::Config(format!("{}: missing levels.{i}.{name}", path.display())))
                    .and_then(|t| Ok(t.to_dtype(dtype)?))
            };
            convs.push((get("weight")?, get("bias")?));
        }
        Ok(Self {
            patch: cfg.patch,
            convs,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }
}

impl FeatureExtractor for FrozenPyramid {
    fn extract(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = frames.affine(4.0, -2.0)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, (w, b)) in self.convs.iter().enumerate() {
            let (stride, pad) = if i == 0 { (self.patch, 0) } else { (2, 1) };
            let c = w.dim(0)?;
            let y = conv2d(&x, w, pad, stride)?.broadcast_add(&b.reshape((1, c, 1, 1))?)?;
            x = y.maximum(&(&y * 0.2)?)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    fn channels(&self) -> Vec<usize> {
        self.convs.iter().map(|(w, _)| w.dim(0).unwrap_or(0)).collect()
    }
}

pub fn load_extractor(cfg: &ExtractorConfig, device: &Device, dtype: DType) -> Result<Box<dyn FeatureExtractor>> {
    match &cfg.weights {
        Some(path) => Ok(Box::new(FrozenPyramid::from_safetensors(path, &cfg.pyramid, device, dtype)?)),
        None if cfg.allow_fallback => Ok(Box::new(FrozenPyramid::random(&cfg.pyramid, device, dtype)?)),
        None => Err(Error::Config(
            "no feature-extractor weights configured and the random fallback is disabled".into(),
        )),
    }
}

/// Features of every frame of a clip, one tensor per scale with the frame axis first.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub scales: Vec<Tensor>,
}

impl FeatureStack {
    pub fn frames(&self) -> usize {
        self.scales.first().map(|t| t.dim(0).unwrap_or(0)).unwrap_or(0)
    }
}

pub fn extract_features(video: &VideoTensor, extractor: &dyn FeatureExtractor, device: &Device, dtype: DType) -> Result<FeatureStack> {
    let x = video.to_tensor(device, dtype)?.squeeze(0)?;
    Ok(FeatureStack {
        scales: extractor.extract(&x)?,
    })
}

#[derive(Debug, Clone)]
struct Head {
    hidden: Linear,
    out: Linear,
}

impl Head {
    /// Mean response per batch element of `(N, C, h, w)` features, `N = B·T`.
    fn forward(&self, feats: &Tensor, batch: usize) -> Result<Tensor> {
        let x = feats.permute((0, 2, 3, 1))?;
        let h = self.hidden.forward(&x)?;
        let h = h.maximum(&(&h * 0.2)?)?;
        let y = self.out.forward(&h)?;
        Ok(y.reshape((batch, ()))?.mean(1)?)
    }
}

/// `K` trainable heads, head `k` reading feature scale `k`.
#[derive(Debug)]
pub struct HeadEnsemble {
    store: ParamStore,
    heads: Vec<Head>,
}

impl HeadEnsemble {
    pub fn new(channels: &[usize], hidden: usize, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        Self::build(channels, hidden, seed, device, dtype, false)
    }

    /// Every weight zero: all scores are exactly 0.
    pub fn zeros(channels: &[usize], hidden: usize, device: &Device, dtype: DType) -> Result<Self> {
        Self::build(channels, hidden, 0, device, dtype, true)
    }

    fn build(channels: &[usize], hidden: usize, seed: u64, device: &Device, dtype: DType, zero: bool) -> Result<Self> {
        let mut store = ParamStore::new(seed, device, dtype);
        let mut root = store.root();
        let mut heads = Vec::new();
        for (k, &c) in channels.iter().enumerate() {
            let mut init = root.push(&k.to_string());
            let head = if zero {
                Head {
                    hidden: Linear::zeros(&mut init.push("hidden"), c, hidden)?,
                    out: Linear::zeros(&mut init.push("out"), hidden, 1)?,
                }
            } else {
                Head {
                    hidden: Linear::new(&mut init.push("hidden"), c, hidden)?,
                    out: Linear::new(&mut init.push("out"), hidden, 1)?,
                }
            };
            heads.push(head);
        }
        Ok(Self { store, heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Per-head mean responses, each of shape `(B,)`.
    pub fn responses(&self, clips: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Vec<Tensor>> {
        let (b, t, c, h, w) = clips.dims5()?;
        let feats = extractor.extract(&clips.reshape((b * t, c, h, w))?)?;
        self.feature_responses(&feats, b)
    }

    /// Same as [`HeadEnsemble::responses`] on features already extracted
    /// from `B·T` frames.
    pub fn feature_responses(&self, feats: &[Tensor], batch: usize) -> Result<Vec<Tensor>> {
        if feats.len() < self.heads.len() {
            return Err(Error::Config(format!(
                "{} heads but the extractor yields only {} scales",
                self.heads.len(),
                feats.len()
            )));
        }
        self.heads
            .iter()
            .zip(feats)
            .map(|(head, f)| head.forward(f, batch))
            .collect()
    }

    /// Score per clip: the negated sum over heads of each head's mean
    /// response over frames and positions. Shape `(B,)`.
    pub fn score(&self, clips: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
        let b = clips.dim(0)?;
        let (_, t, c, h, w) = clips.dims5()?;
        let feats = extractor.extract(&clips.reshape((b * t, c, h, w))?)?;
        self.score_features(&feats, b)
    }

    pub fn score_features(&self, feats: &[Tensor], batch: usize) -> Result<Tensor> {
        let responses = self.feature_responses(feats, batch)?;
        let total = Tensor::stack(&responses, 0)?.sum(0)?;
        Ok(total.neg()?)
    }
}

/// Scalar discriminator score of a single clip.
pub fn discriminate(video: &VideoTensor, heads: &HeadEnsemble, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let x = video.to_tensor(heads.store.device(), heads.store.dtype())?;
    let s = heads.score(&x, extractor)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(s[0])
}

#[derive(Debug, Clone)]
pub struct AdversarialLosses {
    /// `−log σ(D(fake))`, averaged over clips.
    pub generator: Tensor,
    /// `−[log σ(D(real)) + log(1 − σ(D(fake)))]`, averaged over clips.
    pub discriminator: Tensor,
}

/// Logistic-squashed adversarial losses from raw discriminator scores.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor) -> Result<AdversarialLosses> {
    for (name, s) in [("real", real), ("fake", fake)] {
        let v = s.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{name} discriminator scores {v:?}")));
        }
    }
    let generator = softplus(&fake.neg()?)?.mean_all()?;
    let discriminator = (softplus(&real.neg()?)?.mean_all()? + softplus(fake)?.mean_all()?)?;
    Ok(AdversarialLosses {
        generator,
        discriminator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{face_clip, ClipSpec};

    fn small_pyramid() -> FrozenPyramid {
        let cfg = PyramidConfig {
            patch: 8,
            widths: vec![8, 8, 8],
            seed: 1,
        };
        FrozenPyramid::random(&cfg, &Device::Cpu, DType::F32).unwrap()
    }

    #[test]
    fn features_are_frozen_and_per_frame() {
        let p = small_pyramid();
        let clip = face_clip(&ClipSpec::toy(), 2);
        let a = extract_features(&clip, &p, &Device::Cpu, DType::F32).unwrap();
        let b = extract_features(&clip, &p, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(a.frames(), 8);
        for (x, y) in a.scales.iter().zip(&b.scales) {
            let x = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn patch_grid_follows_patch_size() {
        let p = FrozenPyramid::random(&PyramidConfig::default(), &Device::Cpu, DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 224, 224), DType::F32, &Device::Cpu).unwrap();
        let f = p.extract(&x).unwrap();
        assert_eq!(f[0].dims(), &[1, 32, 16, 16]);
        assert_eq!(f[1].dims(), &[1, 64, 8, 8]);
    }

    #[test]
    fn missing_weights_without_fallback_is_config_error() {
        let cfg = ExtractorConfig {
            allow_fallback: false,
            ..Default::default()
        };
        assert!(matches!(load_extractor(&cfg, &Device::Cpu, DType::F32), Err(Error::Config(_))));
    }

    #[test]
    fn zero_heads_score_zero() {
        let p = small_pyramid();
        let heads = HeadEnsemble::zeros(&p.channels(), 16, &Device::Cpu, DType::F32).unwrap();
        let s = discriminate(&face_clip(&ClipSpec::toy(), 5), &heads, &p).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn duplicated_head_doubles_sum() {
        let p = small_pyramid();
        let one = HeadEnsemble::new(&p.channels()[..1], 16, 9, &Device::Cpu, DType::F32).unwrap();
        let two = HeadEnsemble::new(&[8, 8], 16, 10, &Device::Cpu, DType::F32).unwrap();
        let src = one.params().tensors("");
        let mut dup = src.clone();
        for (k, v) in &src {
            dup.insert(k.replacen("0.", "1.", 1), v.clone());
        }
        two.params().load(&dup, "").unwrap();
        // Both heads of `two` read scale 0 through this extractor view.
        #[derive(Debug)]
        struct FirstScaleTwice(FrozenPyramid);
        impl FeatureExtractor for FirstScaleTwice {
            fn extract(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
                let f = self.0.extract(frames)?;
                Ok(vec![f[0].clone(), f[0].clone()])
            }
            fn channels(&self) -> Vec<usize> {
                vec![8, 8]
            }
        }
        let clip = face_clip(&ClipSpec::toy(), 6);
        let s1 = discriminate(&clip, &one, &p).unwrap();
        let s2 = discriminate(&clip, &two, &FirstScaleTwice(p.clone())).unwrap();
        assert!((s2 - 2.0 * s1).abs() < 1e-5 * s1.abs().max(1.0), "{s1} {s2}");
    }

    #[test]
    fn symmetric_scores_give_two_log_two() {
        let z = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let l = adversarial_losses(&z, &z).unwrap();
        let d = l.discriminator.to_scalar::<f64>().unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let strong = adversarial_losses(
            &Tensor::new(&[40.0f64], &Device::Cpu).unwrap(),
            &Tensor::new(&[-40.0f64], &Device::Cpu).unwrap(),
        )
        .unwrap();
        assert!(strong.discriminator.to_scalar::<f64>().unwrap() < 1e-15);
    }

    #[test]
    fn non_finite_scores_rejected() {
        let bad = Tensor::new(&[f64::NAN], &Device::Cpu).unwrap();
        let ok = Tensor::new(&[0.0f64], &Device::Cpu).unwrap();
        assert!(matches!(adversarial_losses(&bad, &ok), Err(Error::NonFinite(_))));
    }
}
