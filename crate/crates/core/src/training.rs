//! Two-stage training loops and the inference path.
//!
//! Stage I learns the HQ encoder, decoder and both codebooks. Stage II
//! freezes the decoder and codebooks, then fits an LQ encoder and two lookup
//! transformers against indices produced by the frozen HQ path.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{adversarial_losses, FeatureExtractor, HeadEnsemble};
use crate::degrade::{degrade_video, flicker, sample_params, CodecMode, DegradationParams, DegradationRanges, FlickerSpec};
use crate::error::{Error, Result};
use crate::lookup::{
    assemble_quantized, cross_entropy_codes, predict_codes, stage2_code_loss, LookupConfig, LookupTransformer,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::checksum_tensors;
use crate::stcodec::{build_backbone, Backbone, BackboneConfig, LatentGrid, Role};
use crate::stquant::{
    code_loss, marginal_prior_kl, split_latents, st_lookup, straight_through, CodeIndexGrid, Codebook, CodebookKind,
};
use crate::video::{stack_clips, unstack_clips, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_adv: f64,
    pub lambda_ce: f64,
    /// Weight of each marginal prior KL term.
    pub lambda_kl: f64,
    /// Adversarial term on/off.
    pub adv: bool,
    /// Marginal prior KL terms on/off.
    pub kl: bool,
    /// Let the KL gradient reach the encoder; when false only the codebooks
    /// receive it.
    pub kl_latent_grad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.25,
            lambda_adv: 0.1,
            lambda_ce: 1.0,
            lambda_kl: 1.0,
            adv: true,
            kl: true,
            kl_latent_grad: true,
        }
    }
}

impl LossWeights {
    /// L1 + perceptual + code loss only.
    pub fn base() -> Self {
        Self {
            adv: false,
            kl: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lambda_adv", self.lambda_adv), ("lambda_ce", self.lambda_ce), ("lambda_kl", self.lambda_kl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Architecture shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub codebook_spatial: usize,
    pub codebook_temporal: usize,
    /// Frame distance used by the motion residual.
    pub residual_window: usize,
    /// Hidden width of each discriminator head.
    pub head_hidden: usize,
    pub lookup: LookupConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            codebook_spatial: 1024,
            codebook_temporal: 1024,
            residual_window: 1,
            head_hidden: 64,
            lookup: LookupConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.codebook_spatial < 2 || self.codebook_temporal < 2 {
            return Err(Error::Config("codebooks need at least 2 items".into()));
        }
        if self.residual_window == 0 {
            return Err(Error::Config("residual_window must be >= 1".into()));
        }
        let d = self.backbone.latent_dim;
        if self.lookup.heads == 0 || d % self.lookup.heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {d} is not divisible by lookup.heads {}",
                self.lookup.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
    /// Iteration from which the adversarial term and head updates run.
    pub disc_warmup: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            generator: AdamConfig::with_lr(1e-4),
            discriminator: AdamConfig::with_lr(4e-4),
            disc_warmup: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    I,
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NoiseFree,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementalSchedule {
    pub total_iterations: u64,
    /// Leading share of Stage II trained on noise-free degradations.
    pub noise_free_fraction: f64,
}

impl IncrementalSchedule {
    pub fn new(total_iterations: u64) -> Self {
        Self {
            total_iterations,
            noise_free_fraction: 0.4,
        }
    }

    pub fn switch_iteration(&self) -> u64 {
        (self.total_iterations as f64 * self.noise_free_fraction).round() as u64
    }
}

pub fn incremental_phase(iteration: u64, schedule: &IncrementalSchedule) -> Phase {
    if iteration < schedule.switch_iteration() {
        Phase::NoiseFree
    } else {
        Phase::Full
    }
}

/// Iteration counter and bookkeeping owned by one training process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub iteration: u64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

impl TrainState {
    pub fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            iteration: 0,
            seed,
            phase: match stage {
                Stage::I => None,
                Stage::II => Some(Phase::NoiseFree),
            },
        }
    }

    fn advance(&mut self) {
        self.iteration += 1;
    }

    /// Phases only move forward.
    pub fn set_phase(&mut self, phase: Phase) -> Result<()> {
        match self.phase {
            Some(cur) if phase < cur => Err(Error::Config(format!("phase cannot go back from {cur:?} to {phase:?}"))),
            _ => {
                self.phase = Some(phase);
                Ok(())
            }
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stage-I models: HQ encoder, decoder, codebooks, discriminator heads.
#[derive(Debug)]
pub struct Stage1Models {
    pub config: ModelConfig,
    pub encoder: Backbone,
    pub decoder: Backbone,
    pub spatial: Codebook,
    pub temporal: Codebook,
    pub heads: HeadEnsemble,
}

impl Stage1Models {
    pub fn new(
        config: &ModelConfig,
        extractor_channels: &[usize],
        seed: u64,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.latent_dim;
        Ok(Self {
            config: config.clone(),
            encoder: build_backbone(&config.backbone, Role::HqEncoder, seed, device, dtype)?,
            decoder: build_backbone(&config.backbone, Role::Decoder, seed.wrapping_add(1), device, dtype)?,
            spatial: Codebook::random(CodebookKind::Spatial, config.codebook_spatial, d, seed.wrapping_add(2), device, dtype)?,
            temporal: Codebook::random(CodebookKind::Temporal, config.codebook_temporal, d, seed.wrapping_add(3), device, dtype)?,
            heads: HeadEnsemble::new(extractor_channels, config.head_hidden, seed.wrapping_add(4), device, dtype)?,
        })
    }

    /// Every parameter under its checkpoint name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.encoder.params().tensors("encoder.hq.");
        out.extend(self.decoder.params().tensors("decoder."));
        out.insert("codebook.spatial".into(), self.spatial.items().detach());
        out.insert("codebook.temporal".into(), self.temporal.items().detach());
        out.extend(self.heads.params().tensors("critic.heads."));
        out
    }

    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.encoder.params().load(tensors, "encoder.hq.")?;
        self.decoder.params().load(tensors, "decoder.")?;
        for (key, cb) in [("codebook.spatial", &self.spatial), ("codebook.temporal", &self.temporal)] {
            let t = tensors
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing parameter {key}")))?;
            if t.dims() != cb.items().dims() {
                return Err(Error::Shape(format!("{key}: stored {:?}, model expects {:?}", t.dims(), cb.items().dims())));
            }
            cb.set(&t.to_dtype(cb.items().dtype())?)?;
        }
        self.heads.params().load(tensors, "critic.heads.")
    }

    fn generator_vars(&self) -> Vec<(String, candle_core::Var)> {
        let mut v = self.encoder.params().named_vars("encoder.hq.");
        v.extend(self.decoder.params().named_vars("decoder."));
        v.push(("codebook.spatial".into(), self.spatial.var().clone()));
        v.push(("codebook.temporal".into(), self.temporal.var().clone()));
        v
    }

    /// Encode, quantize, decode. Returns the raw (unclamped) reconstruction.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Reconstruction> {
        let z_h = self.encoder.encode_tensor(x)?;
        let lk = st_lookup(&z_h, &self.spatial, &self.temporal, self.config.residual_window)?;
        let z_st = straight_through(&z_h, &lk.z_q)?;
        let x_hat = self.decoder.decode_tensor(&z_st)?;
        Ok(Reconstruction {
            x_hat,
            z_h,
            z_q: lk.z_q,
            z_s: lk.z_s,
            z_t: lk.z_t,
            spatial: lk.spatial,
            temporal: lk.temporal,
        })
    }

    /// Codebook indices for clips, without gradients.
    pub fn indices(&self, clip: &VideoTensor) -> Result<(CodeIndexGrid, CodeIndexGrid)> {
        let z = self.encoder.encode(clip)?.detach();
        let lk = st_lookup(&z, &self.spatial, &self.temporal, self.config.residual_window)?;
        Ok((lk.spatial, lk.temporal))
    }

    pub fn autoencode(&self, clip: &VideoTensor) -> Result<VideoTensor> {
        let x = clip.to_tensor(self.encoder.params().device(), self.encoder.params().dtype())?;
        let r = self.reconstruct(&x)?;
        Ok(unstack_clips(&r.x_hat.detach(), clip.frame_rate)?.remove(0))
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub x_hat: Tensor,
    pub z_h: LatentGrid,
    pub z_q: LatentGrid,
    pub z_s: LatentGrid,
    pub z_t: LatentGrid,
    pub spatial: CodeIndexGrid,
    pub temporal: CodeIndexGrid,
}

/// Scalar terms of one Stage-I iteration. `total` is the generator objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub iteration: u64,
    pub l1: f64,
    pub perceptual: f64,
    pub code: f64,
    pub kl_spatial: f64,
    pub kl_temporal: f64,
    pub adv_generator: f64,
    pub adv_discriminator: f64,
    pub total: f64,
    /// Soft posterior utilization of each codebook on this batch.
    pub posterior_utilization: [f64; 2],
}

impl Stage1Report {
    fn check_finite(&self) -> Result<()> {
        let terms = [
            ("l1", self.l1),
            ("perceptual", self.perceptual),
            ("code", self.code),
            ("kl_spatial", self.kl_spatial),
            ("kl_temporal", self.kl_temporal),
            ("adv_generator", self.adv_generator),
            ("total", self.total),
        ];
        if terms.iter().all(|(_, v)| v.is_finite()) {
            return Ok(());
        }
        let dump: Vec<String> = terms.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
        Err(Error::NonFinite(format!(
            "stage I iteration {}: {}",
            self.iteration,
            dump.join(", ")
        )))
    }
}

/// Multi-scale unit-weight sum of mean squared feature differences.
pub fn perceptual_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} vs {} feature scales", real.len(), fake.len())));
    }
    let mut total = (real[0].broadcast_sub(&fake[0])?).sqr()?.mean_all()?;
    for (r, f) in real.iter().zip(fake).skip(1) {
        total = (total + (r - f)?.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

fn frames_of(x: &Tensor) -> Result<Tensor> {
    let (b, t, c, h, w) = x.dims5()?;
    Ok(x.reshape((b * t, c, h, w))?)
}

pub struct Stage1Trainer {
    pub models: Stage1Models,
    pub extractor: Box<dyn FeatureExtractor>,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub state: TrainState,
    gen_opt: Adam,
    disc_opt: Adam,
}

impl Stage1Trainer {
    pub fn new(
        models: Stage1Models,
        extractor: Box<dyn FeatureExtractor>,
        weights: LossWeights,
        optim: OptimConfig,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        let gen_opt = Adam::new(models.generator_vars(), optim.generator)?;
        let disc_opt = Adam::new(models.heads.params().named_vars("critic.heads."), optim.discriminator)?;
        Ok(Self {
            models,
            extractor,
            weights,
            optim,
            state: TrainState::new(Stage::I, seed),
            gen_opt,
            disc_opt,
        })
    }

    pub fn adversarial_active(&self) -> bool {
        self.weights.adv && self.state.iteration >= self.optim.disc_warmup
    }

    /// Forward pass and all loss terms without touching any parameter.
    /// Returns the generator objective, the discriminator objective (when
    /// active) and the report.
    pub fn losses(&self, batch: &[VideoTensor]) -> Result<(Tensor, Option<Tensor>, Stage1Report)> {
        let dev = self.models.encoder.params().device().clone();
        let dtype = self.models.encoder.params().dtype();
        let x = stack_clips(batch, &dev, dtype)?;
        let b = batch.len();
        let r = self.models.reconstruct(&x)?;

        let l1 = (&x - &r.x_hat)?.abs()?.mean_all()?;
        let real_feats: Vec<Tensor> = self
            .extractor
            .extract(&frames_of(&x)?)?
            .into_iter()
            .map(|t| t.detach())
            .collect();
        let fake_feats = self.extractor.extract(&frames_of(&r.x_hat)?)?;
        let per = perceptual_loss(&real_feats, &fake_feats)?;
        let code = code_loss(&r.z_h, &r.z_q, self.weights.beta)?;

        let mut total = ((&l1 + &per)? + &code)?;
        let mut report = Stage1Report {
            iteration: self.state.iteration,
            l1: scalar(&l1)?,
            perceptual: scalar(&per)?,
            code: scalar(&code)?,
            kl_spatial: 0.0,
            kl_temporal: 0.0,
            adv_generator: 0.0,
            adv_discriminator: 0.0,
            total: 0.0,
            posterior_utilization: [0.0; 2],
        };

        let (z_s, z_t) = if self.weights.kl_latent_grad {
            (r.z_s.clone(), r.z_t.clone())
        } else {
            (r.z_s.detach(), r.z_t.detach())
        };
        let kl_s = marginal_prior_kl(&z_s, &self.models.spatial)?;
        let kl_t = marginal_prior_kl(&z_t, &self.models.temporal)?;
        report.posterior_utilization = [kl_s.report.utilization, kl_t.report.utilization];
        if self.weights.kl {
            report.kl_spatial = scalar(&kl_s.loss)?;
            report.kl_temporal = scalar(&kl_t.loss)?;
            total = (total + ((kl_s.loss + kl_t.loss)? * self.weights.lambda_kl)?)?;
        }

        let mut disc = None;
        if self.adversarial_active() {
            let fake_score = self.models.heads.score_features(&fake_feats, b)?;
            let real_score = self.models.heads.score_features(&real_feats, b)?;
            let detached: Vec<Tensor> = fake_feats.iter().map(|t| t.detach()).collect();
            let fake_det = self.models.heads.score_features(&detached, b)?;
            let gen_side = adversarial_losses(&real_score.detach(), &fake_score)?;
            let disc_side = adversarial_losses(&real_score, &fake_det)?;
            report.adv_generator = scalar(&gen_side.generator)?;
            report.adv_discriminator = scalar(&disc_side.discriminator)?;
            total = (total + (gen_side.generator * self.weights.lambda_adv)?)?;
            disc = Some(disc_side.discriminator);
        }
        report.total = scalar(&total)?;
        report.check_finite()?;
        Ok((total, disc, report))
    }

    /// One generator update followed, when active, by one head update.
    pub fn step(&mut self, batch: &[VideoTensor]) -> Result<Stage1Report> {
        let (total, disc, report) = self.losses(batch)?;
        let grads = total.backward()?;
        self.gen_opt.step(&grads)?;
        if let Some(d) = disc {
            if !report.adv_discriminator.is_finite() {
                return Err(Error::NonFinite(format!("discriminator loss {}", report.adv_discriminator)));
            }
            let grads = d.backward()?;
            self.disc_opt.step(&grads)?;
        }
        self.state.advance();
        Ok(report)
    }

    pub fn optimizer_state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = self.gen_opt.state_tensors("optim.generator.")?;
        out.extend(self.disc_opt.state_tensors("optim.discriminator.")?);
        Ok(out)
    }

    pub fn load_optimizer_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.gen_opt.load_state(tensors, "optim.generator.")?;
        self.disc_opt.load_state(tensors, "optim.discriminator.")
    }
}

/// How Stage II turns HQ clips into LQ inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage2Degradation {
    /// LQ = HQ.
    Identity,
    Synthetic {
        ranges: DegradationRanges,
        codec: CodecMode,
        flicker: Option<FlickerSpec>,
    },
}

/// Frozen Stage-I parts plus the trainable Stage-II parts.
#[derive(Debug)]
pub struct Stage2Models {
    pub config: ModelConfig,
    pub teacher: Backbone,
    pub decoder: Backbone,
    pub spatial: Codebook,
    pub temporal: Codebook,
    pub encoder: Backbone,
    pub lookup_spatial: LookupTransformer,
    pub lookup_temporal: LookupTransformer,
    /// `(T, H, W)` the position embeddings were sized for.
    pub resolution: [usize; 3],
}

impl Stage2Models {
    /// Builds Stage II on top of a trained Stage I; the LQ encoder starts as
    /// a copy of the HQ encoder.
    pub fn from_stage1(stage1: Stage1Models, resolution: [usize; 3], seed: u64) -> Result<Self> {
        let Stage1Models {
            config,
            encoder: teacher,
            decoder,
            spatial,
            temporal,
            ..
        } = stage1;
        let [t, h, w] = resolution;
        let (lt, lh, lw) = config.backbone.latent_dims(t, h, w)?;
        let seq = lt * lh * lw;
        let dev = teacher.params().device().clone();
        let dtype = teacher.params().dtype();
        let d = config.backbone.latent_dim;
        let encoder = build_backbone(&config.backbone, Role::LqEncoder, seed, &dev, dtype)?;
        encoder.params().copy_from(teacher.params())?;
        let lookup_spatial = LookupTransformer::new(
            CodebookKind::Spatial,
            &config.lookup,
            seq,
            d,
            spatial.len(),
            seed.wrapping_add(1),
            &dev,
            dtype,
        )?;
        let lookup_temporal = LookupTransformer::new(
            CodebookKind::Temporal,
            &config.lookup,
            seq,
            d,
            temporal.len(),
            seed.wrapping_add(2),
            &dev,
            dtype,
        )?;
        Ok(Self {
            config,
            teacher,
            decoder,
            spatial,
            temporal,
            encoder,
            lookup_spatial,
            lookup_temporal,
            resolution,
        })
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.teacher.params().tensors("encoder.hq.");
        out.extend(self.decoder.params().tensors("decoder."));
        out.insert("codebook.spatial".into(), self.spatial.items().detach());
        out.insert("codebook.temporal".into(), self.temporal.items().detach());
        out.extend(self.encoder.params().tensors("encoder.lq."));
        out.extend(self.lookup_spatial.params().tensors("lookup.spatial."));
        out.extend(self.lookup_temporal.params().tensors("lookup.temporal."));
        out
    }

    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.teacher.params().load(tensors, "encoder.hq.")?;
        self.decoder.params().load(tensors, "decoder.")?;
        for (key, cb) in [("codebook.spatial", &self.spatial), ("codebook.temporal", &self.temporal)] {
            let t = tensors
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing parameter {key}")))?;
            if t.dims() != cb.items().dims() {
                return Err(Error::Shape(format!("{key}: stored {:?}, model expects {:?}", t.dims(), cb.items().dims())));
            }
            cb.set(&t.to_dtype(cb.items().dtype())?)?;
        }
        self.encoder.params().load(tensors, "encoder.lq.")?;
        self.lookup_spatial.params().load(tensors, "lookup.spatial.")?;
        self.lookup_temporal.params().load(tensors, "lookup.temporal.")
    }

    /// Checksums of the parts Stage II must never change.
    pub fn frozen_checksums(&self) -> Result<[String; 3]> {
        let cb = |c: &Codebook| checksum_tensors([("items", c.items())]);
        Ok([self.decoder.params().checksum()?, cb(&self.spatial)?, cb(&self.temporal)?])
    }

    fn trainable_vars(&self) -> Vec<(String, candle_core::Var)> {
        let mut v = self.encoder.params().named_vars("encoder.lq.");
        v.extend(self.lookup_spatial.params().named_vars("lookup.spatial."));
        v.extend(self.lookup_temporal.params().named_vars("lookup.temporal."));
        v
    }

    /// Ground-truth indices and quantized latents from the frozen HQ path.
    pub fn teacher_targets(&self, hq: &Tensor) -> Result<(CodeIndexGrid, CodeIndexGrid, LatentGrid)> {
        let z_h = self.teacher.encode_tensor(hq)?.detach();
        let lk = st_lookup(&z_h, &self.spatial, &self.temporal, self.config.residual_window)?;
        Ok((lk.spatial, lk.temporal, lk.z_q.detach()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub iteration: u64,
    pub phase: Phase,
    pub code: f64,
    pub ce_spatial: f64,
    pub ce_temporal: f64,
    pub total: f64,
    /// Per-cell top-1 agreement with the teacher indices.
    pub accuracy: [f64; 2],
    pub degradations: Vec<DegradationParams>,
}

fn agreement(a: &CodeIndexGrid, b: &CodeIndexGrid) -> f64 {
    let same = a.indices().iter().zip(b.indices()).filter(|(x, y)| x == y).count();
    same as f64 / a.len().max(1) as f64
}

pub struct Stage2Trainer {
    pub models: Stage2Models,
    pub weights: LossWeights,
    pub degradation: Stage2Degradation,
    pub schedule: IncrementalSchedule,
    pub state: TrainState,
    /// Parallel degradation workers.
    pub workers: usize,
    opt: Adam,
}

impl Stage2Trainer {
    pub fn new(
        models: Stage2Models,
        weights: LossWeights,
        optim: AdamConfig,
        degradation: Stage2Degradation,
        schedule: IncrementalSchedule,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        let opt = Adam::new(models.trainable_vars(), optim)?;
        Ok(Self {
            models,
            weights,
            degradation,
            schedule,
            state: TrainState::new(Stage::II, seed),
            workers: 1,
            opt,
        })
    }

    /// Degrades each clip with its own parameter record for this iteration.
    pub fn make_lq(&self, batch: &[VideoTensor], phase: Phase) -> Result<(Vec<VideoTensor>, Vec<DegradationParams>)> {
        let (ranges, codec, fl) = match &self.degradation {
            Stage2Degradation::Identity => {
                return Ok((batch.to_vec(), vec![DegradationParams::identity(0); batch.len()]));
            }
            Stage2Degradation::Synthetic { ranges, codec, flicker } => (ranges, codec, flicker),
        };
        let ranges = match phase {
            Phase::NoiseFree => ranges.noise_free(),
            Phase::Full => *ranges,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed ^ self.state.iteration.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let params: Vec<DegradationParams> = batch
            .iter()
            .map(|_| sample_params(&mut rng, &ranges))
            .collect::<Result<_>>()?;
        let work = |i: usize| -> Result<VideoTensor> {
            let d = degrade_video(&batch[i], &params[i], codec)?.video;
            match fl {
                Some(spec) => {
                    let spec = FlickerSpec {
                        seed: spec.seed ^ params[i].seed,
                        ..spec.clone()
                    };
                    Ok(flicker(&d, &spec)?.video)
                }
                None => Ok(d),
            }
        };
        let lq = if self.workers > 1 && batch.len() > 1 {
            let chunk = batch.len().div_ceil(self.workers);
            let idx: Vec<usize> = (0..batch.len()).collect();
            std::thread::scope(|s| {
                let handles: Vec<_> = idx
                    .chunks(chunk)
                    .map(|c| s.spawn(|| c.iter().map(|&i| work(i)).collect::<Result<Vec<_>>>()))
                    .collect();
                let mut out = Vec::with_capacity(batch.len());
                for h in handles {
                    out.extend(h.join().expect("degradation worker panicked")?);
                }
                Ok::<_, Error>(out)
            })?
        } else {
            (0..batch.len()).map(work).collect::<Result<Vec<_>>>()?
        };
        Ok((lq, params))
    }

    pub fn losses(&self, hq: &[VideoTensor], lq: &[VideoTensor]) -> Result<(Tensor, Stage2Report)> {
        let m = &self.models;
        let dev = m.encoder.params().device().clone();
        let dtype = m.encoder.params().dtype();
        let x_hq = stack_clips(hq, &dev, dtype)?;
        let x_lq = stack_clips(lq, &dev, dtype)?;
        let (gt_s, gt_t, z_q) = m.teacher_targets(&x_hq)?;
        let z_l = m.encoder.encode_tensor(&x_lq)?;
        let (zl_s, zl_t) = split_latents(&z_l, m.config.residual_window)?;
        let (logit_s, pred_s) = predict_codes(&zl_s, &m.lookup_spatial)?;
        let (logit_t, pred_t) = predict_codes(&zl_t, &m.lookup_temporal)?;
        let code = stage2_code_loss(&z_l, &z_q)?;
        let ce_s = cross_entropy_codes(&logit_s, &gt_s)?;
        let ce_t = cross_entropy_codes(&logit_t, &gt_t)?;
        let total = (&code + ((&ce_s + &ce_t)? * self.weights.lambda_ce)?)?;
        let report = Stage2Report {
            iteration: self.state.iteration,
            phase: self.state.phase.unwrap_or(Phase::Full),
            code: scalar(&code)?,
            ce_spatial: scalar(&ce_s)?,
            ce_temporal: scalar(&ce_t)?,
            total: scalar(&total)?,
            accuracy: [agreement(&pred_s, &gt_s), agreement(&pred_t, &gt_t)],
            degradations: Vec::new(),
        };
        if ![report.code, report.ce_spatial, report.ce_temporal, report.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "stage II iteration {}: code={:e}, ce_spatial={:e}, ce_temporal={:e}",
                report.iteration, report.code, report.ce_spatial, report.ce_temporal
            )));
        }
        Ok((total, report))
    }

    pub fn step(&mut self, hq: &[VideoTensor]) -> Result<Stage2Report> {
        let phase = incremental_phase(self.state.iteration, &self.schedule);
        self.state.set_phase(phase)?;
        let (lq, params) = self.make_lq(hq, phase)?;
        let (total, mut report) = self.losses(hq, &lq)?;
        self.opt.step(&total.backward()?)?;
        report.degradations = params;
        self.state.advance();
        Ok(report)
    }

    pub fn optimizer_state(&self) -> Result<BTreeMap<String, Tensor>> {
        self.opt.state_tensors("optim.stage2.")
    }
}

/// LQ clip in, restored clip out: E_l, split, both lookups, assembly, D_h.
pub fn enhance(lq: &VideoTensor, models: &Stage2Models) -> Result<VideoTensor> {
    let (t, h, w) = lq.dims();
    models.config.backbone.check_input(t, h, w)?;
    let [rt, rh, rw] = models.resolution;
    if (h, w) != (rh, rw) || t != rt {
        let (lt, lh, lw) = models.config.backbone.latent_dims(t, h, w)?;
        return Err(Error::SequenceLength {
            expected: models.lookup_spatial.seq_len(),
            got: lt * lh * lw,
        });
    }
    let dev = models.encoder.params().device().clone();
    let x = lq.to_tensor(&dev, models.encoder.params().dtype())?;
    let z_l = models.encoder.encode_tensor(&x)?.detach();
    let (z_s, z_t) = split_latents(&z_l, models.config.residual_window)?;
    let (_, i_s) = predict_codes(&z_s, &models.lookup_spatial)?;
    let (_, i_t) = predict_codes(&z_t, &models.lookup_temporal)?;
    let z_q = assemble_quantized(&i_s, &i_t, &models.spatial, &models.temporal)?.detach();
    models.decoder.decode(&z_q).map(|mut v| {
        v.frame_rate = lq.frame_rate;
        v
    })
}

/// Same as [`enhance`] on clips longer than the training length: the clip is
/// cut into training-length windows (the last one aligned to the end).
pub fn enhance_long(lq: &VideoTensor, models: &Stage2Models) -> Result<VideoTensor> {
    let win = models.resolution[0];
    let t = lq.len();
    if t <= win {
        return enhance(lq, models);
    }
    let mut starts: Vec<usize> = (0..=t - win).step_by(win).collect();
    if starts.last() != Some(&(t - win)) {
        starts.push(t - win);
    }
    let mut frames = ndarray::Array4::<f32>::zeros((t, lq.height(), lq.width(), 3));
    for s in starts {
        let out = enhance(&lq.window(s, win)?, models)?;
        frames
            .slice_mut(ndarray::s![s..s + win, .., .., ..])
            .assign(out.frames());
    }
    VideoTensor::new(frames, lq.frame_rate)
}
