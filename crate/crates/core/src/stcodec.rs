//! Convolutional 3D encoder/decoder backbone.
//!
//! Both encoders and the decoder are stacks of residual, resampling and
//! per-frame attention blocks. Encoders compress a `(T, H, W)` clip by the
//! configured spatial and temporal ratios into a `(t, h, w, D)` latent grid;
//! the decoder mirrors the encoder layout with upsampling in place of
//! downsampling.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{silu, Conv3d, FrameGroupNorm, SelfAttention};
use crate::params::{Init, ParamStore};
use crate::video::{unstack_clips, VideoTensor};

/// One entry of a backbone block layout, in encoder order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockSpec {
    Residual { channels: usize },
    Downsample { spatial: usize, temporal: usize },
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub spatial_ratio: usize,
    pub temporal_ratio: usize,
    pub latent_dim: usize,
    pub stem_channels: usize,
    pub layout: Vec<BlockSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        use BlockSpec::*;
        Self {
            spatial_ratio: 8,
            temporal_ratio: 2,
            latent_dim: 256,
            stem_channels: 64,
            layout: vec![
                Residual { channels: 128 },
                Downsample { spatial: 2, temporal: 1 },
                Residual { channels: 128 },
                Downsample { spatial: 2, temporal: 2 },
                Residual { channels: 256 },
                Downsample { spatial: 2, temporal: 1 },
                Residual { channels: 256 },
                Attention,
            ],
        }
    }
}

impl BackboneConfig {
    /// Small layout with the default 8×/2× ratios, sized for CPU experiments.
    pub fn toy(latent_dim: usize) -> Self {
        use BlockSpec::*;
        Self {
            spatial_ratio: 8,
            temporal_ratio: 2,
            latent_dim,
            stem_channels: 8,
            layout: vec![
                Downsample { spatial: 2, temporal: 1 },
                Residual { channels: 16 },
                Downsample { spatial: 2, temporal: 2 },
                Residual { channels: 32 },
                Downsample { spatial: 2, temporal: 1 },
                Residual { channels: 32 },
                Attention,
            ],
        }
    }

    /// No resampling at all: latents keep the input resolution.
    pub fn identity(latent_dim: usize, channels: usize) -> Self {
        Self {
            spatial_ratio: 1,
            temporal_ratio: 1,
            latent_dim,
            stem_channels: channels,
            layout: vec![BlockSpec::Residual { channels }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.stem_channels == 0 {
            return Err(Error::Config("latent_dim and stem_channels must be positive".into()));
        }
        let (mut s, mut t) = (1usize, 1usize);
        for (i, block) in self.layout.iter().enumerate() {
            match *block {
                BlockSpec::Downsample { spatial, temporal } => {
                    if spatial == 0 || temporal == 0 {
                        return Err(Error::Config(format!("block {i}: zero stride")));
                    }
                    if temporal > 1 && spatial == 1 {
                        return Err(Error::Config(format!(
                            "block {i}: temporal-only downsampling (spatial 1, temporal {temporal}) is not supported"
                        )));
                    }
                    s *= spatial;
                    t *= temporal;
                }
                BlockSpec::Residual { channels } if channels == 0 => {
                    return Err(Error::Config(format!("block {i}: zero channels")));
                }
                _ => {}
            }
        }
        if s != self.spatial_ratio || t != self.temporal_ratio {
            return Err(Error::Config(format!(
                "layout strides give ratios ({s}, {t}) but config declares ({}, {})",
                self.spatial_ratio, self.temporal_ratio
            )));
        }
        Ok(())
    }

    /// Checks that a `(T, H, W)` clip can be encoded.
    pub fn check_input(&self, t: usize, h: usize, w: usize) -> Result<()> {
        let checks = [
            ("T", t, "temporal", self.temporal_ratio),
            ("H", h, "spatial", self.spatial_ratio),
            ("W", w, "spatial", self.spatial_ratio),
        ];
        for (axis, size, ratio_name, ratio) in checks {
            if size == 0 || size % ratio != 0 {
                return Err(Error::Indivisible {
                    axis,
                    size,
                    ratio_name,
                    ratio,
                });
            }
        }
        Ok(())
    }

    /// Latent grid dims `(t, h, w)` for a `(T, H, W)` clip.
    pub fn latent_dims(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.check_input(t, h, w)?;
        Ok((t / self.temporal_ratio, h / self.spatial_ratio, w / self.spatial_ratio))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    HqEncoder,
    LqEncoder,
    Decoder,
}

/// `(batch, t, h, w, D)` latent tensor.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    values: Tensor,
}

impl LatentGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 5 {
            return Err(Error::Shape(format!(
                "latent grid must be (batch, t, h, w, D), got {:?}",
                values.dims()
            )));
        }
        Ok(Self { values })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// `(batch, t, h, w, D)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        self.values.dims5().expect("rank checked at construction")
    }

    pub fn latent_dim(&self) -> usize {
        self.dims().4
    }

    pub fn cells(&self) -> usize {
        let (b, t, h, w, _) = self.dims();
        b * t * h * w
    }

    /// Flattened `(cells, D)` view in batch, t, h, w row-major order.
    pub fn flat(&self) -> Result<Tensor> {
        let d = self.latent_dim();
        Ok(self.values.reshape((self.cells(), d))?)
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: FrameGroupNorm,
    conv1: Conv3d,
    norm2: FrameGroupNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
}

impl ResBlock {
    fn new(init: &mut Init<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm1: FrameGroupNorm::new(&mut init.push("norm1"), c_in)?,
            conv1: Conv3d::new(&mut init.push("conv1"), c_in, c_out, 3, 3, 1, 1)?,
            norm2: FrameGroupNorm::new(&mut init.push("norm2"), c_out)?,
            conv2: Conv3d::new(&mut init.push("conv2"), c_out, c_out, 3, 3, 1, 1)?,
            skip: if c_in != c_out {
                Some(Conv3d::new(&mut init.push("skip"), c_in, c_out, 1, 1, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head self-attention over the spatial positions of each frame.
/// Query/key/value projections act per position (1×1×1 convolutions).
#[derive(Debug, Clone)]
struct FrameAttention {
    norm: FrameGroupNorm,
    attn: SelfAttention,
}

impl FrameAttention {
    fn new(init: &mut Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: FrameGroupNorm::new(&mut init.push("norm"), channels)?,
            attn: SelfAttention::new(&mut init.push("attn"), channels, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let seq = self
            .norm
            .forward(x)?
            .reshape((b * t, c, h * w))?
            .transpose(1, 2)?;
        let y = self
            .attn
            .forward(&seq)?
            .transpose(1, 2)?
            .reshape((b, t, c, h, w))?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Res(ResBlock),
    Down(Conv3d),
    Up {
        conv: Conv3d,
        spatial: usize,
        temporal: usize,
    },
    Attn(FrameAttention),
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Res(b) => b.forward(x),
            Layer::Down(conv) => conv.forward(x),
            Layer::Up {
                conv,
                spatial,
                temporal,
            } => {
                let (b, t, c, h, w) = x.dims5()?;
                let mut y = x.clone();
                if *spatial > 1 {
                    // Nearest neighbour by broadcasting; its backward is a plain sum.
                    let s = *spatial;
                    y = y
                        .reshape((b * t * c, h, 1, w, 1))?
                        .broadcast_as((b * t * c, h, s, w, s))?
                        .reshape((b, t, c, h * s, w * s))?;
                }
                if *temporal > 1 {
                    let (_, _, _, h2, w2) = y.dims5()?;
                    y = y
                        .unsqueeze(2)?
                        .broadcast_as((b, t, *temporal, c, h2, w2))?
                        .reshape((b, t * temporal, c, h2, w2))?;
                }
                conv.forward(&y)
            }
            Layer::Attn(a) => a.forward(x),
        }
    }
}

/// An encoder or decoder instance together with its parameters.
#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    role: Role,
    store: ParamStore,
    conv_in: Conv3d,
    layers: Vec<Layer>,
    norm_out: FrameGroupNorm,
    conv_out: Conv3d,
}

/// Instantiates an encoder (`HqEncoder`/`LqEncoder`) or the mirrored decoder.
pub fn build_backbone(
    config: &BackboneConfig,
    role: Role,
    seed: u64,
    device: &Device,
    dtype: DType,
) -> Result<Backbone> {
    config.validate()?;
    let mut store = ParamStore::new(seed, device, dtype);
    let mut root = store.root();
    let d = config.latent_dim;

    // Channel count entering each encoder block.
    let mut widths_in = Vec::with_capacity(config.layout.len());
    let mut c = config.stem_channels;
    for block in &config.layout {
        widths_in.push(c);
        if let BlockSpec::Residual { channels } = block {
            c = *channels;
        }
    }
    let deepest = c;

    let (conv_in, layers, norm_out, conv_out) = match role {
        Role::HqEncoder | Role::LqEncoder => {
            let conv_in = Conv3d::new(&mut root.push("conv_in"), 3, config.stem_channels, 3, 3, 1, 1)?;
            let mut layers = Vec::new();
            let mut c = config.stem_channels;
            for (i, block) in config.layout.iter().enumerate() {
                let mut init = root.push(&format!("layers.{i}"));
                layers.push(match *block {
                    BlockSpec::Residual { channels } => {
                        let l = Layer::Res(ResBlock::new(&mut init, c, channels)?);
                        c = channels;
                        l
                    }
                    BlockSpec::Downsample { spatial, temporal } => {
                        Layer::Down(Conv3d::new(&mut init, c, c, 3, 3, spatial, temporal)?)
                    }
                    BlockSpec::Attention => Layer::Attn(FrameAttention::new(&mut init, c)?),
                });
            }
            let norm_out = FrameGroupNorm::new(&mut root.push("norm_out"), deepest)?;
            let conv_out = Conv3d::new(&mut root.push("conv_out"), deepest, d, 1, 1, 1, 1)?;
            (conv_in, layers, norm_out, conv_out)
        }
        Role::Decoder => {
            let conv_in = Conv3d::new(&mut root.push("conv_in"), d, deepest, 3, 3, 1, 1)?;
            let mut layers = Vec::new();
            let mut c = deepest;
            for (i, block) in config.layout.iter().enumerate().rev() {
                let mut init = root.push(&format!("layers.{i}"));
                layers.push(match *block {
                    BlockSpec::Residual { .. } => {
                        let out = widths_in[i];
                        let l = Layer::Res(ResBlock::new(&mut init, c, out)?);
                        c = out;
                        l
                    }
                    BlockSpec::Downsample { spatial, temporal } => Layer::Up {
                        conv: Conv3d::new(&mut init, c, c, 3, 3, 1, 1)?,
                        spatial,
                        temporal,
                    },
                    BlockSpec::Attention => Layer::Attn(FrameAttention::new(&mut init, c)?),
                });
            }
            let norm_out = FrameGroupNorm::new(&mut root.push("norm_out"), c)?;
            let conv_out = Conv3d::new(&mut root.push("conv_out"), c, 3, 3, 3, 1, 1)?;
            (conv_in, layers, norm_out, conv_out)
        }
    };
    Ok(Backbone {
        config: config.clone(),
        role,
        store,
        conv_in,
        layers,
        norm_out,
        conv_out,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    fn is_encoder(&self) -> bool {
        matches!(self.role, Role::HqEncoder | Role::LqEncoder)
    }

    /// Encodes a `(B, T, 3, H, W)` batch with values in `[0, 1]`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<LatentGrid> {
        if !self.is_encoder() {
            return Err(Error::Config("encode called on a decoder".into()));
        }
        let (_, t, c, h, w) = x.dims5()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        self.config.check_input(t, h, w)?;
        let mut y = self.conv_in.forward(&x.affine(2.0, -1.0)?)?;
        for layer in &self.layers {
            y = layer.forward(&y)?;
        }
        let y = self
            .conv_out
            .forward(&silu(&self.norm_out.forward(&y)?)?)?
            .permute((0, 1, 3, 4, 2))?
            .contiguous()?;
        LatentGrid::new(y)
    }

    pub fn encode(&self, video: &VideoTensor) -> Result<LatentGrid> {
        let x = video.to_tensor(self.store.device(), self.store.dtype())?;
        self.encode_tensor(&x)
    }

    /// Decodes to a `(B, T, 3, H, W)` batch in `[0, 1]` units without clamping.
    pub fn decode_tensor(&self, z: &LatentGrid) -> Result<Tensor> {
        if self.is_encoder() {
            return Err(Error::Config("decode called on an encoder".into()));
        }
        let (_, _, _, _, d) = z.dims();
        if d != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent dimension {d} does not match the decoder's {}",
                self.config.latent_dim
            )));
        }
        let x = z.tensor().permute((0, 1, 4, 2, 3))?.contiguous()?;
        let mut y = self.conv_in.forward(&x)?;
        for layer in &self.layers {
            y = layer.forward(&y)?;
        }
        let y = self.conv_out.forward(&silu(&self.norm_out.forward(&y)?)?)?;
        Ok(y.affine(0.5, 0.5)?)
    }

    /// Decodes the first batch element and clamps to `[0, 1]`.
    pub fn decode(&self, z: &LatentGrid) -> Result<VideoTensor> {
        let y = self.decode_tensor(z)?;
        Ok(unstack_clips(&y, 25.0)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpu() -> Device {
        Device::Cpu
    }

    #[test]
    fn default_layout_has_three_spatial_stages_one_temporal() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        let downs: Vec<_> = cfg
            .layout
            .iter()
            .filter_map(|b| match b {
                BlockSpec::Downsample { spatial, temporal } => Some((*spatial, *temporal)),
                _ => None,
            })
            .collect();
        assert_eq!(downs, vec![(2, 1), (2, 2), (2, 1)]);
        assert_eq!((cfg.spatial_ratio, cfg.temporal_ratio, cfg.latent_dim), (8, 2, 256));
    }

    #[test]
    fn temporal_only_stride_rejected() {
        let mut cfg = BackboneConfig::identity(4, 4);
        cfg.layout.push(BlockSpec::Downsample { spatial: 1, temporal: 2 });
        cfg.temporal_ratio = 2;
        let err = build_backbone(&cfg, Role::HqEncoder, 0, &cpu(), DType::F32).unwrap_err();
        assert!(err.to_string().contains("temporal-only"), "{err}");
    }

    #[test]
    fn ratio_mismatch_rejected() {
        let mut cfg = BackboneConfig::toy(8);
        cfg.spatial_ratio = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_config_keeps_resolution() {
        let cfg = BackboneConfig::identity(4, 4);
        let enc = build_backbone(&cfg, Role::HqEncoder, 0, &cpu(), DType::F32).unwrap();
        let v = VideoTensor::constant(3, 5, 7, [0.2, 0.4, 0.6]);
        assert_eq!(enc.encode(&v).unwrap().dims(), (1, 3, 5, 7, 4));
    }

    #[test]
    fn toy_encode_decode_shapes() {
        let cfg = BackboneConfig::toy(8);
        let enc = build_backbone(&cfg, Role::HqEncoder, 0, &cpu(), DType::F32).unwrap();
        let dec = build_backbone(&cfg, Role::Decoder, 1, &cpu(), DType::F32).unwrap();
        let v = VideoTensor::constant(8, 64, 64, [0.5, 0.5, 0.5]);
        let z = enc.encode(&v).unwrap();
        assert_eq!(z.dims(), (1, 4, 8, 8, 8));
        let out = dec.decode(&z).unwrap();
        assert_eq!(out.dims(), (8, 64, 64));
    }

    #[test]
    fn indivisible_height_names_axis() {
        let cfg = BackboneConfig::toy(8);
        let enc = build_backbone(&cfg, Role::HqEncoder, 0, &cpu(), DType::F32).unwrap();
        let v = VideoTensor::constant(8, 100, 64, [0.5; 3]);
        match enc.encode(&v).unwrap_err() {
            Error::Indivisible { axis, size, .. } => assert_eq!((axis, size), ("H", 100)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn decoder_rejects_wrong_latent_dim() {
        let cfg = BackboneConfig::toy(8);
        let dec = build_backbone(&cfg, Role::Decoder, 1, &cpu(), DType::F32).unwrap();
        let z = LatentGrid::new(Tensor::zeros((1, 2, 2, 2, 5), DType::F32, &cpu()).unwrap()).unwrap();
        assert!(matches!(dec.decode(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn deeper_layout_has_more_parameters() {
        let base = BackboneConfig::toy(8);
        let mut deeper = base.clone();
        deeper.layout.insert(0, BlockSpec::Residual { channels: 8 });
        let a = build_backbone(&base, Role::HqEncoder, 0, &cpu(), DType::F32).unwrap();
        let b = build_backbone(&deeper, Role::HqEncoder, 0, &cpu(), DType::F32).unwrap();
        assert!(b.num_parameters() > a.num_parameters());
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = BackboneConfig::toy(8);
        let enc = build_backbone(&cfg, Role::HqEncoder, 3, &cpu(), DType::F32).unwrap();
        let v = crate::synth::face_clip(&crate::synth::ClipSpec::toy(), 11);
        let a = enc.encode(&v).unwrap().flat().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = enc.encode(&v).unwrap().flat().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn constant_clip_gives_time_constant_latent() {
        let cfg = BackboneConfig::toy(8);
        let enc = build_backbone(&cfg, Role::HqEncoder, 5, &cpu(), DType::F32).unwrap();
        let z = enc.encode(&VideoTensor::constant(8, 32, 32, [0.3, 0.6, 0.1])).unwrap();
        let first = z.tensor().narrow(1, 0, 1).unwrap();
        let diff = z.tensor().broadcast_sub(&first).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }
}
