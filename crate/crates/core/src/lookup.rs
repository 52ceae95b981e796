//! Code lookup transformers: classify each latent cell of a degraded clip
//! into a codebook index, then rebuild quantized latents from the indices.
//!
//! Cells are flattened in `(t, h, w)` row-major order. Position embeddings
//! are learned per cell, so a model only accepts latent grids with exactly the
//! cell count it was built for.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, SelfAttention};
use crate::params::ParamStore;
use crate::stcodec::LatentGrid;
use crate::stquant::{CodeIndexGrid, Codebook, CodebookKind};

/// Order in which latent cells are laid out as a sequence.
pub const FLATTEN_ORDER: &str = "t,h,w";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LookupConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

#[derive(Debug)]
pub struct LookupTransformer {
    kind: CodebookKind,
    seq_len: usize,
    dim: usize,
    classes: usize,
    store: ParamStore,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

/// `(batch, cells, N)` unnormalized class scores.
#[derive(Debug, Clone)]
pub struct CodeLogits {
    pub logits: Tensor,
    pub grid_shape: [usize; 4],
}

impl LookupTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: CodebookKind,
        cfg: &LookupConfig,
        seq_len: usize,
        dim: usize,
        classes: usize,
        seed: u64,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {} attention heads",
                cfg.heads
            )));
        }
        if seq_len == 0 || classes < 2 {
            return Err(Error::Config("lookup needs a non-empty sequence and >= 2 classes".into()));
        }
        let mut store = ParamStore::new(seed, device, dtype);
        let mut root = store.root();
        let pos = root.constant("pos_embedding", &[seq_len, dim], 0.0)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut init = root.push(&format!("blocks.{i}"));
            blocks.push(Block {
                ln1: LayerNorm::new(&mut init.push("ln1"), dim)?,
                attn: SelfAttention::new(&mut init.push("attn"), dim, cfg.heads)?,
                ln2: LayerNorm::new(&mut init.push("ln2"), dim)?,
                fc1: Linear::new(&mut init.push("fc1"), dim, dim * cfg.mlp_ratio)?,
                fc2: Linear::new(&mut init.push("fc2"), dim * cfg.mlp_ratio, dim)?,
            });
        }
        let norm = LayerNorm::new(&mut root.push("norm"), dim)?;
        let head = Linear::new(&mut root.push("head"), dim, classes)?;
        Ok(Self {
            kind,
            seq_len,
            dim,
            classes,
            store,
            pos,
            blocks,
            norm,
            head,
        })
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Sets the classification projection to zero so every logit is equal.
    pub fn zero_output_projection(&self) -> Result<()> {
        for name in ["head.weight", "head.bias"] {
            let var = self.store.get(name).expect("head parameters exist");
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }

    pub fn forward(&self, z: &LatentGrid) -> Result<CodeLogits> {
        let (b, t, h, w, d) = z.dims();
        if t * h * w != self.seq_len {
            return Err(Error::SequenceLength {
                expected: self.seq_len,
                got: t * h * w,
            });
        }
        if d != self.dim {
            return Err(Error::Shape(format!("latent dimension {d}, model width {}", self.dim)));
        }
        let mut x = z
            .tensor()
            .reshape((b, self.seq_len, d))?
            .broadcast_add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let logits = self.head.forward(&self.norm.forward(&x)?)?;
        Ok(CodeLogits {
            logits,
            grid_shape: [b, t, h, w],
        })
    }
}

/// Argmax over classes; equal scores resolve to the lowest index.
pub fn argmax_codes(logits: &CodeLogits, kind: CodebookKind) -> Result<CodeIndexGrid> {
    let n = logits.logits.dim(2)?;
    let v = logits
        .logits
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let idx = v
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    CodeIndexGrid::new(kind, logits.grid_shape, idx)
}

pub fn predict_codes(z: &LatentGrid, model: &LookupTransformer) -> Result<(CodeLogits, CodeIndexGrid)> {
    let logits = model.forward(z)?;
    let grid = argmax_codes(&logits, model.kind())?;
    Ok((logits, grid))
}

/// Mean cross-entropy between `softmax(logits)` and one-hot ground truth.
pub fn cross_entropy_codes(logits: &CodeLogits, gt: &CodeIndexGrid) -> Result<Tensor> {
    let (b, l, n) = logits.logits.dims3()?;
    if gt.len() != b * l {
        return Err(Error::Shape(format!(
            "{} target cells for {} predicted cells",
            gt.len(),
            b * l
        )));
    }
    gt.check_range(n)?;
    let target = Tensor::from_slice(gt.indices(), gt.len(), logits.logits.device())?;
    Ok(candle_nn::loss::cross_entropy(
        &logits.logits.reshape((b * l, n))?,
        &target,
    )?)
}

/// `z_q[cell] = C_S[I_S[cell]] + C_T[I_T[cell]]`.
pub fn assemble_quantized(
    spatial_idx: &CodeIndexGrid,
    temporal_idx: &CodeIndexGrid,
    spatial: &Codebook,
    temporal: &Codebook,
) -> Result<LatentGrid> {
    if spatial_idx.shape() != temporal_idx.shape() {
        return Err(Error::Shape(format!(
            "index grids {:?} and {:?} differ",
            spatial_idx.shape(),
            temporal_idx.shape()
        )));
    }
    let qs = spatial.lookup(spatial_idx)?;
    let qt = temporal.lookup(temporal_idx)?;
    LatentGrid::new((qs.tensor() + qt.tensor())?)
}

/// `mean((z_l − sg(z_q))²)`.
pub fn stage2_code_loss(z_l: &LatentGrid, z_q: &LatentGrid) -> Result<Tensor> {
    if z_l.dims() != z_q.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z_l.dims(), z_q.dims())));
    }
    Ok((z_l.tensor() - z_q.tensor().detach())?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stquant::st_lookup;

    fn toy(seq: usize, classes: usize) -> LookupTransformer {
        let cfg = LookupConfig {
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        LookupTransformer::new(CodebookKind::Spatial, &cfg, seq, 8, classes, 0, &Device::Cpu, DType::F32).unwrap()
    }

    #[test]
    fn logits_shape() {
        let m = toy(256, 1024);
        let z = LatentGrid::new(Tensor::randn(0f32, 1.0, (1, 4, 8, 8, 8), &Device::Cpu).unwrap()).unwrap();
        let (logits, grid) = predict_codes(&z, &m).unwrap();
        assert_eq!(logits.logits.dims(), &[1, 256, 1024]);
        assert_eq!(grid.shape(), [1, 4, 8, 8]);
    }

    #[test]
    fn resolution_change_rejected() {
        let m = toy(256, 16);
        let z = LatentGrid::new(Tensor::zeros((1, 4, 4, 4, 8), DType::F32, &Device::Cpu).unwrap()).unwrap();
        match predict_codes(&z, &m).unwrap_err() {
            Error::SequenceLength { expected, got } => assert_eq!((expected, got), (256, 64)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn zero_projection_picks_index_zero() {
        let m = toy(16, 32);
        m.zero_output_projection().unwrap();
        let z = LatentGrid::new(Tensor::randn(0f32, 1.0, (1, 1, 4, 4, 8), &Device::Cpu).unwrap()).unwrap();
        let (_, grid) = predict_codes(&z, &m).unwrap();
        assert!(grid.indices().iter().all(|&i| i == 0));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_n() {
        let logits = CodeLogits {
            logits: Tensor::zeros((1, 3, 1024), DType::F64, &Device::Cpu).unwrap(),
            grid_shape: [1, 1, 1, 3],
        };
        let gt = CodeIndexGrid::new(CodebookKind::Spatial, [1, 1, 1, 3], vec![5, 900, 0]).unwrap();
        let ce = cross_entropy_codes(&logits, &gt).unwrap().to_scalar::<f64>().unwrap();
        assert!((ce - 1024f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn wide_margin_cross_entropy_vanishes() {
        let mut v = vec![0.0f64; 8];
        v[3] = 80.0;
        let logits = CodeLogits {
            logits: Tensor::from_vec(v, (1, 1, 8), &Device::Cpu).unwrap(),
            grid_shape: [1, 1, 1, 1],
        };
        let gt = CodeIndexGrid::new(CodebookKind::Spatial, [1, 1, 1, 1], vec![3]).unwrap();
        assert!(cross_entropy_codes(&logits, &gt).unwrap().to_scalar::<f64>().unwrap() < 1e-30);
    }

    #[test]
    fn assembled_latents_match_lookup() {
        let dev = Device::Cpu;
        let cs = Codebook::random(CodebookKind::Spatial, 8, 4, 1, &dev, DType::F64).unwrap();
        let ct = Codebook::random(CodebookKind::Temporal, 8, 4, 2, &dev, DType::F64).unwrap();
        let z = LatentGrid::new((Tensor::randn(0f64, 1.0, (1, 2, 3, 3, 4), &dev).unwrap() * 0.1).unwrap()).unwrap();
        let st = st_lookup(&z, &cs, &ct, 1).unwrap();
        let zq = assemble_quantized(&st.spatial, &st.temporal, &cs, &ct).unwrap();
        let a = zq.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = st.z_q.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);

        let zeros = CodeIndexGrid::new(CodebookKind::Spatial, [1, 1, 1, 2], vec![0, 0]).unwrap();
        let zt = CodeIndexGrid::new(CodebookKind::Temporal, [1, 1, 1, 2], vec![0, 0]).unwrap();
        let c = assemble_quantized(&zeros, &zt, &cs, &ct).unwrap();
        let want = (cs.items().get(0).unwrap() + ct.items().get(0).unwrap()).unwrap().to_vec1::<f64>().unwrap();
        let got = c.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&got[..4], &want[..]);
        assert_eq!(&got[4..], &want[..]);
    }

    #[test]
    fn stage2_loss_unit_offset() {
        let zq = Tensor::randn(0f64, 1.0, (1, 2, 2, 2, 3), &Device::Cpu).unwrap();
        let zl = (&zq + 1.0).unwrap();
        let l = stage2_code_loss(&LatentGrid::new(zl).unwrap(), &LatentGrid::new(zq.clone()).unwrap()).unwrap();
        assert!((l.to_scalar::<f64>().unwrap() - 1.0).abs() < 1e-12);
    }
}
