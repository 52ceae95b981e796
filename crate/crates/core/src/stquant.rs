//! Spatial-temporal codebooks and everything that touches them: latent
//! splitting, nearest-neighbor retrieval, additive fusion, the
//! straight-through estimator, the code-level loss and the marginal prior
//! regularizer.

use candle_core::{
    CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D,
};
use candle_nn::ops::softmax_last_dim;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::stcodec::LatentGrid;

/// Floor on latent-to-item distances before taking reciprocals.
pub const DISTANCE_FLOOR: f64 = 1e-8;

/// An item counts as "used" by the soft posterior when its mass exceeds
/// this fraction of the uniform share `1 / N`.
pub const POSTERIOR_FLOOR_FRACTION: f64 = 0.1;

/// Above this many `cells × items × D` elements the regularizer switches from
/// explicit differences to the `|z|² + |c|² − 2 z·c` expansion.
const DIRECT_DISTANCE_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Spatial,
    Temporal,
}

impl CodebookKind {
    pub fn name(self) -> &'static str {
        match self {
            CodebookKind::Spatial => "spatial",
            CodebookKind::Temporal => "temporal",
        }
    }
}

/// `N × D` learnable code items.
#[derive(Debug, Clone)]
pub struct Codebook {
    kind: CodebookKind,
    items: Var,
}

impl Codebook {
    /// Items drawn uniformly from `[-1/N, 1/N]`.
    pub fn random(
        kind: CodebookKind,
        n: usize,
        d: usize,
        seed: u64,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        if n < 2 || d == 0 {
            return Err(Error::Config(format!("codebook needs N >= 2 and D >= 1, got {n}x{d}")));
        }
        let mut store = ParamStore::new(seed, device, dtype);
        let t = store.root().uniform("items", &[n, d], 1.0 / n as f64)?;
        Self::from_tensor(kind, &t)
    }

    pub fn from_tensor(kind: CodebookKind, items: &Tensor) -> Result<Self> {
        let (n, d) = items.dims2()?;
        if n < 2 || d == 0 {
            return Err(Error::Config(format!("codebook needs N >= 2 and D >= 1, got {n}x{d}")));
        }
        let finite = items
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data("codebook contains non-finite items".into()));
        }
        Ok(Self {
            kind,
            items: Var::from_tensor(&items.detach())?,
        })
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn items(&self) -> &Tensor {
        self.items.as_tensor()
    }

    pub fn var(&self) -> &Var {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.dim(0).expect("rank 2")
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.items.dim(1).expect("rank 2")
    }

    pub fn set(&self, items: &Tensor) -> Result<()> {
        Ok(self.items.set(items)?)
    }

    /// Gathers items for every cell of `grid` (differentiable w.r.t. the items).
    pub fn lookup(&self, grid: &CodeIndexGrid) -> Result<LatentGrid> {
        grid.check_range(self.len())?;
        let [b, t, h, w] = grid.shape();
        let idx = Tensor::from_slice(grid.indices(), grid.len(), self.items.device())?;
        let q = self
            .items()
            .index_select(&idx, 0)?
            .reshape((b, t, h, w, self.dim()))?;
        LatentGrid::new(q)
    }
}

/// `(batch, t, h, w)` grid of code indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeIndexGrid {
    kind: CodebookKind,
    shape: [usize; 4],
    indices: Vec<u32>,
}

impl CodeIndexGrid {
    pub fn new(kind: CodebookKind, shape: [usize; 4], indices: Vec<u32>) -> Result<Self> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::Shape(format!(
                "{} indices cannot fill a {shape:?} grid",
                indices.len()
            )));
        }
        Ok(Self {
            kind,
            shape,
            indices,
        })
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, b: usize, t: usize, y: usize, x: usize) -> u32 {
        let [_, tt, hh, ww] = self.shape;
        self.indices[((b * tt + t) * hh + y) * ww + x]
    }

    fn cell(&self, flat: usize) -> [usize; 4] {
        let [_, t, h, w] = self.shape;
        [flat / (t * h * w), flat / (h * w) % t, flat / w % h, flat % w]
    }

    pub fn check_range(&self, n: usize) -> Result<()> {
        match self.indices.iter().position(|&i| i as usize >= n) {
            Some(pos) => Err(Error::IndexOutOfRange {
                cell: self.cell(pos),
                index: self.indices[pos],
                size: n,
            }),
            None => Ok(()),
        }
    }
}

/// Raw dot-product attention across time at every spatial location.
///
/// Scores are scaled by `1/√D` before the softmax; there are no learned
/// projections.
pub fn temporal_attention(z: &LatentGrid) -> Result<LatentGrid> {
    let (b, t, h, w, d) = z.dims();
    let seq = z
        .tensor()
        .permute((0, 2, 3, 1, 4))?
        .contiguous()?
        .reshape((b * h * w, t, d))?;
    let scores = (seq.matmul(&seq.t()?)? / (d as f64).sqrt())?;
    let mixed = softmax_last_dim(&scores)?.matmul(&seq)?;
    let out = mixed
        .reshape((b, h, w, t, d))?
        .permute((0, 3, 1, 2, 4))?
        .contiguous()?;
    LatentGrid::new(out)
}

/// `out[τ] = z[τ] − z[max(τ − window, 0)]`.
pub fn motion_residual(z: &LatentGrid, window: usize) -> Result<LatentGrid> {
    if window == 0 {
        return Err(Error::Config("motion-residual window must be >= 1".into()));
    }
    let t = z.dims().1;
    let prev: Vec<u32> = (0..t).map(|tau| tau.saturating_sub(window) as u32).collect();
    let prev = Tensor::from_vec(prev, t, z.tensor().device())?;
    let shifted = z.tensor().index_select(&prev, 1)?;
    LatentGrid::new((z.tensor() - shifted)?)
}

/// Spatial latents are the input itself; temporal latents add temporal
/// attention and the motion residual.
pub fn split_latents(z: &LatentGrid, window: usize) -> Result<(LatentGrid, LatentGrid)> {
    let ta = temporal_attention(z)?;
    let res = motion_residual(z, window)?;
    let z_t = LatentGrid::new((ta.tensor() + res.tensor())?)?;
    Ok((z.clone(), z_t))
}

/// Index of the nearest item for each `d`-dimensional row of `z`, by squared
/// Euclidean distance; equal distances resolve to the lowest index.
pub fn nearest_indices(z: &[f64], items: &[f64], d: usize) -> Vec<u32> {
    z.chunks_exact(d)
        .map(|row| {
            let mut best = 0u32;
            let mut best_d = f64::INFINITY;
            for (k, item) in items.chunks_exact(d).enumerate() {
                let dist: f64 = row.iter().zip(item).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = k as u32;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Nearest-neighbor retrieval of every latent cell against `codebook`.
pub fn nn_quantize(latents: &LatentGrid, codebook: &Codebook) -> Result<(CodeIndexGrid, LatentGrid)> {
    let (b, t, h, w, d) = latents.dims();
    if d != codebook.dim() {
        return Err(Error::Shape(format!(
            "latent dimension {d} does not match {} codebook dimension {}",
            codebook.kind().name(),
            codebook.dim()
        )));
    }
    let z = to_f64_vec(latents.tensor())?;
    let items = to_f64_vec(codebook.items())?;
    let grid = CodeIndexGrid::new(codebook.kind(), [b, t, h, w], nearest_indices(&z, &items, d))?;
    let q = codebook.lookup(&grid)?;
    Ok((grid, q))
}

/// Output of the joint spatial-temporal lookup.
#[derive(Debug, Clone)]
pub struct StLookup {
    /// Element-wise sum of the two quantized branches.
    pub z_q: LatentGrid,
    pub spatial: CodeIndexGrid,
    pub temporal: CodeIndexGrid,
    pub z_s: LatentGrid,
    pub z_t: LatentGrid,
}

pub fn st_lookup(
    z_h: &LatentGrid,
    spatial: &Codebook,
    temporal: &Codebook,
    window: usize,
) -> Result<StLookup> {
    let (z_s, z_t) = split_latents(z_h, window)?;
    let (i_s, q_s) = nn_quantize(&z_s, spatial)?;
    let (i_t, q_t) = nn_quantize(&z_t, temporal)?;
    let z_q = LatentGrid::new((q_s.tensor() + q_t.tensor())?)?;
    Ok(StLookup {
        z_q,
        spatial: i_s,
        temporal: i_t,
        z_s,
        z_t,
    })
}

struct StraightThrough;

fn copy_layout<T: Copy>(v: &[T], layout: &Layout) -> Vec<T> {
    // Callers pass contiguous operands.
    let (start, end) = layout.contiguous_offsets().expect("contiguous operand");
    v[start..end].to_vec()
}

impl CustomOp2 for StraightThrough {
    fn name(&self) -> &'static str {
        "straight-through"
    }

    fn cpu_fwd(
        &self,
        _: &CpuStorage,
        _: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s2 {
            CpuStorage::F32(v) => CpuStorage::F32(copy_layout(v, l2)),
            CpuStorage::F64(v) => CpuStorage::F64(copy_layout(v, l2)),
            CpuStorage::BF16(v) => CpuStorage::BF16(copy_layout(v, l2)),
            CpuStorage::F16(v) => CpuStorage::F16(copy_layout(v, l2)),
            _ => candle_core::bail!("straight-through expects a float tensor"),
        };
        Ok((out, l2.shape().clone()))
    }

    fn bwd(
        &self,
        _: &Tensor,
        z_q: &Tensor,
        _: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        // An explicit zero keeps candle's graph walk happy when z_q is
        // itself tracked.
        Ok((Some(grad.clone()), Some(z_q.zeros_like()?)))
    }
}

/// Forward value is exactly `z_q`; the backward pass hands the incoming
/// gradient to `z_h` unchanged and zero to `z_q`.
pub fn straight_through(z_h: &LatentGrid, z_q: &LatentGrid) -> Result<LatentGrid> {
    if z_h.dims() != z_q.dims() {
        return Err(Error::Shape(format!(
            "straight-through needs equal shapes, got {:?} and {:?}",
            z_h.dims(),
            z_q.dims()
        )));
    }
    let out = z_h.tensor().apply_op2(&z_q.tensor().contiguous()?, StraightThrough)?;
    LatentGrid::new(out)
}

/// Two-term code-level loss with mean reduction:
/// `mean((sg(z_h) − z_q)²) + β · mean((z_h − sg(z_q))²)`.
pub fn code_loss(z_h: &LatentGrid, z_q: &LatentGrid, beta: f64) -> Result<Tensor> {
    if z_h.dims() != z_q.dims() {
        return Err(Error::Shape(format!(
            "code loss needs equal shapes, got {:?} and {:?}",
            z_h.dims(),
            z_q.dims()
        )));
    }
    let to_codes = (z_h.tensor().detach() - z_q.tensor())?.sqr()?.mean_all()?;
    let to_encoder = (z_h.tensor() - z_q.tensor().detach())?.sqr()?.mean_all()?;
    Ok((to_codes + (to_encoder * beta)?)?)
}

/// Diagnostics of the marginal prior regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerReport {
    /// Marginal of the row-normalized similarity matrix; sums to 1.
    pub posterior: Vec<f64>,
    /// `KL(posterior ‖ uniform)`.
    pub kl_value: f64,
    /// Fraction of items with posterior mass above `POSTERIOR_FLOOR_FRACTION / N`.
    pub utilization: f64,
}

#[derive(Debug, Clone)]
pub struct MarginalPrior {
    /// Differentiable scalar KL, to be added to the training loss.
    pub loss: Tensor,
    pub report: RegularizerReport,
}

/// `Σ p log(p N)`, with `0 · log 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * (v * n).ln())
        .sum::<f64>()
        .max(0.0)
}

fn pairwise_distances(z: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (m, d) = z.dims2()?;
    let n = c.dim(0)?;
    let floor2 = DISTANCE_FLOOR * DISTANCE_FLOOR;
    let d2 = if m * n * d <= DIRECT_DISTANCE_LIMIT {
        z.unsqueeze(1)?
            .broadcast_sub(&c.unsqueeze(0)?)?
            .sqr()?
            .sum(D::Minus1)?
    } else {
        let zz = z.sqr()?.sum_keepdim(1)?;
        let cc = c.sqr()?.sum_keepdim(1)?.t()?;
        zz.broadcast_add(&cc)?
            .broadcast_sub(&(z.matmul(&c.t()?)? * 2.0)?)?
    };
    let floor = Tensor::full(floor2, d2.shape(), d2.device())?.to_dtype(d2.dtype())?;
    Ok(d2.maximum(&floor)?.sqrt()?)
}

/// Marginal prior regularization of `latents` against `codebook`.
///
/// Builds the cell-to-item distance matrix, turns reciprocal distances into
/// per-cell distributions, averages them into a posterior over items and
/// returns its KL divergence from the uniform prior.
pub fn marginal_prior_kl(latents: &LatentGrid, codebook: &Codebook) -> Result<MarginalPrior> {
    if latents.latent_dim() != codebook.dim() {
        return Err(Error::Shape(format!(
            "latent dimension {} does not match codebook dimension {}",
            latents.latent_dim(),
            codebook.dim()
        )));
    }
    let n = codebook.len();
    let dist = pairwise_distances(&latents.flat()?, codebook.items())?;
    let sim = dist.recip()?;
    let s = sim.broadcast_div(&sim.sum_keepdim(1)?)?;
    let posterior = s.mean(0)?;
    let loss = (&posterior * (&posterior * n as f64)?.log()?)?.sum_all()?;

    let p = to_f64_vec(&posterior)?;
    let kl_value = kl_to_uniform(&p);
    let floor = POSTERIOR_FLOOR_FRACTION / n as f64;
    let utilization = p.iter().filter(|&&v| v > floor).count() as f64 / n as f64;
    Ok(MarginalPrior {
        loss,
        report: RegularizerReport {
            posterior: p,
            kl_value,
            utilization,
        },
    })
}

/// Fraction of the `n` items that appear at least once in `grid`.
pub fn utilization(grid: &CodeIndexGrid, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut seen = vec![false; n];
    for &i in grid.indices() {
        if let Some(s) = seen.get_mut(i as usize) {
            *s = true;
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / n as f64
}

/// Reference regularizer value computed from hard retrieval counts: the KL
/// between the one-hot index histogram and the uniform prior. Not
/// differentiable; kept for comparison against the soft marginal prior.
pub fn retrieval_frequency_kl(grid: &CodeIndexGrid, n: usize) -> f64 {
    let mut counts = vec![0usize; n];
    for &i in grid.indices() {
        if let Some(c) = counts.get_mut(i as usize) {
            *c += 1;
        }
    }
    let total = grid.len().max(1) as f64;
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    kl_to_uniform(&p)
}
