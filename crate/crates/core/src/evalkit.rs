//! Quality and consistency metrics.
//!
//! PSNR and SSIM are computed on `[0, 1]` floats before any 8-bit
//! quantization. Metrics that need large pretrained networks are reached
//! through [`ExternalMetric`] and [`EmbedClient`].

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stquant::CodeIndexGrid;
use crate::video::VideoTensor;

/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

fn same_shape(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("cannot compare {:?} with {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over every pixel and channel, capped at [`PSNR_CAP`].
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.frames().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_TAPS: usize = 11;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// BT.601 luma.
pub fn luma(frame: ArrayView3<'_, f32>) -> Array2<f64> {
    frame.map_axis(Axis(2), |p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_TAPS / 2) as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only positions where the window fits.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows = Array2::from_shape_fn((h, ow), |(y, x)| (0..n).map(|i| k[i] * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..n).map(|i| k[i] * rows[[y + i, x]]).sum::<f64>())
}

/// SSIM of two single-channel images with an 11-tap Gaussian window
/// (σ = 1.5), averaged over positions where the window fits entirely.
pub fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (h, w) = a.dim();
    if b.dim() != (h, w) {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if h < SSIM_TAPS || w < SSIM_TAPS {
        return Err(Error::Shape(format!("SSIM needs frames of at least {SSIM_TAPS}x{SSIM_TAPS}, got {h}x{w}")));
    }
    let k = gaussian_window();
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut acc = 0.0;
    for ((((ma, mb), saa), sbb), sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// Luma SSIM per frame, averaged over frames.
pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    same_shape(a, b)?;
    let mut total = 0.0;
    for t in 0..a.len() {
        total += ssim_plane(&luma(a.frame(t)), &luma(b.frame(t)))?;
    }
    Ok(total / a.len() as f64)
}

/// Face identity embedder seam.
pub trait EmbedClient {
    fn embed(&self, frame: ArrayView3<'_, f32>) -> Result<Vec<f64>>;
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity between the first frame's embedding and each later
/// frame's. `None` for single-frame clips.
pub fn face_cons(video: &VideoTensor, client: &dyn EmbedClient) -> Result<Option<f64>> {
    if video.len() < 2 {
        return Ok(None);
    }
    let first = client.embed(video.frame(0))?;
    let mut total = 0.0;
    for t in 1..video.len() {
        total += cosine(&first, &client.embed(video.frame(t))?);
    }
    Ok(Some(total / (video.len() - 1) as f64))
}

/// `H × T × 3` image: pixel `(y, t)` is pixel `(t, y, column)` of the clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalProfile {
    pub image: Array3<f32>,
    pub column: usize,
}

pub fn temporal_profile(video: &VideoTensor, column: usize) -> Result<TemporalProfile> {
    let (t, h, w) = video.dims();
    if column >= w {
        return Err(Error::Shape(format!("column {column} outside a {w}-pixel-wide clip")));
    }
    let frames = video.frames();
    let image = Array3::from_shape_fn((h, t, 3), |(y, tt, c)| frames[[tt, y, column, c]]);
    Ok(TemporalProfile { image, column })
}

/// Index-frequency histograms accumulated over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookUsage {
    pub spatial: Vec<u64>,
    pub temporal: Vec<u64>,
}

impl CodebookUsage {
    pub fn new(n_spatial: usize, n_temporal: usize) -> Self {
        Self {
            spatial: vec![0; n_spatial],
            temporal: vec![0; n_temporal],
        }
    }

    pub fn add(&mut self, spatial: &CodeIndexGrid, temporal: &CodeIndexGrid) -> Result<()> {
        spatial.check_range(self.spatial.len())?;
        temporal.check_range(self.temporal.len())?;
        for &i in spatial.indices() {
            self.spatial[i as usize] += 1;
        }
        for &i in temporal.indices() {
            self.temporal[i as usize] += 1;
        }
        Ok(())
    }

    fn used(h: &[u64]) -> f64 {
        h.iter().filter(|&&c| c > 0).count() as f64 / h.len().max(1) as f64
    }

    /// `(spatial, temporal)` utilization fractions.
    pub fn utilization(&self) -> (f64, f64) {
        (Self::used(&self.spatial), Self::used(&self.temporal))
    }
}

/// Utilization pair and histograms for one set of index grids.
pub fn codebook_report(spatial: &CodeIndexGrid, temporal: &CodeIndexGrid, n_s: usize, n_t: usize) -> Result<CodebookUsage> {
    let mut u = CodebookUsage::new(n_s, n_t);
    u.add(spatial, temporal)?;
    Ok(u)
}

/// Client for a metric backed by a pretrained network (LPIPS, FVD, ...).
pub trait ExternalMetric {
    fn name(&self) -> &str;
    fn score(&self, restored: &VideoTensor, reference: &VideoTensor) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    /// True when `psnr` is the cap for identical inputs.
    pub psnr_capped: bool,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization_spatial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization_temporal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_cons: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub external: BTreeMap<String, f64>,
}

pub fn evaluate_pair(
    restored: &VideoTensor,
    reference: &VideoTensor,
    embedder: Option<&dyn EmbedClient>,
    externals: &[&dyn ExternalMetric],
) -> Result<MetricReport> {
    let p = psnr(restored, reference)?;
    let mut external = BTreeMap::new();
    for m in externals {
        external.insert(m.name().to_string(), m.score(restored, reference)?);
    }
    Ok(MetricReport {
        psnr: p,
        psnr_capped: p >= PSNR_CAP,
        ssim: ssim(restored, reference)?,
        utilization_spatial: None,
        utilization_temporal: None,
        face_cons: match embedder {
            Some(e) => face_cons(restored, e)?,
            None => None,
        },
        external,
    })
}

/// Mean of each numeric field over a set of reports.
pub fn aggregate(reports: &[MetricReport]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut add = |k: &str, v: f64| {
        let e = sums.entry(k.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    };
    for r in reports {
        add("psnr", r.psnr);
        add("ssim", r.ssim);
        if let Some(v) = r.face_cons {
            add("face_cons", v);
        }
        for (k, v) in &r.external {
            add(k, *v);
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stquant::CodebookKind;
    use ndarray::Array4;

    #[test]
    fn psnr_cap_offset_and_symmetry() {
        let a = VideoTensor::constant(2, 16, 16, [0.3, 0.4, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = VideoTensor::constant(2, 16, 16, [0.4, 0.5, 0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let c = VideoTensor::constant(2, 8, 16, [0.3; 3]);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_self_and_inverse() {
        let v = crate::synth::face_clip(&crate::synth::ClipSpec::toy(), 1);
        assert!((ssim(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let inv = VideoTensor::new(v.frames().mapv(|x| 1.0 - x), 25.0).unwrap();
        assert!(ssim(&v, &inv).unwrap() < 0.0);
    }

    struct PerFrame(Vec<Vec<f64>>);
    impl EmbedClient for PerFrame {
        fn embed(&self, frame: ArrayView3<'_, f32>) -> Result<Vec<f64>> {
            Ok(self.0[(frame[[0, 0, 0]] * 10.0).round() as usize].clone())
        }
    }

    fn indexed_clip(t: usize) -> VideoTensor {
        // Frame i holds 0.1·i so the embedder can tell frames apart.
        VideoTensor::new(Array4::from_shape_fn((t, 2, 2, 3), |(i, _, _, _)| i as f32 * 0.1), 25.0).unwrap()
    }

    #[test]
    fn face_cons_cases() {
        let same = PerFrame(vec![vec![1.0, 2.0]; 3]);
        let clip = VideoTensor::new(Array4::zeros((3, 2, 2, 3)), 25.0).unwrap();
        assert_eq!(face_cons(&indexed_clip(1), &same).unwrap(), None);
        assert!((face_cons(&clip, &same).unwrap().unwrap() - 1.0).abs() < 1e-12);

        let orth = PerFrame(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let two = indexed_clip(2);
        assert_eq!(face_cons(&two, &orth).unwrap(), Some(0.0));

        let known = PerFrame(vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.6, 0.8]]);
        let got = face_cons(&indexed_clip(3), &known).unwrap().unwrap();
        assert!((got - 0.7).abs() < 1e-12);
    }

    #[test]
    fn profile_of_static_clip_has_identical_columns() {
        let v = VideoTensor::constant(5, 6, 4, [0.2, 0.3, 0.4]);
        let p = temporal_profile(&v, 3).unwrap();
        assert_eq!(p.image.dim(), (6, 5, 3));
        for t in 1..5 {
            assert_eq!(p.image.index_axis(Axis(1), t), p.image.index_axis(Axis(1), 0));
        }
        assert!(temporal_profile(&v, 4).is_err());
    }

    #[test]
    fn usage_accumulates_as_union() {
        let g = |v: Vec<u32>| CodeIndexGrid::new(CodebookKind::Spatial, [1, 1, 1, v.len()], v).unwrap();
        let mut u = codebook_report(&g(vec![0, 0]), &g(vec![0, 0]), 8, 8).unwrap();
        assert_eq!(u.utilization(), (1.0 / 8.0, 1.0 / 8.0));
        u.add(&g(vec![1, 2]), &g(vec![0, 3])).unwrap();
        assert_eq!(u.utilization(), (3.0 / 8.0, 2.0 / 8.0));
        assert_eq!(u.spatial.iter().sum::<u64>(), 4);
    }
}
