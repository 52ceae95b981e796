//! Low-quality input synthesis: blur → downsample → noise → codec → upsample,
//! plus brightness and pixel flicker injection.
//!
//! All frames of a clip share one [`DegradationParams`] record.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

use image::{imageops, ImageBuffer, Rgb};
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::VideoTensor;

/// Environment variable naming the external encoder binary.
pub const CODEC_ENV: &str = "FACEVQ_FFMPEG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRanges {
    pub sigma: [f64; 2],
    pub scale: [f64; 2],
    /// Noise std-dev on the 0–255 scale.
    pub noise: [f64; 2],
    pub crf: [u32; 2],
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            sigma: [2.0, 5.0],
            scale: [2.0, 4.0],
            noise: [0.0, 5.0],
            crf: [18, 32],
        }
    }
}

impl DegradationRanges {
    /// Same ranges with the noise stage switched off.
    pub fn noise_free(mut self) -> Self {
        self.noise = [0.0, 0.0];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("sigma", self.sigma),
            ("scale", self.scale),
            ("noise", self.noise),
            ("crf", [self.crf[0] as f64, self.crf[1] as f64]),
        ];
        for (name, [lo, hi]) in pairs {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is inverted or not finite")));
            }
        }
        if self.sigma[0] < 0.0 || self.noise[0] < 0.0 || self.scale[0] < 1.0 {
            return Err(Error::Config("sigma and noise must be >= 0 and scale >= 1".into()));
        }
        Ok(())
    }
}

/// Per-clip degradation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub sigma: f64,
    pub r: f64,
    pub delta: f64,
    pub crf: u32,
    pub seed: u64,
}

impl DegradationParams {
    pub fn identity(seed: u64) -> Self {
        Self {
            sigma: 0.0,
            r: 1.0,
            delta: 0.0,
            crf: 0,
            seed,
        }
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// One uniform draw per field.
pub fn sample_params(rng: &mut impl Rng, ranges: &DegradationRanges) -> Result<DegradationParams> {
    ranges.validate()?;
    Ok(DegradationParams {
        sigma: draw(rng, ranges.sigma),
        r: draw(rng, ranges.scale),
        delta: draw(rng, ranges.noise),
        crf: rng.random_range(ranges.crf[0]..=ranges.crf[1]),
        seed: rng.random(),
    })
}

/// Codec stage implementation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    /// Deterministic 8×8 DCT quantization of AC coefficients.
    Proxy,
    /// Round trip through an external H.264 encoder.
    External { binary: Option<PathBuf> },
}

/// Sidecar record written next to each degraded clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub params: DegradationParams,
    pub codec: String,
    /// False when the codec stage ran through an external tool.
    pub bit_exact: bool,
}

pub type Frame = Array3<f32>;

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian blur with kernel size `2⌈3σ⌉ + 1` and replicated borders.
pub fn blur_frame(frame: &Frame, sigma: f64) -> Frame {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = frame.dim();
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xi = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * frame[[y, xi, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yi = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[[yi, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Bicubic (Catmull-Rom) resampling to `(h, w)`, clamped to `[0, 1]`.
pub fn resize_frame(frame: &Frame, h: usize, w: usize) -> Frame {
    let (fh, fw, _) = frame.dim();
    if (fh, fw) == (h, w) {
        return frame.clone();
    }
    let img: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(fw as u32, fh as u32, frame.iter().copied().collect())
            .expect("frame buffer matches its dimensions");
    let out = imageops::resize(&img, w as u32, h as u32, imageops::FilterType::CatmullRom);
    Array3::from_shape_vec((h, w, 3), out.into_raw())
        .expect("resized buffer matches its dimensions")
        .mapv(|v| v.clamp(0.0, 1.0))
}

/// Dimensions after `↓r`, rounded to the nearest even integer (at least 2).
pub fn downscaled_dims(h: usize, w: usize, r: f64) -> (usize, usize) {
    let even = |x: usize| {
        let v = x as f64 / r;
        let e = ((v / 2.0).round() as usize) * 2;
        e.max(2)
    };
    (even(h), even(w))
}

/// Adds `N(0, (δ/255)²)` noise, clamped to `[0, 1]`.
pub fn add_noise(frame: &Frame, delta: f64, rng: &mut impl Rng) -> Frame {
    if delta <= 0.0 {
        return frame.clone();
    }
    let normal = Normal::new(0.0, delta / 255.0).expect("positive std");
    frame.mapv(|v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
}

fn dct_matrix() -> [[f32; 8]; 8] {
    let mut m = [[0f32; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = (a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos()) as f32;
        }
    }
    m
}

/// Quantization step for AC coefficients, doubling every 6 CRF units.
fn proxy_step(crf: u32) -> f32 {
    (0.01 * 2f64.powf((crf as f64 - 18.0) / 6.0)) as f32
}

/// Proxy codec: 8×8 block DCT per channel with AC coefficients rounded to a
/// CRF-dependent step. DC terms pass through, so flat blocks are unchanged.
pub fn proxy_codec_frame(frame: &Frame, crf: u32) -> Frame {
    let m = dct_matrix();
    let step = proxy_step(crf);
    let (h, w, c) = frame.dim();
    let mut out = frame.clone();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for ch in 0..c {
                let mut block = [[0f32; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = frame[[(by + y).min(h - 1), (bx + x).min(w - 1), ch]];
                    }
                }
                // coeff = M · B · Mᵀ
                let mut tmp = [[0f32; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        tmp[i][j] = (0..8).map(|k| m[i][k] * block[k][j]).sum();
                    }
                }
                let mut coef = [[0f32; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        coef[i][j] = (0..8).map(|k| tmp[i][k] * m[j][k]).sum();
                    }
                }
                for (i, row) in coef.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        if i + j > 0 {
                            let s = step * (1.0 + (i + j) as f32 / 4.0);
                            *v = (*v / s).round() * s;
                        }
                    }
                }
                // B = Mᵀ · coeff · M
                for i in 0..8 {
                    for j in 0..8 {
                        tmp[i][j] = (0..8).map(|k| m[k][i] * coef[k][j]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let (yy, xx) = (by + y, bx + x);
                        if yy < h && xx < w {
                            let v: f32 = (0..8).map(|k| tmp[y][k] * m[k][x]).sum();
                            out[[yy, xx, ch]] = v.clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn codec_binary(explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .or_else(|| std::env::var_os(CODEC_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ffmpeg"))
}

/// H.264 round trip through an external encoder at the given CRF.
pub fn external_codec(frames: &[Frame], crf: u32, fps: f32, binary: &Option<PathBuf>) -> Result<Vec<Frame>> {
    let bin = codec_binary(binary);
    let (h, w, _) = frames[0].dim();
    let dir = std::env::temp_dir().join(format!("facevq-codec-{}-{}", std::process::id(), crf));
    std::fs::create_dir_all(&dir)?;
    let encoded = dir.join("clip.mp4");
    let size = format!("{w}x{h}");
    let rate = format!("{fps}");
    let mut enc = Command::new(&bin)
        .args(["-y", "-loglevel", "error", "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", &size, "-r", &rate, "-i", "-"])
        .args(["-c:v", "libx264", "-crf", &crf.to_string(), "-pix_fmt", "yuv420p"])
        .arg(&encoded)
        .stdin(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::External(format!("cannot start {}: {e}", bin.display())))?;
    {
        let stdin = enc.stdin.as_mut().expect("piped stdin");
        for f in frames {
            let bytes: Vec<u8> = f.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            stdin.write_all(&bytes)?;
        }
    }
    let out = enc.wait_with_output()?;
    if !out.status.success() {
        return Err(Error::External(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    let mut dec = Command::new(&bin)
        .args(["-loglevel", "error", "-i"])
        .arg(&encoded)
        .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::External(format!("cannot start {}: {e}", bin.display())))?;
    let mut raw = Vec::new();
    dec.stdout.as_mut().expect("piped stdout").read_to_end(&mut raw)?;
    let out = dec.wait_with_output()?;
    let _ = std::fs::remove_dir_all(&dir);
    if !out.status.success() {
        return Err(Error::External(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    let per = h * w * 3;
    if raw.len() < per * frames.len() {
        return Err(Error::External(format!(
            "decoder returned {} bytes, expected {}",
            raw.len(),
            per * frames.len()
        )));
    }
    Ok(raw
        .chunks_exact(per)
        .take(frames.len())
        .map(|c| Array3::from_shape_vec((h, w, 3), c.iter().map(|&b| b as f32 / 255.0).collect()).expect("sized chunk"))
        .collect())
}

#[derive(Debug, Clone)]
pub struct Degraded {
    pub video: VideoTensor,
    pub record: DegradationRecord,
}

/// Applies the full chain with one parameter record for every frame.
pub fn degrade_video(hq: &VideoTensor, params: &DegradationParams, codec: &CodecMode) -> Result<Degraded> {
    let (t, h, w) = hq.dims();
    let (lh, lw) = if params.r > 1.0 {
        downscaled_dims(h, w, params.r)
    } else {
        (h, w)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let low: Vec<Frame> = (0..t)
        .map(|i| {
            let blurred = blur_frame(&hq.frame(i).to_owned(), params.sigma);
            let small = resize_frame(&blurred, lh, lw);
            add_noise(&small, params.delta, &mut rng)
        })
        .collect();
    let (coded, codec_name, bit_exact) = match codec {
        CodecMode::Proxy => (
            low.iter().map(|f| proxy_codec_frame(f, params.crf)).collect::<Vec<_>>(),
            "proxy",
            true,
        ),
        CodecMode::External { binary } => (external_codec(&low, params.crf, hq.frame_rate, binary)?, "h264", false),
    };
    let up: Vec<Frame> = coded.iter().map(|f| resize_frame(f, h, w)).collect();
    Ok(Degraded {
        video: VideoTensor::from_frames(&up, hq.frame_rate)?,
        record: DegradationRecord {
            params: *params,
            codec: codec_name.into(),
            bit_exact,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlickerKind {
    Brightness,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlickerSpec {
    pub kind: FlickerKind,
    /// Per-frame selection probability.
    pub p: f64,
    pub gain: [f64; 2],
    pub bias: [f64; 2],
    /// Peak displacement of the texture warp, in pixels.
    pub strength: f64,
    /// PSNR band (dB) a pixel-flickered frame must land in.
    pub psnr_band: [f64; 2],
    pub seed: u64,
}

impl Default for FlickerSpec {
    fn default() -> Self {
        Self::brightness(0.3, 0)
    }
}

impl FlickerSpec {
    pub fn brightness(p: f64, seed: u64) -> Self {
        Self {
            kind: FlickerKind::Brightness,
            p,
            gain: [0.5, 1.5],
            bias: [-0.1, 0.1],
            strength: 1.5,
            psnr_band: [25.0, 35.0],
            seed,
        }
    }

    pub fn pixel(p: f64, seed: u64) -> Self {
        Self {
            kind: FlickerKind::Pixel,
            ..Self::brightness(p, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("flicker probability {} outside [0, 1]", self.p)));
        }
        for (name, [lo, hi]) in [("gain", self.gain), ("bias", self.bias), ("psnr_band", self.psnr_band)] {
            if !(lo <= hi) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is inverted")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlickerRecord {
    pub kind: FlickerKind,
    pub selected: Vec<bool>,
    /// True for the pixel flicker stand-in, which does not reproduce
    /// generative re-rendering.
    pub proxy: bool,
}

#[derive(Debug, Clone)]
pub struct Flickered {
    pub video: VideoTensor,
    pub record: FlickerRecord,
}

fn select_frames(t: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..t).map(|_| rng.random::<f64>() < p).collect()
}

/// Selected frames become `clamp(gain·x + bias)` with per-frame gain and bias.
pub fn brightness_flicker(video: &VideoTensor, spec: &FlickerSpec) -> Result<Flickered> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let selected = select_frames(video.len(), spec.p, &mut rng);
    let mut frames = video.frames().clone();
    for (t, mut frame) in frames.axis_iter_mut(Axis(0)).enumerate() {
        if !selected[t] {
            continue;
        }
        let gain = draw(&mut rng, spec.gain) as f32;
        let bias = draw(&mut rng, spec.bias) as f32;
        frame.mapv_inplace(|v| (gain * v + bias).clamp(0.0, 1.0));
    }
    Ok(Flickered {
        video: VideoTensor::new(frames, video.frame_rate)?,
        record: FlickerRecord {
            kind: FlickerKind::Brightness,
            selected,
            proxy: false,
        },
    })
}

fn frame_psnr(a: &Frame, b: &Frame) -> f64 {
    let mse: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn bilinear(frame: &Frame, y: f32, x: f32, ch: usize) -> f32 {
    let (h, w, _) = frame.dim();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = frame[[y0, x0, ch]] * (1.0 - fx) + frame[[y0, x1, ch]] * fx;
    let bot = frame[[y1, x0, ch]] * (1.0 - fx) + frame[[y1, x1, ch]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Smooth random field: a coarse grid of standard normals, bilinearly upsampled.
fn smooth_field(h: usize, w: usize, cells: usize, rng: &mut impl Rng) -> Array3<f32> {
    let gh = cells + 1;
    let grid = Array3::from_shape_fn((gh, gh, 2), |_| {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        z as f32
    });
    Array3::from_shape_fn((h, w, 2), |(y, x, c)| {
        let gy = y as f32 / (h.max(2) - 1) as f32 * cells as f32;
        let gx = x as f32 / (w.max(2) - 1) as f32 * cells as f32;
        bilinear(&grid, gy, gx, c)
    })
}

fn perturb_frame(frame: &Frame, spec: &FlickerSpec, rng: &mut impl Rng) -> Frame {
    let (h, w, c) = frame.dim();
    let field = smooth_field(h, w, 4, rng);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let s = spec.strength as f32;
    let raw = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let warped = bilinear(frame, y as f32 + s * field[[y, x, 0]], x as f32 + s * field[[y, x, 1]], ch);
        warped + 0.02 * normal.sample(rng) as f32
    });
    // Scale the perturbation so the frame PSNR lands mid-band.
    let target = 0.5 * (spec.psnr_band[0] + spec.psnr_band[1]);
    let residual = &raw - frame;
    let mut alpha = {
        let mse = residual.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / residual.len() as f64;
        if mse == 0.0 {
            return frame.clone();
        }
        (10f64.powf(-target / 10.0) / mse).sqrt()
    };
    let mut out = frame.clone();
    for _ in 0..8 {
        out = (frame + &residual.mapv(|v| v * alpha as f32)).mapv(|v| v.clamp(0.0, 1.0));
        let p = frame_psnr(frame, &out);
        if !p.is_finite() || (p - target).abs() < 0.25 {
            break;
        }
        alpha *= 10f64.powf((p - target) / 20.0);
    }
    out
}

/// Selected frames receive a warp-plus-noise texture perturbation scaled to
/// the configured PSNR band; other frames are untouched.
pub fn pixel_flicker(video: &VideoTensor, spec: &FlickerSpec) -> Result<Flickered> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let selected = select_frames(video.len(), spec.p, &mut rng);
    let mut frames: Array4<f32> = video.frames().clone();
    for (t, mut frame) in frames.axis_iter_mut(Axis(0)).enumerate() {
        if selected[t] {
            let mut frame_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (t as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let out = perturb_frame(&frame.to_owned(), spec, &mut frame_rng);
            frame.assign(&out);
        }
    }
    Ok(Flickered {
        video: VideoTensor::new(frames, video.frame_rate)?,
        record: FlickerRecord {
            kind: FlickerKind::Pixel,
            selected,
            proxy: true,
        },
    })
}

pub fn flicker(video: &VideoTensor, spec: &FlickerSpec) -> Result<Flickered> {
    match spec.kind {
        FlickerKind::Brightness => brightness_flicker(video, spec),
        FlickerKind::Pixel => pixel_flicker(video, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{face_clip, ClipSpec};

    #[test]
    fn kernel_size_rule() {
        assert_eq!(gaussian_kernel(2.0).len(), 13);
        assert_eq!(gaussian_kernel(2.1).len(), 15);
        assert_eq!(gaussian_kernel(5.0).len(), 31);
    }

    #[test]
    fn inverted_range_rejected() {
        let mut r = DegradationRanges::default();
        r.sigma = [5.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_params(&mut rng, &r).is_err());
    }

    #[test]
    fn noise_free_ranges_never_add_noise() {
        let r = DegradationRanges::default().noise_free();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_params(&mut rng, &r).unwrap().delta, 0.0);
        }
    }

    #[test]
    fn downscale_dims_are_even() {
        assert_eq!(downscaled_dims(64, 64, 3.0), (22, 22));
        assert_eq!(downscaled_dims(512, 512, 4.0), (128, 128));
        let (h, w) = downscaled_dims(64, 48, 2.7);
        assert!(h % 2 == 0 && w % 2 == 0);
    }

    #[test]
    fn constant_clip_is_fixed_point() {
        let v = VideoTensor::constant(2, 32, 32, [0.2, 0.5, 0.8]);
        let p = DegradationParams {
            sigma: 3.0,
            r: 3.0,
            delta: 0.0,
            crf: 30,
            seed: 1,
        };
        let d = degrade_video(&v, &p, &CodecMode::Proxy).unwrap();
        let max = d
            .video
            .frames()
            .iter()
            .zip(v.frames())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max <= 1.0 / 255.0, "{max}");
    }

    #[test]
    fn shape_and_range_preserved() {
        let v = face_clip(&ClipSpec::toy(), 2);
        let p = DegradationParams {
            sigma: 2.5,
            r: 2.7,
            delta: 5.0,
            crf: 25,
            seed: 3,
        };
        let d = degrade_video(&v, &p, &CodecMode::Proxy).unwrap();
        assert_eq!(d.video.dims(), v.dims());
        assert!(d.video.frames().iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(d.record.bit_exact);
    }

    #[test]
    fn brightness_identity_cases() {
        let v = face_clip(&ClipSpec::toy(), 4);
        let none = brightness_flicker(&v, &FlickerSpec::brightness(0.0, 1)).unwrap();
        assert_eq!(none.video, v);
        let mut spec = FlickerSpec::brightness(1.0, 1);
        spec.gain = [1.0, 1.0];
        spec.bias = [0.0, 0.0];
        let all = brightness_flicker(&v, &spec).unwrap();
        assert!(all.record.selected.iter().all(|&s| s));
        assert_eq!(all.video, v);
    }

    #[test]
    fn pixel_flicker_band_and_untouched_frames() {
        let v = face_clip(&ClipSpec { frames: 12, ..ClipSpec::toy() }, 8);
        let out = pixel_flicker(&v, &FlickerSpec::pixel(0.5, 3)).unwrap();
        assert!(out.record.proxy);
        assert!(out.record.selected.iter().any(|&s| s));
        for (t, &sel) in out.record.selected.iter().enumerate() {
            let a = v.frame(t).to_owned();
            let b = out.video.frame(t).to_owned();
            if sel {
                let p = frame_psnr(&a, &b);
                assert!((25.0..=35.0).contains(&p), "frame {t}: {p} dB");
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(pixel_flicker(&v, &FlickerSpec::pixel(0.0, 3)).unwrap().video, v);
    }

    #[test]
    fn proxy_codec_changes_textured_blocks() {
        let v = face_clip(&ClipSpec::toy(), 9);
        let f = v.frame(0).to_owned();
        let coded = proxy_codec_frame(&f, 32);
        assert!(frame_psnr(&f, &coded) < 60.0);
        assert!(frame_psnr(&f, &coded) > 20.0);
    }
}
