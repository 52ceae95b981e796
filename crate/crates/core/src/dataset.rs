//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   <video-id>/
//!     000000.png
//!     000001.png
//!     ...
//!     meta.json
//! ```
//!
//! Frames are 8-bit RGB PNG numbered contiguously from zero. `meta.json` is
//! optional for plain input directories; everything this crate writes has one.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::degrade::{resize_frame, DegradationRecord, FlickerRecord};
use crate::error::{Error, Result};
use crate::video::VideoTensor;

pub const META_FILE: &str = "meta.json";
pub const DEFAULT_FRAME_RATE: f32 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub frame_rate: f32,
    /// Free-form origin, e.g. `synthetic:seed=3` or `degrade:<source dir>`.
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flicker: Option<FlickerRecord>,
}

impl VideoMeta {
    pub fn for_video(video: &VideoTensor, provenance: impl Into<String>) -> Self {
        let (t, h, w) = video.dims();
        Self {
            height: h,
            width: w,
            frames: t,
            frame_rate: video.frame_rate,
            provenance: provenance.into(),
            degradation: None,
            flicker: None,
        }
    }
}

pub fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn data_err(dir: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", dir.display()))
}

/// Frame files of one video directory, checked for contiguous numbering.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut numbers = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| data_err(dir, e))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if stem.len() != 6 || !stem.bytes().all(|b| b.is_ascii_digit()) {
            return Err(data_err(dir, format!("frame {} is not named %06d.png", path.display())));
        }
        numbers.push(stem.parse::<usize>().expect("six digits"));
    }
    if numbers.is_empty() {
        return Err(data_err(dir, "no frames"));
    }
    numbers.sort_unstable();
    if let Some((i, n)) = numbers.iter().enumerate().find(|(i, n)| *i != **n) {
        return Err(data_err(dir, format!("frame numbering is not contiguous from 0: expected {i:06}, found {n:06}")));
    }
    Ok(numbers.iter().map(|&i| dir.join(frame_name(i))).collect())
}

pub fn read_meta(dir: &Path) -> Result<Option<VideoMeta>> {
    let path = dir.join(META_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map(Some).map_err(|e| data_err(&path, e))
}

fn to_frame(img: RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer")
}

/// Loads every frame of a video directory and checks it against `meta.json`.
pub fn read_video(dir: &Path) -> Result<(VideoTensor, Option<VideoMeta>)> {
    let paths = frame_paths(dir)?;
    let meta = read_meta(dir)?;
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p).map_err(|e| data_err(p, e))?.to_rgb8();
        let f = to_frame(img);
        if let Some(first) = frames.first() {
            let first: &Array3<f32> = first;
            if first.dim() != f.dim() {
                return Err(data_err(p, format!("resolution {:?} differs from frame 0 {:?}", f.dim(), first.dim())));
            }
        }
        frames.push(f);
    }
    let (h, w, _) = frames[0].dim();
    if let Some(m) = &meta {
        if (m.frames, m.height, m.width) != (frames.len(), h, w) {
            return Err(data_err(
                dir,
                format!(
                    "meta.json says {}x{}x{}, directory holds {}x{h}x{w}",
                    m.frames,
                    m.height,
                    m.width,
                    frames.len()
                ),
            ));
        }
    }
    let rate = meta.as_ref().map_or(DEFAULT_FRAME_RATE, |m| m.frame_rate);
    Ok((VideoTensor::from_frames(&frames, rate)?, meta))
}

pub fn write_video(dir: &Path, video: &VideoTensor, meta: &VideoMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (t, h, w) = video.dims();
    for i in 0..t {
        let f = video.frame(i);
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (f[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        });
        img.save(dir.join(frame_name(i)))?;
    }
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Video directories under `root`, sorted by name.
pub fn list_videos(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(data_err(root, "dataset root is not a directory"));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(data_err(root, "no video directories"));
    }
    Ok(dirs)
}

/// Layout check without decoding pixels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoSummary {
    pub id: String,
    pub frames: usize,
    pub height: u32,
    pub width: u32,
}

pub fn validate_video(dir: &Path) -> Result<VideoSummary> {
    let paths = frame_paths(dir)?;
    let dims = image::image_dimensions(&paths[0]).map_err(|e| data_err(&paths[0], e))?;
    for p in &paths[1..] {
        let d = image::image_dimensions(p).map_err(|e| data_err(p, e))?;
        if d != dims {
            return Err(data_err(p, format!("resolution {d:?} differs from frame 0 {dims:?}")));
        }
    }
    if let Some(m) = read_meta(dir)? {
        if (m.frames, m.width as u32, m.height as u32) != (paths.len(), dims.0, dims.1) {
            return Err(data_err(dir, "meta.json disagrees with the frames on disk"));
        }
    }
    Ok(VideoSummary {
        id: video_id(dir),
        frames: paths.len(),
        width: dims.0,
        height: dims.1,
    })
}

pub fn validate_dataset(root: &Path) -> Result<Vec<VideoSummary>> {
    list_videos(root)?.iter().map(|d| validate_video(d)).collect()
}

pub fn video_id(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Cuts a video into non-overlapping `frames`-long windows resized to
/// `size×size`. A tail shorter than one window is dropped.
pub fn clips(video: &VideoTensor, frames: usize, size: usize) -> Result<Vec<VideoTensor>> {
    let n = video.len() / frames;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let w = video.window(k * frames, frames)?;
        if w.height() == size && w.width() == size {
            out.push(w);
            continue;
        }
        let resized: Vec<Array3<f32>> = (0..frames).map(|i| resize_frame(&w.frame(i).to_owned(), size, size)).collect();
        out.push(VideoTensor::from_frames(&resized, w.frame_rate)?);
    }
    Ok(out)
}

/// Training and held-out clips: the last `held_out` videos (by name) are
/// reserved for evaluation.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<VideoTensor>,
    pub held_out: Vec<VideoTensor>,
}

pub fn load_split(root: &Path, clip_frames: usize, size: usize, held_out: usize) -> Result<Split> {
    let dirs = list_videos(root)?;
    if held_out >= dirs.len() {
        return Err(data_err(
            root,
            format!("{} videos cannot leave {held_out} held out and still train", dirs.len()),
        ));
    }
    let cut = dirs.len() - held_out;
    let mut split = Split {
        train: Vec::new(),
        held_out: Vec::new(),
    };
    for (i, d) in dirs.iter().enumerate() {
        let (v, _) = read_video(d)?;
        if v.len() < clip_frames {
            return Err(data_err(d, format!("{} frames, shorter than one {clip_frames}-frame clip", v.len())));
        }
        let c = clips(&v, clip_frames, size)?;
        if i < cut {
            split.train.extend(c);
        } else {
            split.held_out.extend(c);
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{face_clip, ClipSpec};

    #[test]
    fn write_read_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = face_clip(&ClipSpec::toy(), 1);
        let quant = VideoTensor::new(v.frames().mapv(|x| (x * 255.0).round() / 255.0), v.frame_rate).unwrap();
        write_video(dir.path(), &quant, &VideoMeta::for_video(&quant, "synthetic")).unwrap();
        let (back, meta) = read_video(dir.path()).unwrap();
        assert_eq!(back, quant);
        assert_eq!(meta.unwrap().provenance, "synthetic");
    }

    #[test]
    fn gap_in_numbering_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = VideoTensor::constant(3, 8, 8, [0.5; 3]);
        write_video(dir.path(), &v, &VideoMeta::for_video(&v, "t")).unwrap();
        std::fs::remove_file(dir.path().join(frame_name(1))).unwrap();
        assert!(matches!(frame_paths(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn mixed_resolution_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = VideoTensor::constant(2, 8, 8, [0.5; 3]);
        write_video(dir.path(), &v, &VideoMeta::for_video(&v, "t")).unwrap();
        std::fs::remove_file(dir.path().join(META_FILE)).unwrap();
        RgbImage::new(4, 4).save(dir.path().join(frame_name(1))).unwrap();
        assert!(matches!(validate_video(dir.path()), Err(Error::Data(_))));
        assert!(matches!(read_video(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn clips_drop_short_tail_and_resize() {
        let v = VideoTensor::constant(10, 12, 12, [0.2; 3]);
        let c = clips(&v, 4, 8).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].dims(), (4, 8, 8));
    }
}
