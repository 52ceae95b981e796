//! Training-data curation: face-proportion cropping (stage A), side-face
//! filtering (stage B), text rejection (stage C) and motion scoring.
//!
//! Face boxes, landmarks and text detections come from external models; they
//! enter here as recorded data or through the client traits below.

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::degrade::resize_frame;
use crate::error::{Error, Result};
use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Square crop window in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct Cropped {
    pub video: VideoTensor,
    pub window: CropWindow,
    /// Frame whose box had the largest face-to-frame area ratio.
    pub anchor_frame: usize,
    pub face_proportion: f64,
}

/// Crops every frame with one square window centred on the face box of the
/// frame with the largest face proportion, enlarged by `margin` of the box
/// size on each side, clamped to the frame, and resized to `target`.
pub fn face_crop(video: &VideoTensor, boxes: &[Option<FaceBox>], margin: f64, target: usize) -> Result<Cropped> {
    let (_, h, w) = video.dims();
    let frame_area = (h * w) as f64;
    let (anchor, best) = boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|b| (i, b)))
        .filter(|(_, b)| b.area() > 0.0)
        .fold(None::<(usize, FaceBox)>, |acc, (i, b)| match acc {
            Some((_, a)) if a.area() >= b.area() => acc,
            _ => Some((i, b)),
        })
        .ok_or_else(|| Error::Data("no face detected in any frame".into()))?;
    let side = (best.w.max(best.h) * (1.0 + 2.0 * margin)).round() as usize;
    let side = side.clamp(1, h.min(w));
    let cx = best.x + best.w / 2.0;
    let cy = best.y + best.h / 2.0;
    let x0 = (cx - side as f64 / 2.0).round().clamp(0.0, (w - side) as f64) as usize;
    let y0 = (cy - side as f64 / 2.0).round().clamp(0.0, (h - side) as f64) as usize;
    let window = CropWindow { x: x0, y: y0, size: side };
    let frames: Vec<Array3<f32>> = video
        .frames()
        .axis_iter(Axis(0))
        .map(|f| {
            let crop = f.slice(ndarray::s![y0..y0 + side, x0..x0 + side, ..]).to_owned();
            resize_frame(&crop, target, target)
        })
        .collect();
    Ok(Cropped {
        video: VideoTensor::from_frames(&frames, video.frame_rate)?,
        window,
        anchor_frame: anchor,
        face_proportion: best.area() / frame_area,
    })
}

/// Eye outer corners and nose tip, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    pub left_eye: (f64, f64),
    pub right_eye: (f64, f64),
    pub nose: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Frontal,
    Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideRatio {
    /// `|x1 − x0| / |x2 − x0|`; `None` when the nose and right eye share an x coordinate.
    pub alpha: Option<f64>,
    pub verdict: Orientation,
    /// Decided by eye/nose ordering before `alpha` was consulted.
    pub prescreened: bool,
}

pub const SIDE_ALPHA_MIN: f64 = 0.4;
pub const SIDE_ALPHA_MAX: f64 = 2.5;

pub fn side_ratio(g: &FaceGeometry) -> SideRatio {
    let (x1, x2, x0) = (g.left_eye.0, g.right_eye.0, g.nose.0);
    let alpha = if x2 == x0 {
        None
    } else {
        Some((x1 - x0).abs() / (x2 - x0).abs())
    };
    if x1 > x0 || x2 < x0 {
        return SideRatio {
            alpha,
            verdict: Orientation::Side,
            prescreened: true,
        };
    }
    let verdict = match alpha {
        Some(a) if (SIDE_ALPHA_MIN..=SIDE_ALPHA_MAX).contains(&a) => Orientation::Frontal,
        _ => Orientation::Side,
    };
    SideRatio {
        alpha,
        verdict,
        prescreened: false,
    }
}

pub const DEFAULT_MOTION_THRESHOLD: f32 = 10.0 / 255.0;

fn gray(frame: ArrayView3<'_, f32>) -> ndarray::Array2<f32> {
    frame.map_axis(Axis(2), |p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
}

/// Fraction of pixels whose grayscale change between adjacent frames exceeds
/// `threshold`, over all `T − 1` frame pairs. Zero for single-frame clips.
pub fn motion_intensity(video: &VideoTensor, threshold: f32) -> f64 {
    let (t, h, w) = video.dims();
    if t < 2 {
        return 0.0;
    }
    let grays: Vec<_> = (0..t).map(|i| gray(video.frame(i))).collect();
    let changed: usize = grays
        .windows(2)
        .map(|p| p[0].iter().zip(p[1].iter()).filter(|(a, b)| (*a - *b).abs() > threshold).count())
        .sum();
    changed as f64 / ((t - 1) * h * w) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextRegion {
    pub confidence: f64,
}

/// Text detector seam.
pub trait OcrClient {
    fn detect(&self, frame: ArrayView3<'_, f32>) -> Result<Vec<TextRegion>>;
}

/// Built-in client: never reports text.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoTextOcr;

impl OcrClient for NoTextOcr {
    fn detect(&self, _: ArrayView3<'_, f32>) -> Result<Vec<TextRegion>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextVerdict {
    Accept,
    Reject,
    /// The client failed; the clip is kept but flagged.
    Unverified,
}

/// Rejects when any region in a sampled frame has confidence above `threshold`.
pub fn text_filter(video: &VideoTensor, client: &dyn OcrClient, threshold: f64, stride: usize) -> TextVerdict {
    for t in (0..video.len()).step_by(stride.max(1)) {
        match client.detect(video.frame(t)) {
            Ok(regions) if regions.iter().any(|r| r.confidence > threshold) => return TextVerdict::Reject,
            Ok(_) => {}
            Err(e) => {
                log::warn!("text detection failed on frame {t}: {e}");
                return TextVerdict::Unverified;
            }
        }
    }
    TextVerdict::Accept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub crop_margin: f64,
    pub target_size: usize,
    pub motion_threshold: f32,
    /// Clips scoring below this motion intensity are dropped after stage C.
    pub min_motion: Option<f64>,
    pub text_threshold: f64,
    pub text_stride: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            crop_margin: 0.2,
            target_size: 512,
            motion_threshold: DEFAULT_MOTION_THRESHOLD,
            min_motion: None,
            text_threshold: 0.5,
            text_stride: 8,
        }
    }
}

/// Recorded detector outputs for one clip.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaceFixture {
    pub boxes: Vec<Option<FaceBox>>,
    pub landmarks: Vec<Option<FaceGeometry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub id: String,
    pub face_proportion: Option<f64>,
    pub crop: Option<CropWindow>,
    pub orientation: Option<Orientation>,
    /// Median α over frames with landmarks.
    pub alpha: Option<f64>,
    pub motion_intensity: f64,
    pub text: Option<TextVerdict>,
    pub passed_a: bool,
    pub passed_b: bool,
    pub passed_c: bool,
    pub kept: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub after_a: usize,
    pub after_b: usize,
    pub after_c: usize,
    pub kept: usize,
}

/// Runs stages A → B → C on one clip. Returns the cropped clip when kept.
pub fn curate_clip(
    id: &str,
    video: &VideoTensor,
    faces: &FaceFixture,
    ocr: &dyn OcrClient,
    cfg: &CurationConfig,
) -> (CurationReport, Option<VideoTensor>) {
    let mut report = CurationReport {
        id: id.to_string(),
        face_proportion: None,
        crop: None,
        orientation: None,
        alpha: None,
        motion_intensity: motion_intensity(video, cfg.motion_threshold),
        text: None,
        passed_a: false,
        passed_b: false,
        passed_c: false,
        kept: false,
    };
    let cropped = match face_crop(video, &faces.boxes, cfg.crop_margin, cfg.target_size) {
        Ok(c) => c,
        Err(_) => return (report, None),
    };
    report.face_proportion = Some(cropped.face_proportion);
    report.crop = Some(cropped.window);
    report.passed_a = true;

    let ratios: Vec<SideRatio> = faces.landmarks.iter().flatten().map(side_ratio).collect();
    if ratios.is_empty() {
        return (report, None);
    }
    let side = ratios.iter().filter(|r| r.verdict == Orientation::Side).count();
    let mut alphas: Vec<f64> = ratios.iter().filter_map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    report.alpha = alphas.get(alphas.len() / 2).copied();
    let orientation = if 2 * side > ratios.len() {
        Orientation::Side
    } else {
        Orientation::Frontal
    };
    report.orientation = Some(orientation);
    if orientation == Orientation::Side {
        return (report, None);
    }
    report.passed_b = true;

    let verdict = text_filter(&cropped.video, ocr, cfg.text_threshold, cfg.text_stride);
    report.text = Some(verdict);
    if verdict == TextVerdict::Reject {
        return (report, None);
    }
    report.passed_c = true;
    report.kept = cfg.min_motion.is_none_or(|m| report.motion_intensity >= m);
    let kept = report.kept.then_some(cropped.video);
    (report, kept)
}

pub fn stage_counts(reports: &[CurationReport]) -> StageCounts {
    StageCounts {
        input: reports.len(),
        after_a: reports.iter().filter(|r| r.passed_a).count(),
        after_b: reports.iter().filter(|r| r.passed_b).count(),
        after_c: reports.iter().filter(|r| r.passed_c).count(),
        kept: reports.iter().filter(|r| r.kept).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn geom(x1: f64, x0: f64, x2: f64) -> FaceGeometry {
        FaceGeometry {
            left_eye: (x1, 50.0),
            right_eye: (x2, 50.0),
            nose: (x0, 70.0),
        }
    }

    #[test]
    fn side_ratio_examples() {
        let r = side_ratio(&geom(80.0, 100.0, 120.0));
        assert_eq!((r.alpha, r.verdict), (Some(1.0), Orientation::Frontal));
        let r = side_ratio(&geom(94.0, 100.0, 120.0));
        assert!((r.alpha.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(r.verdict, Orientation::Side);
        let r = side_ratio(&geom(105.0, 100.0, 120.0));
        assert!(r.prescreened);
        assert_eq!(r.verdict, Orientation::Side);
        let r = side_ratio(&geom(90.0, 100.0, 100.0));
        assert_eq!((r.alpha, r.verdict), (None, Orientation::Side));
    }

    #[test]
    fn motion_examples() {
        let still = VideoTensor::constant(3, 4, 4, [0.4; 3]);
        assert_eq!(motion_intensity(&still, DEFAULT_MOTION_THRESHOLD), 0.0);

        let mut f = Array4::<f32>::zeros((2, 4, 5, 3));
        for c in 0..3 {
            f[[1, 2, 3, c]] = 1.0;
        }
        let one = VideoTensor::new(f, 25.0).unwrap();
        assert_eq!(motion_intensity(&one, DEFAULT_MOTION_THRESHOLD), 1.0 / 20.0);

        let alt = Array4::from_shape_fn((4, 3, 3, 3), |(t, _, _, _)| (t % 2) as f32);
        let alt = VideoTensor::new(alt, 25.0).unwrap();
        assert_eq!(motion_intensity(&alt, DEFAULT_MOTION_THRESHOLD), 1.0);

        assert_eq!(motion_intensity(&VideoTensor::constant(1, 4, 4, [0.0; 3]), 0.1), 0.0);
    }

    #[test]
    fn crop_anchors_on_largest_face() {
        let v = VideoTensor::constant(2, 100, 100, [0.5; 3]);
        let boxes = vec![
            Some(FaceBox { x: 10.0, y: 10.0, w: 31.6, h: 31.6 }),
            Some(FaceBox { x: 30.0, y: 30.0, w: 63.2, h: 63.2 }),
        ];
        let c = face_crop(&v, &boxes, 0.0, 32).unwrap();
        assert_eq!(c.anchor_frame, 1);
        assert_eq!(c.video.dims(), (2, 32, 32));
        assert!(face_crop(&v, &[None, None], 0.2, 32).is_err());
    }

    #[test]
    fn whole_frame_box_is_identity_crop() {
        let v = VideoTensor::constant(1, 64, 64, [0.1, 0.2, 0.3]);
        let c = face_crop(&v, &[Some(FaceBox { x: 0.0, y: 0.0, w: 64.0, h: 64.0 })], 0.2, 64).unwrap();
        assert_eq!(c.window, CropWindow { x: 0, y: 0, size: 64 });
        assert_eq!(c.video, v);
    }

    struct Fixed(Vec<TextRegion>);
    impl OcrClient for Fixed {
        fn detect(&self, _: ArrayView3<'_, f32>) -> Result<Vec<TextRegion>> {
            Ok(self.0.clone())
        }
    }
    struct Broken;
    impl OcrClient for Broken {
        fn detect(&self, _: ArrayView3<'_, f32>) -> Result<Vec<TextRegion>> {
            Err(Error::External("ocr offline".into()))
        }
    }

    #[test]
    fn text_filter_contracts() {
        let v = VideoTensor::constant(4, 8, 8, [0.5; 3]);
        assert_eq!(text_filter(&v, &NoTextOcr, 0.5, 1), TextVerdict::Accept);
        let hit = Fixed(vec![TextRegion { confidence: 0.9 }]);
        assert_eq!(text_filter(&v, &hit, 0.5, 1), TextVerdict::Reject);
        let weak = Fixed(vec![TextRegion { confidence: 0.5 }]);
        assert_eq!(text_filter(&v, &weak, 0.5, 1), TextVerdict::Accept);
        assert_eq!(text_filter(&v, &Broken, 0.5, 1), TextVerdict::Unverified);
    }
}
