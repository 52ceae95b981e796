//! Procedural face-like clips for desk-scale training and tests.
//!
//! Each clip is a soft-edged cartoon face (skin ellipse, hair cap, eyes, mouth)
//! over a two-tone background, translating and blinking over time.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpec {
    pub frames: usize,
    pub size: usize,
    /// Maximum translation per frame, in pixels.
    pub max_speed: f32,
}

impl ClipSpec {
    pub fn toy() -> Self {
        Self {
            frames: 8,
            size: 64,
            max_speed: 1.5,
        }
    }
}

fn smooth_inside(d: f32, softness: f32) -> f32 {
    // d < 1 inside; soft transition of width `softness` around the boundary.
    let x = ((1.0 - d) / softness + 0.5).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn blend(dst: &mut [f32; 3], color: [f32; 3], alpha: f32) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

/// Renders one clip; the same seed always yields the same clip.
pub fn face_clip(spec: &ClipSpec, seed: u64) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.size as f32;
    let mut col = |lo: f32, hi: f32| -> [f32; 3] {
        [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
    };
    let bg_top = col(0.1, 0.9);
    let bg_bottom = col(0.1, 0.9);
    let hair = col(0.0, 0.4);
    let eye = col(0.0, 0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let tone = rng.random_range(0.45..0.9f32);
    let skin = [tone, tone * rng.random_range(0.7..0.85), tone * rng.random_range(0.55..0.75)];
    let mouth = [rng.random_range(0.5..0.8), 0.2, 0.25];
    let face_rx = s * rng.random_range(0.2..0.3);
    let face_ry = face_rx * rng.random_range(1.15..1.35);
    let cx0 = s * rng.random_range(0.4..0.6);
    let cy0 = s * rng.random_range(0.45..0.55);
    let vx = rng.random_range(-spec.max_speed..=spec.max_speed);
    let vy = rng.random_range(-spec.max_speed..=spec.max_speed) * 0.5;
    let blink_at = rng.random_range(0..spec.frames.max(1) * 2);

    let mut frames = Array4::<f32>::zeros((spec.frames, spec.size, spec.size, 3));
    for t in 0..spec.frames {
        let cx = cx0 + vx * t as f32;
        let cy = cy0 + vy * t as f32;
        let eye_open = if t == blink_at { 0.25 } else { 1.0 };
        for y in 0..spec.size {
            for x in 0..spec.size {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let v = py / s;
                let mut rgb = [
                    bg_top[0] * (1.0 - v) + bg_bottom[0] * v,
                    bg_top[1] * (1.0 - v) + bg_bottom[1] * v,
                    bg_top[2] * (1.0 - v) + bg_bottom[2] * v,
                ];
                let ell = |ex: f32, ey: f32, rx: f32, ry: f32| {
                    (((px - ex) / rx).powi(2) + ((py - ey) / ry).powi(2)).sqrt()
                };
                let hair_d = ell(cx, cy - face_ry * 0.25, face_rx * 1.12, face_ry * 1.0);
                blend(&mut rgb, hair, smooth_inside(hair_d, 0.08));
                let face_d = ell(cx, cy + face_ry * 0.08, face_rx, face_ry * 0.92);
                blend(&mut rgb, skin, smooth_inside(face_d, 0.08));
                for side in [-1.0f32, 1.0] {
                    let ex = cx + side * face_rx * 0.42;
                    let ey = cy - face_ry * 0.05;
                    let d = ell(ex, ey, face_rx * 0.16, face_ry * 0.09 * eye_open);
                    blend(&mut rgb, eye, smooth_inside(d, 0.3));
                }
                let md = ell(cx, cy + face_ry * 0.5, face_rx * 0.35, face_ry * 0.08);
                blend(&mut rgb, mouth, smooth_inside(md, 0.3));
                for c in 0..3 {
                    frames[[t, y, x, c]] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
    }
    VideoTensor::new(frames, 25.0).expect("rendered values are finite")
}

/// `count` clips with seeds `base_seed, base_seed + 1, ...`.
pub fn corpus(spec: &ClipSpec, count: usize, base_seed: u64) -> Vec<VideoTensor> {
    (0..count).map(|i| face_clip(spec, base_seed + i as u64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = face_clip(&ClipSpec::toy(), 3);
        let b = face_clip(&ClipSpec::toy(), 3);
        assert_eq!(a, b);
        assert_eq!(a.dims(), (8, 64, 64));
        assert!(a.frames().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, face_clip(&ClipSpec::toy(), 4));
    }
}
