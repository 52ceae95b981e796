//! Clip container shared by every stage of the pipeline.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// A `T×H×W×3` clip with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: Array4<f32>,
    pub frame_rate: f32,
}

impl VideoTensor {
    /// Wraps a frame array, rejecting non-finite values and clamping to `[0, 1]`.
    pub fn new(frames: Array4<f32>, frame_rate: f32) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty clip {t}x{h}x{w}")));
        }
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("clip contains non-finite values".into()));
        }
        let frames = frames.mapv(|v| v.clamp(0.0, 1.0));
        Ok(Self { frames, frame_rate })
    }

    pub fn from_frames(frames: &[Array3<f32>], frame_rate: f32) -> Result<Self> {
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("frames differ in resolution: {e}")))?;
        Self::new(stacked, frame_rate)
    }

    /// A clip where every pixel of every frame has the same color.
    pub fn constant(t: usize, h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let frames = Array4::from_shape_fn((t, h, w, 3), |(_, _, _, c)| rgb[c].clamp(0.0, 1.0));
        Self {
            frames,
            frame_rate: 25.0,
        }
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f32> {
        self.frames
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    /// `(T, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (t, h, w, _) = self.frames.dim();
        (t, h, w)
    }

    /// Frames `[start, start + len)` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Shape(format!(
                "window [{start}, {}) outside a {}-frame clip",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            frames: self
                .frames
                .slice(ndarray::s![start..start + len, .., .., ..])
                .to_owned(),
            frame_rate: self.frame_rate,
        })
    }

    /// Model layout `(1, T, 3, H, W)` with values in `[0, 1]`.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        stack_clips(std::slice::from_ref(self), device, dtype)
    }

    /// Inverse of [`VideoTensor::to_tensor`] for one batch element; clamps to `[0, 1]`.
    pub fn from_tensor(x: &Tensor, frame_rate: f32) -> Result<Self> {
        let (t, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = x
            .to_dtype(DType::F32)?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let frames = Array4::from_shape_vec((t, h, w, 3), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(frames, frame_rate)
    }
}

/// Stacks equally-shaped clips into a `(B, T, 3, H, W)` batch.
pub fn stack_clips(clips: &[VideoTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (t, h, w) = first.dims();
    let mut data = Vec::with_capacity(clips.len() * t * h * w * 3);
    for clip in clips {
        if clip.dims() != (t, h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?} clips",
                (t, h, w),
                clip.dims()
            )));
        }
        data.extend(clip.frames.iter().copied());
    }
    let x = Tensor::from_vec(data, (clips.len(), t, h, w, 3), device)?
        .permute((0, 1, 4, 2, 3))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(x)
}

/// Splits a `(B, T, 3, H, W)` batch back into clips.
pub fn unstack_clips(x: &Tensor, frame_rate: f32) -> Result<Vec<VideoTensor>> {
    let b = x.dim(0)?;
    (0..b)
        .map(|i| VideoTensor::from_tensor(&x.get(i)?, frame_rate))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_clamps_and_rejects_nan() {
        let mut a = Array4::<f32>::zeros((1, 2, 2, 3));
        a[[0, 0, 0, 0]] = 1.5;
        a[[0, 1, 1, 2]] = -0.5;
        let v = VideoTensor::new(a.clone(), 25.0).unwrap();
        assert_eq!(v.frames()[[0, 0, 0, 0]], 1.0);
        assert_eq!(v.frames()[[0, 1, 1, 2]], 0.0);
        a[[0, 0, 1, 1]] = f32::NAN;
        assert!(VideoTensor::new(a, 25.0).is_err());
    }

    #[test]
    fn tensor_round_trip_is_lossless() {
        let frames = Array4::from_shape_fn((2, 3, 4, 3), |(t, y, x, c)| {
            ((t * 31 + y * 7 + x * 3 + c) % 11) as f32 / 10.0
        });
        let v = VideoTensor::new(frames, 30.0).unwrap();
        let x = v.to_tensor(&Device::Cpu, DType::F32).unwrap();
        assert_eq!(x.dims(), &[1, 2, 3, 3, 4]);
        let back = unstack_clips(&x, 30.0).unwrap();
        assert_eq!(back[0], v);
    }
}
