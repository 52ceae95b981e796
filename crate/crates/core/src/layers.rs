//! Differentiable building blocks on the `(B, T, C, H, W)` layout.

use candle_core::{Module, Tensor, D};
use candle_nn::ops::softmax_last_dim;

use crate::conv::conv2d;
use crate::error::Result;
use crate::params::Init;

/// 3D convolution realized as one 2D convolution over temporally stacked taps.
///
/// With `stride_t == 1` the clip is replicate-padded in time by `kt / 2` on each
/// side; with `stride_t > 1` the temporal kernel equals the stride and no
/// padding is applied, so `T` must be a multiple of the stride.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: Tensor,
    bias: Tensor,
    k: usize,
    stride_s: usize,
    stride_t: usize,
}

impl Conv3d {
    pub fn new(
        init: &mut Init<'_>,
        c_in: usize,
        c_out: usize,
        kt: usize,
        k: usize,
        stride_s: usize,
        stride_t: usize,
    ) -> Result<Self> {
        let kt = if stride_t > 1 { stride_t } else { kt };
        let fan_in = (c_in * kt * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = init.uniform("weight", &[c_out, c_in, kt, k, k], bound)?;
        let bias = init.uniform("bias", &[c_out], bound)?;
        Ok(Self {
            weight,
            bias,
            k,
            stride_s,
            stride_t,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let (c_out, c_in, kt, k, _) = self.weight.dims5()?;
        debug_assert_eq!(c, c_in);
        let stacked = if self.stride_t == 1 {
            let p = kt / 2;
            let padded = if p > 0 {
                x.pad_with_same(1, p, p)?
            } else {
                x.clone()
            };
            if kt == 1 {
                padded
            } else {
                let taps = (0..kt)
                    .map(|dt| padded.narrow(1, dt, t))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                Tensor::cat(&taps, 2)?
            }
        } else {
            x.reshape((b, t / self.stride_t, self.stride_t * c, h, w))?
        };
        let t_out = stacked.dim(1)?;
        let kernel = self
            .weight
            .permute((0, 2, 1, 3, 4))?
            .reshape((c_out, kt * c_in, k, k))?;
        let y = stacked.reshape((b * t_out, kt * c_in, h, w))?;
        let y = conv2d(&y, &kernel, self.k / 2, self.stride_s)?
            .broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?;
        let (_, _, ho, wo) = y.dims4()?;
        Ok(y.reshape((b, t_out, c_out, ho, wo))?)
    }
}

/// Group normalization applied to each frame independently.
#[derive(Debug, Clone)]
pub struct FrameGroupNorm {
    inner: candle_nn::GroupNorm,
}

impl FrameGroupNorm {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Result<Self> {
        let groups = (1..=8.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        let weight = init.constant("weight", &[channels], 1.0)?;
        let bias = init.constant("bias", &[channels], 0.0)?;
        let inner = candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-6)?;
        Ok(Self { inner })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let y = self.inner.forward(&x.reshape((b * t, c, h, w))?)?;
        Ok(y.reshape((b, t, c, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = init.uniform("weight", &[d_out, d_in], bound)?;
        let bias = Some(init.uniform("bias", &[d_out], bound)?);
        Ok(Self { weight, bias })
    }

    pub fn zeros(init: &mut Init<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = init.constant("weight", &[d_out, d_in], 0.0)?;
        let bias = Some(init.constant("bias", &[d_out], 0.0)?);
        Ok(Self { weight, bias })
    }

    /// Applies to the last axis of a tensor of any rank ≥ 2.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// Layer normalization over the last axis (composed from differentiable ops).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.constant("weight", &[dim], 1.0)?,
            bias: init.constant("bias", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Multi-head scaled dot-product self-attention over a `(N, L, C)` sequence.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&mut init.push("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&mut init.push("proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last_dim(&scores)?;
        let y = attn
            .matmul(&v)?
            .permute((0, 2, 1, 3))?
            .reshape((n, l, c))?;
        self.proj.forward(&y)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn conv3d_shapes() {
        let mut store = ParamStore::new(0, &Device::Cpu, DType::F32);
        let mut root = store.root();
        let plain = Conv3d::new(&mut root.push("a"), 3, 5, 3, 3, 1, 1).unwrap();
        let down = Conv3d::new(&mut root.push("b"), 3, 5, 3, 3, 2, 2).unwrap();
        let x = Tensor::ones((2, 4, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(plain.forward(&x).unwrap().dims(), &[2, 4, 5, 8, 8]);
        assert_eq!(down.forward(&x).unwrap().dims(), &[2, 2, 5, 4, 4]);
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        // Direct 3D convolution with replicate temporal padding and zero spatial padding.
        let mut store = ParamStore::new(3, &Device::Cpu, DType::F64);
        let conv = Conv3d::new(&mut store.root(), 2, 1, 3, 3, 1, 1).unwrap();
        let (t, h, w) = (3usize, 4usize, 4usize);
        let xs: Vec<f64> = (0..t * 2 * h * w).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let x = Tensor::from_vec(xs.clone(), (1, t, 2, h, w), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = conv.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = conv.bias.to_vec1::<f64>().unwrap()[0];
        let at = |tt: usize, c: usize, yy: usize, xx: usize| xs[((tt * 2 + c) * h + yy) * w + xx];
        for to in 0..t {
            for yo in 0..h {
                for xo in 0..w {
                    let mut acc = b;
                    for c in 0..2 {
                        for dt in 0..3 {
                            let ti = (to as isize + dt as isize - 1).clamp(0, t as isize - 1) as usize;
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let yi = yo as isize + dy as isize - 1;
                                    let xi = xo as isize + dx as isize - 1;
                                    if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                                        continue;
                                    }
                                    let wi = ((c * 3 + dt) * 3 + dy) * 3 + dx;
                                    acc += wv[wi] * at(ti, c, yi as usize, xi as usize);
                                }
                            }
                        }
                    }
                    let got = y[(to * h + yo) * w + xo];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-100.0f64, 0.0, 100.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1e-40);
        assert!((y[1] - 2f64.ln()).abs() < 1e-12);
        assert!((y[2] - 100.0).abs() < 1e-12);
    }
}
