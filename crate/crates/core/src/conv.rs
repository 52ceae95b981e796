//! 2D convolution as im2col followed by a matrix product.
//!
//! Candle's CPU backward for `conv2d` goes through a direct transposed
//! convolution, which is several times slower than the forward pass. Here
//! the backward pass is two matrix products plus a col2im scatter.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`:
/// outputs whose input coordinate `o·stride + kk − pad` lands inside `[0, len)`.
fn valid_range(len: usize, out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    let hi = if len + pad > kk { ((len + pad - kk - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Columns laid out as `(C·k·k, N·Ho·Wo)`, so each kernel tap copies runs of
/// input rows into contiguous memory.
fn im2col<T: WithDType>(x: &[T], g: Geometry, mut out: Vec<T>) -> Vec<T> {
    let Geometry { n, c, h, w, k, stride, pad, ho, wo } = g;
    let plane_out = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            let (y0, y1) = valid_range(h, ho, ky, stride, pad);
            for kx in 0..k {
                let (x0, x1) = valid_range(w, wo, kx, stride, pad);
                let col = (ci * k + ky) * k + kx;
                for b in 0..n {
                    let src = &x[(b * c + ci) * h * w..][..h * w];
                    let dst = &mut out[(col * n + b) * plane_out..][..plane_out];
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let srow = &src[iy * w..][..w];
                        let drow = &mut dst[oy * wo..][..wo];
                        if stride == 1 {
                            let ix0 = x0 + kx - pad;
                            drow[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                drow[ox] = srow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(cols_v: &[T], g: Geometry, mut out: Vec<T>) -> Vec<T> {
    let Geometry { n, c, h, w, k, stride, pad, ho, wo } = g;
    let plane_out = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            let (y0, y1) = valid_range(h, ho, ky, stride, pad);
            for kx in 0..k {
                let (x0, x1) = valid_range(w, wo, kx, stride, pad);
                let col = (ci * k + ky) * k + kx;
                for b in 0..n {
                    let dst = &mut out[(b * c + ci) * h * w..][..h * w];
                    let src = &cols_v[(col * n + b) * plane_out..][..plane_out];
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let drow = &mut dst[iy * w..][..w];
                        let srow = &src[oy * wo..][..wo];
                        if stride == 1 {
                            let ix0 = x0 + kx - pad;
                            for (d, s) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                                *d += *s;
                            }
                        } else {
                            for ox in x0..x1 {
                                drow[ox * stride + kx - pad] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous operand".into())),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);
/// Carries a precomputed convolution output and supplies its gradients.
struct ConvGrad(Geometry);

fn unary<F32, F64>(s: &CpuStorage, l: &Layout, f32f: F32, f64f: F64, what: &str) -> candle_core::Result<CpuStorage>
where
    F32: Fn(&[f32]) -> Vec<f32>,
    F64: Fn(&[f64]) -> Vec<f64>,
{
    match s {
        CpuStorage::F32(v) => Ok(CpuStorage::F32(f32f(contiguous(v, l)?))),
        CpuStorage::F64(v) => Ok(CpuStorage::F64(f64f(contiguous(v, l)?))),
        _ => Err(candle_core::Error::Msg(format!("{what} supports f32 and f64"))),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        // `vec![0.0; n]` maps to zeroed allocation for floats.
        let len = g.cols() * g.n * g.ho * g.wo;
        let out = unary(s, l, |v| im2col(v, g, vec![0.0; len]), |v| im2col(v, g, vec![0.0; len]), "im2col")?;
        Ok((out, Shape::from((g.cols(), g.n * g.ho * g.wo))))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let len = g.n * g.c * g.h * g.w;
        let out = unary(s, l, |v| col2im(v, g, vec![0.0; len]), |v| col2im(v, g, vec![0.0; len]), "col2im")?;
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }
}

impl CustomOp3 for ConvGrad {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        _: &CpuStorage,
        _: &Layout,
        _: &CpuStorage,
        _: &Layout,
        y: &CpuStorage,
        yl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = unary(y, yl, <[f32]>::to_vec, <[f64]>::to_vec, "conv2d")?;
        Ok((out, yl.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        kernel: &Tensor,
        _: &Tensor,
        _: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = self.0;
        let o = kernel.dim(0)?;
        let gy = grad
            .permute((1, 0, 2, 3))?
            .contiguous()?
            .reshape((o, g.n * g.ho * g.wo))?;
        let cols = x.detach().contiguous()?.apply_op1_no_bwd(&Im2Col(g))?;
        let gk = gy.matmul(&cols.t()?)?.reshape(kernel.shape())?;
        let gcols = kernel.detach().reshape((o, g.cols()))?.t()?.matmul(&gy)?;
        let gx = gcols.apply_op1_no_bwd(&Col2Im(g))?;
        Ok((Some(gx), Some(gk), None))
    }
}

/// Square-kernel convolution of `(N, C, H, W)` by `(O, C, k, k)` with zero
/// padding, differentiable in both arguments.
pub fn conv2d(x: &Tensor, kernel: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, kc, k, k2) = kernel.dims4()?;
    if kc != c || k != k2 || stride == 0 {
        return Err(Error::Shape(format!(
            "conv2d of {:?} by kernel {:?} with stride {stride}",
            x.dims(),
            kernel.dims()
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("{h}x{w} input is smaller than the {k}x{k} kernel")));
    }
    let g = Geometry {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    };
    let x = x.contiguous()?;
    let cols = x.detach().apply_op1_no_bwd(&Im2Col(g))?;
    let y = kernel
        .detach()
        .reshape((o, g.cols()))?
        .matmul(&cols)?
        .reshape((o, n, g.ho, g.wo))?
        .permute((1, 0, 2, 3))?
        .contiguous()?;
    if !(x.track_op() || kernel.track_op()) {
        return Ok(y);
    }
    Ok(x.apply_op3(kernel, &y, ConvGrad(g))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn matches_candle_forward_and_gradients() {
        let dev = Device::Cpu;
        for (n, c, h, w, o, k, pad, stride) in [
            (2, 3, 9, 7, 4, 3, 1, 1),
            (1, 2, 8, 8, 3, 3, 1, 2),
            (2, 3, 12, 12, 5, 4, 0, 4),
            (1, 1, 5, 6, 2, 1, 0, 1),
            (2, 2, 7, 9, 3, 3, 0, 2),
        ] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (n, c, h, w), &dev).unwrap()).unwrap();
            let kern = Var::from_tensor(&Tensor::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap()).unwrap();
            let ours = conv2d(&x, &kern, pad, stride).unwrap();
            let theirs = x.conv2d(&kern, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            for (a, b) in vals(&ours).iter().zip(vals(&theirs)) {
                assert!((a - b).abs() < 1e-10);
            }
            let weight = Tensor::randn(0f64, 1.0, ours.shape(), &dev).unwrap();
            let g1 = (&ours * &weight).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&theirs * &weight).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &kern] {
                for (a, b) in vals(g1.get(v).unwrap()).iter().zip(vals(g2.get(v).unwrap())) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }
}
