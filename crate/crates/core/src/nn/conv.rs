//! 2-D convolution as patch extraction (`im2col`) followed by one matrix
//! product. Both directions of the patch transform are custom ops with
//! each other as gradient, so autodiff sees only the transform and a
//! matmul.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

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
    oh: usize,
    ow: usize,
}

impl Geometry {
    /// Patch matrix layout: one row per kernel tap `(ch, ky, kx)`, one
    /// column per output location `(b, oy, ox)`.
    fn cols_shape(&self) -> (usize, usize) {
        (self.c * self.k * self.k, self.n * self.oh * self.ow)
    }

    /// Calls `f(dst_start, src_start, src_step, len)` for every contiguous
    /// run of in-bounds taps along an output row.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let Geometry {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        } = *self;
        let cols = n * oh * ow;
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ch * k + ky) * k + kx) * cols;
                    // ox range with 0 <= ox * stride + kx - pad < w
                    let lo = pad.saturating_sub(kx).div_ceil(stride);
                    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(ow) } else { 0 };
                    if lo >= hi {
                        continue;
                    }
                    for b in 0..n {
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = ((b * c + ch) * h + iy as usize) * w;
                            let dst = row + (b * oh + oy) * ow;
                            f(dst + lo, src_row + lo * stride + kx - pad, stride, hi - lo);
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let (r, c) = self.cols_shape();
        let mut out = vec![T::zero(); r * c];
        self.for_each_run(|d, s, step, len| {
            let dst = &mut out[d..d + len];
            if step == 1 {
                dst.copy_from_slice(&src[s..s + len]);
            } else {
                for (i, o) in dst.iter_mut().enumerate() {
                    *o = src[s + i * step];
                }
            }
        });
        out
    }

    fn fold<T: WithDType>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n * self.c * self.h * self.w];
        self.for_each_run(|d, s, step, len| {
            let src = &cols[d..d + len];
            if step == 1 {
                for (o, v) in out[s..s + len].iter_mut().zip(src) {
                    *o += *v;
                }
            } else {
                for (i, v) in src.iter().enumerate() {
                    out[s + i * step] += *v;
                }
            }
        });
        out
    }
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("patch transform needs a contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.unfold(contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.unfold(contiguous(v, l)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, g.cols_shape().into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(contiguous(v, l)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, (g.n, g.c, g.h, g.w).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Cross-correlation of `x: (N, C, H, W)` with `weight: (O, C, k, k)`,
/// plus an optional per-channel `bias: (O,)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::ShapeMismatch {
            expected: format!("input with {ci} channels and room for a {k}x{k2} kernel"),
            actual: format!("{:?}", x.dims()),
        });
    }
    let g = Geometry {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (w + 2 * pad - k) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let mut y = weight.reshape((o, c * k * k))?.matmul(&cols)?;
    if let Some(b) = bias {
        // broadcasting along the last axis keeps the bias gradient a
        // contiguous row sum
        y = y.broadcast_add(&b.reshape((o, 1))?)?;
    }
    Ok(y.reshape((o, n, g.oh, g.ow))?.transpose(0, 1)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap();
        let d = d.to_scalar::<f64>().unwrap();
        assert!(d < tol, "max diff {d}");
    }

    #[test]
    fn matches_reference_convolution_and_gradients() {
        let dev = Device::Cpu;
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 8, 6), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap()).unwrap();
            let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 4, &dev).unwrap()).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), Some(b.as_tensor()), stride, pad).unwrap();
            let probe = Tensor::randn(0f64, 1.0, ours.shape(), &dev).unwrap();
            let reference = x
                .as_tensor()
                .conv2d(w.as_tensor(), pad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&b.as_tensor().reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            close(&ours, &reference, 1e-10);
            let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            close(ga.get(&x).unwrap(), gb.get(&x).unwrap(), 1e-10);
            close(ga.get(&w).unwrap(), gb.get(&w).unwrap(), 1e-10);
            close(ga.get(&b).unwrap(), gb.get(&b).unwrap(), 1e-10);
        }
        // odd sizes with stride 2, forward only
        let x = Tensor::randn(0f32, 1.0, (1, 2, 7, 5), &dev).unwrap();
        let w = Tensor::randn(0f32, 1.0, (3, 2, 3, 3), &dev).unwrap();
        close(&conv2d(&x, &w, None, 2, 1).unwrap(), &x.conv2d(&w, 1, 2, 1, 1).unwrap(), 1e-5);
    }
}
