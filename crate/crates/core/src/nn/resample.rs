//! Nearest-neighbour 2x upsampling with a direct sum-pool gradient (the
//! generic backward routes through a grouped convolution).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

struct Upsample2x;
struct SumPool2x;

fn dims(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("resampling needs a contiguous input"),
    }
}

fn up<T: WithDType>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len() * 4);
    for p in 0..planes {
        for y in 0..h {
            let row = &src[(p * h + y) * w..(p * h + y + 1) * w];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    out
}

fn down<T: WithDType>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            let row = &src[(p * h + y) * w..(p * h + y + 1) * w];
            let dst = &mut out[(p * oh + y / 2) * ow..(p * oh + y / 2 + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                dst[x / 2] += v;
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims(l)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(up(contiguous(v, l)?, n * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(up(contiguous(v, l)?, n * c, h, w)),
            _ => candle_core::bail!("upsample2x supports f32 and f64"),
        };
        Ok((out, (n, c, 2 * h, 2 * w).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(SumPool2x)?))
    }
}

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "sumpool2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims(l)?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("sumpool2x needs even sides, got {h}x{w}");
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(down(contiguous(v, l)?, n * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(down(contiguous(v, l)?, n * c, h, w)),
            _ => candle_core::bail!("sumpool2x supports f32 and f64"),
        };
        Ok((out, (n, c, h / 2, w / 2).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Upsample2x)?))
    }
}

/// `(N, C, H, W) -> (N, C, 2H, 2W)`, each pixel repeated in a 2x2 block.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

/// `(N, C, H, W) -> (N, C, H/2, W/2)`, the mean of each 2x2 block.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    Ok((x.contiguous()?.apply_op1(SumPool2x)? * 0.25)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn matches_reference_upsampling_and_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &dev).unwrap()).unwrap();
        let ours = upsample2x(x.as_tensor()).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(8, 10).unwrap();
        let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
        let probe = Tensor::randn(0f64, 1.0, (2, 3, 8, 10), &dev).unwrap();
        let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let diff = (ga.get(&x).unwrap() - gb.get(&x).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn pooling_matches_reference() {
        let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 4), &Device::Cpu).unwrap();
        let d = (avg_pool2x(&x).unwrap() - x.avg_pool2d(2).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }
}
