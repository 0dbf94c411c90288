use candle_core::{Tensor, Var, D};

use super::spectral::SpectralNorm;
use super::{param_tensor, Init, Mode, ParamStore};
use crate::error::Result;

pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    sn: Option<SpectralNorm>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        spectral: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let init = if spectral {
            Init::Xavier {
                fan_in,
                fan_out: out_ch * kernel * kernel,
                gain: 1.0,
            }
        } else {
            // He-normal for ReLU networks
            Init::Normal((2.0 / fan_in as f64).sqrt())
        };
        let weight = store.param(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], init)?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        let sn = if spectral {
            Some(SpectralNorm::new(store, name, &weight)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            sn,
        })
    }

    pub fn weight(&self, mode: Mode) -> Result<Tensor> {
        let w = param_tensor(&self.weight, mode);
        match &self.sn {
            Some(sn) => sn.normalize(&w),
            None => Ok(w),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = self.weight(mode)?;
        let b = self.bias.as_ref().map(|b| param_tensor(b, mode));
        super::conv::conv2d(x, &w, b.as_ref(), self.stride, self.padding)
    }

    pub fn spectral(&self) -> Option<(&Var, &SpectralNorm)> {
        self.sn.as_ref().map(|s| (&self.weight, s))
    }
}

pub struct Linear {
    weight: Var,
    bias: Option<Var>,
    sn: Option<SpectralNorm>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        spectral: bool,
    ) -> Result<Self> {
        let init = if spectral {
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
                gain: 1.0,
            }
        } else {
            Init::Uniform(1.0 / (in_dim as f64).sqrt())
        };
        let weight = store.param(&format!("{name}.weight"), &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        let sn = if spectral {
            Some(SpectralNorm::new(store, name, &weight)?)
        } else {
            None
        };
        Ok(Self { weight, bias, sn })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut w = param_tensor(&self.weight, mode);
        if let Some(sn) = &self.sn {
            w = sn.normalize(&w)?;
        }
        let y = x.matmul(&w.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&param_tensor(b, mode))?,
            None => y,
        })
    }

    pub fn spectral(&self) -> Option<(&Var, &SpectralNorm)> {
        self.sn.as_ref().map(|s| (&self.weight, s))
    }
}

pub struct Embedding {
    weight: Var,
    sn: Option<SpectralNorm>,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        classes: usize,
        dim: usize,
        init: Init,
        spectral: bool,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[classes, dim], init)?;
        let sn = if spectral {
            Some(SpectralNorm::new(store, name, &weight)?)
        } else {
            None
        };
        Ok(Self { weight, sn })
    }

    /// Rows of the embedding table selected by `ids` (u32).
    pub fn forward(&self, ids: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut w = param_tensor(&self.weight, mode);
        if let Some(sn) = &self.sn {
            w = sn.normalize(&w)?;
        }
        Ok(w.index_select(ids, 0)?)
    }

    pub fn spectral(&self) -> Option<(&Var, &SpectralNorm)> {
        self.sn.as_ref().map(|s| (&self.weight, s))
    }
}

/// Batch normalization over `(N, H, W)` with running statistics.
pub struct BatchNorm2d {
    gamma: Option<Var>,
    beta: Option<Var>,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, affine: bool) -> Result<Self> {
        let (gamma, beta) = if affine {
            (
                Some(store.param(&format!("{name}.gamma"), &[channels], Init::Ones)?),
                Some(store.param(&format!("{name}.beta"), &[channels], Init::Zeros)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            gamma,
            beta,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Normalized input as `(N, C, H*W)`. Per-channel statistics are
    /// expanded to `(N, C, 1)` before broadcasting so that every gradient
    /// reduction runs over the contiguous trailing axis.
    fn normalize(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let x = x.reshape((n, c, h * w))?;
        if mode.train {
            let count = (n * h * w) as f64;
            let mean = (x.sum_keepdim(2)?.sum_keepdim(0)? / count)?;
            let centered = x.broadcast_sub(&expand(&mean, n)?)?;
            let var = (centered.sqr()?.sum_keepdim(2)?.sum_keepdim(0)? / count)?;
            let unbiased = (var.detach().flatten_all()? * (count / (count - 1.0).max(1.0)))?;
            let m = self.momentum;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?,
            )?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            let inv = (var + self.eps)?.sqrt()?.recip()?;
            Ok(centered.broadcast_mul(&expand(&inv, n)?)?)
        } else {
            let mean = self.running_mean.as_detached_tensor().reshape((1, c, 1))?;
            let std = (self.running_var.as_detached_tensor() + self.eps)?
                .sqrt()?
                .reshape((1, c, 1))?;
            Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, ..) = x.dims4()?;
        let mut y = self.normalize(x, mode)?;
        if let (Some(g), Some(b)) = (&self.gamma, &self.beta) {
            let g = expand(&param_tensor(g, mode), n)?;
            let b = expand(&param_tensor(b, mode), n)?;
            y = y.broadcast_mul(&g)?.broadcast_add(&b)?;
        }
        Ok(y.reshape(x.shape())?)
    }
}

/// Per-channel values (any shape with `C` elements) as a contiguous
/// `(N, C, 1)` tensor.
fn expand(t: &Tensor, n: usize) -> Result<Tensor> {
    let c = t.elem_count();
    Ok(t.reshape((1, c))?.broadcast_as((n, c))?.contiguous()?.reshape((n, c, 1))?)
}

/// Batch normalization whose scale and shift are looked up per class.
pub struct CondBatchNorm2d {
    bn: BatchNorm2d,
    gamma: Embedding,
    beta: Embedding,
}

impl CondBatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(store, name, channels, false)?,
            gamma: Embedding::new(store, &format!("{name}.gamma"), classes, channels, Init::Ones, false)?,
            beta: Embedding::new(store, &format!("{name}.beta"), classes, channels, Init::Zeros, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, y: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn.normalize(x, mode)?;
        let c = h.dim(1)?;
        let g = self.gamma.forward(y, mode)?.reshape(((), c, 1))?;
        let b = self.beta.forward(y, mode)?.reshape(((), c, 1))?;
        Ok(h.broadcast_mul(&g)?.broadcast_add(&b)?.reshape(x.shape())?)
    }
}

/// Mean over spatial dimensions: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn batchnorm_train_normalizes_and_updates_running_stats() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm2d::new(&mut store, "bn", 2, true).unwrap();
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((2, 2, 2, 2)).unwrap();
        let y = bn.forward(&x, Mode::TRAIN).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(m.abs() < 1e-5);
        let rm = bn.running_mean.as_tensor().to_vec1::<f32>().unwrap();
        assert!(rm[0] > 0.0 && rm[1] > rm[0]);
        // eval mode is independent of batch composition
        let a = bn.forward(&x, Mode::EVAL).unwrap();
        let b = bn.forward(&x.narrow(0, 0, 1).unwrap(), Mode::EVAL).unwrap();
        assert_eq!(
            a.narrow(0, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
