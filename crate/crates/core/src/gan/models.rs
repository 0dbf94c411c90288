//! Residual conditional generator (class-conditional batch norm) and
//! projection discriminator with spectral normalization on every weight.

use candle_core::{Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::nn::{label_tensor, BatchNorm2d, CondBatchNorm2d, Conv2d, Embedding, Init, Linear, Mode, ParamStore, SpectralNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanArch {
    pub image: ImageShape,
    pub classes: usize,
    pub latent_dim: usize,
    /// Width of the last generator block; earlier blocks double it.
    pub g_ch: usize,
    /// Width of the first discriminator block; later blocks double it.
    pub d_ch: usize,
}

impl GanArch {
    /// Number of 2x resolution steps between 4x4 and the image size.
    pub fn depth(&self) -> Result<usize> {
        let ImageShape { height, width, .. } = self.image;
        if height != width || height < 8 || !height.is_power_of_two() {
            return Err(Error::Config(format!(
                "GAN images must be square with a power-of-two side >= 8, got {}",
                self.image
            )));
        }
        Ok(height.trailing_zeros() as usize - 2)
    }

    pub fn validate(&self) -> Result<()> {
        self.depth()?;
        if self.classes < 2 || self.latent_dim == 0 || self.g_ch == 0 || self.d_ch == 0 {
            return Err(Error::Config(format!("invalid GAN architecture {self:?}")));
        }
        Ok(())
    }
}

struct GBlock {
    bn1: CondBatchNorm2d,
    conv1: Conv2d,
    bn2: CondBatchNorm2d,
    conv2: Conv2d,
    skip: Conv2d,
}

fn upsample(x: &Tensor) -> Result<Tensor> {
    crate::nn::upsample2x(x)
}

impl GBlock {
    fn new(s: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            bn1: CondBatchNorm2d::new(s, &format!("{name}.bn1"), cin, k)?,
            conv1: Conv2d::new(s, &format!("{name}.conv1"), cin, cout, 3, 1, 1, true, false)?,
            bn2: CondBatchNorm2d::new(s, &format!("{name}.bn2"), cout, k)?,
            conv2: Conv2d::new(s, &format!("{name}.conv2"), cout, cout, 3, 1, 1, true, false)?,
            skip: Conv2d::new(s, &format!("{name}.skip"), cin, cout, 1, 1, 0, true, false)?,
        })
    }

    fn forward(&self, x: &Tensor, y: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(x, y, mode)?.relu()?;
        let h = self.conv1.forward(&upsample(&h)?, mode)?;
        let h = self.bn2.forward(&h, y, mode)?.relu()?;
        let h = self.conv2.forward(&h, mode)?;
        Ok((h + self.skip.forward(&upsample(x)?, mode)?)?)
    }
}

pub struct Generator {
    arch: GanArch,
    store: ParamStore,
    top_ch: usize,
    linear: Linear,
    blocks: Vec<GBlock>,
    bn: BatchNorm2d,
    out: Conv2d,
}

impl Generator {
    pub fn new(arch: GanArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let depth = arch.depth()?;
        let mut s = ParamStore::new(seed);
        let top_ch = arch.g_ch << depth;
        let linear = Linear::new(&mut s, "g.linear", arch.latent_dim, top_ch * 16, true, false)?;
        let blocks = (0..depth)
            .map(|i| {
                let cin = arch.g_ch << (depth - i);
                GBlock::new(&mut s, &format!("g.block{i}"), cin, cin / 2, arch.classes)
            })
            .collect::<Result<_>>()?;
        let bn = BatchNorm2d::new(&mut s, "g.bn", arch.g_ch, true)?;
        let out = Conv2d::new(&mut s, "g.out", arch.g_ch, arch.image.channels, 3, 1, 1, true, false)?;
        Ok(Self {
            arch,
            store: s,
            top_ch,
            linear,
            blocks,
            bn,
            out,
        })
    }

    pub fn arch(&self) -> &GanArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Images in `[0, 1]` for latents `z: (N, latent_dim)` and classes `y`.
    pub fn forward(&self, z: &Tensor, classes: &[usize], mode: Mode) -> Result<Tensor> {
        let (n, d) = z.dims2()?;
        if d != self.arch.latent_dim || classes.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("({n}, {}) latents with {n} classes", self.arch.latent_dim),
                actual: format!("({n}, {d}) latents with {} classes", classes.len()),
            });
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.arch.classes) {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: self.arch.classes,
            });
        }
        let y = label_tensor(classes)?;
        let mut h = self.linear.forward(z, mode)?.reshape((n, self.top_ch, 4, 4))?;
        for b in &self.blocks {
            h = b.forward(&h, &y, mode)?;
        }
        let h = self.bn.forward(&h, mode)?.relu()?;
        let h = self.out.forward(&h, mode)?.tanh()?;
        Ok(h.affine(0.5, 0.5)?)
    }
}

enum DBlockKind {
    /// First block: no pre-activation.
    Input,
    Down,
    Keep,
}

struct DBlock {
    kind: DBlockKind,
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

fn pool(x: &Tensor) -> Result<Tensor> {
    crate::nn::avg_pool2x(x)
}

impl DBlock {
    fn new(s: &mut ParamStore, name: &str, cin: usize, cout: usize, kind: DBlockKind) -> Result<Self> {
        let skip = if cin != cout || !matches!(kind, DBlockKind::Keep) {
            Some(Conv2d::new(s, &format!("{name}.skip"), cin, cout, 1, 1, 0, true, true)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            conv1: Conv2d::new(s, &format!("{name}.conv1"), cin, cout, 3, 1, 1, true, true)?,
            conv2: Conv2d::new(s, &format!("{name}.conv2"), cout, cout, 3, 1, 1, true, true)?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let pre = match self.kind {
            DBlockKind::Input => x.clone(),
            _ => x.relu()?,
        };
        let h = self.conv1.forward(&pre, mode)?.relu()?;
        let mut h = self.conv2.forward(&h, mode)?;
        let mut sc = x.clone();
        match self.kind {
            DBlockKind::Input => {
                h = pool(&h)?;
                sc = self.skip.as_ref().expect("input block has a shortcut").forward(&pool(&sc)?, mode)?;
            }
            DBlockKind::Down => {
                h = pool(&h)?;
                sc = pool(&self.skip.as_ref().expect("down block has a shortcut").forward(&sc, mode)?)?;
            }
            DBlockKind::Keep => {
                if let Some(s) = &self.skip {
                    sc = s.forward(&sc, mode)?;
                }
            }
        }
        Ok((h + sc)?)
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        [&self.conv1, &self.conv2].into_iter().chain(self.skip.as_ref())
    }
}

pub struct Discriminator {
    arch: GanArch,
    store: ParamStore,
    blocks: Vec<DBlock>,
    linear: Linear,
    embed: Embedding,
}

impl Discriminator {
    pub fn new(arch: GanArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let depth = arch.depth()?;
        let mut s = ParamStore::new(seed);
        let mut blocks = vec![DBlock::new(&mut s, "d.block0", arch.image.channels, arch.d_ch, DBlockKind::Input)?];
        let mut ch = arch.d_ch;
        for i in 1..depth {
            blocks.push(DBlock::new(&mut s, &format!("d.block{i}"), ch, ch * 2, DBlockKind::Down)?);
            ch *= 2;
        }
        blocks.push(DBlock::new(&mut s, &format!("d.block{depth}"), ch, ch, DBlockKind::Keep)?);
        let linear = Linear::new(&mut s, "d.linear", ch, 1, true, true)?;
        let embed = Embedding::new(
            &mut s,
            "d.embed",
            arch.classes,
            ch,
            Init::Xavier {
                fan_in: arch.classes,
                fan_out: ch,
                gain: 1.0,
            },
            true,
        )?;
        Ok(Self {
            arch,
            store: s,
            blocks,
            linear,
            embed,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Scores `(N,)` for images `x` in `[0, 1]` and their classes.
    pub fn forward(&self, x: &Tensor, classes: &[usize], mode: Mode) -> Result<Tensor> {
        let n = x.dim(0)?;
        if classes.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} classes"),
                actual: classes.len().to_string(),
            });
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.arch.classes) {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: self.arch.classes,
            });
        }
        // same [-1, 1] range the generator works in before its output map
        let mut h = x.affine(2.0, -1.0)?;
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        let h = h.relu()?.sum(D::Minus1)?.sum(D::Minus1)?;
        let out = self.linear.forward(&h, mode)?.squeeze(1)?;
        let proj = (self.embed.forward(&label_tensor(classes)?, mode)? * &h)?.sum(1)?;
        Ok((out + proj)?)
    }

    /// Every spectrally normalized weight with its singular-vector state.
    pub fn spectral_weights(&self) -> Vec<(&Var, &SpectralNorm)> {
        let mut out: Vec<_> = self.blocks.iter().flat_map(DBlock::convs).filter_map(Conv2d::spectral).collect();
        out.extend(self.linear.spectral());
        out.extend(self.embed.spectral());
        out
    }

    /// Recomputes every spectral norm against the current weights.
    pub fn refresh_spectral(&self) -> Result<()> {
        for (w, sn) in self.spectral_weights() {
            sn.refresh(w)?;
        }
        Ok(())
    }

    /// Largest singular value of every normalized weight, by SVD.
    pub fn normalized_sigmas(&self) -> Result<Vec<f64>> {
        self.spectral_weights()
            .into_iter()
            .map(|(w, sn)| crate::nn::spectral_norm_exact(&sn.normalize(w.as_tensor())?))
            .collect()
    }
}

/// Standard-normal latents drawn from `rng`.
pub fn sample_latents(n: usize, dim: usize, rng: &mut impl rand::Rng) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let v: Vec<f32> = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, (n, dim), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(side: usize) -> GanArch {
        GanArch {
            image: ImageShape::new(1, side, side),
            classes: 3,
            latent_dim: 8,
            g_ch: 4,
            d_ch: 4,
        }
    }

    #[test]
    fn shapes_and_range() {
        for side in [8, 16, 32] {
            let g = Generator::new(arch(side), 0).unwrap();
            let d = Discriminator::new(arch(side), 1).unwrap();
            let z = sample_latents(5, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let x = g.forward(&z, &[0, 1, 2, 0, 1], Mode::TRAIN).unwrap();
            assert_eq!(x.dims(), &[5, 1, side, side]);
            let v = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(d.forward(&x, &[0, 1, 2, 0, 1], Mode::TRAIN).unwrap().dims(), &[5]);
        }
    }

    #[test]
    fn eval_sampling_is_deterministic() {
        let g = Generator::new(arch(8), 3).unwrap();
        let z = sample_latents(2, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = g.forward(&z, &[0, 2], Mode::EVAL).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = g.forward(&z, &[0, 2], Mode::EVAL).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn discriminator_weights_start_normalized() {
        let d = Discriminator::new(arch(16), 0).unwrap();
        // input and down blocks: two convs and a shortcut; keep block: two convs; linear; embedding
        assert_eq!(d.spectral_weights().len(), 3 + 3 + 2 + 2);
        for s in d.normalized_sigmas().unwrap() {
            assert!(s <= 1.0 + 1e-3, "{s}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut a = arch(12);
        assert!(Generator::new(a.clone(), 0).is_err());
        a.image = ImageShape::new(1, 8, 8);
        let g = Generator::new(a, 0).unwrap();
        let z = sample_latents(1, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(g.forward(&z, &[3], Mode::EVAL).is_err());
        assert!(g.forward(&z, &[0, 1], Mode::EVAL).is_err());
    }
}
