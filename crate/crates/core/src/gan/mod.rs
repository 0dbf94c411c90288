//! Pseudo-label guided conditional GAN: hinge adversarial training of a
//! class-conditional generator against a projection discriminator, with the
//! target classifier's inversion loss on augmented samples added to the
//! generator objective.

mod augment;
mod models;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{
    apply_augmentations, apply_transforms, augment_tensor, sample_transforms, AugmentationPolicy, CropSpec,
    ImageTransform, JitterSpec,
};
pub use models::{sample_latents, Discriminator, GanArch, Generator};

use crate::classifier::Classifier;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::losses::{InversionLoss, LossKind};
use crate::nn::{decode_safetensors, safetensors_bytes, Adam, AdamConfig, Mode};

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Hinge loss `mean(max(0, 1 - d_real)) + mean(max(0, 1 + d_fake))`.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    ensure_finite(d_real, "discriminator scores on real images")?;
    ensure_finite(d_fake, "discriminator scores on generated images")?;
    let real = d_real.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = d_fake.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// Generator objective split into its parts; `total = adv + alpha * inv`.
pub struct GeneratorLoss {
    pub total: Tensor,
    pub adv: Tensor,
    pub inv: Tensor,
}

/// `-mean(d_fake) + alpha * L_inv(T(A(fake)), labels)`. The augmentation is
/// drawn from `rng`. With `alpha = 0` the inversion term is still evaluated
/// for logging but kept out of the graph.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    d_fake: &Tensor,
    fake: &Tensor,
    labels: &[usize],
    target: &Classifier,
    policy: &AugmentationPolicy,
    alpha: f64,
    inv_loss: &InversionLoss,
    rng: &mut impl Rng,
) -> Result<GeneratorLoss> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    ensure_finite(d_fake, "discriminator scores on generated images")?;
    let adv = d_fake.mean_all()?.neg()?;
    let input = if alpha > 0.0 { fake.clone() } else { fake.detach() };
    let views = augment_tensor(&input, policy, rng)?;
    let logits = target.logits(&views, Mode::EVAL)?;
    let inv = inv_loss.mean(&logits, labels)?;
    let total = if alpha > 0.0 { (&adv + (&inv * alpha)?)? } else { adv.clone() };
    ensure_finite(&total, "generator loss")?;
    Ok(GeneratorLoss { total, adv, inv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub alpha: f64,
    pub latent_dim: usize,
    pub g_ch: usize,
    pub d_ch: usize,
    pub batch_size: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub betas: (f64, f64),
    pub total_iters: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub inv_loss: LossKind,
    pub aug: AugmentationPolicy,
    /// Checkpoint interval in generator iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            latent_dim: 128,
            g_ch: 32,
            d_ch: 32,
            batch_size: 64,
            g_lr: 2e-4,
            d_lr: 2e-4,
            betas: (0.0, 0.9),
            total_iters: 10_000,
            d_steps: 1,
            inv_loss: LossKind::Mm,
            aug: AugmentationPolicy::default(),
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("gan: {m}")));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {}", self.alpha));
        }
        if self.batch_size == 0 || self.total_iters == 0 || self.d_steps == 0 {
            return bad("batch_size, total_iters and d_steps must be positive".into());
        }
        if !(self.g_lr > 0.0 && self.d_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        self.aug.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_inv: f64,
}

pub struct GanTrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub iteration: usize,
    pub history: Vec<HistoryRow>,
    /// Largest singular value over all normalized discriminator weights
    /// after each discriminator update, when auditing is enabled.
    pub spectral_audit: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Options that do not affect the trained weights.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Check every normalized discriminator weight with an SVD after each
    /// discriminator update. Costly beyond toy sizes.
    pub audit_spectral: bool,
    pub log_every: usize,
}

/// Uniform class, then a uniform image of that class.
struct ClassSampler {
    by_class: Vec<Vec<usize>>,
}

impl ClassSampler {
    fn new(labels: &[usize], k: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Empty(format!("no pseudo-labelled images for class {c}")));
        }
        Ok(Self { by_class })
    }

    fn draw(&self, n: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
        (0..n)
            .map(|_| {
                let c = rng.gen_range(0..self.by_class.len());
                let pool = &self.by_class[c];
                (pool[rng.gen_range(0..pool.len())], c)
            })
            .unzip()
    }
}

/// Trains the conditional GAN on pseudo-labelled images (`data` labels are
/// pseudo-labels in `0..k`). The target is only read.
pub fn train_cgan(data: &ImageBatch, k: usize, target: &Classifier, cfg: &GanConfig, opts: &TrainOptions) -> Result<GanTrainState> {
    cfg.validate()?;
    let labels = data.labels().ok_or_else(|| Error::Empty("GAN training data is unlabelled".into()))?;
    data.check_labels(k)?;
    if target.num_classes() != k || target.input_shape() != data.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("target over {k} classes on {} images", data.shape()),
            actual: format!("{} classes on {}", target.num_classes(), target.input_shape()),
        });
    }
    let arch = GanArch {
        image: data.shape(),
        classes: k,
        latent_dim: cfg.latent_dim,
        g_ch: cfg.g_ch,
        d_ch: cfg.d_ch,
    };
    let sampler = ClassSampler::new(labels, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let generator = Generator::new(arch.clone(), rng.gen())?;
    let discriminator = Discriminator::new(arch, rng.gen())?;
    let inv_loss = InversionLoss::new(cfg.inv_loss);
    let (b1, b2) = cfg.betas;
    let mut g_opt = Adam::new(generator.params().trainable(), AdamConfig::new(cfg.g_lr, b1, b2));
    let mut d_opt = Adam::new(discriminator.params().trainable(), AdamConfig::new(cfg.d_lr, b1, b2));

    let mut state = GanTrainState {
        generator,
        discriminator,
        iteration: 0,
        history: Vec::with_capacity(cfg.total_iters),
        spectral_audit: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut last_good: Option<(usize, Vec<u8>)> = None;
    let started = Instant::now();
    let n = cfg.batch_size;
    let dim = cfg.latent_dim;

    for it in 1..=cfg.total_iters {
        let step = (|| -> Result<HistoryRow> {
            let mut d_loss = 0.0;
            for _ in 0..cfg.d_steps {
                let (idx, real_y) = sampler.draw(n, &mut rng);
                let real = data.select(&idx).to_tensor(0, n, &candle_core::Device::Cpu)?;
                let fake_y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
                let z = sample_latents(n, dim, &mut rng)?;
                let fake = state.generator.forward(&z, &fake_y, Mode::TRAIN_FROZEN)?.detach();
                let d_real = state.discriminator.forward(&real, &real_y, Mode::TRAIN)?;
                let d_fake = state.discriminator.forward(&fake, &fake_y, Mode::TRAIN)?;
                let loss = discriminator_loss(&d_real, &d_fake)?;
                d_loss = scalar(&loss)?;
                d_opt.step(&loss.backward()?)?;
                state.discriminator.refresh_spectral()?;
                if opts.audit_spectral {
                    let worst = state.discriminator.normalized_sigmas()?.into_iter().fold(0.0, f64::max);
                    state.spectral_audit.push(worst);
                }
            }
            let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let z = sample_latents(n, dim, &mut rng)?;
            let fake = state.generator.forward(&z, &y, Mode::TRAIN)?;
            let d_fake = state.discriminator.forward(&fake, &y, Mode::EVAL)?;
            let g = generator_loss(&d_fake, &fake, &y, target, &cfg.aug, cfg.alpha, &inv_loss, &mut rng)?;
            g_opt.step(&g.total.backward()?)?;
            Ok(HistoryRow {
                iter: it,
                d_loss,
                g_adv: scalar(&g.adv)?,
                g_inv: scalar(&g.inv)?,
            })
        })();
        let row = match step {
            Ok(r) if [r.d_loss, r.g_adv, r.g_inv].iter().all(|v| v.is_finite()) => r,
            Ok(_) | Err(Error::NonFinite(_)) => {
                return Err(diverged(&state, it, last_good, opts.out_dir.as_deref()));
            }
            Err(e) => return Err(e),
        };
        state.history.push(row);
        state.iteration = it;
        if opts.log_every > 0 && it % opts.log_every == 0 {
            log::info!(
                "gan iter {it}/{}: d {:.4} g_adv {:.4} g_inv {:.4} ({:.1}s)",
                cfg.total_iters,
                row.d_loss,
                row.g_adv,
                row.g_inv,
                started.elapsed().as_secs_f64()
            );
        }
        let boundary = it == cfg.total_iters || (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0);
        if boundary {
            let bytes = checkpoint_bytes(&state.generator, &state.discriminator)?;
            if let Some(dir) = &opts.out_dir {
                state.checkpoints.push(write_checkpoint(dir, it, &bytes, &state.generator, cfg)?);
            }
            last_good = Some((it, bytes));
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_history(&dir.join("gan_history.csv"), &state.history)?;
    }
    Ok(state)
}

fn diverged(state: &GanTrainState, it: usize, last_good: Option<(usize, Vec<u8>)>, dir: Option<&Path>) -> Error {
    let reason = match (&last_good, dir) {
        (Some((good, _)), Some(dir)) => format!(
            "non-finite GAN loss; last good checkpoint is {}",
            dir.join(format!("gan_{good}.ckpt")).display()
        ),
        (Some((good, _)), None) => format!("non-finite GAN loss; last good state at iteration {good}"),
        _ => "non-finite GAN loss before the first checkpoint".to_string(),
    };
    if let (Some(dir), false) = (dir, state.history.is_empty()) {
        let _ = write_history(&dir.join("gan_history.csv"), &state.history);
    }
    Error::Diverged { iteration: it, reason }
}

fn checkpoint_bytes(g: &Generator, d: &Discriminator) -> Result<Vec<u8>> {
    let map: HashMap<String, Tensor> = g.params().export("").into_iter().chain(d.params().export("")).collect();
    safetensors_bytes(&map)
}

pub const GAN_SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanSidecar {
    pub format_version: u32,
    pub iteration: usize,
    pub arch: GanArch,
    pub alpha: f64,
    pub inv_loss: LossKind,
    pub weights_sha256: String,
}

impl GanSidecar {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let s: Self = serde_json::from_slice(bytes)?;
        if s.format_version != GAN_SIDECAR_VERSION {
            return Err(Error::malformed("gan sidecar", format!("unsupported version {}", s.format_version)));
        }
        s.arch.validate()?;
        Ok(s)
    }
}

fn write_checkpoint(dir: &Path, it: usize, bytes: &[u8], g: &Generator, cfg: &GanConfig) -> Result<PathBuf> {
    let path = dir.join(format!("gan_{it}.ckpt"));
    crate::io::write_atomic(&path, bytes)?;
    let sidecar = GanSidecar {
        format_version: GAN_SIDECAR_VERSION,
        iteration: it,
        arch: g.arch().clone(),
        alpha: cfg.alpha,
        inv_loss: cfg.inv_loss,
        weights_sha256: crate::io::sha256_hex(bytes),
    };
    crate::io::write_atomic(&path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(path)
}

/// Newest `gan_<iter>.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| {
            let p = e.ok()?.path();
            let stem = p.file_name()?.to_str()?.strip_suffix(".ckpt")?.strip_prefix("gan_")?.to_owned();
            Some((stem.parse::<usize>().ok()?, p))
        })
        .max_by_key(|(i, _)| *i)
        .map(|(_, p)| p)
}

/// Loads both networks from a GAN checkpoint and its sidecar.
pub fn load_gan(path: &Path) -> Result<(Generator, Discriminator, GanSidecar)> {
    let side_path = path.with_extension("json");
    let sidecar = GanSidecar::parse(&std::fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if crate::io::sha256_hex(&bytes) != sidecar.weights_sha256 {
        return Err(Error::malformed("gan checkpoint", "weights do not match the sidecar hash"));
    }
    let map = decode_safetensors(&bytes)?;
    let g = Generator::new(sidecar.arch.clone(), 0)?;
    let d = Discriminator::new(sidecar.arch.clone(), 0)?;
    if map.len() != g.params().len() + d.params().len() {
        return Err(Error::malformed("gan checkpoint", format!("{} tensors", map.len())));
    }
    g.params().load_map(&map, "")?;
    d.params().load_map(&map, "")?;
    Ok((g, d, sidecar))
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn parse_history(bytes: &[u8]) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    parse_history(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Eval-mode samples for latents `z` and `classes`.
pub fn sample(gen: &Generator, z: &Tensor, classes: &[usize]) -> Result<ImageBatch> {
    let x = gen.forward(z, classes, Mode::EVAL)?;
    ImageBatch::from_tensor(&x, Some(classes.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{Architecture, ClassifierSpec};
    use crate::data::ImageShape;
    use candle_core::{Device, Var};

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn hinge_values() {
        let v = |r: &[f32], f: &[f32]| scalar(&discriminator_loss(&t(r), &t(f)).unwrap()).unwrap();
        assert_eq!(v(&[1.0], &[-1.0]), 0.0);
        assert_eq!(v(&[0.0], &[0.0]), 2.0);
        assert!((v(&[0.5, 2.0], &[-0.5, 1.0]) - 1.5).abs() < 1e-7);
        assert!(discriminator_loss(&t(&[f32::NAN]), &t(&[0.0])).is_err());
    }

    fn toy_target() -> Classifier {
        Classifier::new(ClassifierSpec {
            arch: Architecture::Mlp,
            width: 8,
            input: ImageShape::new(1, 8, 8),
            classes: 2,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn alpha_zero_is_adversarial_only_and_decomposes() {
        let target = toy_target();
        let x = Tensor::full(0.5f32, (2, 1, 8, 8), &Device::Cpu).unwrap();
        let d = t(&[2.0, 4.0]);
        let inv = InversionLoss::new(LossKind::Mm);
        let p = AugmentationPolicy::default();
        let l0 = generator_loss(&d, &x, &[0, 1], &target, &p, 0.0, &inv, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(scalar(&l0.total).unwrap(), -3.0);
        let l2 = generator_loss(&d, &x, &[0, 1], &target, &p, 0.2, &inv, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(scalar(&l0.inv).unwrap(), scalar(&l2.inv).unwrap());
        let gap = scalar(&l2.total).unwrap() - scalar(&l0.total).unwrap();
        assert!((gap - 0.2 * scalar(&l2.inv).unwrap()).abs() < 1e-6);
        assert!(generator_loss(&d, &x, &[0, 1], &target, &p, -1.0, &inv, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn inversion_term_gradient_matches_finite_differences() {
        // generator reduced to one image-valued parameter; identity policy
        let target = toy_target();
        let inv = InversionLoss::new(LossKind::Ce);
        let base: Vec<f32> = (0..64).map(|i| 0.2 + 0.6 * ((i * 7) % 13) as f32 / 13.0).collect();
        let p = Var::from_vec(base.clone(), (1, 1, 8, 8), &Device::Cpu).unwrap();
        let d = t(&[0.0]);
        let id = AugmentationPolicy::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = generator_loss(&d, p.as_tensor(), &[1], &target, &id, 1.0, &inv, &mut rng).unwrap();
        let g = l.total.backward().unwrap().get(&p).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let eval = |v: Vec<f32>| -> f64 {
            let x = Tensor::from_vec(v, (1, 1, 8, 8), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
            let logits = target.logits(&x.to_dtype(DType::F32).unwrap(), Mode::EVAL).unwrap();
            scalar(&inv.mean(&logits, &[1]).unwrap()).unwrap()
        };
        let h = 1e-2f32;
        let i = 19;
        let (mut a, mut b) = (base.clone(), base.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (eval(a) - eval(b)) / (2.0 * h as f64);
        assert!((fd - g[i] as f64).abs() <= 1e-4f64.max(2e-2 * fd.abs()), "fd {fd} vs {}", g[i]);
    }

    #[test]
    fn short_training_run_keeps_target_frozen_and_checkpoints() {
        let target = toy_target();
        let shape = ImageShape::new(1, 8, 8);
        let values: Vec<f32> = (0..8).flat_map(|i| vec![if i % 2 == 0 { 0.2 } else { 0.8 }; 64]).collect();
        let data = ImageBatch::new(shape, values, Some((0..8).map(|i| i % 2).collect())).unwrap();
        let cfg = GanConfig {
            latent_dim: 8,
            g_ch: 4,
            d_ch: 4,
            batch_size: 4,
            total_iters: 4,
            checkpoint_every: 2,
            ..GanConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let before = target.fingerprint().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            audit_spectral: true,
            log_every: 0,
        };
        let state = train_cgan(&data, 2, &target, &cfg, &opts).unwrap();
        assert_eq!(before, target.fingerprint().unwrap());
        assert_eq!(state.history.len(), 4);
        assert!(state.spectral_audit.iter().all(|&s| s <= 1.0 + 1e-3));
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), dir.path().join("gan_4.ckpt"));
        let (g, _, side) = load_gan(&dir.path().join("gan_4.ckpt")).unwrap();
        assert_eq!(side.iteration, 4);
        assert_eq!(g.params().fingerprint().unwrap(), state.generator.params().fingerprint().unwrap());
        assert_eq!(read_history(&dir.path().join("gan_history.csv")).unwrap(), state.history);
    }
}
