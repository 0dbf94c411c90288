//! Latent search under a trained conditional generator: each restart draws
//! `z ~ N(0, I)` and runs Adam on the sum of inversion losses of `m`
//! augmented views of `G(z, c)` under the target; the restart with the
//! lowest final objective is kept.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::gan::{apply_transforms, sample_transforms, AugmentationPolicy, Generator, ImageTransform};
use crate::losses::InversionLoss;
use crate::nn::Mode;

/// Frozen image generator `G(z, c)` with outputs in `[0, 1]`.
pub trait LatentGenerator: Sync {
    fn latent_dim(&self) -> usize;
    fn image_shape(&self) -> ImageShape;
    fn generate(&self, z: &Tensor, classes: &[usize]) -> Result<Tensor>;
    fn fingerprint(&self) -> Result<String>;
}

impl LatentGenerator for Generator {
    fn latent_dim(&self) -> usize {
        self.arch().latent_dim
    }

    fn image_shape(&self) -> ImageShape {
        self.arch().image
    }

    fn generate(&self, z: &Tensor, classes: &[usize]) -> Result<Tensor> {
        self.forward(z, classes, Mode::EVAL)
    }

    fn fingerprint(&self) -> Result<String> {
        self.params().fingerprint()
    }
}

/// Frozen classifier queried for logits.
pub trait LogitModel: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
    fn fingerprint(&self) -> Result<String>;
}

impl LogitModel for Classifier {
    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Classifier::logits(self, x, Mode::EVAL)
    }

    fn fingerprint(&self) -> Result<String> {
        Classifier::fingerprint(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub restarts: usize,
    pub iters: usize,
    /// Augmented views per objective evaluation.
    pub views: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub policy: AugmentationPolicy,
    pub inv_loss: InversionLoss,
    /// Latents optimized together in one tensor.
    pub batch: usize,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            iters: 600,
            views: 2,
            lr: 0.1,
            betas: (0.9, 0.999),
            policy: AugmentationPolicy::default(),
            inv_loss: InversionLoss::new(crate::losses::LossKind::Mm),
            batch: 64,
        }
    }
}

impl ReconstructConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.views == 0 || self.batch == 0 {
            return Err(Error::Config("restarts, views and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("stage-2 learning rate {}", self.lr)));
        }
        self.policy.validate()
    }

    pub fn hash(&self) -> String {
        crate::io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of image `i` of class `c` in a batch attack.
pub fn attack_seed(base: u64, class: usize, i: usize) -> u64 {
    mix_seed(mix_seed(base ^ mix_seed(class as u64)) ^ i as u64)
}

fn restart_seed(attack: u64, r: usize) -> u64 {
    mix_seed(attack.wrapping_add(r as u64 + 1))
}

/// One restart of one attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub class: usize,
    pub seed: u64,
    /// Seed of the views used to score the final latent; shared by every
    /// restart of an attack so their final objectives are comparable.
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartOutcome {
    pub seed: u64,
    pub z: Vec<f32>,
    /// Objective on fresh views at the final latent; `None` if the restart
    /// failed.
    pub objective: Option<f64>,
    /// Objective before each update.
    pub curve: Vec<f64>,
    pub failure: Option<String>,
}

impl RestartOutcome {
    /// Running minimum of [`Self::curve`].
    pub fn best_so_far(&self) -> Vec<f64> {
        self.curve
            .iter()
            .scan(f64::INFINITY, |m, &v| {
                *m = m.min(v);
                Some(*m)
            })
            .collect()
    }
}

/// Called once per iteration with the iteration index, the target logits
/// of every view (each `(B, K)`) and the row classes.
pub type Observer<'a> = dyn FnMut(usize, &[Tensor], &[usize]) -> Result<()> + 'a;

fn draw_views(policy: &AugmentationPolicy, views: usize, rngs: &mut [ChaCha8Rng]) -> Vec<Vec<ImageTransform>> {
    (0..views)
        .map(|_| rngs.iter_mut().map(|r| sample_transforms(policy, 1, r)[0]).collect())
        .collect()
}

/// Per-row objective `sum_i L_inv(T(A_i(G(z, c))), c)` for given views,
/// plus the logits of each view.
pub fn objective(
    gen: &dyn LatentGenerator,
    target: &dyn LogitModel,
    z: &Tensor,
    classes: &[usize],
    views: &[Vec<ImageTransform>],
    loss: &InversionLoss,
) -> Result<(Tensor, Vec<Tensor>)> {
    let x = gen.generate(z, classes)?;
    let mut total: Option<Tensor> = None;
    let mut logits = Vec::with_capacity(views.len());
    for t in views {
        let v = if t.iter().all(|t| *t == ImageTransform::IDENTITY) {
            x.clone()
        } else {
            apply_transforms(&x, t)?
        };
        let l = target.logits(&v)?;
        let per = loss.per_sample(&l, classes)?;
        total = Some(match total {
            Some(a) => (a + per)?,
            None => per,
        });
        logits.push(l);
    }
    Ok((total.expect("at least one view"), logits))
}

fn rows(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Optimizes one latent per job together; rows never interact.
pub fn optimize(
    gen: &dyn LatentGenerator,
    target: &dyn LogitModel,
    jobs: &[Job],
    cfg: &ReconstructConfig,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<Vec<RestartOutcome>> {
    cfg.validate()?;
    let k = target.num_classes();
    if let Some(j) = jobs.iter().find(|j| j.class >= k) {
        return Err(Error::LabelOutOfRange { label: j.class, classes: k });
    }
    let d = gen.latent_dim();
    let dev = Device::Cpu;
    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| ChaCha8Rng::seed_from_u64(j.seed)).collect();
    let mut init = Vec::with_capacity(jobs.len() * d);
    for r in rngs.iter_mut() {
        init.extend((0..d).map(|_| -> f32 { StandardNormal.sample(r) }));
    }
    let mut outcomes: Vec<RestartOutcome> = jobs
        .iter()
        .enumerate()
        .map(|(i, j)| RestartOutcome {
            seed: j.seed,
            z: init[i * d..(i + 1) * d].to_vec(),
            objective: None,
            curve: Vec::with_capacity(cfg.iters),
            failure: None,
        })
        .collect();
    // rows still being optimized, as indices into `jobs`
    let mut active: Vec<usize> = (0..jobs.len()).collect();
    let mut z = Tensor::from_vec(init, (jobs.len(), d), &dev)?;
    let mut m = z.zeros_like()?;
    let mut v = z.zeros_like()?;
    let (b1, b2) = cfg.betas;

    for it in 0..cfg.iters {
        if active.is_empty() {
            break;
        }
        let classes: Vec<usize> = active.iter().map(|&i| jobs[i].class).collect();
        let mut view_rngs: Vec<ChaCha8Rng> = active.iter().map(|&i| rngs[i].clone()).collect();
        let views = draw_views(&cfg.policy, cfg.views, &mut view_rngs);
        for (slot, &i) in active.iter().enumerate() {
            rngs[i] = view_rngs[slot].clone();
        }
        let zv = candle_core::Var::from_tensor(&z)?;
        let (obj, logits) = objective(gen, target, zv.as_tensor(), &classes, &views, &cfg.inv_loss)?;
        if let Some(f) = observer.as_mut() {
            f(it, &logits, &classes)?;
        }
        let values = rows(&obj)?;
        let grads = obj.sum_all()?.backward()?;
        let g = grads.get(&zv).map_or_else(|| z.zeros_like(), |g| Ok(g.detach()))?;
        let gnorm = g.sqr()?.sum(1)?;
        let gnorm = rows(&gnorm)?;

        let mut keep = Vec::with_capacity(active.len());
        for (slot, &i) in active.iter().enumerate() {
            if values[slot].is_finite() && gnorm[slot].is_finite() {
                outcomes[i].curve.push(values[slot]);
                keep.push(slot as u32);
            } else {
                log::warn!("restart seed {} class {}: non-finite objective at iteration {it}", jobs[i].seed, jobs[i].class);
                outcomes[i].failure = Some(format!("non-finite objective at iteration {it}"));
            }
        }
        if keep.len() != active.len() {
            let idx = Tensor::new(keep.as_slice(), &dev)?;
            let (z2, g2, m2, v2) = (z.index_select(&idx, 0)?, g.index_select(&idx, 0)?, m.index_select(&idx, 0)?, v.index_select(&idx, 0)?);
            active = keep.iter().map(|&s| active[s as usize]).collect();
            z = z2;
            m = m2;
            v = v2;
            adam_update(&mut z, &mut m, &mut v, &g2, it, cfg.lr, b1, b2)?;
        } else {
            adam_update(&mut z, &mut m, &mut v, &g, it, cfg.lr, b1, b2)?;
        }
    }

    // final latents, scored on views shared across the restarts of an attack
    if !active.is_empty() {
        let zs = z.to_vec2::<f32>()?;
        let classes: Vec<usize> = active.iter().map(|&i| jobs[i].class).collect();
        let mut eval_rngs: Vec<ChaCha8Rng> = active.iter().map(|&i| ChaCha8Rng::seed_from_u64(jobs[i].eval_seed)).collect();
        let views = draw_views(&cfg.policy, cfg.views, &mut eval_rngs);
        let (obj, _) = objective(gen, target, &z, &classes, &views, &cfg.inv_loss)?;
        let finals = rows(&obj)?;
        for (slot, &i) in active.iter().enumerate() {
            outcomes[i].z = zs[slot].clone();
            if finals[slot].is_finite() && zs[slot].iter().all(|x| x.is_finite()) {
                outcomes[i].objective = Some(finals[slot]);
            } else {
                outcomes[i].failure = Some("non-finite final objective".into());
            }
        }
    }
    Ok(outcomes)
}

#[allow(clippy::too_many_arguments)]
fn adam_update(z: &mut Tensor, m: &mut Tensor, v: &mut Tensor, g: &Tensor, it: usize, lr: f64, b1: f64, b2: f64) -> Result<()> {
    let t = it as i32 + 1;
    *m = ((&*m * b1)? + (g * (1.0 - b1))?)?;
    *v = ((&*v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
    let mh = (&*m / (1.0 - b1.powi(t)))?;
    let vh = (&*v / (1.0 - b2.powi(t)))?;
    let step = (mh / (vh.sqrt()? + 1e-8)?)?;
    *z = (&*z - (step * lr)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub class: usize,
    pub seed: u64,
    pub restarts: Vec<RestartOutcome>,
    pub selected: usize,
    pub image_shape: ImageShape,
    /// `G(z*, c)`, flattened.
    pub image: Vec<f32>,
    /// `G(z_r, c)` for every restart when there is more than one; `None`
    /// for failed restarts.
    pub restart_images: Vec<Option<Vec<f32>>>,
}

impl AttackResult {
    pub fn objective(&self) -> f64 {
        self.restarts[self.selected].objective.expect("selected restart succeeded")
    }

    pub fn z_star(&self) -> &[f32] {
        &self.restarts[self.selected].z
    }
}

fn jobs_for(class: usize, seed: u64, restarts: usize) -> Vec<Job> {
    (0..restarts)
        .map(|r| Job {
            class,
            seed: restart_seed(seed, r),
            eval_seed: mix_seed(seed ^ 0xE7A1),
        })
        .collect()
}

fn assemble(gen: &dyn LatentGenerator, class: usize, seed: u64, restarts: Vec<RestartOutcome>) -> Result<AttackResult> {
    let selected = restarts
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.objective.map(|o| (i, o)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or(Error::AllRestartsFailed(restarts.len()))?;
    let d = gen.latent_dim();
    let decode = |z: &[f32]| -> Result<Vec<f32>> {
        let z = Tensor::from_slice(z, (1, d), &Device::Cpu)?;
        let x = gen.generate(&z, &[class])?;
        Ok(x.flatten_all()?.to_vec1::<f32>()?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    };
    let image = decode(&restarts[selected].z)?;
    let restart_images = if restarts.len() > 1 {
        restarts
            .iter()
            .enumerate()
            .map(|(i, r)| match r.objective {
                _ if i == selected => Ok(Some(image.clone())),
                Some(_) => decode(&r.z).map(Some),
                None => Ok(None),
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(AttackResult {
        class,
        seed,
        selected,
        image_shape: gen.image_shape(),
        image,
        restart_images,
        restarts,
    })
}

/// Reconstructs one image of class `c`.
pub fn reconstruct(
    gen: &dyn LatentGenerator,
    target: &dyn LogitModel,
    c: usize,
    cfg: &ReconstructConfig,
    seed: u64,
) -> Result<AttackResult> {
    let outcomes = optimize(gen, target, &jobs_for(c, seed, cfg.restarts), cfg, None)?;
    assemble(gen, c, seed, outcomes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackFailure {
    pub class: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    pub results: Vec<AttackResult>,
    pub failures: Vec<AttackFailure>,
    /// Attacks loaded from existing records instead of recomputed.
    pub resumed: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    /// Directory for per-attack records and `index.csv`; existing records
    /// written under the same configuration are reused.
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
}

/// `images_per_class` independent attacks for each class, seeded from
/// `base_seed`. Failures are collected, not raised.
pub fn batch_attack(
    gen: &dyn LatentGenerator,
    target: &dyn LogitModel,
    classes: &[usize],
    cfg: &ReconstructConfig,
    images_per_class: usize,
    base_seed: u64,
    opts: &BatchOptions,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    let cfg_hash = cfg.hash();
    let todo: Vec<(usize, u64)> = classes
        .iter()
        .flat_map(|&c| (0..images_per_class).map(move |i| (c, attack_seed(base_seed, c, i))))
        .collect();
    let mut done: HashMap<(usize, u64), AttackResult> = HashMap::new();
    let mut pending = Vec::new();
    for &(c, s) in &todo {
        let existing = opts
            .out_dir
            .as_ref()
            .map(|d| record_path(d, c, s))
            .filter(|p| p.exists())
            .and_then(|p| match AttackRecord::load(&p) {
                Ok(r) if r.config_hash == cfg_hash => Some(r.result),
                _ => None,
            });
        match existing {
            Some(r) => {
                done.insert((c, s), r);
            }
            None => pending.push((c, s)),
        }
    }
    let resumed = done.len();

    // restarts of several attacks share one optimization batch
    let per_chunk = (cfg.batch / cfg.restarts).max(1);
    let chunks: Vec<&[(usize, u64)]> = pending.chunks(per_chunk).collect();
    let run_chunk = |chunk: &[(usize, u64)]| -> Vec<std::result::Result<AttackResult, AttackFailure>> {
        let jobs: Vec<Job> = chunk.iter().flat_map(|&(c, s)| jobs_for(c, s, cfg.restarts)).collect();
        let fail = |reason: String| chunk.iter().map(|&(class, seed)| Err(AttackFailure { class, seed, reason: reason.clone() })).collect();
        let outcomes = match optimize(gen, target, &jobs, cfg, None) {
            Ok(o) => o,
            Err(e) => return fail(e.to_string()),
        };
        chunk
            .iter()
            .zip(outcomes.chunks(cfg.restarts))
            .map(|(&(class, seed), outs)| {
                let r = assemble(gen, class, seed, outs.to_vec()).map_err(|e| AttackFailure {
                    class,
                    seed,
                    reason: e.to_string(),
                })?;
                if let Some(dir) = &opts.out_dir {
                    let rec = AttackRecord {
                        config_hash: cfg_hash.clone(),
                        result: r.clone(),
                    };
                    rec.save(&record_path(dir, class, seed)).map_err(|e| AttackFailure {
                        class,
                        seed,
                        reason: e.to_string(),
                    })?;
                }
                Ok(r)
            })
            .collect()
    };
    let computed: Vec<_> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(|c| run_chunk(c)).collect())
    } else {
        chunks.iter().enumerate().map(|(i, c)| {
            log::info!("stage 2: chunk {}/{}", i + 1, chunks.len());
            run_chunk(c)
        }).collect()
    };
    let mut failures = Vec::new();
    for r in computed.into_iter().flatten() {
        match r {
            Ok(a) => {
                done.insert((a.class, a.seed), a);
            }
            Err(f) => failures.push(f),
        }
    }
    let results: Vec<AttackResult> = todo.iter().filter_map(|k| done.remove(k)).collect();
    if let Some(dir) = &opts.out_dir {
        write_index(&dir.join("index.csv"), &results, &failures)?;
    }
    Ok(BatchOutcome {
        results,
        failures,
        resumed,
    })
}

pub fn record_path(dir: &Path, class: usize, seed: u64) -> PathBuf {
    dir.join(format!("class_{class}")).join(format!("seed_{seed}.safetensors"))
}

/// On-disk form of one attack: tensors in a safetensors container with the
/// scalars in its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub config_hash: String,
    pub result: AttackResult,
}

fn meta<'a>(m: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::malformed("attack record", format!("missing `{key}`")))
}

fn meta_num<T: std::str::FromStr>(m: &HashMap<String, String>, key: &str) -> Result<T> {
    meta(m, key)?
        .parse()
        .map_err(|_| Error::malformed("attack record", format!("bad `{key}`")))
}

impl AttackRecord {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let r = &self.result;
        let dev = Device::Cpu;
        let n = r.restarts.len();
        let d = r.restarts.first().map_or(0, |o| o.z.len());
        let iters = r.restarts.iter().map(|o| o.curve.len()).max().unwrap_or(0);
        let z: Vec<f32> = r.restarts.iter().flat_map(|o| o.z.iter().copied()).collect();
        let objectives: Vec<f64> = r.restarts.iter().map(|o| o.objective.unwrap_or(f64::NAN)).collect();
        let curves: Vec<f64> = r
            .restarts
            .iter()
            .flat_map(|o| (0..iters).map(move |i| o.curve.get(i).copied().unwrap_or(f64::NAN)))
            .collect();
        let seeds: Vec<String> = r.restarts.iter().map(|o| o.seed.to_string()).collect();
        let lengths: Vec<String> = r.restarts.iter().map(|o| o.curve.len().to_string()).collect();
        let failures: Vec<String> = r.restarts.iter().map(|o| o.failure.clone().unwrap_or_default()).collect();
        let s = r.image_shape;
        let mut tensors = vec![
            ("z", Tensor::from_vec(z, (n, d), &dev)?),
            ("objective", Tensor::from_vec(objectives, n, &dev)?),
            ("curve", Tensor::from_vec(curves, (n, iters), &dev)?),
            ("image", Tensor::from_slice(&r.image, (s.channels, s.height, s.width), &dev)?),
        ];
        if !r.restart_images.is_empty() {
            let numel = s.numel();
            // failed restarts are stored as NaN images
            let all: Vec<f32> = r
                .restart_images
                .iter()
                .flat_map(|im| im.clone().unwrap_or_else(|| vec![f32::NAN; numel]))
                .collect();
            tensors.push((
                "restart_images",
                Tensor::from_vec(all, (n, s.channels, s.height, s.width), &dev)?,
            ));
        }
        let metadata: HashMap<String, String> = [
            ("format_version", "1".to_string()),
            ("class", r.class.to_string()),
            ("seed", r.seed.to_string()),
            ("selected", r.selected.to_string()),
            ("config_hash", self.config_hash.clone()),
            ("restart_seeds", seeds.join(",")),
            ("curve_lengths", lengths.join(",")),
            ("failures", serde_json::to_string(&failures)?),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        safetensors::serialize(tensors.iter().map(|(k, t)| (*k, t)), Some(metadata))
            .map_err(|e| Error::malformed("attack record", e.to_string()))
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::malformed("attack record", m);
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let m = header.metadata().clone().ok_or_else(|| bad("no metadata".into()))?;
        if meta(&m, "format_version")? != "1" {
            return Err(bad("unsupported version".into()));
        }
        let tensors = crate::nn::decode_safetensors(bytes)?;
        let get = |k: &str| tensors.get(k).ok_or_else(|| bad(format!("missing tensor `{k}`")));
        let z = get("z")?.to_dtype(DType::F32)?;
        let (n, d) = z.dims2().map_err(|_| bad("z must be 2-D".into()))?;
        let z = z.to_vec2::<f32>()?;
        let objective = get("objective")?.to_dtype(DType::F64)?.to_vec1::<f64>().map_err(|_| bad("objective must be 1-D".into()))?;
        let curve = get("curve")?.to_dtype(DType::F64)?;
        let (cn, _) = curve.dims2().map_err(|_| bad("curve must be 2-D".into()))?;
        let curve = curve.to_vec2::<f64>()?;
        let image = get("image")?.to_dtype(DType::F32)?;
        let (c, h, w) = image.dims3().map_err(|_| bad("image must be 3-D".into()))?;
        let image: Vec<f32> = image.flatten_all()?.to_vec1::<f32>()?;
        let restart_images: Vec<Option<Vec<f32>>> = match tensors.get("restart_images") {
            None => Vec::new(),
            Some(t) => {
                if t.dims() != [n, c, h, w] {
                    return Err(bad("restart_images shape disagrees".into()));
                }
                t.to_dtype(DType::F32)?
                    .flatten_from(1)?
                    .to_vec2::<f32>()?
                    .into_iter()
                    .map(|im| {
                        if im.iter().all(|v| v.is_nan()) {
                            Ok(None)
                        } else if im.iter().all(|v| (0.0..=1.0).contains(v)) {
                            Ok(Some(im))
                        } else {
                            Err(bad("restart image values outside [0, 1]".into()))
                        }
                    })
                    .collect::<Result<_>>()?
            }
        };
        let seeds: Vec<u64> = meta(&m, "restart_seeds")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad("bad restart seed".into())))
            .collect::<Result<_>>()?;
        let lengths: Vec<usize> = meta(&m, "curve_lengths")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad("bad curve length".into())))
            .collect::<Result<_>>()?;
        let failures: Vec<String> = serde_json::from_str(meta(&m, "failures")?)?;
        if n == 0 || d == 0 || objective.len() != n || cn != n || seeds.len() != n || lengths.len() != n || failures.len() != n {
            return Err(bad("restart counts disagree".into()));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("image values outside [0, 1]".into()));
        }
        let selected: usize = meta_num(&m, "selected")?;
        let restarts: Vec<RestartOutcome> = (0..n)
            .map(|i| {
                let len = lengths[i];
                if len > curve[i].len() {
                    return Err(bad("curve length out of range".into()));
                }
                Ok(RestartOutcome {
                    seed: seeds[i],
                    z: z[i].clone(),
                    objective: Some(objective[i]).filter(|o| o.is_finite()),
                    curve: curve[i][..len].to_vec(),
                    failure: Some(failures[i].clone()).filter(|f| !f.is_empty()),
                })
            })
            .collect::<Result<_>>()?;
        if restarts.get(selected).and_then(|r| r.objective).is_none() {
            return Err(bad("selected restart has no objective".into()));
        }
        Ok(Self {
            config_hash: meta(&m, "config_hash")?.to_string(),
            result: AttackResult {
                class: meta_num(&m, "class")?,
                seed: meta_num(&m, "seed")?,
                restarts,
                selected,
                image_shape: ImageShape::new(c, h, w),
                image,
                restart_images,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub class: usize,
    pub seed: u64,
    pub status: String,
    pub selected: Option<usize>,
    pub objective: Option<f64>,
    pub path: String,
}

fn write_index(path: &Path, results: &[AttackResult], failures: &[AttackFailure]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(IndexRow {
            class: r.class,
            seed: r.seed,
            status: "ok".into(),
            selected: Some(r.selected),
            objective: Some(r.objective()),
            path: record_path(Path::new(""), r.class, r.seed).to_string_lossy().into_owned(),
        })?;
    }
    for f in failures {
        w.serialize(IndexRow {
            class: f.class,
            seed: f.seed,
            status: format!("failed: {}", f.reason),
            selected: None,
            objective: None,
            path: String::new(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    crate::io::write_atomic(path, &bytes)
}

/// Rows of an attack index; record paths must stay inside the index's
/// directory.
pub fn parse_index(bytes: &[u8]) -> Result<Vec<IndexRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let rows: Vec<IndexRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    for row in &rows {
        let p = Path::new(&row.path);
        let escapes = p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_)));
        if !row.path.is_empty() && escapes {
            return Err(Error::malformed("attack index", format!("record path `{}` escapes the directory", row.path)));
        }
    }
    Ok(rows)
}

/// Loads every record listed as successful in `dir/index.csv`.
pub fn load_attacks(dir: &Path) -> Result<Vec<AttackResult>> {
    let index = dir.join("index.csv");
    let rows = parse_index(&std::fs::read(&index).map_err(|e| Error::io(&index, e))?)?;
    rows.iter()
        .filter(|r| r.status == "ok")
        .map(|r| AttackRecord::load(&dir.join(&r.path)).map(|a| a.result))
        .collect()
}
