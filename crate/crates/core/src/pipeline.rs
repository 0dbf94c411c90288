//! Stage orchestration over a [`RunManifest`].
//!
//! Every stage writes its artifacts plus a stamp (`<stage>.stage.json`)
//! recording a key derived from the manifest sections it read and the keys
//! of its inputs, and the SHA-256 of each output. Downstream stages refuse
//! to run without their inputs' stamps; a stage whose stamp matches is
//! skipped unless forced.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, CheckpointMeta, Classifier, ClassifierSpec};
use crate::data::{load_pool, load_split, DatasetSplit, ImageBatch, Part};
use crate::error::{Error, Result};
use crate::eval::{build_report, ReportBundle, ReportConfig};
use crate::gan::{latest_checkpoint, load_gan, train_cgan, Generator, TrainOptions};
use crate::io::{sha256_file, sha256_hex, write_atomic};
use crate::losses::{logit_statistics, InversionLoss, LossKind, LossTrace, TrendStep};
use crate::manifest::{ArtifactPaths, ClassifierStage, RunManifest};
use crate::reconstruct::{attack_seed, batch_attack, load_attacks, optimize, BatchOptions, Job};
use crate::select::{assign_pseudo_labels, PseudoLabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainTarget,
    TrainEval,
    Select,
    TrainGan,
    Invert,
    Evaluate,
    AnalyzeLoss,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::TrainTarget,
        Stage::TrainEval,
        Stage::Select,
        Stage::TrainGan,
        Stage::Invert,
        Stage::Evaluate,
        Stage::AnalyzeLoss,
    ];

    /// The stages of a full attack, in order.
    pub const ATTACK: [Stage; 6] = [
        Stage::TrainTarget,
        Stage::TrainEval,
        Stage::Select,
        Stage::TrainGan,
        Stage::Invert,
        Stage::Evaluate,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Stage::TrainTarget => "train-target",
            Stage::TrainEval => "train-eval",
            Stage::Select => "select",
            Stage::TrainGan => "train-gan",
            Stage::Invert => "invert",
            Stage::Evaluate => "evaluate",
            Stage::AnalyzeLoss => "analyze-loss",
        }
    }

    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::TrainTarget | Stage::TrainEval => &[],
            Stage::Select => &[Stage::TrainTarget],
            Stage::TrainGan => &[Stage::TrainTarget, Stage::Select],
            Stage::Invert => &[Stage::TrainTarget, Stage::TrainGan],
            Stage::Evaluate => &[Stage::TrainEval, Stage::Invert],
            Stage::AnalyzeLoss => &[Stage::TrainTarget, Stage::TrainGan],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

pub const STAMP_VERSION: u32 = 1;

/// Completion record of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub format_version: u32,
    pub stage: Stage,
    pub key: String,
    pub config_hash: String,
    /// Output paths relative to the stage directory, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl StageStamp {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let s: StageStamp = serde_json::from_slice(bytes)?;
        if s.format_version != STAMP_VERSION {
            return Err(Error::malformed("stage stamp", format!("version {}", s.format_version)));
        }
        if s.key.len() != 64 || !s.key.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::malformed("stage stamp", "key is not a SHA-256 digest"));
        }
        if s.outputs.keys().any(|p| Path::new(p).is_absolute() || p.split('/').any(|c| c == "..")) {
            return Err(Error::malformed("stage stamp", "output path escapes the stage directory"));
        }
        Ok(s)
    }

    /// True when every recorded output exists with its recorded hash.
    fn outputs_intact(&self, dir: &Path) -> bool {
        self.outputs
            .iter()
            .all(|(rel, hash)| sha256_file(&dir.join(rel)).is_ok_and(|h| &h == hash))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    /// Stamp and outputs matched; nothing was recomputed.
    Skipped,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Recompute even when the stamp matches.
    pub force: bool,
    /// Worker threads for stage-2 attacks.
    pub jobs: usize,
    /// GAN progress logging interval in iterations; 0 disables it.
    pub log_every: usize,
}

/// One row of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub attack_acc: Option<f64>,
    pub fid: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    InvLoss,
    N,
    Alpha,
    M,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inv_loss" => Ok(Self::InvLoss),
            "n" => Ok(Self::N),
            "alpha" => Ok(Self::Alpha),
            "m" => Ok(Self::M),
            other => Err(Error::Config(format!("unknown ablation axis `{other}` (inv_loss, n, alpha, m)"))),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::InvLoss => "inv_loss",
            Self::N => "n",
            Self::Alpha => "alpha",
            Self::M => "m",
        }
    }

    /// Stages whose output depends on the axis; the others are shared with
    /// the base run.
    pub fn affected(self) -> &'static [Stage] {
        match self {
            Self::N => &[Stage::Select, Stage::TrainGan, Stage::Invert, Stage::Evaluate],
            Self::Alpha => &[Stage::TrainGan, Stage::Invert, Stage::Evaluate],
            Self::InvLoss | Self::M => &[Stage::Invert, Stage::Evaluate],
        }
    }

    /// Copy of `m` with the axis set to `value`.
    pub fn apply(self, m: &RunManifest, value: &str) -> Result<RunManifest> {
        let bad = |e: String| Error::Config(format!("ablation value `{value}` for {}: {e}", self.id()));
        let mut out = m.clone();
        match self {
            Self::InvLoss => out.attack.reconstruct.inv_loss.kind = LossKind::parse(value)?,
            Self::N => out.selection.n = value.parse().map_err(|e| bad(format!("{e}")))?,
            Self::Alpha => out.gan.alpha = value.parse().map_err(|e| bad(format!("{e}")))?,
            Self::M => out.attack.reconstruct.views = value.parse().map_err(|e| bad(format!("{e}")))?,
        }
        if out != *m {
            out.run_id = format!("{}--{}-{}", m.run_id, self.id(), value);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn defaults(self, m: &RunManifest) -> Vec<String> {
        let a = &m.ablation;
        match self {
            Self::InvLoss => a.inv_loss.iter().map(|k| k.id().to_string()).collect(),
            Self::N => a.n.iter().map(usize::to_string).collect(),
            Self::Alpha => a.alpha.iter().map(f64::to_string).collect(),
            Self::M => a.m.iter().map(usize::to_string).collect(),
        }
    }
}

pub struct Pipeline {
    manifest: RunManifest,
    root: PathBuf,
    paths: ArtifactPaths,
    opts: RunOptions,
    /// Stages read from another run's directories.
    shared: HashMap<Stage, PathBuf>,
}

fn json_hash(parts: &[serde_json::Value]) -> String {
    sha256_hex(serde_json::to_string(parts).expect("json serializes").as_bytes())
}

fn dataset_hash(b: &ImageBatch) -> String {
    let mut bytes = Vec::with_capacity(b.values().len() * 4 + 16);
    bytes.extend(format!("{}", b.shape()).as_bytes());
    for v in b.values() {
        bytes.extend(v.to_le_bytes());
    }
    for l in b.labels().unwrap_or(&[]) {
        bytes.extend((*l as u64).to_le_bytes());
    }
    sha256_hex(&bytes)
}

impl Pipeline {
    pub fn new(manifest: RunManifest, root: impl Into<PathBuf>, opts: RunOptions) -> Result<Self> {
        manifest.validate()?;
        let root = root.into();
        let paths = ArtifactPaths::new(&root, &manifest.run_id);
        Ok(Self {
            manifest,
            root,
            paths,
            opts,
            shared: HashMap::new(),
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn paths(&self) -> &ArtifactPaths {
        &self.paths
    }

    /// Directory holding the artifacts of `stage`.
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        if let Some(d) = self.shared.get(&stage) {
            return d.clone();
        }
        match stage {
            Stage::TrainTarget | Stage::TrainEval | Stage::TrainGan => self.paths.checkpoints.clone(),
            Stage::Select => self.paths.selection.clone(),
            Stage::Invert => self.paths.attacks.clone(),
            Stage::Evaluate => self.paths.reports.clone(),
            Stage::AnalyzeLoss => self.paths.traces.clone(),
        }
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(format!("{}.stage.json", stage.id()))
    }

    pub fn stamp(&self, stage: Stage) -> Result<Option<StageStamp>> {
        let p = self.stamp_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(StageStamp::parse(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?))
    }

    /// Stamp of a completed input stage, or a dependency error naming it.
    fn require(&self, stage: Stage) -> Result<StageStamp> {
        let missing = || Error::MissingStage {
            stage: stage.id(),
            path: self.stamp_path(stage),
        };
        let stamp = self.stamp(stage)?.ok_or_else(missing)?;
        if !stamp.outputs_intact(&self.stage_dir(stage)) {
            return Err(missing());
        }
        Ok(stamp)
    }

    /// Key of `stage` under the current manifest and input stamps.
    pub fn stage_key(&self, stage: Stage) -> Result<String> {
        let m = &self.manifest;
        let own = match stage {
            Stage::TrainTarget => serde_json::json!([m.seed, m.dataset, m.split, m.target]),
            Stage::TrainEval => serde_json::json!([m.seed, m.dataset, m.evaluator]),
            Stage::Select => serde_json::json!([m.seed, m.dataset, m.split, m.selection]),
            Stage::TrainGan => serde_json::json!([m.seed, m.gan]),
            Stage::Invert => serde_json::json!([m.seed, m.attack]),
            Stage::Evaluate => serde_json::json!([m.seed, m.dataset, m.split, m.evaluation]),
            Stage::AnalyzeLoss => serde_json::json!([m.seed, m.attack, m.analysis]),
        };
        let mut parts = vec![serde_json::json!(stage.id()), own];
        for &input in stage.inputs() {
            parts.push(serde_json::json!(self.require(input)?.key));
        }
        Ok(json_hash(&parts))
    }

    /// True when `stage` and all its inputs have completed under the
    /// current manifest with intact outputs.
    pub fn is_current(&self, stage: Stage) -> Result<bool> {
        let key = match self.stage_key(stage) {
            Ok(k) => k,
            Err(Error::MissingStage { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        Ok(self
            .stamp(stage)?
            .is_some_and(|s| s.key == key && s.outputs_intact(&self.stage_dir(stage))))
    }

    /// Runs `stage` unless its stamp is current.
    pub fn run(&self, stage: Stage) -> Result<StageStatus> {
        if !self.opts.force && self.is_current(stage)? {
            log::info!("{stage}: up to date, skipping");
            return Ok(StageStatus::Skipped);
        }
        let key = self.stage_key(stage)?;
        log::info!("{stage}: running for run `{}`", self.manifest.run_id);
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let outputs = match stage {
            Stage::TrainTarget => self.train_target()?,
            Stage::TrainEval => self.train_eval()?,
            Stage::Select => self.select()?,
            Stage::TrainGan => self.train_gan()?,
            Stage::Invert => self.invert()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::AnalyzeLoss => self.analyze_loss()?,
        };
        let mut hashed = BTreeMap::new();
        for rel in outputs {
            let h = sha256_file(&dir.join(&rel))?;
            hashed.insert(rel, h);
        }
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest.echo())?.as_bytes(),
        )?;
        let stamp = StageStamp {
            format_version: STAMP_VERSION,
            stage,
            key,
            config_hash: self.manifest.config_hash(),
            outputs: hashed,
        };
        write_atomic(&self.stamp_path(stage), serde_json::to_string_pretty(&stamp)?.as_bytes())?;
        write_atomic(&self.paths.manifest, self.manifest.to_yaml()?.as_bytes())?;
        Ok(StageStatus::Ran)
    }

    /// Runs `stages` in order.
    pub fn run_all(&self, stages: &[Stage]) -> Result<Vec<(Stage, StageStatus)>> {
        stages.iter().map(|&s| Ok((s, self.run(s)?))).collect()
    }

    fn split(&self) -> Result<DatasetSplit> {
        load_split(&self.manifest.dataset, &self.manifest.split, self.manifest.stage_seed("split", 0))
    }

    fn train_role(&self, role: &str, stage: &ClassifierStage, data: &ImageBatch, val: Option<&ImageBatch>, classes: usize) -> Result<Vec<String>> {
        let spec = ClassifierSpec {
            arch: stage.arch,
            width: stage.width,
            input: data.shape(),
            classes,
            seed: self.manifest.stage_seed(&format!("{role}-init"), stage.train.seed),
        };
        let mut cfg = stage.train.clone();
        cfg.seed = self.manifest.stage_seed(role, stage.train.seed);
        let (model, report) = train_classifier(spec, data, val, &cfg)?;
        log::info!(
            "{role}: train accuracy {:.4}, validation accuracy {}",
            report.train_accuracy,
            report.val_accuracy.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
        let meta = CheckpointMeta {
            dataset_hash: dataset_hash(data),
            train: Some(report),
        };
        model.save(&self.paths.checkpoints, role, &meta)?;
        Ok(vec![format!("{role}.ckpt"), format!("{role}.json")])
    }

    fn train_target(&self) -> Result<Vec<String>> {
        let split = self.split()?;
        self.train_role("target", &self.manifest.target, &split.private, split.heldout_private.as_ref(), split.k())
    }

    /// The evaluator sees the whole original training pool with its
    /// original labels.
    fn train_eval(&self) -> Result<Vec<String>> {
        let ds = &self.manifest.dataset;
        let pool = load_pool(ds, Part::Train)?.ok_or_else(|| Error::Empty(format!("dataset `{}` has no training part", ds.name)))?;
        let test = load_pool(ds, Part::Test)?;
        let classes = pool.labels().and_then(|l| l.iter().max()).map_or(0, |m| m + 1);
        if classes < 2 {
            return Err(Error::Empty("evaluator needs at least two labels".into()));
        }
        self.train_role("evaluator", &self.manifest.evaluator, &pool, test.as_ref(), classes)
    }

    pub fn load_target(&self) -> Result<Classifier> {
        self.require(Stage::TrainTarget)?;
        Ok(Classifier::load(&self.stage_dir(Stage::TrainTarget), "target")?.0)
    }

    pub fn load_evaluator(&self) -> Result<Classifier> {
        self.require(Stage::TrainEval)?;
        Ok(Classifier::load(&self.stage_dir(Stage::TrainEval), "evaluator")?.0)
    }

    pub fn load_selection(&self) -> Result<PseudoLabeledDataset> {
        self.require(Stage::Select)?;
        PseudoLabeledDataset::load(&self.stage_dir(Stage::Select).join("selection.json"))
    }

    pub fn load_generator(&self) -> Result<Generator> {
        self.require(Stage::TrainGan)?;
        let dir = self.stage_dir(Stage::TrainGan);
        let path = latest_checkpoint(&dir).ok_or_else(|| Error::MissingStage {
            stage: Stage::TrainGan.id(),
            path: dir.join("gan_<iter>.ckpt"),
        })?;
        Ok(load_gan(&path)?.0)
    }

    pub fn load_report(&self) -> Result<ReportBundle> {
        self.require(Stage::Evaluate)?;
        ReportBundle::load(&self.stage_dir(Stage::Evaluate))
    }

    fn select(&self) -> Result<Vec<String>> {
        let target = self.load_target()?;
        let split = self.split()?;
        let sel = &self.manifest.selection;
        let dr = assign_pseudo_labels(&split.public, &target, sel.n, split.k(), sel.score)?;
        dr.save(&self.paths.selection.join("selection.json"))?;
        Ok(vec!["selection.json".into()])
    }

    fn train_gan(&self) -> Result<Vec<String>> {
        let target = self.load_target()?;
        let dr = self.load_selection()?;
        let split = self.split()?;
        let data = dr.training_set(&split.public)?;
        let mut cfg = self.manifest.gan.clone();
        cfg.seed = self.manifest.stage_seed("gan", cfg.seed);
        let dir = &self.paths.checkpoints;
        // checkpoints of an earlier configuration must not be mistaken for ours
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("gan_") && (name.ends_with(".ckpt") || name.ends_with(".json")) {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let opts = TrainOptions {
            out_dir: Some(dir.clone()),
            audit_spectral: false,
            log_every: self.opts.log_every,
        };
        let state = train_cgan(&data, dr.k(), &target, &cfg, &opts)?;
        let last = state.checkpoints.last().ok_or_else(|| Error::Empty("GAN wrote no checkpoint".into()))?;
        let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let ckpt = name(last);
        Ok(vec![ckpt.clone(), ckpt.replace(".ckpt", ".json"), "gan_history.csv".into()])
    }

    fn attack_classes(&self, k: usize, chosen: &Option<Vec<usize>>) -> Result<Vec<usize>> {
        match chosen {
            Some(c) => {
                if let Some(&bad) = c.iter().find(|&&c| c >= k) {
                    return Err(Error::LabelOutOfRange { label: bad, classes: k });
                }
                Ok(c.clone())
            }
            None => Ok((0..k).collect()),
        }
    }

    fn invert(&self) -> Result<Vec<String>> {
        let target = self.load_target()?;
        let gen = self.load_generator()?;
        let a = &self.manifest.attack;
        let classes = self.attack_classes(target.num_classes(), &a.classes)?;
        let dir = &self.paths.attacks;
        if self.opts.force {
            clear_attack_records(dir)?;
        }
        let opts = BatchOptions {
            out_dir: Some(dir.clone()),
            jobs: self.opts.jobs.max(1),
        };
        let out = batch_attack(&gen, &target, &classes, &a.reconstruct, a.images_per_class, self.manifest.stage_seed("attack", 0), &opts)?;
        for f in &out.failures {
            log::warn!("attack class {} seed {} failed: {}", f.class, f.seed, f.reason);
        }
        if out.results.is_empty() {
            return Err(Error::AllRestartsFailed(out.failures.len()));
        }
        log::info!(
            "invert: {} attacks ({} resumed), {} failed",
            out.results.len(),
            out.resumed,
            out.failures.len()
        );
        let mut outputs = vec!["index.csv".to_string()];
        outputs.extend(out.results.iter().map(|r| {
            let p = crate::reconstruct::record_path(Path::new(""), r.class, r.seed);
            p.to_string_lossy().into_owned()
        }));
        Ok(outputs)
    }

    fn evaluate(&self) -> Result<Vec<String>> {
        let eval_model = self.load_evaluator()?;
        let target = self.load_target()?;
        if eval_model.architecture() == target.architecture() {
            return Err(Error::Config("evaluation model must differ in architecture from the target".into()));
        }
        self.require(Stage::Invert)?;
        let results = load_attacks(&self.stage_dir(Stage::Invert))?;
        let split = self.split()?;
        let cfg = ReportConfig {
            class_labels: split.class_labels.clone(),
            std_groups: self.manifest.evaluation.std_groups,
            fid_features: self.manifest.evaluation.fid_features,
            echo: self.manifest.echo(),
        };
        let report = build_report(&results, &eval_model, &split.private, &cfg)?;
        log::info!(
            "evaluate: top-1 {:.4} ± {:.4}, top-5 {:.4}, knn {:.3}, fid {}",
            report.selected.attack_acc_top1.mean,
            report.selected.attack_acc_top1.std,
            report.selected.attack_acc_top5.mean,
            report.selected.knn_dist,
            report.selected.fid.map_or("absent".into(), |f| format!("{f:.3}"))
        );
        report.save(&self.paths.reports)?;
        Ok(vec!["report.json".into(), "report.md".into()])
    }

    fn analyze_loss(&self) -> Result<Vec<String>> {
        let target = self.load_target()?;
        let gen = self.load_generator()?;
        let an = &self.manifest.analysis;
        let classes = self.attack_classes(target.num_classes(), &an.classes)?;
        let base = self.manifest.stage_seed("analysis", 0);
        let jobs: Vec<Job> = (0..an.latents)
            .map(|i| {
                let class = classes[i % classes.len()];
                let seed = attack_seed(base, class, i);
                Job {
                    class,
                    seed,
                    eval_seed: seed,
                }
            })
            .collect();
        let mut outputs = Vec::new();
        for &kind in &an.losses {
            let mut cfg = self.manifest.attack.reconstruct.clone();
            cfg.inv_loss = InversionLoss {
                kind,
                ..cfg.inv_loss
            };
            cfg.iters = an.iters;
            let loss = cfg.inv_loss;
            let mut steps: Vec<TrendStep> = Vec::with_capacity(an.iters);
            let mut observe = |_: usize, logits: &[candle_core::Tensor], rows: &[usize]| -> Result<()> {
                steps.push(logit_statistics(&loss, &logits[0], rows)?.0);
                Ok(())
            };
            optimize(&gen, &target, &jobs, &cfg, Some(&mut observe))?;
            let trace = LossTrace::from_steps(kind, steps);
            let csv = format!("{}.csv", kind.id());
            let json = format!("{}.json", kind.id());
            trace.write_csv(&self.paths.traces.join(&csv))?;
            write_atomic(&self.paths.traces.join(&json), serde_json::to_string_pretty(&trace)?.as_bytes())?;
            if let (Some(first), Some(last)) = (trace.steps.first(), trace.steps.last()) {
                log::info!(
                    "analyze-loss {kind}: gradient l1 {:.4} -> {:.4}, target probability {:.4} -> {:.4}",
                    first.grad_l1,
                    last.grad_l1,
                    first.target_prob,
                    last.target_prob
                );
            }
            outputs.push(csv);
            outputs.push(json);
        }
        Ok(outputs)
    }

    pub fn load_trace(&self, kind: LossKind) -> Result<LossTrace> {
        self.require(Stage::AnalyzeLoss)?;
        let p = self.stage_dir(Stage::AnalyzeLoss).join(format!("{}.json", kind.id()));
        Ok(serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?)
    }

    /// Pipeline for `manifest` that reads every stage outside `own` from
    /// this run.
    fn child(&self, manifest: RunManifest, own: &[Stage]) -> Result<Pipeline> {
        let mut p = Pipeline::new(manifest, self.root.clone(), self.opts.clone())?;
        for s in Stage::ALL {
            if !own.contains(&s) {
                p.shared.insert(s, self.stage_dir(s));
            }
        }
        Ok(p)
    }

    /// One attack and evaluation per value of `axis`, reusing every stage the
    /// axis does not touch. Failures are recorded per row. Writes
    /// `ablations/<run_id>/<axis>.csv`.
    pub fn ablate(&self, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationRow>> {
        if values.is_empty() {
            return Err(Error::Config("ablation needs at least one value".into()));
        }
        let affected = axis.affected();
        // stages shared with the base run must exist before sweeping
        for &s in Stage::ATTACK.iter().filter(|s| !affected.contains(s)) {
            self.require(s)?;
        }
        let mut rows = Vec::with_capacity(values.len());
        for v in values {
            let outcome = axis.apply(&self.manifest, v).and_then(|m| {
                let p = if m == self.manifest {
                    self.child(m, &Stage::ALL)?
                } else {
                    self.child(m, affected)?
                };
                for &s in affected {
                    p.run(s)?;
                }
                p.load_report()
            });
            rows.push(match outcome {
                Ok(r) => AblationRow {
                    value: v.clone(),
                    attack_acc: Some(r.selected.attack_acc_top1.mean),
                    fid: r.selected.fid,
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation {}={v} failed: {e}", axis.id());
                    AblationRow {
                        value: v.clone(),
                        attack_acc: None,
                        fid: None,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
        write_ablation_csv(&self.paths.ablations.join(format!("{}.csv", axis.id())), &rows)?;
        Ok(rows)
    }
}

fn clear_attack_records(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if p.is_dir() && name.starts_with("class_") {
            std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["value", "attack_acc", "fid", "error"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in rows {
        w.write_record([r.value.clone(), opt(r.attack_acc), opt(r.fid), r.error.clone().unwrap_or_default()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::malformed("csv", e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_ablation_csv(bytes: &[u8]) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["value", "attack_acc", "fid", "error"] {
        return Err(Error::malformed("ablation csv", "unexpected header"));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::malformed("ablation csv", format!("bad number `{s}`")))
        }
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(AblationRow {
                value: rec[0].to_string(),
                attack_acc: num(&rec[1])?,
                fid: num(&rec[2])?,
                error: (!rec[3].is_empty()).then(|| rec[3].to_string()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_apply_renames_only_changed_runs() {
        let m = RunManifest::from_yaml(
            r#"
run_id: base
seed: 1
dataset: {name: synthetic, synthetic: {kind: intensity, classes: 4, per_class: 4, side: 8}}
split: {private_labels: [0, 1], public_labels: [2, 3]}
target: {arch: mlp, width: 4}
evaluator: {arch: vgg, width: 4}
"#,
        )
        .unwrap();
        let same = AblationAxis::InvLoss.apply(&m, "mm").unwrap();
        assert_eq!(same, m);
        let ce = AblationAxis::InvLoss.apply(&m, "ce").unwrap();
        assert_eq!(ce.run_id, "base--inv_loss-ce");
        assert_eq!(ce.attack.reconstruct.inv_loss.kind, LossKind::Ce);
        assert_eq!(AblationAxis::Alpha.apply(&m, "0.5").unwrap().gan.alpha, 0.5);
        assert!(AblationAxis::M.apply(&m, "0").is_err());
        assert!(AblationAxis::N.apply(&m, "x").is_err());
        assert!(AblationAxis::parse("lr").is_err());
    }

    #[test]
    fn ablation_csv_roundtrip() {
        let rows = vec![
            AblationRow {
                value: "ce".into(),
                attack_acc: Some(0.25),
                fid: None,
                error: None,
            },
            AblationRow {
                value: "mm".into(),
                attack_acc: None,
                fid: None,
                error: Some("boom, \"quoted\"".into()),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_ablation_csv(&p, &rows).unwrap();
        assert_eq!(read_ablation_csv(&std::fs::read(&p).unwrap()).unwrap(), rows);
        assert!(read_ablation_csv(b"a,b\n1,2\n").is_err());
    }

    #[test]
    fn stamp_parser_rejects_escaping_paths() {
        let mut s = StageStamp {
            format_version: STAMP_VERSION,
            stage: Stage::Select,
            key: "0".repeat(64),
            config_hash: String::new(),
            outputs: BTreeMap::from([("selection.json".to_string(), "x".to_string())]),
        };
        assert!(StageStamp::parse(&serde_json::to_vec(&s).unwrap()).is_ok());
        s.outputs.insert("../x".into(), "y".into());
        assert!(StageStamp::parse(&serde_json::to_vec(&s).unwrap()).is_err());
    }
}
