//! Attack metrics: top-k accuracy under an independent evaluation model,
//! nearest-private-image feature distance, and a Fréchet distance over
//! features of successful reconstructions.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::{in_top_k, Classifier, Matrix};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::reconstruct::AttackResult;

/// Whether each target is within the top `k` of its logit row.
pub fn top_k_hits(logits: &Matrix, targets: &[usize], k: usize) -> Result<Vec<bool>> {
    if logits.rows != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets", logits.rows),
            actual: targets.len().to_string(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols) {
        return Err(Error::LabelOutOfRange { label: t, classes: logits.cols });
    }
    Ok(targets.iter().enumerate().map(|(i, &t)| in_top_k(logits.row(i), t, k)).collect())
}

fn fraction(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Fraction of `recons` whose target label is among the evaluation model's
/// top `k` predictions.
pub fn attack_accuracy(eval_model: &Classifier, recons: &ImageBatch, targets: &[usize], k: usize) -> Result<f64> {
    if recons.is_empty() {
        return Err(Error::Empty("attack accuracy of an empty batch".into()));
    }
    let logits = eval_model.predict_logits(recons)?;
    Ok(fraction(&top_k_hits(&logits, targets, k)?))
}

/// For each row of `a`, the l2 distance to its nearest row of `b`.
pub fn nearest_distances(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if b.rows == 0 {
        return Err(Error::Empty("nearest-neighbour reference set is empty".into()));
    }
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", b.cols),
            actual: a.cols.to_string(),
        });
    }
    Ok((0..a.rows)
        .map(|i| {
            let x = a.row(i);
            (0..b.rows)
                .map(|j| x.iter().zip(b.row(j)).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// Mean over reconstructions of the shortest penultimate-feature distance to
/// any private image.
pub fn knn_distance(eval_model: &Classifier, recons: &ImageBatch, private: &ImageBatch) -> Result<f64> {
    if private.is_empty() {
        return Err(Error::Empty("private class set is empty".into()));
    }
    if recons.is_empty() {
        return Err(Error::Empty("no reconstructions".into()));
    }
    let a = eval_model.penultimate_features(recons)?;
    let b = eval_model.penultimate_features(private)?;
    let d = nearest_distances(&a, &b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fid {
    pub value: f64,
    pub warnings: Vec<String>,
}

/// Eigenvalue floor used by the matrix square roots.
pub const FID_EIG_FLOOR: f64 = 1e-10;

fn moments(m: &Matrix) -> (DVector<f64>, DMatrix<f64>) {
    let x = DMatrix::from_row_slice(m.rows, m.cols, &m.values).map(f64::from);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (m.rows as f64 - 1.0);
    (mean, cov)
}

/// Square root of a symmetric PSD matrix; returns whether any eigenvalue
/// was raised to the floor.
fn sqrtm_psd(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clamped = false;
    let roots = eig.eigenvalues.map(|l| {
        if l < FID_EIG_FLOOR {
            // tiny negative eigenvalues are rounding noise
            if l < -1e-8 {
                clamped = true;
            }
            FID_EIG_FLOOR.sqrt()
        } else {
            l.sqrt()
        }
    });
    let q = eig.eigenvectors;
    (&q * DMatrix::from_diagonal(&roots) * q.transpose(), clamped)
}

fn trace_sqrt_psd(a: &DMatrix<f64>) -> (f64, bool) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clamped = false;
    let t = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < -1e-8 {
                clamped = true;
            }
            l.max(0.0).sqrt()
        })
        .sum();
    (t, clamped)
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn compute_fid(a: &Matrix, b: &Matrix) -> Result<Fid> {
    if a.rows < 2 || b.rows < 2 {
        return Err(Error::Empty("FID needs at least two samples per set".into()));
    }
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", a.cols),
            actual: b.cols.to_string(),
        });
    }
    if a.values.iter().chain(&b.values).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("FID features".into()));
    }
    let mut warnings = Vec::new();
    let need = 2 * a.cols;
    if a.rows < need || b.rows < need {
        warnings.push(format!(
            "small sample: {} and {} feature vectors for dimension {} (want >= {need})",
            a.rows, b.rows, a.cols
        ));
    }
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    let (r1, c1) = sqrtm_psd(&s1);
    let (t, c2) = trace_sqrt_psd(&(&r1 * &s2 * &r1));
    if c1 || c2 {
        warnings.push(format!("degenerate covariance: eigenvalues clamped at {FID_EIG_FLOOR}"));
        log::warn!("FID: degenerate covariance, eigenvalues clamped");
    }
    let value = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * t;
    Ok(Fid {
        value: value.max(0.0),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Penultimate layer of the evaluation model.
    #[default]
    Evaluator,
    /// Raw pixels.
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Evaluation-model label of each attacked class.
    pub class_labels: Vec<usize>,
    /// Attacks are split into this many groups by image index; deviations
    /// are taken across group accuracies.
    pub std_groups: usize,
    pub fid_features: FeatureSpace,
    #[serde(default)]
    pub echo: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Summary { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub label: usize,
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
    pub knn_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// `selected` (best restart per attack) or `all_restarts`.
    pub mode: String,
    pub attack_acc_top1: Summary,
    pub attack_acc_top5: Summary,
    pub knn_dist: f64,
    /// Absent when no attack succeeded.
    pub fid: Option<f64>,
    pub fid_warnings: Vec<String>,
    pub n_success: usize,
    pub n_total: usize,
    pub per_class: Vec<ClassMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub selected: EvaluationReport,
    pub all_restarts: Option<EvaluationReport>,
    pub config: ReportConfig,
}

struct Recon {
    class: usize,
    group: usize,
    image: Vec<f32>,
}

/// Scores reconstructions against the private set (`private` labels are
/// class indices matching the attack classes).
pub fn build_report(results: &[AttackResult], eval_model: &Classifier, private: &ImageBatch, cfg: &ReportConfig) -> Result<ReportBundle> {
    if results.is_empty() {
        return Err(Error::Empty("no attack results to evaluate".into()));
    }
    if cfg.std_groups == 0 {
        return Err(Error::Config("std_groups must be positive".into()));
    }
    let priv_labels = private.labels().ok_or_else(|| Error::Empty("private set is unlabelled".into()))?;
    let mut seen = vec![0usize; cfg.class_labels.len()];
    let mut selected = Vec::with_capacity(results.len());
    let mut all = Vec::new();
    for r in results {
        if r.class >= cfg.class_labels.len() {
            return Err(Error::LabelOutOfRange {
                label: r.class,
                classes: cfg.class_labels.len(),
            });
        }
        let i = seen[r.class];
        seen[r.class] += 1;
        selected.push(Recon {
            class: r.class,
            group: i % cfg.std_groups,
            image: r.image.clone(),
        });
        if r.restarts.len() > 1 {
            all.extend(r.restarts.iter().enumerate().map(|(j, _)| (r, j)));
        }
    }
    let shape = results[0].image_shape;
    let private_features = match cfg.fid_features {
        FeatureSpace::Evaluator => eval_model.penultimate_features(private)?,
        FeatureSpace::Pixels => pixel_matrix(private),
    };
    let knn_features = eval_model.penultimate_features(private)?;
    let selected_report = score("selected", &selected, shape, eval_model, &knn_features, priv_labels, &private_features, cfg)?;
    // every restart's final latent is decoded again only when restarts > 1
    let all_report = if all.is_empty() {
        None
    } else {
        let recons: Vec<Recon> = all
            .iter()
            .map(|&(r, j)| Recon {
                class: r.class,
                group: j,
                image: restart_image(r, j),
            })
            .collect();
        Some(score("all_restarts", &recons, shape, eval_model, &knn_features, priv_labels, &private_features, cfg)?)
    };
    Ok(ReportBundle {
        selected: selected_report,
        all_restarts: all_report,
        config: cfg.clone(),
    })
}

fn restart_image(r: &AttackResult, j: usize) -> Vec<f32> {
    if j == r.selected {
        r.image.clone()
    } else {
        r.restart_images.get(j).cloned().flatten().unwrap_or_default()
    }
}

fn pixel_matrix(b: &ImageBatch) -> Matrix {
    Matrix {
        rows: b.len(),
        cols: b.shape().numel(),
        values: b.values().to_vec(),
    }
}

#[allow(clippy::too_many_arguments)]
fn score(
    mode: &str,
    recons: &[Recon],
    shape: crate::data::ImageShape,
    eval_model: &Classifier,
    knn_features: &Matrix,
    priv_labels: &[usize],
    private_features: &Matrix,
    cfg: &ReportConfig,
) -> Result<EvaluationReport> {
    let recons: Vec<&Recon> = recons.iter().filter(|r| !r.image.is_empty()).collect();
    if recons.is_empty() {
        return Err(Error::Empty(format!("no {mode} reconstructions")));
    }
    let values: Vec<f32> = recons.iter().flat_map(|r| r.image.iter().copied()).collect();
    let batch = ImageBatch::new(shape, values, None)?;
    let logits = eval_model.predict_logits(&batch)?;
    let feats = eval_model.penultimate_features(&batch)?;
    let targets: Vec<usize> = recons.iter().map(|r| cfg.class_labels[r.class]).collect();
    let top1 = top_k_hits(&logits, &targets, 1)?;
    let top5 = top_k_hits(&logits, &targets, 5.min(logits.cols))?;

    let k = cfg.class_labels.len();
    let rows_of = |pred: &dyn Fn(usize) -> bool, m: &Matrix| -> Matrix {
        let idx: Vec<usize> = (0..m.rows).filter(|&i| pred(i)).collect();
        Matrix {
            rows: idx.len(),
            cols: m.cols,
            values: idx.iter().flat_map(|&i| m.row(i).iter().copied()).collect(),
        }
    };
    let mut knn = vec![0.0; recons.len()];
    let mut per_class = Vec::new();
    for c in 0..k {
        let mine: Vec<usize> = (0..recons.len()).filter(|&i| recons[i].class == c).collect();
        if mine.is_empty() {
            continue;
        }
        let reference = rows_of(&|i| priv_labels[i] == c, knn_features);
        let sub = rows_of(&|i| recons[i].class == c, &feats);
        let d = nearest_distances(&sub, &reference)?;
        for (slot, &i) in mine.iter().enumerate() {
            knn[i] = d[slot];
        }
        let hits1: Vec<bool> = mine.iter().map(|&i| top1[i]).collect();
        let hits5: Vec<bool> = mine.iter().map(|&i| top5[i]).collect();
        per_class.push(ClassMetrics {
            class: c,
            label: cfg.class_labels[c],
            n: mine.len(),
            top1: fraction(&hits1),
            top5: fraction(&hits5),
            knn_dist: d.iter().sum::<f64>() / d.len() as f64,
        });
    }

    let groups = recons.iter().map(|r| r.group).max().unwrap_or(0) + 1;
    let group_acc = |hits: &[bool]| -> Vec<f64> {
        (0..groups)
            .filter_map(|g| {
                let h: Vec<bool> = (0..recons.len()).filter(|&i| recons[i].group == g).map(|i| hits[i]).collect();
                (!h.is_empty()).then(|| fraction(&h))
            })
            .collect()
    };
    let mut s1 = summarize(&group_acc(&top1));
    let mut s5 = summarize(&group_acc(&top5));
    s1.mean = fraction(&top1);
    s5.mean = fraction(&top5);

    let success: Vec<usize> = (0..recons.len()).filter(|&i| top1[i]).collect();
    let (fid, fid_warnings) = if success.len() >= 2 {
        let sf = match cfg.fid_features {
            FeatureSpace::Evaluator => rows_of(&|i| top1[i], &feats),
            FeatureSpace::Pixels => rows_of(&|i| top1[i], &pixel_matrix(&batch)),
        };
        let f = compute_fid(&sf, private_features)?;
        (Some(f.value), f.warnings)
    } else {
        let why = format!("{} successful reconstructions; FID needs at least two", success.len());
        (None, vec![why])
    };
    Ok(EvaluationReport {
        mode: mode.to_string(),
        attack_acc_top1: s1,
        attack_acc_top5: s5,
        knn_dist: knn.iter().sum::<f64>() / knn.len() as f64,
        fid,
        fid_warnings,
        n_success: success.len(),
        n_total: recons.len(),
        per_class,
    })
}

impl ReportBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Markdown table with the usual metric columns.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Mode | Attack Acc ↑ | Top-5 ↑ | KNN Dist ↓ | FID ↓ | Success |\n|---|---|---|---|---|---|\n");
        for r in std::iter::once(&self.selected).chain(self.all_restarts.as_ref()) {
            let fid = r.fid.map_or("—".to_string(), |f| format!("{f:.2}"));
            out.push_str(&format!(
                "| {} | {:.3} ± {:.4} | {:.3} ± {:.4} | {:.2} | {} | {}/{} |\n",
                r.mode,
                r.attack_acc_top1.mean,
                r.attack_acc_top1.std,
                r.attack_acc_top5.mean,
                r.attack_acc_top5.std,
                r.knn_dist,
                fid,
                r.n_success,
                r.n_total
            ));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_atomic(&dir.join("report.json"), self.to_json()?.as_bytes())?;
        crate::io::write_atomic(&dir.join("report.md"), self.to_markdown().as_bytes())
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("report.json");
        Self::parse(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)
    }
}
