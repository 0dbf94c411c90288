//! Top-n pseudo-labelling of the public pool.
//!
//! Each private class independently takes the `n` public images the target
//! scores highest for it, so one image may be picked by several classes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, Matrix};
use crate::data::ImageBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Softmax probability of the class.
    #[default]
    Probability,
    /// Raw logit of the class.
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub label: usize,
    /// Positions in the public pool, best first.
    pub indices: Vec<usize>,
    pub scores: Vec<f32>,
}

pub const SELECTION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledDataset {
    pub format_version: u32,
    pub n: usize,
    pub score_kind: ScoreKind,
    pub pool_size: usize,
    /// Fingerprint of the classifier that produced the scores, if any.
    #[serde(default)]
    pub target_fingerprint: Option<String>,
    pub classes: Vec<ClassSelection>,
}

/// Ranks every column of `scores` and keeps the top `n` rows per column.
/// Ties keep pool order.
pub fn select_top_n(scores: &Matrix, n: usize, kind: ScoreKind) -> Result<PseudoLabeledDataset> {
    if n == 0 {
        return Err(Error::Config("selection count n must be positive".into()));
    }
    if n > scores.rows {
        return Err(Error::Config(format!(
            "cannot select {n} images per class from a pool of {}",
            scores.rows
        )));
    }
    if scores.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("selection scores".into()));
    }
    let classes = (0..scores.cols)
        .map(|k| {
            let column: Vec<f32> = (0..scores.rows).map(|i| scores.values[i * scores.cols + k]).collect();
            let mut order: Vec<usize> = (0..scores.rows).collect();
            // stable: equal scores stay in pool order
            order.sort_by(|&a, &b| column[b].total_cmp(&column[a]));
            order.truncate(n);
            ClassSelection {
                label: k,
                scores: order.iter().map(|&i| column[i]).collect(),
                indices: order,
            }
        })
        .collect();
    Ok(PseudoLabeledDataset {
        format_version: SELECTION_VERSION,
        n,
        score_kind: kind,
        pool_size: scores.rows,
        target_fingerprint: None,
        classes,
    })
}

/// Scores `public` with `target` and selects the top `n` per class.
pub fn assign_pseudo_labels(
    public: &ImageBatch,
    target: &Classifier,
    n: usize,
    k: usize,
    kind: ScoreKind,
) -> Result<PseudoLabeledDataset> {
    if target.num_classes() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{k} target classes"),
            actual: target.num_classes().to_string(),
        });
    }
    if n > public.len() {
        return Err(Error::Config(format!(
            "cannot select {n} images per class from a pool of {}",
            public.len()
        )));
    }
    let scores = match kind {
        ScoreKind::Probability => target.predict_probs(public)?,
        ScoreKind::Logit => target.predict_logits(public)?,
    };
    let mut dr = select_top_n(&scores, n, kind)?;
    dr.target_fingerprint = Some(target.fingerprint()?);
    Ok(dr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: usize,
    pub mean_score: f64,
    pub min_score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub classes: Vec<ClassSummary>,
    /// Sum over images of `multiplicity - 1`.
    pub duplicates: usize,
    pub distinct_images: usize,
}

pub fn selection_summary(dr: &PseudoLabeledDataset) -> SelectionSummary {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for c in &dr.classes {
        for &i in &c.indices {
            *counts.entry(i).or_default() += 1;
        }
    }
    SelectionSummary {
        classes: dr
            .classes
            .iter()
            .map(|c| ClassSummary {
                label: c.label,
                mean_score: c.scores.iter().map(|&s| s as f64).sum::<f64>() / c.scores.len().max(1) as f64,
                min_score: c.scores.iter().copied().fold(f32::INFINITY, f32::min),
            })
            .collect(),
        duplicates: counts.values().map(|m| m - 1).sum(),
        distinct_images: counts.len(),
    }
}

impl PseudoLabeledDataset {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    /// The selected images with their pseudo-labels, class by class.
    pub fn training_set(&self, public: &ImageBatch) -> Result<ImageBatch> {
        if public.len() != self.pool_size {
            return Err(Error::ShapeMismatch {
                expected: format!("public pool of {} images", self.pool_size),
                actual: public.len().to_string(),
            });
        }
        let indices: Vec<usize> = self.classes.iter().flat_map(|c| c.indices.iter().copied()).collect();
        let labels: Vec<usize> = self
            .classes
            .iter()
            .flat_map(|c| std::iter::repeat(c.label).take(c.indices.len()))
            .collect();
        public.select(&indices).with_labels(Some(labels))
    }

    /// Checks the structural invariants of a selection file.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::malformed("selection", reason);
        if self.format_version != SELECTION_VERSION {
            return Err(bad(format!("unsupported version {}", self.format_version)));
        }
        if self.n == 0 || self.n > self.pool_size {
            return Err(bad(format!("n = {} with pool of {}", self.n, self.pool_size)));
        }
        for (k, c) in self.classes.iter().enumerate() {
            if c.label != k {
                return Err(bad(format!("class entry {k} carries label {}", c.label)));
            }
            if c.indices.len() != self.n || c.scores.len() != self.n {
                return Err(bad(format!("class {k} lists {} entries, expected {}", c.indices.len(), self.n)));
            }
            if let Some(&i) = c.indices.iter().find(|&&i| i >= self.pool_size) {
                return Err(bad(format!("class {k} references image {i} outside the pool")));
            }
            if c.scores.iter().any(|s| !s.is_finite()) || c.scores.windows(2).any(|w| w[1] > w[0]) {
                return Err(bad(format!("class {k} scores are not finite and non-increasing")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let dr: Self = serde_json::from_slice(bytes)?;
        dr.validate()?;
        Ok(dr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize, values: Vec<f32>) -> Matrix {
        Matrix { rows, cols, values }
    }

    /// Repeated linear scans for the best remaining entry; the earliest index
    /// wins among equals.
    fn brute_force(scores: &Matrix, n: usize, k: usize) -> Vec<usize> {
        let mut taken = vec![false; scores.rows];
        let mut out = Vec::new();
        for _ in 0..n {
            let mut best: Option<usize> = None;
            for i in 0..scores.rows {
                if taken[i] {
                    continue;
                }
                if best.map_or(true, |b| scores.row(i)[k] > scores.row(b)[k]) {
                    best = Some(i);
                }
            }
            taken[best.unwrap()] = true;
            out.push(best.unwrap());
        }
        out
    }

    #[test]
    fn five_image_pool() {
        let p = [0.9f32, 0.1, 0.8, 0.5, 0.2];
        let values: Vec<f32> = p.iter().flat_map(|&v| [v, 1.0 - v]).collect();
        let dr = select_top_n(&matrix(5, 2, values), 2, ScoreKind::Probability).unwrap();
        assert_eq!(dr.classes[0].indices, vec![0, 2]);
        assert_eq!(dr.classes[1].indices, vec![1, 4]);
    }

    #[test]
    fn whole_pool_is_ordered_per_column() {
        let m = matrix(3, 2, vec![0.1, 3.0, 0.7, 2.0, 0.4, 1.0]);
        let dr = select_top_n(&m, 3, ScoreKind::Logit).unwrap();
        assert_eq!(dr.classes[0].indices, vec![1, 2, 0]);
        assert_eq!(dr.classes[1].indices, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_oversized_n_and_nan() {
        let m = matrix(2, 2, vec![0.5; 4]);
        assert!(select_top_n(&m, 3, ScoreKind::Probability).is_err());
        assert!(select_top_n(&m, 0, ScoreKind::Probability).is_err());
        assert!(select_top_n(&matrix(1, 2, vec![f32::NAN, 0.0]), 1, ScoreKind::Logit).is_err());
    }

    #[test]
    fn duplicate_counting() {
        // image 0 tops all three classes
        let m = matrix(3, 3, vec![9.0, 9.0, 9.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let dr = select_top_n(&m, 1, ScoreKind::Logit).unwrap();
        assert_eq!(selection_summary(&dr).duplicates, 2);
        let m = matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let dr = select_top_n(&m, 1, ScoreKind::Logit).unwrap();
        assert_eq!(selection_summary(&dr).duplicates, 0);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = matrix(4, 2, vec![0.1, 0.9, 0.6, 0.4, 0.3, 0.7, 0.8, 0.2]);
        let dr = select_top_n(&m, 2, ScoreKind::Probability).unwrap();
        let back = PseudoLabeledDataset::parse(dr.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(back, dr);
        let mut broken = dr.clone();
        broken.classes[0].scores.reverse();
        assert!(PseudoLabeledDataset::parse(broken.to_json().unwrap().as_bytes()).is_err());
        assert!(PseudoLabeledDataset::parse(b"{").is_err());
    }

    fn pool() -> impl Strategy<Value = (Matrix, usize)> {
        (1usize..60, 1usize..8).prop_flat_map(|(rows, cols)| {
            // a coarse value grid makes ties common
            (proptest::collection::vec(0u8..6, rows * cols), 1..=rows)
                .prop_map(move |(v, n)| (matrix(rows, cols, v.into_iter().map(|x| x as f32 / 5.0).collect()), n))
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((m, n) in pool()) {
            let dr = select_top_n(&m, n, ScoreKind::Probability).unwrap();
            for k in 0..m.cols {
                prop_assert_eq!(&dr.classes[k].indices, &brute_force(&m, n, k));
            }
            let s = selection_summary(&dr);
            for (k, c) in s.classes.iter().enumerate() {
                let mut col: Vec<f32> = (0..m.rows).map(|i| m.row(i)[k]).collect();
                col.sort_by(|a, b| b.total_cmp(a));
                prop_assert_eq!(c.min_score, col[n - 1]);
            }
        }

        #[test]
        fn growing_n_keeps_prefix((m, n) in pool()) {
            let small = select_top_n(&m, n, ScoreKind::Logit).unwrap();
            let big = select_top_n(&m, m.rows, ScoreKind::Logit).unwrap();
            for k in 0..m.cols {
                prop_assert_eq!(&small.classes[k].indices[..], &big.classes[k].indices[..n]);
            }
        }
    }
}
