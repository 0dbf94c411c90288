//! Run manifests: one YAML document fixing every stage of an experiment.
//!
//! Each stage hashes the manifest sections it reads together with the keys
//! of the stages it consumes; a stage whose key and outputs are unchanged is
//! skipped on rerun.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{Architecture, TrainConfig};
use crate::data::{DatasetConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::FeatureSpace;
use crate::gan::GanConfig;
use crate::io::sha256_hex;
use crate::losses::LossKind;
use crate::reconstruct::{mix_seed, ReconstructConfig};
use crate::select::ScoreKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierStage {
    pub arch: Architecture,
    pub width: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub n: usize,
    pub score: ScoreKind,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            score: ScoreKind::Probability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub images_per_class: usize,
    /// Private classes to attack; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    pub reconstruct: ReconstructConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            images_per_class: 100,
            classes: None,
            reconstruct: ReconstructConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub std_groups: usize,
    pub fid_features: FeatureSpace,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            std_groups: 5,
            fid_features: FeatureSpace::Evaluator,
        }
    }
}

/// Loss-trend diagnostics: latents optimized with each loss while the
/// logit-gradient statistics are recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub iters: usize,
    pub latents: usize,
    /// Classes cycled over the latents; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    pub losses: Vec<LossKind>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            latents: 64,
            classes: None,
            losses: vec![LossKind::Ce, LossKind::Mm],
        }
    }
}

/// Default values of each ablation axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub inv_loss: Vec<LossKind>,
    pub n: Vec<usize>,
    pub alpha: Vec<f64>,
    pub m: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            inv_loss: vec![LossKind::Ce, LossKind::Mm, LossKind::Poincare],
            n: vec![1000, 2000, 4000],
            alpha: vec![0.0, 0.1, 0.2, 0.5],
            m: vec![1, 2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    /// Root seed; every stage derives its own seed from it (a stage's
    /// `seed` field is mixed in as an offset).
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub target: ClassifierStage,
    pub evaluator: ClassifierStage,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

impl RunManifest {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let m: RunManifest = serde_yaml::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_run_id(&self.run_id) {
            return Err(Error::Config(format!(
                "run id `{}` must be 1-128 characters of [A-Za-z0-9._-] not starting with `.`",
                self.run_id
            )));
        }
        self.dataset.shape()?;
        if self.target.arch == self.evaluator.arch {
            return Err(Error::Config(format!(
                "target and evaluator must differ in architecture, both are `{}`",
                self.target.arch.id()
            )));
        }
        if self.target.width == 0 || self.evaluator.width == 0 {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        if self.selection.n == 0 {
            return Err(Error::Config("selection n must be positive".into()));
        }
        self.gan.validate()?;
        self.attack.reconstruct.validate()?;
        if self.attack.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be positive".into()));
        }
        if self.evaluation.std_groups == 0 {
            return Err(Error::Config("std_groups must be positive".into()));
        }
        if self.analysis.iters == 0 || self.analysis.latents == 0 || self.analysis.losses.is_empty() {
            return Err(Error::Config("analysis needs iterations, latents and at least one loss".into()));
        }
        Ok(())
    }

    /// Canonical JSON of every field.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    /// SHA-256 of [`Self::canonical_json`].
    pub fn config_hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// Seed of a named stage.
    pub fn stage_seed(&self, stage: &str, offset: u64) -> u64 {
        let tag = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        mix_seed(mix_seed(self.seed ^ tag) ^ offset)
    }

    /// JSON stored beside artifacts: the manifest and its hash.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.config_hash(),
            "manifest": self,
        })
    }
}

/// Where every stage of one run writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub checkpoints: PathBuf,
    pub selection: PathBuf,
    pub attacks: PathBuf,
    pub traces: PathBuf,
    pub reports: PathBuf,
    pub ablations: PathBuf,
    /// Resolved manifest written by every stage.
    pub manifest: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: &Path, run_id: &str) -> Self {
        Self {
            checkpoints: root.join("checkpoints").join(run_id),
            selection: root.join("selection").join(run_id),
            attacks: root.join("attacks").join(run_id),
            traces: root.join("traces").join(run_id),
            reports: root.join("reports").join(run_id),
            ablations: root.join("ablations").join(run_id),
            manifest: root.join("manifests").join(format!("{run_id}.yaml")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
run_id: toy
seed: 7
dataset:
  name: synthetic
  synthetic: {kind: intensity, classes: 4, per_class: 8, side: 8}
split: {private_labels: [0, 1], public_labels: [2, 3]}
target: {arch: mlp, width: 8}
evaluator: {arch: vgg, width: 4}
gan: {total_iters: 3, g_ch: 4, d_ch: 4}
"#;

    #[test]
    fn partial_yaml_takes_defaults_and_roundtrips() {
        let m = RunManifest::from_yaml(TOY).unwrap();
        assert_eq!(m.selection.n, 4000);
        assert_eq!(m.gan.alpha, 0.2);
        assert_eq!(m.gan.total_iters, 3);
        assert_eq!(m.attack.reconstruct.views, 2);
        let again = RunManifest::from_yaml(&m.to_yaml().unwrap()).unwrap();
        assert_eq!(again, m);
        assert_eq!(again.config_hash(), m.config_hash());
    }

    #[test]
    fn rejects_typos_and_same_architectures() {
        let typo = TOY.replace("total_iters", "total_iter");
        assert!(matches!(RunManifest::from_yaml(&typo), Err(Error::Yaml(_))));
        let same = TOY.replace("arch: vgg", "arch: mlp");
        assert!(matches!(RunManifest::from_yaml(&same), Err(Error::Config(_))));
        let bad_id = TOY.replace("run_id: toy", "run_id: ../x");
        assert!(RunManifest::from_yaml(&bad_id).is_err());
    }

    #[test]
    fn stage_seeds_differ_by_stage_and_root() {
        let m = RunManifest::from_yaml(TOY).unwrap();
        assert_ne!(m.stage_seed("gan", 0), m.stage_seed("target", 0));
        assert_ne!(m.stage_seed("gan", 0), m.stage_seed("gan", 1));
        let mut other = m.clone();
        other.seed += 1;
        assert_ne!(m.stage_seed("gan", 0), other.stage_seed("gan", 0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            // the hash moves whenever any tweaked field moves
            #[test]
            fn hash_tracks_every_field(
                seed in any::<u64>(), n in 1usize..10_000, alpha in 0.0f64..1.0,
                views in 1usize..5, det in any::<bool>(), width in 1usize..64,
            ) {
                let base = RunManifest::from_yaml(TOY).unwrap();
                let mut m = base.clone();
                m.seed = seed;
                m.selection.n = n;
                m.gan.alpha = alpha;
                m.attack.reconstruct.views = views;
                m.deterministic = det;
                m.target.width = width;
                prop_assert_eq!(m == base, m.config_hash() == base.config_hash());
            }
        }
    }
}
