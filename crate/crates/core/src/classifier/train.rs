use candle_core::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, ClassifierSpec};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{label_tensor, log_softmax, Adam, AdamConfig, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Trains a fresh classifier with mini-batch Adam on cross-entropy.
pub fn train_classifier(
    spec: ClassifierSpec,
    data: &ImageBatch,
    val: Option<&ImageBatch>,
    cfg: &TrainConfig,
) -> Result<(Classifier, TrainReport)> {
    let model = Classifier::new(spec)?;
    let labels = data
        .labels()
        .ok_or_else(|| Error::Empty("training data is unlabelled".into()))?;
    if data.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    data.check_labels(model.num_classes())?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }

    let mut opt = Adam::new(
        model.params().trainable(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::new(cfg.lr, 0.9, 0.999)
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.schedule == LrSchedule::Cosine {
                let t = step as f64 / total as f64;
                opt.set_lr(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
            }
            let batch = data.select(chunk);
            let x = batch.to_tensor(0, chunk.len(), &Device::Cpu)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = model.logits(&x, Mode::TRAIN)?;
            let nll = log_softmax(&logits)?
                .gather(&label_tensor(&y)?.unsqueeze(1)?, 1)?
                .mean_all()?
                .neg()?;
            let loss = nll.to_scalar::<f32>()? as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    iteration: step,
                    reason: format!("classifier loss {loss} in epoch {epoch}"),
                });
            }
            opt.step(&nll.backward()?)?;
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        last_loss = epoch_loss / data.len() as f64;
        log::info!(
            "{} epoch {}/{}: loss {:.4}",
            model.architecture().id(),
            epoch + 1,
            cfg.epochs,
            last_loss
        );
    }
    let report = TrainReport {
        epochs: cfg.epochs,
        steps: step,
        final_loss: last_loss,
        train_accuracy: model.accuracy(data)?,
        val_accuracy: val.map(|v| model.accuracy(v)).transpose()?,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;
    use crate::data::ImageShape;

    /// 100 images of two linearly separable colours (dark vs bright).
    fn two_colour_set() -> ImageBatch {
        let shape = ImageShape::new(3, 4, 4);
        let mut vals = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let c = i % 2;
            let base = if c == 0 { 0.1 } else { 0.8 };
            let jitter = (i / 2) as f32 * 0.001;
            vals.extend(std::iter::repeat(base + jitter).take(shape.numel()));
            labels.push(c);
        }
        ImageBatch::new(shape, vals, Some(labels)).unwrap()
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let data = two_colour_set();
        // separability: a single threshold on mean intensity splits the classes
        let means: Vec<(f32, usize)> = (0..data.len())
            .map(|i| (data.image(i).iter().sum::<f32>() / 48.0, data.labels().unwrap()[i]))
            .collect();
        let max0 = means.iter().filter(|m| m.1 == 0).map(|m| m.0).fold(f32::MIN, f32::max);
        let min1 = means.iter().filter(|m| m.1 == 1).map(|m| m.0).fold(f32::MAX, f32::min);
        assert!(max0 < min1);

        let spec = ClassifierSpec {
            arch: Architecture::Mlp,
            width: 16,
            input: data.shape(),
            classes: 2,
            seed: 3,
        };
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 20,
            lr: 1e-2,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let (_, report) = train_classifier(spec, &data, None, &cfg).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
    }

    #[test]
    fn rejects_bad_labels_and_single_class() {
        let data = two_colour_set();
        let mut spec = ClassifierSpec {
            arch: Architecture::Mlp,
            width: 4,
            input: data.shape(),
            classes: 1,
            seed: 0,
        };
        assert!(train_classifier(spec.clone(), &data, None, &TrainConfig::default()).is_err());
        spec.classes = 2;
        let bad = data.clone().with_labels(Some(vec![5; 100])).unwrap();
        assert!(matches!(
            train_classifier(spec, &bad, None, &TrainConfig::default()),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
