//! Weighted cross-entropy training and evaluation.

pub mod metrics;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_weights, ImageSet};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::ViTModel;

pub use metrics::{argmax, confusion_matrix, ClassMetrics, MetricsReport};
pub use optim::{Adam, AdamConfig};

/// Mean over the batch of `weights[target] · −log softmax(logits)[target]`
/// recorded on `tape`.
pub fn weighted_cross_entropy(tape: &mut Tape<f32>, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let w: Vec<f32> = weights.iter().map(|&x| x as f32).collect();
    tape.cross_entropy(logits, targets, Some(&w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight the loss by `min(counts) / counts[c]` over the training set.
    pub use_class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            seed: 0,
            use_class_weights: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::contract("learning_rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::contract("invalid optimizer moments or epsilon"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::contract("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// One-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_accuracy: f64,
    /// Unweighted mean cross-entropy on the validation set after the epoch.
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub class_weights: Vec<f64>,
}

/// Logits for every sample in `set`, computed in chunks of `batch_size`.
pub fn predict_logits(model: &ViTModel<f32>, set: &ImageSet, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let logits = model.forward(&set.batch(chunk)?)?;
        let c = logits.shape()[1];
        out.extend(logits.data().chunks_exact(c).map(<[f32]>::to_vec));
    }
    Ok(out)
}

fn mean_nll(logits: &[Vec<f32>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            lse - row[t] as f64
        })
        .sum();
    total / labels.len() as f64
}

fn check_set(model: &ViTModel<f32>, set: &ImageSet, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::contract(format!("{what} set is empty")));
    }
    if set.num_classes() != model.config().num_classes {
        return Err(Error::contract(format!(
            "{what} set has {} classes but the model expects {}",
            set.num_classes(),
            model.config().num_classes
        )));
    }
    Ok(())
}

pub fn train(
    model: &ViTModel<f32>,
    train_set: &ImageSet,
    val_set: &ImageSet,
    cfg: &TrainConfig,
) -> Result<(ViTModel<f32>, History)> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// Mini-batch training with Adam. Returns the parameters from the epoch with
/// the best validation accuracy (ties: lower validation loss, then the
/// earlier epoch). `on_epoch` is called after each epoch.
pub fn train_with(
    model: &ViTModel<f32>,
    train_set: &ImageSet,
    val_set: &ImageSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ViTModel<f32>, History)> {
    cfg.validate()?;
    check_set(model, train_set, "training")?;
    check_set(model, val_set, "validation")?;
    let weights = if cfg.use_class_weights {
        class_weights(&train_set.counts())?
    } else {
        vec![1.0; train_set.num_classes()]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut opt = Adam::new(cfg.adam());
    let mut history = History {
        class_weights: weights.clone(),
        ..Default::default()
    };
    let mut best: Option<(f64, f64, ViTModel<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for (bi, chunk) in batches.enumerate() {
            let at = |e: Error| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch} batch {bi}: {what}")),
                other => other,
            };
            let x = train_set.batch(chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            let mut tape = Tape::new();
            let (_, enc) = current
                .forward_on_tape(&mut tape, &x, Some(&mut rng))
                .map_err(at)?;
            let loss = weighted_cross_entropy(&mut tape, enc.logits, &targets, &weights).map_err(at)?;
            let lv = tape.value(loss).item() as f64;
            let logits = tape.value(enc.logits);
            let c = logits.shape()[1];
            correct += logits
                .data()
                .chunks_exact(c)
                .zip(&targets)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            let grads = tape.backward(loss)?.named();
            opt.step(current.params_mut(), &grads)?;
            if let Some((name, _)) = current.params().iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {bi}: parameter {name} after update"
                )));
            }
            loss_sum += lv;
            history.batch_losses.push(lv);
        }
        let val_logits = predict_logits(&current, val_set, cfg.batch_size)?;
        let val_correct = val_logits
            .iter()
            .zip(val_set.labels())
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss: mean_nll(&val_logits, val_set.labels()),
            val_accuracy: val_correct as f64 / val_set.len() as f64,
        };
        let improved = match &best {
            None => true,
            Some((acc, loss, _)) => {
                stats.val_accuracy > *acc || (stats.val_accuracy == *acc && stats.val_loss < *loss)
            }
        };
        if improved {
            best = Some((stats.val_accuracy, stats.val_loss, current.clone()));
            history.best_epoch = epoch;
        }
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    let (_, _, best_model) = best.expect("at least one epoch");
    Ok((best_model, history))
}

/// Argmax predictions for every sample (ties to the lowest class index).
pub fn predict(model: &ViTModel<f32>, set: &ImageSet, batch_size: usize) -> Result<Vec<usize>> {
    Ok(predict_logits(model, set, batch_size)?.iter().map(|r| argmax(r)).collect())
}

pub fn evaluate(model: &ViTModel<f32>, test_set: &ImageSet) -> Result<MetricsReport> {
    check_set(model, test_set, "test")?;
    let preds = predict(model, test_set, 16)?;
    MetricsReport::from_predictions(&preds, test_set.labels(), test_set.class_names())
}

/// Final-norm class-token embeddings `[N × hidden_size]`.
pub fn embeddings(model: &ViTModel<f32>, set: &ImageSet, batch_size: usize) -> Result<Tensor<f32>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let d = model.config().hidden_size;
    let mut data = Vec::with_capacity(set.len() * d);
    for chunk in idx.chunks(batch_size.max(1)) {
        data.extend_from_slice(model.embed(&set.batch(chunk)?)?.data());
    }
    Tensor::new([set.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_image_set;
    use crate::vit::ViTConfig;

    fn toy() -> (ViTModel<f32>, ImageSet) {
        let cfg = ViTConfig {
            layers: 1,
            hidden_size: 16,
            mlp_size: 32,
            heads: 2,
            patch_size: 8,
            image_size: 32,
            num_classes: 2,
            proj_rank: 4,
            ..ViTConfig::binary()
        };
        let set = synthetic_image_set(&[0, 1], 12, 32, 3).unwrap();
        (ViTModel::init(&cfg, 1).unwrap(), set)
    }

    #[test]
    fn hand_evaluated_weighted_loss() {
        let mut tape = Tape::new();
        let logits = tape.variable(Tensor::new([1, 2], vec![2.0f32, 0.0]).unwrap());
        let l = weighted_cross_entropy(&mut tape, logits, &[0], &[0.5, 1.0]).unwrap();
        let expected = 0.5 * (1.0f64 + (-2.0f64).exp()).ln();
        assert!((tape.value(l).item() as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.0635).abs() < 1e-4);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (m, set) = toy();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (out, h) = train(&m, &set, &set, &cfg).unwrap();
        assert_eq!(out.params(), m.params());
        assert_eq!(h.batch_losses.len(), 3);
    }

    #[test]
    fn empty_and_mismatched_sets_are_rejected() {
        let (m, set) = toy();
        let empty = set.subset(&[]);
        assert!(matches!(
            train(&m, &empty, &set, &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
        let three = synthetic_image_set(&[0, 1, 2], 1, 32, 0).unwrap();
        assert!(train(&m, &three, &three, &TrainConfig::default()).is_err());
        assert!(evaluate(&m, &empty).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let (m, set) = toy();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let (_, h) = train(&m, &set, &set, &cfg).unwrap();
        let last = h.epochs.last().unwrap();
        assert!(last.train_loss < h.batch_losses[0], "{h:?}");
    }
}
