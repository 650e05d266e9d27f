use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::detector::{bce_loss, ArchConfig, ErrorDetector};
use super::sequential::{Adam, AdamConfig, Mode};
use super::Tensor;
use crate::error::{Error, Result};

/// Indexed labelled examples that can write their network input on demand,
/// so a training set never has to be materialized as patches.
pub trait PatchBatchSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn target(&self, index: usize) -> u8;

    /// Writes example `index` as `n_bins x width x channels` into `out`.
    fn write_input(&self, index: usize, out: &mut [f32]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without holdout improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            epochs: 30,
            patience: 5,
            seed: 0,
            dropout: 0.3,
            leaky_slope: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.batch_size >= 2
            && self.epochs > 0
            && self.patience > 0
            && self.leaky_slope >= 0.0;
        if !positive {
            return Err(Error::invalid(
                "training needs a positive learning rate, moments in (0, 1), batch size >= 2 and positive epochs/patience",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub holdout_loss: f64,
    pub holdout_accuracy: f64,
    /// Mean of per-class recall at threshold 0.5.
    pub holdout_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best holdout accuracy.
    pub model: ErrorDetector<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    pub checkpoint: Checkpoint,
}

fn fill_batch(src: &dyn PatchBatchSource, indices: &[usize], len: usize, arch: &ArchConfig) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut data = vec![0.0f32; indices.len() * len];
    for (k, &i) in indices.iter().enumerate() {
        src.write_input(i, &mut data[k * len..(k + 1) * len]);
    }
    let targets = indices.iter().map(|&i| src.target(i)).collect();
    Ok((Tensor::new(vec![indices.len(), arch.n_bins, arch.width, arch.channels], data)?, targets))
}

const EVAL_BATCH: usize = 64;

/// Eval-mode probabilities for every example, in index order.
pub fn predict_source(model: &ErrorDetector<f32>, src: &dyn PatchBatchSource) -> Result<Vec<f32>> {
    let len = model.arch.input_len();
    let all: Vec<usize> = (0..src.len()).collect();
    let mut out = Vec::with_capacity(src.len());
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, _) = fill_batch(src, chunk, len, &model.arch)?;
        out.extend(model.predict(x)?);
    }
    Ok(out)
}

/// `(mean loss, accuracy, balanced accuracy)` at threshold 0.5.
pub fn evaluate(model: &ErrorDetector<f32>, src: &dyn PatchBatchSource) -> Result<(f64, f64, f64)> {
    let probs = predict_source(model, src)?;
    let targets: Vec<u8> = (0..src.len()).map(|i| src.target(i)).collect();
    Ok(summarize(&probs, &targets))
}

fn summarize(probs: &[f32], targets: &[u8]) -> (f64, f64, f64) {
    if probs.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = probs.len() as f64;
    let loss = probs.iter().zip(targets).map(|(&p, &z)| bce_loss(p as f64, z)).sum::<f64>() / n;
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&p, &z) in probs.iter().zip(targets) {
        let z = z as usize;
        totals[z] += 1;
        hits[z] += ((p >= 0.5) as usize == z) as usize;
    }
    let accuracy = (hits[0] + hits[1]) as f64 / n;
    let recalls: Vec<f64> = (0..2).filter(|&c| totals[c] > 0).map(|c| hits[c] as f64 / totals[c] as f64).collect();
    let balanced = recalls.iter().sum::<f64>() / recalls.len() as f64;
    (loss, accuracy, balanced)
}

/// Trains a fresh detector with Adam. Only `n_bins`, `width` and `channels`
/// are taken from `arch` when dropout and slope differ from `cfg`.
pub fn train(train: &dyn PatchBatchSource, holdout: &dyn PatchBatchSource, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::invalid("training and holdout sets must be non-empty"));
    }
    let arch = ArchConfig {
        dropout: cfg.dropout,
        leaky_slope: cfg.leaky_slope,
        ..arch.clone()
    };
    let mut model = ErrorDetector::<f32>::new(arch.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.adam(), &model.net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let len = arch.input_len();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ErrorDetector<f32>)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0f64, 0usize, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // batch statistics need at least two examples
            if chunk.len() < 2 {
                continue;
            }
            let (x, targets) = fill_batch(train, chunk, len, &arch)?;
            let (loss, probs) = model.backprop(x, &targets, Mode::Train, &mut rng).map_err(|e| match e {
                Error::NonFinite { layer } => Error::Diverged { epoch, batch, layer },
                other => other,
            })?;
            opt.step(&mut model.net);
            loss_sum += loss as f64 * chunk.len() as f64;
            hits += probs.iter().zip(&targets).filter(|(&p, &z)| (p >= 0.5) as u8 == z).count();
            seen += chunk.len();
        }
        let (holdout_loss, holdout_accuracy, holdout_balanced_accuracy) = evaluate(&model, holdout)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: hits as f64 / seen.max(1) as f64,
            holdout_loss,
            holdout_accuracy,
            holdout_balanced_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, holdout loss {:.4} acc {:.3}",
            stats.train_loss,
            stats.train_accuracy,
            stats.holdout_loss,
            stats.holdout_accuracy
        );
        history.push(stats);
        if best.as_ref().is_none_or(|(acc, _, _)| holdout_accuracy > *acc) {
            best = Some((holdout_accuracy, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    let b = &history[best_epoch];
    let metrics = BTreeMap::from([
        ("best_epoch".to_string(), best_epoch as f64),
        ("holdout_accuracy".to_string(), b.holdout_accuracy),
        ("holdout_balanced_accuracy".to_string(), b.holdout_balanced_accuracy),
        ("holdout_loss".to_string(), b.holdout_loss),
        ("train_accuracy".to_string(), b.train_accuracy),
        ("train_loss".to_string(), b.train_loss),
    ]);
    let checkpoint = Checkpoint::from_detector(&model, Some(cfg.clone()), metrics);
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Random spectrogram channels; the label channel carries a full-width
    /// line at bin 30 exactly when `z = 1`.
    struct Toy {
        targets: Vec<u8>,
        seeds: Vec<u64>,
        shuffle_targets: bool,
    }

    impl Toy {
        fn new(n: usize, seed: u64, shuffle_targets: bool) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Self {
                targets: (0..n).map(|_| rng.gen_range(0..2)).collect(),
                seeds: (0..n).map(|_| rng.gen()).collect(),
                shuffle_targets,
            }
        }
    }

    impl PatchBatchSource for Toy {
        fn len(&self) -> usize {
            self.targets.len()
        }

        fn target(&self, i: usize) -> u8 {
            if self.shuffle_targets {
                (self.seeds[i] >> 7) as u8 & 1
            } else {
                self.targets[i]
            }
        }

        fn write_input(&self, i: usize, out: &mut [f32]) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seeds[i]);
            for (k, v) in out.iter_mut().enumerate() {
                *v = if k % 3 == 2 { 0.0 } else { rng.gen_range(0.0..1.0) };
            }
            if self.targets[i] == 1 {
                for t in 0..81 {
                    out[(30 * 81 + t) * 3 + 2] = 1.0;
                }
            }
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            patience: 20,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_a_separable_task() {
        let out = train(&Toy::new(160, 1, false), &Toy::new(80, 2, false), &ArchConfig::default(), &quick()).unwrap();
        assert!(out.history[out.best_epoch].holdout_accuracy > 0.95, "{:?}", out.history);
        let (_, acc, _) = evaluate(&out.model, &Toy::new(80, 2, false)).unwrap();
        assert_eq!(acc, out.history[out.best_epoch].holdout_accuracy);
    }

    #[test]
    fn shuffled_targets_stay_near_chance() {
        let cfg = TrainConfig { epochs: 6, patience: 6, ..quick() };
        let out = train(&Toy::new(160, 3, true), &Toy::new(200, 5, true), &ArchConfig::default(), &cfg).unwrap();
        let mean = out.history.iter().map(|h| h.holdout_accuracy).sum::<f64>() / out.history.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "{mean}");
    }

    #[test]
    fn same_seed_same_history() {
        let cfg = TrainConfig { epochs: 2, ..quick() };
        let a = train(&Toy::new(40, 1, false), &Toy::new(20, 2, false), &ArchConfig::default(), &cfg).unwrap();
        let b = train(&Toy::new(40, 1, false), &Toy::new(20, 2, false), &ArchConfig::default(), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn predict_source_is_order_preserving_map() {
        let g = ErrorDetector::<f32>::new(ArchConfig::default(), 3).unwrap();
        let src = Toy::new(70, 9, false);
        let all = predict_source(&g, &src).unwrap();
        assert_eq!(all.len(), 70);
        for i in [0, 33, 69] {
            let mut buf = vec![0.0; g.arch.input_len()];
            src.write_input(i, &mut buf);
            let one = g.predict(Tensor::new(vec![1, 72, 81, 3], buf).unwrap()).unwrap()[0];
            assert!((one - all[i]).abs() < 1e-6);
        }
    }
}
