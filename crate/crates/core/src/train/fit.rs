//! The training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{clip_gradients, Adam};
use crate::data::instance::{EncodedPost, TrainingInstance};
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Aggregation, Model};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the generation loss.
    pub gamma: f64,
    pub lr: f64,
    pub decay_factor: f64,
    /// Consecutive non-improving epochs between learning-rate decays.
    pub decay_patience: usize,
    /// Consecutive non-improving epochs before stopping.
    pub patience: usize,
    pub max_grad_norm: f64,
    /// Epochs trained with `(a, b) = (1, 0)` before switching to `(0.5, 0.5)`.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lr: 1e-3,
            decay_factor: 0.5,
            decay_patience: 1,
            patience: 3,
            max_grad_norm: 5.0,
            warmup_epochs: 2,
            batch_size: 16,
            max_epochs: 100,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("gamma", self.gamma >= 0.0),
            ("lr", self.lr > 0.0),
            ("decay_factor", self.decay_factor > 0.0 && self.decay_factor <= 1.0),
            ("decay_patience", self.decay_patience > 0),
            ("patience", self.patience > 0),
            ("max_grad_norm", self.max_grad_norm > 0.0),
            ("batch_size", self.batch_size > 0),
            ("max_epochs", self.max_epochs > 0),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::validation(field, "out of range"));
            }
        }
        Ok(())
    }

    /// Aggregation weights in effect during `epoch` (0-based).
    pub fn aggregation(&self, epoch: usize) -> Aggregation {
        if epoch < self.warmup_epochs {
            Aggregation::SOURCE_ONLY
        } else {
            Aggregation::BALANCED
        }
    }
}

/// Encoded posts with their replicated instances.
#[derive(Clone, Debug)]
pub struct Split {
    pub posts: Vec<EncodedPost>,
    pub instances: Vec<TrainingInstance>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub a: f64,
    pub b: f64,
}

/// Loss and parameter gradients of one instance.
pub fn instance_gradients<T: Scalar>(
    model: &Model<T>,
    split: &Split,
    inst: &TrainingInstance,
    vocab: &Vocabulary,
    agg: Aggregation,
    gamma: f64,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let post = &split.posts[inst.post];
    let loss = model.instance_loss(&mut tape, post, &inst.target, inst.label, vocab, agg, gamma)?;
    let value = tape.value(loss).item().as_f64();
    let grads = tape.backward(loss)?;
    let per_param = model
        .params()
        .ids()
        .map(|id| grads.param(id).cloned())
        .collect();
    Ok((value, per_param))
}

/// Mean joint loss and mean gradients over a batch, reduced in instance
/// order so the result does not depend on thread scheduling.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    split: &Split,
    batch: &[&TrainingInstance],
    vocab: &Vocabulary,
    agg: Aggregation,
    gamma: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let results: Vec<_> = batch
        .par_iter()
        .map(|inst| instance_gradients(model, split, inst, vocab, agg, gamma))
        .collect::<Result<_>>()?;
    let mut sums: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|(_, _, t)| vec![T::zero(); t.numel()])
        .collect();
    let mut loss = 0.0;
    for (l, grads) in &results {
        loss += l;
        for (acc, g) in sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (a, &v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
    }
    let n = batch.len() as f64;
    let inv = T::of_f64(1.0 / n);
    let grads = model
        .params()
        .iter()
        .zip(sums)
        .map(|((_, _, t), mut s)| {
            s.iter_mut().for_each(|v| *v *= inv);
            Tensor::new(t.shape().to_vec(), s)
        })
        .collect::<Result<_>>()?;
    Ok((loss / n, grads))
}

/// Mean joint loss over a split without building gradients.
pub fn mean_loss<T: Scalar>(
    model: &Model<T>,
    split: &Split,
    vocab: &Vocabulary,
    agg: Aggregation,
    gamma: f64,
) -> Result<f64> {
    if split.instances.is_empty() {
        return Err(Error::contract("cannot compute the loss of an empty split"));
    }
    let losses: Vec<f64> = split
        .instances
        .par_iter()
        .map(|inst| {
            let mut tape = Tape::no_grad();
            let post = &split.posts[inst.post];
            let l = model.instance_loss(&mut tape, post, &inst.target, inst.label, vocab, agg, gamma)?;
            Ok(tape.value(l).item().as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Result of [`fit`].
pub struct FitOutcome<T> {
    /// Parameters from the epoch with the best validation loss.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains `model` with Adam on shuffled mini-batches.
///
/// Validation loss is measured with the epoch's aggregation weights.
/// Because the warm-up switch changes the objective, the plateau tracker
/// and the best checkpoint are reset when `(a, b)` changes. The learning
/// rate is multiplied by `decay_factor` every `decay_patience` consecutive
/// epochs without strict improvement, and training stops after `patience`
/// such epochs. `on_epoch` sees every log line as it is produced.
pub fn fit<T: Scalar>(
    mut model: Model<T>,
    train: &Split,
    val: &Split,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if train.instances.is_empty() {
        return Err(Error::validation("train", "no training instances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut order: Vec<usize> = (0..train.instances.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let agg = cfg.aggregation(epoch);
        if epoch > 0 && agg != cfg.aggregation(epoch - 1) {
            best = None;
            stale = 0;
        }
        order.shuffle(&mut rng);
        let lr = opt.lr;
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingInstance> = chunk.iter().map(|&i| &train.instances[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, train, &batch, vocab, agg, cfg.gamma)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss or gradient in epoch {epoch} (batch loss {loss})"
                )));
            }
            clip_gradients(&mut grads, cfg.max_grad_norm);
            opt.step(model.params_mut(), &grads)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.instances.len() as f64;
        let val_loss = if val.instances.is_empty() {
            train_loss
        } else {
            mean_loss(&model, val, vocab, agg, cfg.gamma)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {val_loss} in epoch {epoch}")));
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            a: agg.a,
            b: agg.b,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr:e} a {} b {}",
            agg.a,
            agg.b
        );
        on_epoch(&entry);
        log.push(entry);

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale.is_multiple_of(cfg.decay_patience) {
                opt.lr *= cfg.decay_factor;
            }
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        best,
        best_epoch,
        log,
    })
}

impl Split {
    /// Encodes `posts` and replicates one instance per keyphrase.
    pub fn build(
        posts: &[crate::data::Post],
        vocab: &Vocabulary,
        mode: crate::data::Mode,
    ) -> Result<Self> {
        Ok(Self {
            posts: posts
                .iter()
                .map(|p| crate::data::encode_post(p, vocab))
                .collect::<Result<_>>()?,
            instances: crate::data::replicate_instances(posts, vocab, mode)?,
        })
    }
}
