//! Pieces shared by every training loop: configuration, minibatching, the
//! optimizer wrapper and per-epoch metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::encoder::{Classifier, Dropout, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::{to_f64, AdamW, AdamWConfig, ParamStore, Real, Tape};
use crate::yofo::LossMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Sparsity-term weight.
    pub beta: f64,
    /// Contiguity-term weight.
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Gumbel temperature.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            gamma: 1.0,
            lr: 3e-5,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            loss_mode: LossMode::Layerwise,
            tau: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Parameter(format!(
                "loss weights must be non-negative (beta = {}, gamma = {})",
                self.beta, self.gamma
            )));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(
                "lr and weight_decay must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Randomness for one epoch, derived from the run seed so a resumed run
/// replays the same shuffles and noise as an uninterrupted one.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Shuffled index batches covering `0..n`.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub(crate) fn batch_of(data: &[Example], idx: &[usize]) -> (TokenBatch, Vec<usize>) {
    let seqs: Vec<&[usize]> = idx.iter().map(|&i| data[i].tokens.as_slice()).collect();
    let labels = idx.iter().map(|&i| data[i].label).collect();
    (TokenBatch::from_sequences(&seqs), labels)
}

/// AdamW that treats a zero learning rate as "do not move" and can hold a
/// subset of parameters fixed.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real = f64> {
    pub adam: AdamW<T>,
    frozen: Vec<bool>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        Optimizer {
            adam: AdamW::new(config, store),
            frozen: vec![false; store.len()],
        }
    }

    /// Parameters whose name satisfies `frozen` are never changed.
    pub fn with_frozen(
        config: AdamWConfig,
        store: &ParamStore<T>,
        frozen: impl Fn(&str) -> bool,
    ) -> Self {
        Optimizer {
            adam: AdamW::new(config, store),
            frozen: store.iter().map(|p| frozen(&p.name)).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if self.adam.config.lr == 0.0 {
            return Ok(());
        }
        let saved: Vec<_> = store
            .iter()
            .zip(&self.frozen)
            .filter(|(_, &f)| f)
            .map(|(p, _)| p.value.clone())
            .collect();
        self.adam.apply(store, grads)?;
        let mut saved = saved.into_iter();
        for (p, &f) in store.iter_mut().zip(&self.frozen) {
            if f {
                p.value = saved.next().expect("one saved value per frozen parameter");
            }
        }
        Ok(())
    }
}

pub fn check_finite(batch: usize, task: f64, sparsity: f64, contiguity: f64) -> Result<()> {
    if task.is_finite() && sparsity.is_finite() && contiguity.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            batch,
            task,
            sparsity,
            contiguity,
        })
    }
}

/// Running means over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken since the start of the run.
    pub step: u64,
    pub task_loss: f64,
    pub sparsity_loss: f64,
    pub contiguity_loss: f64,
    pub total_loss: f64,
    pub train_acc: f64,
    /// Mean hard retention per layer over real positions, classification
    /// token included.
    pub retention: Vec<f64>,
    /// Layer/example pairs left with only the classification token.
    pub degenerate: usize,
}

#[derive(Default)]
pub(crate) struct Accumulator {
    batches: usize,
    examples: usize,
    correct: usize,
    task: f64,
    sparsity: f64,
    contiguity: f64,
    total: f64,
    retention: Vec<f64>,
    degenerate: usize,
}

impl Accumulator {
    pub(crate) fn add_losses(&mut self, task: f64, sparsity: f64, contiguity: f64, total: f64) {
        self.batches += 1;
        self.task += task;
        self.sparsity += sparsity;
        self.contiguity += contiguity;
        self.total += total;
    }

    pub(crate) fn add_predictions(&mut self, correct: usize, examples: usize) {
        self.correct += correct;
        self.examples += examples;
    }

    /// `kept[layer]` holds per-example kept fractions for one batch.
    pub(crate) fn add_retention(&mut self, kept: &[Vec<f64>], degenerate: usize) {
        if self.retention.len() < kept.len() {
            self.retention.resize(kept.len(), 0.0);
        }
        for (acc, layer) in self.retention.iter_mut().zip(kept) {
            *acc += layer.iter().sum::<f64>();
        }
        self.degenerate += degenerate;
    }

    pub(crate) fn finish(self, epoch: usize, step: u64) -> EpochMetrics {
        let b = self.batches.max(1) as f64;
        let n = self.examples.max(1) as f64;
        EpochMetrics {
            epoch,
            step,
            task_loss: self.task / b,
            sparsity_loss: self.sparsity / b,
            contiguity_loss: self.contiguity / b,
            total_loss: self.total / b,
            train_acc: self.correct as f64 / n,
            retention: self.retention.iter().map(|r| r / n).collect(),
            degenerate: self.degenerate,
        }
    }
}

/// Predicted class per row of `[batch, 2]` logits (ties go to class 0).
pub fn argmax_rows<T: Real>(logits: &[T]) -> Vec<usize> {
    logits.chunks(2).map(|l| usize::from(l[1] > l[0])).collect()
}

/// One epoch of full-text cross-entropy training.
pub fn train_classifier_epoch<T: Real>(
    classifier: &Classifier,
    store: &mut ParamStore<T>,
    opt: &mut Optimizer<T>,
    data: &[Example],
    cfg: &TrainConfig,
    epoch: usize,
    step: &mut u64,
) -> Result<EpochMetrics> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut acc = Accumulator::default();
    let dropout = classifier.encoder.config.dropout;
    for (bi, idx) in minibatches(data.len(), cfg.batch_size, &mut rng)
        .iter()
        .enumerate()
    {
        let (batch, labels) = batch_of(data, idx);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut drop = (dropout > 0.0).then_some(Dropout {
            rate: dropout,
            rng: &mut rng,
        });
        let logits = classifier.logits(&mut tape, &p, &batch, None, &mut drop)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let task = to_f64(tape.value(loss).item());
        check_finite(bi, task, 0.0, 0.0)?;
        acc.add_losses(task, 0.0, 0.0, task);
        let preds = argmax_rows(tape.data(logits));
        acc.add_predictions(
            preds.iter().zip(&labels).filter(|(a, b)| a == b).count(),
            labels.len(),
        );
        tape.backward(loss)?;
        let grads = store.gradients(&tape, &p);
        opt.step(store, &grads)?;
        *step += 1;
    }
    Ok(acc.finish(epoch, *step))
}

/// Full-text predictions, `batch_size` texts per forward pass.
pub fn classifier_predictions<T: Real>(
    classifier: &Classifier,
    store: &ParamStore<T>,
    data: &[Example],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (batch, _) = batch_of(data, chunk);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let logits = classifier.logits::<T, ChaCha8Rng>(&mut tape, &p, &batch, None, &mut None)?;
        out.extend(argmax_rows(tape.data(logits)));
    }
    Ok(out)
}
