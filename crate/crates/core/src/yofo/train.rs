//! Objective and training loop.

use super::loss::{contiguity_tape, sparsity_final_tape, sparsity_layerwise_tape};
use super::{GateMode, LengthConfiguration, LossMode, YofoForward, YofoModel};
use crate::data::Example;
use crate::encoder::{Classifier, Dropout, TokenBatch};
use crate::error::Result;
use crate::tensor::{lit, to_f64, ParamStore, Real, Tape, Tensor, Var};
use crate::train::{
    argmax_rows, batch_of, check_finite, epoch_rng, minibatches, Accumulator, EpochMetrics,
    Optimizer, TrainConfig,
};

/// Scalar loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub task: Var,
    pub sparsity: Var,
    pub contiguity: Var,
}

/// `task + beta * sparsity + gamma * contiguity` on the soft masks.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Real>(
    tape: &mut Tape<T>,
    fwd: &YofoForward,
    batch: &TokenBatch,
    labels: &[usize],
    length: &LengthConfiguration,
    mode: LossMode,
    beta: f64,
    gamma: f64,
) -> Result<LossParts> {
    let task = tape.cross_entropy(fwd.logits, labels)?;
    let soft = fwd.soft_masks();
    let sparsity = match mode {
        LossMode::FinalLayer => {
            sparsity_final_tape(tape, *soft.last().expect("layers"), &batch.lens, length.s)?
        }
        LossMode::Layerwise => sparsity_layerwise_tape(tape, &soft, &batch.lens, length)?,
    };
    let contiguity = contiguity_tape(tape, &soft, &batch.lens)?;
    let a = tape.scale(sparsity, lit(beta));
    let b = tape.scale(contiguity, lit(gamma));
    let total = tape.add(task, a)?;
    let total = tape.add(total, b)?;
    Ok(LossParts {
        total,
        task,
        sparsity,
        contiguity,
    })
}

/// Per-layer kept fractions per example and the count of layer/example
/// pairs reduced to the classification token alone.
pub(crate) fn retention_stats<T: Real>(
    tape: &Tape<T>,
    masks: &[Var],
    batch: &TokenBatch,
) -> (Vec<Vec<f64>>, usize) {
    let mut degenerate = 0;
    let kept = masks
        .iter()
        .map(|&m| {
            tape.data(m)
                .chunks(batch.len)
                .zip(&batch.lens)
                .map(|(row, &n)| {
                    let count = row[..n].iter().filter(|&&v| v > T::zero()).count();
                    if count == 1 && n > 1 {
                        degenerate += 1;
                    }
                    count as f64 / n as f64
                })
                .collect()
        })
        .collect();
    (kept, degenerate)
}

/// One pass of minibatch updates. `step` counts optimizer steps across the
/// run and is advanced in place.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Real>(
    model: &YofoModel,
    store: &mut ParamStore<T>,
    opt: &mut Optimizer<T>,
    data: &[Example],
    cfg: &TrainConfig,
    length: &LengthConfiguration,
    epoch: usize,
    step: &mut u64,
) -> Result<EpochMetrics> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut acc = Accumulator::default();
    let dropout = model.config().dropout;
    for (bi, idx) in minibatches(data.len(), cfg.batch_size, &mut rng)
        .iter()
        .enumerate()
    {
        let (batch, labels) = batch_of(data, idx);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mode = GateMode::Sample {
            tau: cfg.tau,
            hard: true,
        };
        let fwd = model.forward(&mut tape, &p, &batch, mode, dropout, &mut rng)?;
        let parts = objective(
            &mut tape,
            &fwd,
            &batch,
            &labels,
            length,
            cfg.loss_mode,
            cfg.beta,
            cfg.gamma,
        )?;
        let v = |x: Var| to_f64(tape.value(x).item());
        let (task, sparsity, contiguity, total) = (
            v(parts.task),
            v(parts.sparsity),
            v(parts.contiguity),
            v(parts.total),
        );
        check_finite(bi, task, sparsity, contiguity)?;
        acc.add_losses(task, sparsity, contiguity, total);
        let preds = argmax_rows(tape.data(fwd.logits));
        acc.add_predictions(
            preds.iter().zip(&labels).filter(|(a, b)| a == b).count(),
            labels.len(),
        );
        let (kept, degenerate) = retention_stats(&tape, &fwd.masks(), &batch);
        acc.add_retention(&kept, degenerate);
        tape.backward(parts.total)?;
        let grads = store.gradients(&tape, &p);
        opt.step(store, &grads)?;
        *step += 1;
    }
    Ok(acc.finish(epoch, *step))
}

/// Keep mask `[B, L]` covering the classification token and each text's
/// first sentence.
pub fn first_sentence_keep<T: Real>(
    data: &[Example],
    idx: &[usize],
    batch: &TokenBatch,
    delimiters: &[usize],
) -> Tensor<T> {
    let mut keep = vec![T::zero(); batch.batch * batch.len];
    for (b, &i) in idx.iter().enumerate() {
        let n = data[i].first_sentence(delimiters).len();
        for v in &mut keep[b * batch.len..b * batch.len + n + 1] {
            *v = T::one();
        }
    }
    Tensor::new(vec![batch.batch, batch.len], keep).expect("shape")
}

/// Trains `classifier` for `steps` optimizer steps on first-sentence inputs
/// only; parameters matching `frozen` stay fixed. Returns the steps taken.
#[allow(clippy::too_many_arguments)]
pub fn skew_classifier<T: Real>(
    classifier: &Classifier,
    store: &mut ParamStore<T>,
    data: &[Example],
    steps: u64,
    cfg: &TrainConfig,
    delimiters: &[usize],
    frozen: &dyn Fn(&str) -> bool,
) -> Result<u64> {
    let mut opt = Optimizer::with_frozen(cfg.adamw(), store, frozen);
    let dropout = classifier.encoder.config.dropout;
    let mut done = 0;
    let mut round = 0;
    while done < steps && !data.is_empty() {
        let mut rng = epoch_rng(cfg.seed ^ 0x5EED_5EED, round);
        for (bi, idx) in minibatches(data.len(), cfg.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            if done == steps {
                break;
            }
            let (batch, labels) = batch_of(data, idx);
            let keep = first_sentence_keep(data, idx, &batch, delimiters);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let mut drop = (dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut rng,
            });
            let logits = classifier.logits(&mut tape, &p, &batch, Some(&keep), &mut drop)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            check_finite(bi, to_f64(tape.value(loss).item()), 0.0, 0.0)?;
            tape.backward(loss)?;
            let grads = store.gradients(&tape, &p);
            opt.step(store, &grads)?;
            done += 1;
        }
        round += 1;
    }
    Ok(done)
}

/// Skew steps `(#samples / 500) * k`.
pub fn skew_steps(samples: usize, k: usize) -> u64 {
    (samples as u64 * k as u64) / 500
}

/// YOFO counterpart of predictor skewing: the encoder and classifier are
/// pre-fit on first sentences with the gates bypassed.
pub fn skew_pretrain<T: Real>(
    model: &YofoModel,
    store: &mut ParamStore<T>,
    data: &[Example],
    steps: u64,
    cfg: &TrainConfig,
    delimiters: &[usize],
) -> Result<u64> {
    skew_classifier(
        &model.classifier,
        store,
        data,
        steps,
        cfg,
        delimiters,
        &|name: &str| name.contains(".gate"),
    )
}
