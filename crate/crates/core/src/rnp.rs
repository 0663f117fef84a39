//! Generate-then-predict baseline.
//!
//! A generator encoder scores every token, a Gumbel sample picks the mask,
//! and a predictor encoder classifies the text with unselected tokens removed
//! from attention in every layer. With `shared` set, generator and predictor
//! use the same encoder parameters.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::encoder::{Classifier, ClassifierHead, Dropout, Encoder, ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::params::Bindings;
use crate::tensor::{lit, to_f64, BinaryMask, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::train::{
    argmax_rows, batch_of, check_finite, epoch_rng, minibatches, Accumulator, EpochMetrics,
    Optimizer, TrainConfig,
};
use crate::yofo::loss::{contiguity_tape, sparsity_final_tape};
use crate::yofo::train::{retention_stats, skew_classifier};
use crate::yofo::{GateMode, RationaleResult};

/// `w_s Σ|m_j| + w_c Σ|m_{j+1} - m_j|`.
pub fn omega_regularizer(m: &[f64], sparsity_weight: f64, contiguity_weight: f64) -> f64 {
    let size: f64 = m.iter().map(|v| v.abs()).sum();
    let jumps: f64 = m.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    sparsity_weight * size + contiguity_weight * jumps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RnpConfig {
    pub shared: bool,
    /// Target selection rate. With a target the sparsity term is
    /// `|mean(m) - s|`; without one it is `mean(m)`.
    pub target: Option<f64>,
    pub keep_bias: f64,
}

impl Default for RnpConfig {
    fn default() -> Self {
        RnpConfig {
            shared: false,
            target: None,
            keep_bias: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RnpModel {
    pub generator: Encoder,
    pub selector_weight: ParamId,
    pub selector_bias: ParamId,
    pub predictor: Classifier,
    pub rnp: RnpConfig,
}

/// Generator output for a `[B, L]` batch.
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    /// Straight-through (or soft / argmax) mask fed to the predictor.
    pub mask: Var,
    pub soft: Var,
}

pub const GENERATOR_PREFIX: &str = "rnp.gen";

impl RnpModel {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: ModelConfig,
        rnp: RnpConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(s) = rnp.target {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("RNP target {s} outside [0, 1]")));
            }
        }
        let d = config.d_model;
        let generator = Encoder::new(
            config.clone(),
            store,
            &format!("{GENERATOR_PREFIX}.encoder"),
            rng,
        )?;
        let selector_weight = store.add_normal(
            format!("{GENERATOR_PREFIX}.selector.weight"),
            vec![d, 2],
            0.02,
            rng,
        );
        let selector_bias = store.add(
            format!("{GENERATOR_PREFIX}.selector.bias"),
            Tensor::from_f64(vec![2], &[0.0, rnp.keep_bias])?,
        );
        let predictor = if rnp.shared {
            Classifier {
                encoder: generator.clone(),
                head: ClassifierHead::new(d, store, "rnp.pred.head", rng),
            }
        } else {
            Classifier::new(config, store, "rnp.pred", rng)?
        };
        Ok(RnpModel {
            generator,
            selector_weight,
            selector_bias,
            predictor,
            rnp,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.generator.config
    }

    /// Parameters the skewing phase must leave alone: the whole generator,
    /// or only its selector head when the encoder is shared.
    pub fn generator_only(&self, name: &str) -> bool {
        if self.rnp.shared {
            name.starts_with(&format!("{GENERATOR_PREFIX}.selector"))
        } else {
            name.starts_with(GENERATOR_PREFIX)
        }
    }

    pub fn generate_mask<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        batch: &TokenBatch,
        mode: GateMode,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Selection> {
        let (b, l) = (batch.batch, batch.len);
        let real = tape.constant(batch.real_mask());
        let (_, traces) = {
            let mut drop = (dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut *rng,
            });
            self.generator
                .forward_plain(tape, p, batch, None, &mut drop)?
        };
        let h = traces.last().expect("layers").hidden;
        let logits = tape.linear(h, p[self.selector_weight], Some(p[self.selector_bias]))?;
        let (mask, soft) = match mode {
            GateMode::Sample { tau, hard } => {
                let s = tape.gumbel_binary_sample(logits, tau, rng, hard)?;
                let m = tape.reshape(s.mask, vec![b, l])?;
                let sf = tape.reshape(s.soft, vec![b, l])?;
                (tape.force_first_col(m), tape.force_first_col(sf))
            }
            GateMode::Argmax => {
                let keep: Vec<T> = tape
                    .data(logits)
                    .chunks(2)
                    .map(|x| if x[1] > x[0] { T::one() } else { T::zero() })
                    .collect();
                let m = tape.constant(Tensor::new(vec![b, l], keep)?);
                let m = tape.force_first_col(m);
                (m, m)
            }
        };
        let mask = tape.mul(mask, real)?;
        let soft = tape.mul(soft, real)?;
        Ok(Selection { mask, soft })
    }

    /// Predictor logits with `mask` (`[B, L]`, position 0 set) applied to
    /// attention in every layer. Texts whose mask selects no text token are
    /// rejected.
    pub fn predict_masked<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        batch: &TokenBatch,
        mask: Var,
    ) -> Result<Var> {
        for (b, row) in tape.data(mask).chunks(batch.len).enumerate() {
            if row[1..batch.lens[b]].iter().all(|&v| v == T::zero()) {
                return Err(Error::DegenerateMask(format!(
                    "row {b} selects no text token"
                )));
            }
        }
        self.predictor
            .logits_with_keep::<T, rand::rngs::ThreadRng>(tape, p, batch, mask, &mut None)
    }

    /// Noise-free selection and prediction for one text.
    pub fn infer<T: Real>(
        &self,
        store: &ParamStore<T>,
        tokens: &[usize],
    ) -> Result<RationaleResult> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let batch = TokenBatch::from_sequences(&[tokens]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let sel = self.generate_mask(&mut tape, &p, &batch, GateMode::Argmax, 0.0, &mut rng)?;
        let logits = self
            .predictor
            .logits_with_keep::<T, rand::rngs::ThreadRng>(
                &mut tape, &p, &batch, sel.mask, &mut None,
            )?;
        let l = tape.data(logits);
        let logits = [to_f64(l[0]), to_f64(l[1])];
        let m = tape.data(sel.mask);
        let kept: Vec<usize> = (0..batch.len).filter(|&j| m[j] > T::zero()).collect();
        let rationale = BinaryMask((1..batch.len).map(|j| m[j] > T::zero()).collect());
        Ok(RationaleResult {
            prediction: usize::from(logits[1] > logits[0]),
            logits,
            kept: vec![kept; self.predictor.encoder.layers.len()],
            rationale,
        })
    }
}

/// Scalar loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct RnpLoss {
    pub total: Var,
    pub task: Var,
    pub sparsity: Var,
    pub contiguity: Var,
}

/// Task loss plus the selection penalties on the soft mask.
#[allow(clippy::too_many_arguments)]
pub fn rnp_objective<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    sel: &Selection,
    batch: &TokenBatch,
    labels: &[usize],
    target: Option<f64>,
    beta: f64,
    gamma: f64,
) -> Result<RnpLoss> {
    let task = tape.cross_entropy(logits, labels)?;
    let sparsity = match target {
        Some(s) => sparsity_final_tape(tape, sel.soft, &batch.lens, s)?,
        None => {
            let m = tape.segment_mean(sel.soft, &batch.lens)?;
            tape.mean(m)
        }
    };
    let contiguity = contiguity_tape(tape, &[sel.soft], &batch.lens)?;
    let a = tape.scale(sparsity, lit(beta));
    let c = tape.scale(contiguity, lit(gamma));
    let total = tape.add(task, a)?;
    let total = tape.add(total, c)?;
    Ok(RnpLoss {
        total,
        task,
        sparsity,
        contiguity,
    })
}

pub fn train_rnp_epoch<T: Real>(
    model: &RnpModel,
    store: &mut ParamStore<T>,
    opt: &mut Optimizer<T>,
    data: &[Example],
    cfg: &TrainConfig,
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
        let sel = model.generate_mask(
            &mut tape,
            &p,
            &batch,
            GateMode::Sample {
                tau: cfg.tau,
                hard: true,
            },
            dropout,
            &mut rng,
        )?;
        let logits = {
            let mut drop = (dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut rng,
            });
            model
                .predictor
                .logits_with_keep(&mut tape, &p, &batch, sel.mask, &mut drop)?
        };
        let parts = rnp_objective(
            &mut tape,
            logits,
            &sel,
            &batch,
            &labels,
            model.rnp.target,
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
        let preds = argmax_rows(tape.data(logits));
        acc.add_predictions(
            preds.iter().zip(&labels).filter(|(a, b)| a == b).count(),
            labels.len(),
        );
        let (kept, degenerate) = retention_stats(&tape, &[sel.mask], &batch);
        acc.add_retention(&kept, degenerate);
        tape.backward(parts.total)?;
        let grads = store.gradients(&tape, &p);
        opt.step(store, &grads)?;
        *step += 1;
    }
    Ok(acc.finish(epoch, *step))
}

/// Pre-fits the predictor on `(first sentence, label)` pairs for `steps`
/// optimizer steps, leaving the generator alone.
pub fn skew_pretrain<T: Real>(
    model: &RnpModel,
    store: &mut ParamStore<T>,
    data: &[Example],
    steps: u64,
    cfg: &TrainConfig,
    delimiters: &[usize],
) -> Result<u64> {
    skew_classifier(
        &model.predictor,
        store,
        data,
        steps,
        cfg,
        delimiters,
        &|n: &str| model.generator_only(n),
    )
}
