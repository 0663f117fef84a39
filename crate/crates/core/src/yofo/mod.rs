//! Single-pass prediction and rationalization.
//!
//! Before every encoder layer a skim gate scores each token; the sampled
//! keep decision is multiplied into the previous layer's mask, so a token
//! once dropped never returns. Training runs the masked full-length path;
//! [`YofoModel::infer`] physically removes dropped rows. The tokens still
//! kept after the last layer form the rationale.

pub mod loss;
pub mod schedule;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Classifier, Dropout, ModelConfig, TokenBatch, CLS_ID};
use crate::error::{Error, Result};
use crate::tensor::params::Bindings;
use crate::tensor::{lit, to_f64, BinaryMask, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub use loss::{contiguity, sparsity_final, sparsity_layerwise, total_loss, LossMode};
pub use schedule::{make_length_config, DecayMode, LengthConfiguration};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub hidden: usize,
    /// Initial keep-minus-drop logit offset, so fresh gates start near keep-all.
    pub keep_bias: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            hidden: 32,
            keep_bias: 2.0,
        }
    }
}

/// Two-layer perceptron `D -> hidden -> 2` emitting `(drop, keep)` logits.
#[derive(Clone, Debug)]
pub struct SkimGate {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SkimGate {
    pub fn new<T: Real, R: Rng + ?Sized>(
        d_model: usize,
        cfg: &GateConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add_normal(
            format!("{prefix}.w1"),
            vec![d_model, cfg.hidden],
            (1.0 / d_model as f64).sqrt(),
            rng,
        );
        let b1 = store.add_const(format!("{prefix}.b1"), vec![cfg.hidden], 0.0);
        let w2 = store.add_normal(format!("{prefix}.w2"), vec![cfg.hidden, 2], 0.02, rng);
        let b2 = store.add(
            format!("{prefix}.b2"),
            Tensor::from_f64(vec![2], &[0.0, cfg.keep_bias]).expect("shape"),
        );
        SkimGate { w1, b1, w2, b2 }
    }

    /// `[rows, D]` hidden states to `[rows, 2]` logits.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, hidden: Var) -> Result<Var> {
        let h = tape.linear(hidden, p[self.w1], Some(p[self.b1]))?;
        let h = tape.gelu(h);
        tape.linear(h, p[self.w2], Some(p[self.b2]))
    }
}

/// How gate logits become keep decisions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// Gumbel sampling at temperature `tau`; `hard` selects straight-through
    /// 0/1 masks in attention, otherwise the soft probabilities are used.
    Sample { tau: f64, hard: bool },
    /// Noise-free `keep > drop` decisions without gradient.
    Argmax,
}

/// One skim step for a `[B, L]` batch.
#[derive(Clone, Debug)]
pub struct Skim {
    /// Gate decisions `m̃_i` with position 0 forced on.
    pub raw: Var,
    /// `m_i = m̃_i ⊙ m_{i-1}` as used by attention.
    pub mask: Var,
    /// Soft companion of `mask`, used by the losses.
    pub soft: Var,
}

/// Training-path outputs with per-layer masks.
#[derive(Clone, Debug)]
pub struct YofoForward {
    pub logits: Var,
    pub skims: Vec<Skim>,
    /// `H_1..H_N`.
    pub hidden: Vec<Var>,
}

impl YofoForward {
    pub fn masks(&self) -> Vec<Var> {
        self.skims.iter().map(|s| s.mask).collect()
    }

    pub fn soft_masks(&self) -> Vec<Var> {
        self.skims.iter().map(|s| s.soft).collect()
    }

    /// Hard masks per layer and example, clipped to each example's length
    /// (classification token at index 0).
    pub fn hard_masks<T: Real>(&self, tape: &Tape<T>, batch: &TokenBatch) -> Vec<Vec<BinaryMask>> {
        self.skims
            .iter()
            .map(|s| {
                tape.data(s.mask)
                    .chunks(batch.len)
                    .zip(&batch.lens)
                    .map(|(row, &n)| BinaryMask(row[..n].iter().map(|&v| v > T::zero()).collect()))
                    .collect()
            })
            .collect()
    }
}

/// Inference output for one text.
#[derive(Clone, Debug, PartialEq)]
pub struct RationaleResult {
    pub prediction: usize,
    pub logits: [f64; 2],
    /// For layers `1..=N`, the kept positions of the classification-prefixed
    /// sequence in increasing order (always starting with 0).
    pub kept: Vec<Vec<usize>>,
    /// Final-layer selection over the text tokens.
    pub rationale: BinaryMask,
}

impl RationaleResult {
    /// Layer `i` (1-based) selection over the text tokens.
    pub fn layer_mask(&self, layer: usize, text_len: usize) -> BinaryMask {
        let mut m = vec![false; text_len];
        for &pos in &self.kept[layer - 1] {
            if pos > 0 {
                m[pos - 1] = true;
            }
        }
        BinaryMask(m)
    }
}

#[derive(Clone, Debug)]
pub struct YofoModel {
    pub classifier: Classifier,
    pub gates: Vec<SkimGate>,
    pub gate_config: GateConfig,
}

impl YofoModel {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: ModelConfig,
        gate_config: GateConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if gate_config.hidden == 0 {
            return Err(Error::Config("gate hidden width must be positive".into()));
        }
        let d = config.d_model;
        let layers = config.layers;
        let classifier = Classifier::new(config, store, "yofo", rng)?;
        let gates = (0..layers)
            .map(|i| SkimGate::new(d, &gate_config, store, &format!("yofo.gate{i}"), rng))
            .collect();
        Ok(YofoModel {
            classifier,
            gates,
            gate_config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.classifier.encoder.config
    }

    pub fn layers(&self) -> usize {
        self.gates.len()
    }

    /// Gate `index` on `H_{i-1}` combined with the previous masks.
    #[allow(clippy::too_many_arguments)]
    pub fn skim<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        index: usize,
        hidden: Var,
        prev: (Var, Var),
        batch: usize,
        len: usize,
        mode: GateMode,
        rng: &mut R,
    ) -> Result<Skim> {
        let (m_prev, soft_prev) = prev;
        let logits = self.gates[index].logits(tape, p, hidden)?;
        let (raw, soft_raw) = match mode {
            GateMode::Sample { tau, hard } => {
                let s = tape.gumbel_binary_sample(logits, tau, rng, hard)?;
                let raw = tape.reshape(s.mask, vec![batch, len])?;
                let soft = tape.reshape(s.soft, vec![batch, len])?;
                (tape.force_first_col(raw), tape.force_first_col(soft))
            }
            GateMode::Argmax => {
                let mut keep: Vec<T> = tape
                    .data(logits)
                    .chunks(2)
                    .map(|l| if l[1] > l[0] { T::one() } else { T::zero() })
                    .collect();
                for row in keep.chunks_mut(len) {
                    row[0] = T::one();
                }
                let raw = tape.constant(Tensor::new(vec![batch, len], keep)?);
                (raw, raw)
            }
        };
        let mask = tape.mul(raw, m_prev)?;
        let soft = tape.mul(soft_raw, soft_prev)?;
        Ok(Skim { raw, mask, soft })
    }

    /// Masked full-length forward over a padded batch. `m_0` is the
    /// real-token mask, so padding is never kept.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        batch: &TokenBatch,
        mode: GateMode,
        dropout: f64,
        rng: &mut R,
    ) -> Result<YofoForward> {
        let enc = &self.classifier.encoder;
        let real = tape.constant(batch.real_mask());
        let mut h = enc.embed(tape, p, batch)?;
        let mut prev = (real, real);
        let mut skims = Vec::with_capacity(self.layers());
        let mut hidden = Vec::with_capacity(self.layers());
        for i in 0..self.layers() {
            let s = self.skim(tape, p, i, h, prev, batch.batch, batch.len, mode, rng)?;
            let mut drop = (dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut *rng,
            });
            h = enc
                .forward_layer_masked(tape, p, i, h, s.mask, batch.batch, batch.len, &mut drop)?
                .hidden;
            prev = (s.mask, s.soft);
            skims.push(s);
            hidden.push(h);
        }
        let logits = self
            .classifier
            .head
            .classify(tape, p, h, batch.batch, batch.len)?;
        Ok(YofoForward {
            logits,
            skims,
            hidden,
        })
    }

    /// Masked forward with externally supplied per-layer keep masks
    /// (`[B, L]` each, monotone, position 0 set) instead of gates.
    pub fn forward_with_masks<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        batch: &TokenBatch,
        masks: &[Tensor<T>],
    ) -> Result<(Vec<Var>, Var)> {
        if masks.len() != self.layers() {
            return Err(Error::Contract(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers()
            )));
        }
        let enc = &self.classifier.encoder;
        let mut h = enc.embed(tape, p, batch)?;
        let mut hidden = Vec::with_capacity(masks.len());
        for (i, m) in masks.iter().enumerate() {
            let keep = tape.constant(m.clone());
            h = enc
                .forward_layer_masked::<T, rand::rngs::ThreadRng>(
                    tape,
                    p,
                    i,
                    h,
                    keep,
                    batch.batch,
                    batch.len,
                    &mut None,
                )?
                .hidden;
            hidden.push(h);
        }
        let logits = self
            .classifier
            .head
            .classify(tape, p, h, batch.batch, batch.len)?;
        Ok((hidden, logits))
    }

    /// Pruned forward over one text. `decide(layer, gate_logits)` returns the
    /// keep flag of every currently kept row; row 0 is kept regardless.
    /// Returns per-layer kept positions, per-layer reduced hidden states and
    /// the logits.
    #[allow(clippy::type_complexity)]
    pub fn forward_pruned<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        tokens: &[usize],
        decide: &mut dyn FnMut(usize, &[T], &[usize]) -> Vec<bool>,
    ) -> Result<(Vec<Vec<usize>>, Vec<Var>, Var)> {
        let enc = &self.classifier.encoder;
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(CLS_ID);
        ids.extend_from_slice(tokens);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut h = enc.embed_at(tape, p, &ids, &positions)?;
        let mut kept = positions;
        let mut kept_sets = Vec::with_capacity(self.layers());
        let mut hidden = Vec::with_capacity(self.layers());
        for i in 0..self.layers() {
            let logits = self.gates[i].logits(tape, p, h)?;
            let flags = decide(i, tape.data(logits), &kept);
            let rows: Vec<usize> = (0..kept.len()).filter(|&r| r == 0 || flags[r]).collect();
            if rows.len() < kept.len() {
                h = tape.gather_rows(h, &rows)?;
                kept = rows.iter().map(|&r| kept[r]).collect();
            }
            h = enc.forward_layer_pruned(tape, p, i, h)?.hidden;
            kept_sets.push(kept.clone());
            hidden.push(h);
        }
        let logits = self.classifier.head.classify(tape, p, h, 1, kept.len())?;
        Ok((kept_sets, hidden, logits))
    }

    /// Hard-pruning inference with noise-free gate decisions.
    pub fn infer<T: Real>(
        &self,
        store: &ParamStore<T>,
        tokens: &[usize],
    ) -> Result<RationaleResult> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let mut decide =
            |_: usize, logits: &[T], _: &[usize]| logits.chunks(2).map(|l| l[1] > l[0]).collect();
        let (kept, _, logits) = self.forward_pruned(&mut tape, &p, tokens, &mut decide)?;
        let l = tape.data(logits);
        let logits = [to_f64(l[0]), to_f64(l[1])];
        let mut rationale = vec![false; tokens.len()];
        for &pos in kept.last().expect("at least one layer") {
            if pos > 0 {
                rationale[pos - 1] = true;
            }
        }
        Ok(RationaleResult {
            prediction: usize::from(logits[1] > logits[0]),
            logits,
            kept,
            rationale: BinaryMask(rationale),
        })
    }

    /// Sets every gate's output bias so that it keeps (`margin > 0`) or drops
    /// every token regardless of input. Used by tests and probes.
    pub fn saturate_gates<T: Real>(&self, store: &mut ParamStore<T>, margin: f64) {
        for g in &self.gates {
            for v in store.get_mut(g.w2).data_mut() {
                *v = T::zero();
            }
            let b = store.get_mut(g.b2).data_mut();
            b[0] = T::zero();
            b[1] = lit(margin);
        }
    }
}
