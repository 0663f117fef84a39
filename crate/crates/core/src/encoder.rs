//! Post-LN transformer encoder with a prepended classification token.
//!
//! Training runs every layer over the full padded sequence and removes dropped
//! tokens from attention through a keep mask; inference physically gathers the
//! kept rows and runs the same layer on the shorter sequence. Because masks are
//! monotone, both paths produce the same values at kept positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::params::Bindings;
use crate::tensor::{lit, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest sequence including the classification token.
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Parameter("layer count must be at least 1".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model < 2 || self.d_ff == 0 {
            return Err(Error::Parameter(
                "d_model >= 2 and d_ff >= 1 required".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::Parameter(
                "max_len must cover the classification token and one text token".into(),
            ));
        }
        if self.vocab_size <= UNK_ID {
            return Err(Error::Parameter(
                "vocabulary must include the reserved ids".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Embeddings plus the stack of layers. Holds ids into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: ModelConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
}

/// Linear map from the classification token's final state to two logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Padded batch of sequences with the classification token at position 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    /// Real length of each row, classification token included.
    pub lens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Prepends the classification token and right-pads with [`PAD_ID`].
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let len = seqs.iter().map(|s| s.as_ref().len() + 1).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            ids.push(CLS_ID);
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD_ID, len - 1 - s.len()));
            lens.push(s.len() + 1);
        }
        TokenBatch {
            ids,
            lens,
            batch: seqs.len(),
            len,
        }
    }

    /// 1 on real positions, 0 on padding.
    pub fn real_mask<T: Real>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.batch * self.len];
        for (b, &n) in self.lens.iter().enumerate() {
            for v in &mut data[b * self.len..b * self.len + n] {
                *v = T::one();
            }
        }
        Tensor::new(vec![self.batch, self.len], data).expect("shape")
    }
}

/// Dropout rate and its randomness source for one forward pass.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Output of one layer: hidden states and per-head attention probabilities
/// shaped `[batch*heads, len, len]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub hidden: Var,
    pub attention: Var,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let token_embedding = store.add_normal(
            format!("{prefix}.tok_emb"),
            vec![config.vocab_size, d],
            INIT_STD,
            rng,
        );
        let position_embedding = store.add_normal(
            format!("{prefix}.pos_emb"),
            vec![config.max_len, d],
            INIT_STD,
            rng,
        );
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{prefix}.layer{i}");
            let lin_std = (1.0 / d as f64).sqrt();
            layers.push(LayerParams {
                wq: store.add_normal(format!("{p}.wq"), vec![d, d], lin_std, rng),
                bq: store.add_const(format!("{p}.bq"), vec![d], 0.0),
                wk: store.add_normal(format!("{p}.wk"), vec![d, d], lin_std, rng),
                bk: store.add_const(format!("{p}.bk"), vec![d], 0.0),
                wv: store.add_normal(format!("{p}.wv"), vec![d, d], lin_std, rng),
                bv: store.add_const(format!("{p}.bv"), vec![d], 0.0),
                wo: store.add_normal(format!("{p}.wo"), vec![d, d], lin_std, rng),
                bo: store.add_const(format!("{p}.bo"), vec![d], 0.0),
                ln1_gain: store.add_const(format!("{p}.ln1_gain"), vec![d], 1.0),
                ln1_bias: store.add_const(format!("{p}.ln1_bias"), vec![d], 0.0),
                w1: store.add_normal(format!("{p}.w1"), vec![d, f], lin_std, rng),
                b1: store.add_const(format!("{p}.b1"), vec![f], 0.0),
                w2: store.add_normal(format!("{p}.w2"), vec![f, d], (1.0 / f as f64).sqrt(), rng),
                b2: store.add_const(format!("{p}.b2"), vec![d], 0.0),
                ln2_gain: store.add_const(format!("{p}.ln2_gain"), vec![d], 1.0),
                ln2_bias: store.add_const(format!("{p}.ln2_bias"), vec![d], 0.0),
            });
        }
        Ok(Encoder {
            config,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    /// `H_0`: token embedding plus learned position embedding, `[batch*len, D]`.
    pub fn embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        batch: &TokenBatch,
    ) -> Result<Var> {
        if batch.len > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_len {}",
                batch.len, self.config.max_len
            )));
        }
        if let Some((pos, &id)) = batch
            .ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id >= self.config.vocab_size)
        {
            return Err(Error::Data(format!(
                "token id {id} at position {} of row {} is outside the vocabulary ({})",
                pos % batch.len,
                pos / batch.len,
                self.config.vocab_size
            )));
        }
        let tok = tape.embedding(p[self.token_embedding], &batch.ids)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let pos = tape.embedding(p[self.position_embedding], &positions)?;
        tape.add(tok, pos)
    }

    /// Embeds explicit `(token, position)` rows as one sequence; used by the
    /// pruned path, where kept tokens retain their original positions.
    pub fn embed_at<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        ids: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = positions.iter().find(|&&i| i >= self.config.max_len) {
            return Err(Error::Data(format!(
                "position {bad} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let tok = tape.embedding(p[self.token_embedding], ids)?;
        let pos = tape.embedding(p[self.position_embedding], positions)?;
        tape.add(tok, pos)
    }

    /// One layer with key positions weighted by `keep` (`[batch, len]`).
    #[allow(clippy::too_many_arguments)]
    fn layer<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        index: usize,
        hidden: Var,
        keep: Var,
        batch: usize,
        len: usize,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<LayerTrace> {
        let lp = &self.layers[index];
        let heads = self.config.heads;
        let q = tape.linear(hidden, p[lp.wq], Some(p[lp.bq]))?;
        let k = tape.linear(hidden, p[lp.wk], Some(p[lp.bk]))?;
        let v = tape.linear(hidden, p[lp.wv], Some(p[lp.bv]))?;
        let q = tape.split_heads(q, batch, len, heads)?;
        let k = tape.split_heads(k, batch, len, heads)?;
        let v = tape.split_heads(v, batch, len, heads)?;
        let scale = lit::<T>(1.0 / (self.config.head_dim() as f64).sqrt());
        let scores = tape.bmm(q, k, true, scale)?;
        let attention = tape.masked_softmax(scores, keep)?;
        let ctx = tape.bmm(attention, v, false, T::one())?;
        let ctx = tape.merge_heads(ctx, batch, len, heads)?;
        let mut attn_out = tape.linear(ctx, p[lp.wo], Some(p[lp.bo]))?;
        if let Some(d) = dropout.as_mut() {
            attn_out = tape.dropout(attn_out, d.rate, d.rng)?;
        }
        let res1 = tape.add(hidden, attn_out)?;
        let h1 = tape.layer_norm(res1, p[lp.ln1_gain], p[lp.ln1_bias])?;
        let ff = tape.linear(h1, p[lp.w1], Some(p[lp.b1]))?;
        let ff = tape.gelu(ff);
        let mut ff = tape.linear(ff, p[lp.w2], Some(p[lp.b2]))?;
        if let Some(d) = dropout.as_mut() {
            ff = tape.dropout(ff, d.rate, d.rng)?;
        }
        let res2 = tape.add(h1, ff)?;
        let out = tape.layer_norm(res2, p[lp.ln2_gain], p[lp.ln2_bias])?;
        Ok(LayerTrace {
            hidden: out,
            attention,
        })
    }

    /// Training-path layer: dropped positions still produce rows but are
    /// invisible as attention keys. `keep[:, 0]` must be 1.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_layer_masked<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        index: usize,
        hidden: Var,
        keep: Var,
        batch: usize,
        len: usize,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<LayerTrace> {
        if tape.shape(keep) != [batch, len] {
            return Err(Error::Dimension {
                op: "forward_layer_masked",
                lhs: tape.shape(keep).to_vec(),
                rhs: vec![batch, len],
            });
        }
        if tape.data(keep).chunks(len).any(|row| row[0] != T::one()) {
            return Err(Error::Contract(
                "classification token must be kept in every layer".into(),
            ));
        }
        self.layer(tape, p, index, hidden, keep, batch, len, dropout)
    }

    /// Inference-path layer over an already shortened single sequence whose
    /// row 0 is the classification token.
    pub fn forward_layer_pruned<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        index: usize,
        hidden: Var,
    ) -> Result<LayerTrace> {
        let len = tape.value(hidden).rows();
        if len == 0 {
            return Err(Error::Contract(
                "pruned layer needs at least the classification token".into(),
            ));
        }
        let keep = tape.constant(Tensor::full(vec![1, len], T::one()));
        self.layer::<T, rand::rngs::ThreadRng>(tape, p, index, hidden, keep, 1, len, &mut None)
    }

    /// Unpruned stack over a batch with padding masked out. Returns every
    /// layer's trace (`H_1..H_N`) after the embedding output.
    pub fn forward_plain<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        batch: &TokenBatch,
        keep: Option<&Tensor<T>>,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        let h0 = self.embed(tape, p, batch)?;
        let keep = match keep {
            Some(k) => tape.constant(k.clone()),
            None => tape.constant(batch.real_mask()),
        };
        let mut h = h0;
        let mut traces = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let trace =
                self.forward_layer_masked(tape, p, i, h, keep, batch.batch, batch.len, dropout)?;
            h = trace.hidden;
            traces.push(trace);
        }
        Ok((h0, traces))
    }
}

impl ClassifierHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        d_model: usize,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        ClassifierHead {
            weight: store.add_normal(format!("{prefix}.weight"), vec![d_model, 2], INIT_STD, rng),
            bias: store.add_const(format!("{prefix}.bias"), vec![2], 0.0),
        }
    }

    /// Logits `[batch, 2]` from row 0 of each length-`len` sequence.
    pub fn classify<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        hidden: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let rows: Vec<usize> = (0..batch).map(|b| b * len).collect();
        let cls = tape.gather_rows(hidden, &rows)?;
        tape.linear(cls, p[self.weight], Some(p[self.bias]))
    }
}

/// Encoder plus classification head: the plain full-text model.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Classifier {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.d_model;
        let encoder = Encoder::new(config, store, &format!("{prefix}.encoder"), rng)?;
        let head = ClassifierHead::new(d, store, &format!("{prefix}.head"), rng);
        Ok(Classifier { encoder, head })
    }

    /// Logits `[batch, 2]` with `keep` (default: the real-token mask) applied
    /// in every layer.
    pub fn logits<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        batch: &TokenBatch,
        keep: Option<&Tensor<T>>,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let (_, traces) = self.encoder.forward_plain(tape, p, batch, keep, dropout)?;
        let last = traces.last().expect("at least one layer").hidden;
        self.head.classify(tape, p, last, batch.batch, batch.len)
    }

    /// As [`Classifier::logits`] with a differentiable keep mask `[batch, len]`.
    pub fn logits_with_keep<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        batch: &TokenBatch,
        keep: Var,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let mut h = self.encoder.embed(tape, p, batch)?;
        for i in 0..self.encoder.layers.len() {
            h = self
                .encoder
                .forward_layer_masked(tape, p, i, h, keep, batch.batch, batch.len, dropout)?
                .hidden;
        }
        self.head.classify(tape, p, h, batch.batch, batch.len)
    }
}
