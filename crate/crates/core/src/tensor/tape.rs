use rand::Rng;

use super::ops;
use super::{lit, BinaryMask, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: T,
    },
    MaskedSoftmax {
        scores: Var,
        keep: Var,
        /// `exp(s - max) / Z` before multiplying by the keep weight.
        unweighted: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    TemperedKeepProb {
        logits: Var,
        tau: T,
    },
    StraightThrough(Var),
    ForceFirstCol(Var),
    Reshape(Var),
    SegmentMean {
        x: Var,
        lens: Vec<usize>,
    },
    RowVariation {
        x: Var,
        lens: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Result of [`Tape::gumbel_binary_sample`].
#[derive(Clone, Debug)]
pub struct GumbelSample {
    /// Argmax decision per row (keep class wins).
    pub hard: BinaryMask,
    /// Tempered keep-class probability after adding Gumbel noise.
    pub soft: Var,
    /// Hard values with straight-through gradient to `soft` when `hard` was
    /// requested, otherwise the soft probabilities themselves.
    pub mask: Var,
}

/// Ordered record of differentiable operations. Every node is pushed after
/// its inputs, so reverse iteration is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        ops::gemm_nn(m, k, n, self.data(a), self.data(b), &mut out, T::zero());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap_or(&1);
        if sw.len() != 2 || sw[0] != k {
            return Err(dim_err("linear", &sx, &sw));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(dim_err("linear.bias", self.shape(b), &[n]));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * n];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        ops::gemm_nn(rows, k, n, self.data(x), self.data(w), &mut out, T::one());
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, needs))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.map(x, |e| e + c);
        let needs = self.needs(x);
        self.push(t, Op::AddScalar(x), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.map(x, |e| e * c);
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, c), needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| e.abs());
        let needs = self.needs(x);
        self.push(t, Op::Abs(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: T = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s / lit(n as f64)), Op::Mean(x), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, ops::gelu);
        let needs = self.needs(x);
        self.push(t, Op::Gelu(x), needs)
    }

    /// Per-row normalization over the last axis, `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let (out, xhat, inv_std) =
            ops::layer_norm_forward(self.data(x), self.data(gain), self.data(bias), rows, d);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Inverted dropout. `rate == 0` records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale: T = lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Dropout { x, mask }, needs))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(dim_err("embedding", st, &[]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some((pos, &bad)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
            return Err(Error::Data(format!(
                "token id {bad} at position {pos} >= vocab size {v}"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Rows of a `[rows, cols]` view selected by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        let cols = self.value(x).cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dim_err("gather_rows", self.shape(x), &[bad]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// `[batch*len, heads*dh]` → `[batch*heads, len, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(x).rows() != batch * len || heads == 0 || !d.is_multiple_of(heads) {
            return Err(dim_err("split_heads", self.shape(x), &[batch, len, heads]));
        }
        let out = ops::split_heads(self.data(x), batch, len, heads, d / heads);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![batch * heads, len, d / heads], out)?,
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            },
            needs,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != len {
            return Err(dim_err("merge_heads", &s, &[batch, len, heads]));
        }
        let dh = s[2];
        let out = ops::merge_heads(self.data(x), batch, len, heads, dh);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![batch * len, heads * dh], out)?,
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            },
            needs,
        ))
    }

    /// Batched `alpha * a @ b` (or `a @ bᵀ`) over a leading group axis.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); g * m * n];
        ops::bmm_forward(
            self.data(a),
            self.data(b),
            &mut out,
            g,
            m,
            k,
            n,
            trans_b,
            alpha,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out)?,
            Op::Bmm {
                a,
                b,
                trans_b,
                alpha,
            },
            needs,
        ))
    }

    /// Softmax over the last axis where each key position `j` is weighted by
    /// `keep[j]`. With a 0/1 keep vector this is the softmax renormalized over
    /// kept positions with dropped positions exactly zero, identical to adding
    /// a `-inf` bias before normalizing.
    ///
    /// `scores` is `[groups, rows, L]` (or `[rows, L]`); `keep` is `[K, L]` or
    /// `[L]`, with group `g` reading keep row `g / (groups / K)`.
    pub fn masked_softmax(&mut self, scores: Var, keep: Var) -> Result<Var> {
        let ss = self.shape(scores).to_vec();
        let sk = self.shape(keep).to_vec();
        let l = *ss
            .last()
            .ok_or_else(|| dim_err("masked_softmax", &ss, &sk))?;
        let (groups, rows) = match ss.len() {
            2 => (1, ss[0]),
            3 => (ss[0], ss[1]),
            _ => return Err(dim_err("masked_softmax", &ss, &sk)),
        };
        let (k_rows, kl) = match sk.len() {
            1 => (1, sk[0]),
            2 => (sk[0], sk[1]),
            _ => return Err(dim_err("masked_softmax", &ss, &sk)),
        };
        if kl != l || k_rows == 0 || groups % k_rows != 0 {
            return Err(dim_err("masked_softmax", &ss, &sk));
        }
        let per = groups / k_rows;
        let (probs, unweighted) =
            ops::masked_softmax_forward(self.data(scores), self.data(keep), groups, rows, l, per)?;
        let needs = self.needs(scores) || self.needs(keep);
        Ok(self.push(
            Tensor::new(ss, probs)?,
            Op::MaskedSoftmax {
                scores,
                keep,
                unweighted,
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Data(format!("label {bad} >= class count {c}")));
        }
        let (loss, probs) = ops::cross_entropy_forward(self.data(logits), labels, c);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Keep-class probability of `softmax((logits + noise) / tau)` for
    /// `[rows, 2]` logits laid out as `(drop, keep)`.
    pub fn tempered_keep_prob(&mut self, logits: Var, noise: &[T], tau: T) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] != 2 || noise.len() != s[0] * 2 {
            return Err(dim_err("tempered_keep_prob", &s, &[noise.len()]));
        }
        if !(tau > T::zero()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let out: Vec<T> = self
            .data(logits)
            .chunks(2)
            .zip(noise.chunks(2))
            .map(|(l, g)| ops::sigmoid(((l[1] + g[1]) - (l[0] + g[0])) / tau))
            .collect();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![s[0]], out)?,
            Op::TemperedKeepProb { logits, tau },
            needs,
        ))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Vec<T>, soft: Var) -> Result<Var> {
        let t = Tensor::new(self.shape(soft).to_vec(), hard)?;
        let needs = self.needs(soft);
        Ok(self.push(t, Op::StraightThrough(soft), needs))
    }

    /// Sets column 0 of every row to one; no gradient flows through that column.
    pub fn force_first_col(&mut self, x: Var) -> Var {
        let cols = self.value(x).cols();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(cols) {
            row[0] = T::one();
        }
        let needs = self.needs(x);
        self.push(t, Op::ForceFirstCol(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// `[B, L]` → `[B]`: mean of each row over its first `lens[b]` entries.
    pub fn segment_mean(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(x).rows() != lens.len() || lens.iter().any(|&n| n == 0 || n > cols) {
            return Err(dim_err("segment_mean", self.shape(x), lens));
        }
        let out = self
            .data(x)
            .chunks(cols)
            .zip(lens)
            .map(|(row, &n)| row[..n].iter().copied().sum::<T>() / lit(n as f64))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![lens.len()], out)?,
            Op::SegmentMean {
                x,
                lens: lens.to_vec(),
            },
            needs,
        ))
    }

    /// `[B, L]` → `[B]`: `Σ_{j+1 < lens[b]} |x[j+1] - x[j]|`.
    pub fn row_variation(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(x).rows() != lens.len() || lens.iter().any(|&n| n > cols) {
            return Err(dim_err("row_variation", self.shape(x), lens));
        }
        let out = self
            .data(x)
            .chunks(cols)
            .zip(lens)
            .map(|(row, &n)| row[..n].windows(2).map(|w| (w[1] - w[0]).abs()).sum::<T>())
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![lens.len()], out)?,
            Op::RowVariation {
                x,
                lens: lens.to_vec(),
            },
            needs,
        ))
    }

    /// Straight-through Gumbel sampling over `[rows, 2]` `(drop, keep)` logits.
    pub fn gumbel_binary_sample<R: Rng + ?Sized>(
        &mut self,
        logits: Var,
        tau: f64,
        rng: &mut R,
        hard: bool,
    ) -> Result<GumbelSample> {
        let rows = self.value(logits).rows();
        let noise: Vec<T> = (0..rows * 2).map(|_| lit(ops::gumbel_noise(rng))).collect();
        self.gumbel_binary_with_noise(logits, &noise, tau, hard)
    }

    /// As [`Tape::gumbel_binary_sample`] with caller-provided noise.
    pub fn gumbel_binary_with_noise(
        &mut self,
        logits: Var,
        noise: &[T],
        tau: f64,
        hard: bool,
    ) -> Result<GumbelSample> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let soft = self.tempered_keep_prob(logits, noise, lit(tau))?;
        let decisions = BinaryMask(
            self.data(logits)
                .chunks(2)
                .zip(noise.chunks(2))
                .map(|(l, g)| l[1] + g[1] > l[0] + g[0])
                .collect(),
        );
        let mask = if hard {
            self.straight_through(decisions.to_real(), soft)?
        } else {
            soft
        };
        Ok(GumbelSample {
            hard: decisions,
            soft,
            mask,
        })
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                self.grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let Tape { nodes, grads } = self;
        let nodes: &[Node<T>] = nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                if let Some(ga) = slot(nodes, grads, a) {
                    ops::gemm_nt(m, n, k, g, val(b), ga);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    ops::gemm_tn(k, m, n, val(a), g, gb);
                }
            }
            &Op::Linear { x, w, b } => {
                let (k, n) = (shape(w)[0], shape(w)[1]);
                let rows = nodes[x.0].value.rows();
                if let Some(gx) = slot(nodes, grads, x) {
                    ops::gemm_nt(rows, n, k, g, val(w), gx);
                }
                if let Some(gw) = slot(nodes, grads, w) {
                    ops::gemm_tn(k, rows, n, val(x), g, gw);
                }
                if let Some(gb) = b.and_then(|b| slot(nodes, grads, b)) {
                    for row in g.chunks(n) {
                        ops::axpy(gb, row, T::one());
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ops::axpy(ga, g, T::one());
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    ops::axpy(gb, g, T::one());
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ops::axpy(ga, g, T::one());
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    ops::axpy(gb, g, -T::one());
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((acc, &e), &y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *acc = *acc + e * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for ((acc, &e), &x) in gb.iter_mut().zip(g).zip(val(a)) {
                        *acc = *acc + e * x;
                    }
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) | &Op::StraightThrough(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    ops::axpy(gx, g, T::one());
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    ops::axpy(gx, g, c);
                }
            }
            &Op::Abs(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    for ((acc, &e), &v) in gx.iter_mut().zip(g).zip(val(x)) {
                        *acc = *acc + e * ops::sign(v);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    gx.iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            &Op::Mean(x) => {
                let e = g[0] / lit(nodes[x.0].value.numel().max(1) as f64);
                if let Some(gx) = slot(nodes, grads, x) {
                    gx.iter_mut().for_each(|a| *a = *a + e);
                }
            }
            &Op::Gelu(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    for ((acc, &e), &v) in gx.iter_mut().zip(g).zip(val(x)) {
                        *acc = *acc + e * ops::gelu_grad(v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[x.0].value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    ops::layer_norm_backward_input(g, xhat, inv_std, val(*gain), d, gx);
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, &e), &xh) in gg.iter_mut().zip(grow).zip(xrow) {
                            *acc = *acc + e * xh;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for grow in g.chunks(d) {
                        ops::axpy(gb, grow, T::one());
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((acc, &e), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *acc = *acc + e * m;
                    }
                }
            }
            Op::Embedding { table: x, ids } | Op::GatherRows { x, idx: ids } => {
                let cols = nodes[x.0].value.cols();
                if let Some(gt) = slot(nodes, grads, *x) {
                    for (r, &id) in ids.iter().enumerate() {
                        ops::axpy(
                            &mut gt[id * cols..(id + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            T::one(),
                        );
                    }
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            } => {
                let dh = nodes[x.0].value.cols() / heads;
                if let Some(gx) = slot(nodes, grads, x) {
                    let back = ops::merge_heads(g, batch, len, heads, dh);
                    ops::axpy(gx, &back, T::one());
                }
            }
            &Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            } => {
                let dh = shape(x)[2];
                if let Some(gx) = slot(nodes, grads, x) {
                    let back = ops::split_heads(g, batch, len, heads, dh);
                    ops::axpy(gx, &back, T::one());
                }
            }
            &Op::Bmm {
                a,
                b,
                trans_b,
                alpha,
            } => {
                let (sa, sb) = (shape(a), shape(b));
                let (grp, m, k) = (sa[0], sa[1], sa[2]);
                let n = if trans_b { sb[1] } else { sb[2] };
                if let Some(ga) = slot(nodes, grads, a) {
                    ops::bmm_grad_a(g, val(b), ga, grp, m, k, n, trans_b, alpha);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    ops::bmm_grad_b(g, val(a), gb, grp, m, k, n, trans_b, alpha);
                }
            }
            Op::MaskedSoftmax {
                scores,
                keep,
                unweighted,
            } => {
                let sv = &nodes[scores.0].value;
                let l = sv.cols();
                let groups = if sv.shape().len() == 3 {
                    sv.shape()[0]
                } else {
                    1
                };
                let rows = sv.rows() / groups;
                let k_rows = nodes[keep.0].value.rows();
                let per = groups / k_rows;
                let probs = nodes[i].value.data();
                if let Some(gs) = slot(nodes, grads, *scores) {
                    ops::masked_softmax_backward_scores(g, probs, groups, rows, l, gs);
                }
                if let Some(gk) = slot(nodes, grads, *keep) {
                    ops::masked_softmax_backward_keep(
                        g, probs, unweighted, groups, rows, l, per, gk,
                    );
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[logits.0].value.cols();
                let scale = g[0] / lit(labels.len() as f64);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == y { T::one() } else { T::zero() };
                            gl[r * c + j] = gl[r * c + j] + scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            &Op::TemperedKeepProb { logits, tau } => {
                let p = nodes[i].value.data();
                if let Some(gl) = slot(nodes, grads, logits) {
                    for (r, (&e, &pk)) in g.iter().zip(p).enumerate() {
                        let d = e * pk * (T::one() - pk) / tau;
                        gl[2 * r + 1] = gl[2 * r + 1] + d;
                        gl[2 * r] = gl[2 * r] - d;
                    }
                }
            }
            &Op::ForceFirstCol(x) => {
                let cols = nodes[x.0].value.cols();
                if let Some(gx) = slot(nodes, grads, x) {
                    for (acc_row, grow) in gx.chunks_mut(cols).zip(g.chunks(cols)) {
                        ops::axpy(&mut acc_row[1..], &grow[1..], T::one());
                    }
                }
            }
            Op::SegmentMean { x, lens } => {
                let cols = nodes[x.0].value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (b, &n) in lens.iter().enumerate() {
                        let e = g[b] / lit(n as f64);
                        for a in &mut gx[b * cols..b * cols + n] {
                            *a = *a + e;
                        }
                    }
                }
            }
            Op::RowVariation { x, lens } => {
                let cols = nodes[x.0].value.cols();
                let xv = val(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (b, &n) in lens.iter().enumerate() {
                        let row = &xv[b * cols..(b + 1) * cols];
                        let grow = &mut gx[b * cols..(b + 1) * cols];
                        for j in 0..n.saturating_sub(1) {
                            let s = g[b] * ops::sign(row[j + 1] - row[j]);
                            grow[j + 1] = grow[j + 1] + s;
                            grow[j] = grow[j] - s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` for constants.
fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}
