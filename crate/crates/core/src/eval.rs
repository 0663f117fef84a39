//! Rationale and label metrics, baselines, layer decoding and token
//! similarity analysis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, Vocab};
use crate::encoder::{Classifier, ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::{to_f64, BinaryMask, ParamStore, Real, Tape};
use crate::train::{classifier_predictions, train_classifier_epoch, Optimizer, TrainConfig};
use crate::yofo::RationaleResult;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, predicted: usize, gold: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(overlap, predicted);
        let recall = ratio(overlap, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// Token-level precision, recall and F1 of one selection. An empty selection
/// has precision 0.
pub fn token_prf(pred: &BinaryMask, gold: &BinaryMask) -> Result<Prf> {
    let c = Counts::of(pred, gold)?;
    Ok(Prf::from_counts(c.overlap, c.predicted, c.gold))
}

/// Selected fraction of the mask (0 for an empty mask).
pub fn sparsity(pred: &BinaryMask) -> f64 {
    if pred.is_empty() {
        0.0
    } else {
        pred.count() as f64 / pred.len() as f64
    }
}

/// Overlap counts summed over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Counts {
    pub overlap: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn of(pred: &BinaryMask, gold: &BinaryMask) -> Result<Counts> {
        if pred.len() != gold.len() {
            return Err(Error::Contract(format!(
                "prediction covers {} tokens but gold covers {}",
                pred.len(),
                gold.len()
            )));
        }
        Ok(Counts {
            overlap: pred.0.iter().zip(&gold.0).filter(|(&a, &b)| a && b).count(),
            predicted: pred.count(),
            gold: gold.count(),
        })
    }

    pub fn add(&mut self, other: Counts) {
        self.overlap += other.overlap;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.overlap, self.predicted, self.gold)
    }
}

/// Dataset-level metrics. Rationale scores are micro-averaged over the
/// annotated examples; S and the retention curve cover every example. The
/// classification token is never counted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "S")]
    pub sparsity: f64,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "ACC")]
    pub accuracy: f64,
    /// Selected fraction after each layer.
    pub layer_retention: Vec<f64>,
    /// Rationale F1 of each layer's kept set.
    pub layer_f1: Vec<f64>,
}

/// Scores `results[i]`, produced for `data[i]`.
pub fn score(data: &[Example], results: &[RationaleResult]) -> Result<Metrics> {
    if data.len() != results.len() {
        return Err(Error::Contract(format!(
            "{} results for {} examples",
            results.len(),
            data.len()
        )));
    }
    let layers = results.first().map_or(0, |r| r.kept.len());
    let mut final_counts = Counts::default();
    let mut layer_counts = vec![Counts::default(); layers];
    let mut layer_selected = vec![0usize; layers];
    let (mut selected, mut tokens, mut correct) = (0, 0, 0);
    for (ex, r) in data.iter().zip(results) {
        let n = ex.tokens.len();
        if r.rationale.len() != n || r.kept.len() != layers {
            return Err(Error::Contract("result does not match its example".into()));
        }
        correct += usize::from(r.prediction == ex.label);
        selected += r.rationale.count();
        tokens += n;
        for layer in 0..layers {
            let m = r.layer_mask(layer + 1, n);
            layer_selected[layer] += m.count();
            if let Some(gold) = &ex.gold_rationale {
                layer_counts[layer].add(Counts::of(&m, gold)?);
            }
        }
        if let Some(gold) = &ex.gold_rationale {
            final_counts.add(Counts::of(&r.rationale, gold)?);
        }
    }
    let frac = |a: usize| {
        if tokens == 0 {
            0.0
        } else {
            a as f64 / tokens as f64
        }
    };
    let prf = final_counts.prf();
    Ok(Metrics {
        sparsity: frac(selected),
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        accuracy: if data.is_empty() {
            0.0
        } else {
            correct as f64 / data.len() as f64
        },
        layer_retention: layer_selected.into_iter().map(frac).collect(),
        layer_f1: layer_counts.iter().map(|c| c.prf().f1).collect(),
    })
}

/// Runs `infer` over every text and scores the results.
pub fn evaluate(
    data: &[Example],
    mut infer: impl FnMut(&[usize]) -> Result<RationaleResult>,
) -> Result<(Metrics, Vec<RationaleResult>)> {
    let results = data
        .iter()
        .map(|ex| infer(&ex.tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok((score(data, &results)?, results))
}

/// Accuracy of always predicting the most frequent label (ties go to 1).
pub fn majority_baseline(data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract(
            "majority baseline of an empty dataset".into(),
        ));
    }
    let positive = data.iter().filter(|e| e.label == 1).count();
    Ok(positive.max(data.len() - positive) as f64 / data.len() as f64)
}

/// Rationale scores of a uniformly placed contiguous span of
/// `max(round(s * n), 1)` tokens per annotated text.
pub fn random_span_baseline<R: Rng + ?Sized>(data: &[Example], s: f64, rng: &mut R) -> Prf {
    let mut counts = Counts::default();
    for ex in data {
        let (Some(gold), n) = (&ex.gold_rationale, ex.tokens.len()) else {
            continue;
        };
        if n == 0 {
            continue;
        }
        let width = ((s * n as f64).round() as usize).clamp(1, n);
        let start = rng.random_range(0..=n - width);
        let pred = BinaryMask(
            (0..n)
                .map(|i| (start..start + width).contains(&i))
                .collect(),
        );
        counts.add(Counts::of(&pred, gold).expect("same length"));
    }
    counts.prf()
}

/// The selected tokens of each example as a new example with the same label.
pub fn rationale_examples(data: &[Example], results: &[RationaleResult]) -> Vec<Example> {
    data.iter()
        .zip(results)
        .map(|(ex, r)| {
            let tokens = r
                .rationale
                .indices()
                .into_iter()
                .map(|i| ex.tokens[i])
                .collect();
            Example::new(tokens, ex.label)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    /// Dev accuracy of a classifier trained and evaluated on rationales only.
    pub rationale_acc: f64,
    pub majority_acc: f64,
    pub train_acc: f64,
}

/// Trains a fresh classifier on rationale-only texts and reports its dev
/// accuracy next to the majority reference.
pub fn rationale_retrain(
    train: &[Example],
    dev: &[Example],
    config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<RetrainReport> {
    let mut rng = crate::train::epoch_rng(cfg.seed, usize::MAX - 1);
    let mut store = ParamStore::<f64>::new();
    let classifier = Classifier::new(config, &mut store, "retrain", &mut rng)?;
    let mut opt = Optimizer::new(cfg.adamw(), &store);
    let mut step = 0;
    let mut train_acc = 0.0;
    for epoch in 0..cfg.epochs {
        train_acc = train_classifier_epoch(
            &classifier,
            &mut store,
            &mut opt,
            train,
            cfg,
            epoch,
            &mut step,
        )?
        .train_acc;
    }
    let preds = classifier_predictions(&classifier, &store, dev, cfg.batch_size)?;
    let correct = preds
        .iter()
        .zip(dev)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(RetrainReport {
        rationale_acc: if dev.is_empty() {
            0.0
        } else {
            correct as f64 / dev.len() as f64
        },
        majority_acc: majority_baseline(dev)?,
        train_acc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecode {
    pub layer: usize,
    pub tokens: Vec<String>,
    /// Set on the last layer, whose selection is the rationale.
    pub rationale: bool,
}

/// Surface tokens kept after each layer, in input order. Fails if a layer
/// keeps a token its predecessor dropped.
pub fn decode_layers(
    tokens: &[usize],
    result: &RationaleResult,
    vocab: &Vocab,
) -> Result<Vec<LayerDecode>> {
    let layers = result.kept.len();
    let mut prev: Option<&Vec<usize>> = None;
    let mut out = Vec::with_capacity(layers);
    for (i, kept) in result.kept.iter().enumerate() {
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!(
                "layer {} kept set is not in input order",
                i + 1
            )));
        }
        if let Some(p) = prev {
            if let Some(x) = kept.iter().find(|x| !p.contains(x)) {
                return Err(Error::Contract(format!(
                    "layer {} keeps position {x} dropped earlier",
                    i + 1
                )));
            }
        }
        let words = kept
            .iter()
            .filter(|&&pos| pos > 0)
            .map(|&pos| {
                tokens
                    .get(pos - 1)
                    .map(|&id| vocab.token(id).to_string())
                    .ok_or_else(|| {
                        Error::Contract(format!(
                            "kept position {pos} beyond text length {}",
                            tokens.len()
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LayerDecode {
            layer: i + 1,
            tokens: words,
            rationale: i + 1 == layers,
        });
        prev = Some(kept);
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine over unordered pairs of distinct rows; `None` with fewer than
/// two rows.
pub fn mean_pairwise_cosine(rows: &[&[f64]]) -> Option<f64> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine(rows[i], rows[j]);
        }
    }
    Some(total / (n * (n - 1) / 2) as f64)
}

/// Mean cosine between matching rows of two layers.
pub fn mean_matched_cosine(a: &[&[f64]], b: &[&[f64]]) -> Option<f64> {
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| cosine(x, y)).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// `intra[i]`: mean pairwise token cosine within layer `i + 1`.
    pub intra: Vec<f64>,
    /// `inter[i]`: mean cosine of each token between layer `i` and layer
    /// `i + 1`, the embedding output counting as layer 0. Length N.
    pub inter: Vec<f64>,
}

/// Per-example curves averaged over the dataset, on post-layer hidden states
/// of the unpruned model. Padding and the classification token are excluded;
/// texts with fewer than two tokens do not contribute to `intra`.
pub fn layer_similarity<T: Real>(
    classifier: &Classifier,
    store: &ParamStore<T>,
    data: &[Example],
) -> Result<Similarity> {
    let layers = classifier.encoder.layers.len();
    let mut intra = vec![(0.0, 0usize); layers];
    let mut inter = vec![(0.0, 0usize); layers];
    for ex in data {
        let n = ex.tokens.len();
        if n == 0 {
            continue;
        }
        let batch = TokenBatch::from_sequences(&[ex.tokens.as_slice()]);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (h0, traces) = classifier
            .encoder
            .forward_plain::<T, rand_chacha::ChaCha8Rng>(&mut tape, &p, &batch, None, &mut None)?;
        let states: Vec<Vec<f64>> = std::iter::once(h0)
            .chain(traces.iter().map(|t| t.hidden))
            .map(|v| tape.data(v).iter().map(|&x| to_f64(x)).collect())
            .collect();
        let d = classifier.encoder.config.d_model;
        let rows = |s: &Vec<f64>| -> Vec<Vec<f64>> {
            (1..=n).map(|j| s[j * d..(j + 1) * d].to_vec()).collect()
        };
        let per_layer: Vec<Vec<Vec<f64>>> = states.iter().map(rows).collect();
        for i in 0..layers {
            let cur: Vec<&[f64]> = per_layer[i + 1].iter().map(Vec::as_slice).collect();
            let prev: Vec<&[f64]> = per_layer[i].iter().map(Vec::as_slice).collect();
            if let Some(v) = mean_pairwise_cosine(&cur) {
                intra[i].0 += v;
                intra[i].1 += 1;
            }
            if let Some(v) = mean_matched_cosine(&prev, &cur) {
                inter[i].0 += v;
                inter[i].1 += 1;
            }
        }
    }
    let mean = |v: Vec<(f64, usize)>| {
        v.into_iter()
            .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    };
    Ok(Similarity {
        intra: mean(intra),
        inter: mean(inter),
    })
}
