//! Examples, vocabularies, corpus files and the synthetic generator.

pub mod corpus;
pub mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{CLS_ID, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::tensor::BinaryMask;

pub use corpus::{load_annotated, write_corpus, Record, Schema};
pub use synth::{audit, synth_generate, Region, SynthAudit, SynthSpec};

pub const SENTENCE_DELIMITER: &str = ".";

/// One labelled text. Token ids exclude the classification token, which the
/// model prepends.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub gold_rationale: Option<BinaryMask>,
    pub aspect: Option<String>,
}

impl Example {
    pub fn new(tokens: Vec<usize>, label: usize) -> Self {
        Example {
            tokens,
            label,
            gold_rationale: None,
            aspect: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Data(format!("label {} is not binary", self.label)));
        }
        if let Some(g) = &self.gold_rationale {
            if g.len() != self.tokens.len() {
                return Err(Error::Data(format!(
                    "gold rationale length {} != token count {}",
                    g.len(),
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }

    /// Tokens up to and including the first delimiter (the whole text when
    /// no delimiter occurs).
    pub fn first_sentence(&self, delimiters: &[usize]) -> &[usize] {
        match self.tokens.iter().position(|t| delimiters.contains(t)) {
            Some(i) => &self.tokens[..=i],
            None => &self.tokens,
        }
    }

    /// Keep mask over the text marking [`Example::first_sentence`].
    pub fn first_sentence_mask(&self, delimiters: &[usize]) -> BinaryMask {
        let n = self.first_sentence(delimiters).len();
        BinaryMask((0..self.tokens.len()).map(|i| i < n).collect())
    }
}

/// Integer-id vocabulary over whitespace tokens, with reserved ids for
/// padding, the classification token and unknown words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const PAD: &'static str = "[PAD]";
    pub const CLS: &'static str = "[CLS]";
    pub const UNK: &'static str = "[UNK]";

    pub fn new() -> Self {
        let tokens = vec![
            Self::PAD.to_string(),
            Self::CLS.to_string(),
            Self::UNK.to_string(),
        ];
        debug_assert_eq!((PAD_ID, CLS_ID, UNK_ID), (0, 1, 2));
        Self::from_tokens(tokens).expect("reserved tokens are distinct")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[PAD_ID] != Self::PAD
            || tokens[CLS_ID] != Self::CLS
            || tokens[UNK_ID] != Self::UNK
        {
            return Err(Error::Data(
                "vocabulary must start with [PAD], [CLS], [UNK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(Self::UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(i) = self.id(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn delimiter_ids(&self, delimiters: &[String]) -> Vec<usize> {
        delimiters.iter().filter_map(|d| self.id(d)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// How unknown tokens are handled when encoding records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    /// Add new tokens to the vocabulary.
    Grow,
    /// Fail on any token missing from the vocabulary.
    Strict,
    /// Map missing tokens to `[UNK]`.
    Unknown,
}

/// Encodes records into examples with `vocab`.
pub fn encode_records(
    records: &[Record],
    vocab: &mut Vocab,
    mode: Encoding,
) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(records.len());
    for (n, r) in records.iter().enumerate() {
        let mut tokens = Vec::with_capacity(r.tokens.len());
        for t in &r.tokens {
            let id = match mode {
                Encoding::Grow => vocab.insert(t),
                Encoding::Strict => vocab.id(t).ok_or_else(|| {
                    Error::VocabMismatch(format!(
                        "record {} uses token `{t}` unknown to the model vocabulary",
                        n + 1
                    ))
                })?,
                Encoding::Unknown => vocab.id(t).unwrap_or(UNK_ID),
            };
            tokens.push(id);
        }
        let gold_rationale = r
            .rationale
            .as_ref()
            .map(|spans| corpus::spans_to_mask(spans, tokens.len()));
        out.push(Example {
            tokens,
            label: r.label,
            gold_rationale,
            aspect: r.aspect.clone(),
        });
    }
    Ok(out)
}

/// Converts examples back to wire records.
pub fn decode_examples(examples: &[Example], vocab: &Vocab) -> Vec<Record> {
    examples
        .iter()
        .map(|e| Record {
            tokens: e
                .tokens
                .iter()
                .map(|&i| vocab.token(i).to_string())
                .collect(),
            label: e.label,
            rationale: e.gold_rationale.as_ref().map(corpus::mask_to_spans),
            aspect: e.aspect.clone(),
            score: None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreClass {
    Positive,
    Negative,
    Discard,
}

/// Maps a `[0, 1]` aspect score to a binary class: `>= pos` positive,
/// `<= neg` negative, otherwise discarded.
pub fn binarize_score(score: f64, pos_thresh: f64, neg_thresh: f64) -> Result<ScoreClass> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Data(format!("score {score} outside [0, 1]")));
    }
    if neg_thresh > pos_thresh {
        return Err(Error::Parameter(format!(
            "negative threshold {neg_thresh} above positive threshold {pos_thresh}"
        )));
    }
    Ok(if score >= pos_thresh {
        ScoreClass::Positive
    } else if score <= neg_thresh {
        ScoreClass::Negative
    } else {
        ScoreClass::Discard
    })
}

pub const POSITIVE_THRESHOLD: f64 = 0.6;
pub const NEGATIVE_THRESHOLD: f64 = 0.4;
