//! Synthetic corpora with one planted rationale span per example.
//!
//! Surface forms: background words `w{i}`, span filler `a{i}`, label cues
//! `pos{i}` / `neg{i}` (only ever inside the gold span, always agreeing with
//! the label), distractors `dpos{i}` / `dneg{i}` (only ever outside the span)
//! and the sentence delimiter `.`. A distractor's polarity matches the label
//! with probability `rho` and is a fair coin otherwise, so at `rho = 0` it
//! carries no label information and at `rho = 1` it is a perfect shortcut.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{corpus::Record, SENTENCE_DELIMITER};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Anywhere,
    FirstSentence,
    AfterFirstSentence,
}

/// Generator settings. Every field must be present in a spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Inclusive text-length range (classification token not counted).
    pub min_len: usize,
    pub max_len: usize,
    /// Gold span length as a fraction of the text length.
    pub span_fraction: f64,
    pub background_vocab: usize,
    pub span_vocab: usize,
    /// Cue lexicon size per polarity.
    pub cue_vocab: usize,
    pub cues_per_span: usize,
    /// Distractor lexicon size per polarity; 0 disables distractors.
    pub distractor_vocab: usize,
    pub rho: f64,
    /// Inclusive sentence-length range, delimiter included; `0, 0` emits no
    /// delimiters.
    pub sentence_min: usize,
    pub sentence_max: usize,
    /// `anywhere` or `after_first_sentence`.
    pub span_region: Region,
    /// `anywhere` or `first_sentence`.
    pub distractor_region: Region,
    /// Aspect tag copied to every record; empty for none.
    pub aspect: String,
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn span_len(&self, n: usize) -> usize {
        ((self.span_fraction * n as f64).round() as usize)
            .max(self.cues_per_span)
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad(format!(
                "length range [{}, {}] is empty",
                self.min_len, self.max_len
            ));
        }
        if !(self.span_fraction > 0.0 && self.span_fraction <= 1.0) {
            return bad(format!(
                "span_fraction {} outside (0, 1]",
                self.span_fraction
            ));
        }
        if self.background_vocab == 0
            || self.span_vocab == 0
            || self.cue_vocab == 0
            || self.cues_per_span == 0
        {
            return bad(
                "background, span and cue lexicons and cues_per_span must be nonzero".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        if self.rho > 0.0 && self.distractor_vocab == 0 {
            return bad("rho > 0 needs a nonzero distractor lexicon".into());
        }
        if self.sentence_min > self.sentence_max || (self.sentence_max > 0 && self.sentence_min < 2)
        {
            return bad(format!(
                "sentence length range [{}, {}] is invalid",
                self.sentence_min, self.sentence_max
            ));
        }
        if self.span_region == Region::FirstSentence {
            return bad("span_region must be `anywhere` or `after_first_sentence`".into());
        }
        if self.distractor_region == Region::AfterFirstSentence {
            return bad("distractor_region must be `anywhere` or `first_sentence`".into());
        }
        let first_sentence_needed = self.span_region == Region::AfterFirstSentence
            || self.distractor_region == Region::FirstSentence;
        if first_sentence_needed && self.sentence_max == 0 {
            return bad("sentence-relative regions need delimiters (sentence_max > 0)".into());
        }
        if self.distractor_region == Region::FirstSentence
            && self.span_region != Region::AfterFirstSentence
        {
            return bad(
                "first-sentence distractors need span_region = after_first_sentence".into(),
            );
        }
        let distractor = usize::from(self.distractor_vocab > 0);
        let prefix = if self.span_region == Region::AfterFirstSentence {
            self.sentence_max
        } else {
            0
        };
        for n in self.min_len..=self.max_len {
            let need = self.span_len(n) + prefix + distractor;
            if need > n {
                return bad(format!(
                    "infeasible: texts of length {n} cannot hold a {}-token span plus {} reserved tokens",
                    self.span_len(n),
                    prefix + distractor
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Background,
    Delimiter,
    Distractor,
    Span,
}

fn generate_one(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Record {
    let label = usize::from(rng.random_bool(0.5));
    let n = rng.random_range(spec.min_len..=spec.max_len);
    let span_len = spec.span_len(n);
    let mut slots = vec![Slot::Background; n];

    let mut cursor = 0;
    if spec.span_region == Region::AfterFirstSentence {
        let f = rng.random_range(spec.sentence_min..=spec.sentence_max);
        slots[f - 1] = Slot::Delimiter;
        cursor = f;
    }
    let start = rng.random_range(cursor..=n - span_len);
    let end = start + span_len;
    for s in &mut slots[start..end] {
        *s = Slot::Span;
    }
    let distractor = (spec.distractor_vocab > 0).then(|| {
        // After-first-sentence layouts already fixed the first delimiter.
        let limit = match spec.distractor_region {
            Region::FirstSentence => cursor.saturating_sub(1),
            _ => n,
        };
        let free: Vec<usize> = (0..limit)
            .filter(|&i| slots[i] == Slot::Background)
            .collect();
        let at = free[rng.random_range(0..free.len())];
        slots[at] = Slot::Distractor;
        at
    });
    if spec.sentence_max > 0 {
        loop {
            let mut at = cursor + rng.random_range(spec.sentence_min..=spec.sentence_max) - 1;
            while at < n && slots[at] != Slot::Background {
                at = if (start..end).contains(&at) {
                    end
                } else {
                    at + 1
                };
            }
            if at >= n {
                break;
            }
            slots[at] = Slot::Delimiter;
            cursor = at + 1;
        }
    }

    let mut tokens: Vec<String> = slots
        .iter()
        .map(|s| match s {
            Slot::Delimiter => SENTENCE_DELIMITER.to_string(),
            _ => format!("w{}", rng.random_range(0..spec.background_vocab)),
        })
        .collect();

    let mut span_positions: Vec<usize> = (start..end).collect();
    for i in 0..spec.cues_per_span {
        let j = rng.random_range(i..span_positions.len());
        span_positions.swap(i, j);
    }
    let polarity = if label == 1 { "pos" } else { "neg" };
    for (i, &p) in span_positions.iter().enumerate() {
        tokens[p] = if i < spec.cues_per_span {
            format!("{polarity}{}", rng.random_range(0..spec.cue_vocab))
        } else {
            format!("a{}", rng.random_range(0..spec.span_vocab))
        };
    }

    if let Some(at) = distractor {
        let agrees = rng.random_bool(spec.rho);
        let d_label = if agrees {
            label
        } else {
            usize::from(rng.random_bool(0.5))
        };
        let d_pol = if d_label == 1 { "dpos" } else { "dneg" };
        tokens[at] = format!("{d_pol}{}", rng.random_range(0..spec.distractor_vocab));
    }

    Record {
        tokens,
        label,
        rationale: Some(vec![(start, end)]),
        aspect: (!spec.aspect.is_empty()).then(|| spec.aspect.clone()),
        score: None,
    }
}

/// `n` examples, deterministic in `spec.seed`.
pub fn synth_generate(spec: &SynthSpec, n: usize) -> Result<Vec<Record>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..n).map(|_| generate_one(spec, &mut rng)).collect())
}

/// Counts recovered from surface tokens alone.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SynthAudit {
    pub examples: usize,
    /// Cue-lexicon tokens found outside the gold span.
    pub out_of_span_cues: usize,
    /// In-span cues whose polarity disagrees with the label.
    pub contradicting_cues: usize,
    pub distractors: usize,
    pub distractors_in_span: usize,
    pub distractors_agreeing: usize,
}

impl SynthAudit {
    pub fn agreement_rate(&self) -> f64 {
        if self.distractors == 0 {
            0.0
        } else {
            self.distractors_agreeing as f64 / self.distractors as f64
        }
    }
}

fn lexicon_polarity(token: &str, prefix: &str) -> Option<usize> {
    for (p, label) in [("pos", 1), ("neg", 0)] {
        if let Some(rest) = token.strip_prefix(prefix).and_then(|t| t.strip_prefix(p)) {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                return Some(label);
            }
        }
    }
    None
}

/// Scans records token by token for cue and distractor placement.
pub fn audit(records: &[Record]) -> SynthAudit {
    let mut a = SynthAudit {
        examples: records.len(),
        ..Default::default()
    };
    for r in records {
        let gold =
            super::corpus::spans_to_mask(r.rationale.as_deref().unwrap_or(&[]), r.tokens.len());
        for (i, t) in r.tokens.iter().enumerate() {
            if let Some(pol) = lexicon_polarity(t, "") {
                if !gold.get(i) {
                    a.out_of_span_cues += 1;
                } else if pol != r.label {
                    a.contradicting_cues += 1;
                }
            }
            if let Some(pol) = lexicon_polarity(t, "d") {
                a.distractors += 1;
                a.distractors_in_span += usize::from(gold.get(i));
                a.distractors_agreeing += usize::from(pol == r.label);
            }
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(rho: f64) -> SynthSpec {
        SynthSpec {
            seed: 7,
            min_len: 20,
            max_len: 30,
            span_fraction: 0.15,
            background_vocab: 50,
            span_vocab: 10,
            cue_vocab: 4,
            cues_per_span: 2,
            distractor_vocab: 4,
            rho,
            sentence_min: 4,
            sentence_max: 8,
            span_region: Region::Anywhere,
            distractor_region: Region::Anywhere,
            aspect: "toy".into(),
        }
    }

    #[test]
    fn decorrelated_corpus_has_no_out_of_span_cues() {
        let recs = synth_generate(&spec(0.0), 400).unwrap();
        let a = audit(&recs);
        assert_eq!(a.out_of_span_cues, 0);
        assert_eq!(a.contradicting_cues, 0);
        assert_eq!(a.distractors_in_span, 0);
        assert!((a.agreement_rate() - 0.5).abs() < 0.1, "{a:?}");
    }

    #[test]
    fn fully_correlated_corpus_plants_agreeing_distractor_everywhere() {
        let recs = synth_generate(&spec(1.0), 300).unwrap();
        let a = audit(&recs);
        assert_eq!(a.distractors, 300);
        assert_eq!(a.distractors_agreeing, 300);
        assert_eq!(a.distractors_in_span, 0);
    }

    #[test]
    fn same_seed_same_corpus() {
        let s = spec(0.5);
        assert_eq!(
            synth_generate(&s, 50).unwrap(),
            synth_generate(&s, 50).unwrap()
        );
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(
            synth_generate(&s, 50).unwrap(),
            synth_generate(&other, 50).unwrap()
        );
    }

    #[test]
    fn spans_are_contiguous_and_sized() {
        let s = spec(0.3);
        for r in synth_generate(&s, 200).unwrap() {
            let spans = r.rationale.as_ref().unwrap();
            assert_eq!(spans.len(), 1);
            let (a, b) = spans[0];
            assert_eq!(b - a, s.span_len(r.tokens.len()));
            assert!(r.tokens[a..b].iter().all(|t| t != SENTENCE_DELIMITER));
            assert!((s.min_len..=s.max_len).contains(&r.tokens.len()));
        }
    }

    #[test]
    fn first_sentence_regions_are_respected() {
        let mut s = spec(1.0);
        s.span_region = Region::AfterFirstSentence;
        s.distractor_region = Region::FirstSentence;
        for r in synth_generate(&s, 200).unwrap() {
            let first = r
                .tokens
                .iter()
                .position(|t| t == SENTENCE_DELIMITER)
                .unwrap();
            let (a, _) = r.rationale.as_ref().unwrap()[0];
            assert!(a > first);
            let d = r
                .tokens
                .iter()
                .position(|t| lexicon_polarity(t, "d").is_some())
                .unwrap();
            assert!(d < first);
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut s = spec(0.0);
        s.min_len = 2;
        s.cues_per_span = 3;
        assert!(matches!(synth_generate(&s, 1), Err(Error::Parameter(_))));
        let mut s = spec(0.0);
        s.span_fraction = 1.0;
        assert!(matches!(s.validate(), Err(Error::Parameter(_))));
        let mut s = spec(0.5);
        s.distractor_vocab = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_files_require_every_field() {
        let s = spec(0.2);
        let text = toml::to_string(&s).unwrap();
        assert_eq!(SynthSpec::from_toml(&text).unwrap(), s);
        let missing: String = text
            .lines()
            .filter(|l| !l.starts_with("rho"))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(matches!(
            SynthSpec::from_toml(&missing),
            Err(Error::Config(_))
        ));
        assert!(SynthSpec::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
    }
}
