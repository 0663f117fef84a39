//! Line-delimited JSON corpus files.
//!
//! One record per line:
//!
//! ```text
//! {"schema":1,"tokens":["the","head","is","thick"],"label":1,"rationale":[[1,4]],"aspect":"appearance","score":0.8}
//! ```
//!
//! `schema`, `tokens` and one of `label`/`score` are required. When `label`
//! is absent the score is binarized and records falling between the
//! thresholds are skipped. Blank lines are ignored.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{binarize_score, ScoreClass, NEGATIVE_THRESHOLD, POSITIVE_THRESHOLD};
use crate::error::{Error, Result};
use crate::tensor::BinaryMask;

pub const SCHEMA_VERSION: u64 = 1;

/// Wire form of one example: surface tokens and optional annotations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    pub tokens: Vec<String>,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aspect: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Thresholds used when a record carries a score but no label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schema {
    pub pos_thresh: f64,
    pub neg_thresh: f64,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            pos_thresh: POSITIVE_THRESHOLD,
            neg_thresh: NEGATIVE_THRESHOLD,
        }
    }
}

/// Expands half-open `[start, end)` spans to a mask over `len` tokens.
pub fn spans_to_mask(spans: &[(usize, usize)], len: usize) -> BinaryMask {
    let mut m = vec![false; len];
    for &(s, e) in spans {
        for v in &mut m[s.min(len)..e.min(len)] {
            *v = true;
        }
    }
    BinaryMask(m)
}

/// Maximal runs of set positions as `[start, end)` spans.
pub fn mask_to_spans(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &b) in mask.0.iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, mask.len()));
    }
    spans
}

struct LineCtx<'a> {
    path: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

fn parse_record(
    obj: &Map<String, Value>,
    ctx: &LineCtx,
    schema: &Schema,
) -> Result<Option<Record>> {
    const KNOWN: [&str; 6] = ["schema", "tokens", "label", "rationale", "aspect", "score"];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(ctx.err(k, "unknown field"));
    }
    match obj.get("schema") {
        None => return Err(ctx.err("schema", "missing")),
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(ctx.err(
                "schema",
                format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
            ))
        }
    }
    let tokens = match obj.get("tokens") {
        None => return Err(ctx.err("tokens", "missing")),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, t)| match t.as_str() {
                Some(s) if !s.is_empty() && !s.chars().any(char::is_whitespace) => {
                    Ok(s.to_string())
                }
                _ => Err(ctx.err(
                    "tokens",
                    format!("entry {i} is not a non-empty whitespace-free string"),
                )),
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(ctx.err("tokens", "expected a list of strings")),
    };
    let score = match obj.get("score") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_f64() {
            Some(s) if (0.0..=1.0).contains(&s) => Some(s),
            _ => return Err(ctx.err("score", format!("expected a number in [0, 1], got {v}"))),
        },
    };
    let label = match obj.get("label") {
        Some(v) => match v.as_u64() {
            Some(l @ (0 | 1)) => l as usize,
            _ => return Err(ctx.err("label", format!("expected 0 or 1, got {v}"))),
        },
        None => match score {
            Some(s) => match binarize_score(s, schema.pos_thresh, schema.neg_thresh)? {
                ScoreClass::Positive => 1,
                ScoreClass::Negative => 0,
                ScoreClass::Discard => return Ok(None),
            },
            None => return Err(ctx.err("label", "missing (and no score to derive it from)")),
        },
    };
    let rationale = match obj.get("rationale") {
        None | Some(Value::Null) => None,
        Some(Value::Array(spans)) => {
            let mut out = Vec::with_capacity(spans.len());
            for (i, span) in spans.iter().enumerate() {
                let pair = span.as_array().filter(|a| a.len() == 2);
                let (s, e) = match pair.map(|a| (a[0].as_u64(), a[1].as_u64())) {
                    Some((Some(s), Some(e))) => (s as usize, e as usize),
                    _ => {
                        return Err(
                            ctx.err("rationale", format!("span {i} is not a [start, end) pair"))
                        )
                    }
                };
                if s >= e || e > tokens.len() {
                    return Err(ctx.err(
                        "rationale",
                        format!(
                            "span {i} [{s}, {e}) is empty or exceeds {} tokens",
                            tokens.len()
                        ),
                    ));
                }
                out.push((s, e));
            }
            Some(out)
        }
        Some(_) => return Err(ctx.err("rationale", "expected a list of [start, end) pairs")),
    };
    let aspect = match obj.get("aspect") {
        None | Some(Value::Null) => None,
        Some(Value::String(a)) => Some(a.clone()),
        Some(_) => return Err(ctx.err("aspect", "expected a string")),
    };
    Ok(Some(Record {
        tokens,
        label,
        rationale,
        aspect,
        score,
    }))
}

/// Reads and validates every record of a corpus file.
pub fn load_annotated(path: &Path, schema: &Schema) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let ctx = LineCtx {
            path: &shown,
            line: i + 1,
        };
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| ctx.err("<record>", e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(ctx.err("<record>", "expected a JSON object"));
        };
        if let Some(r) = parse_record(&obj, &ctx, schema)? {
            out.push(r);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct WireRecord<'a> {
    schema: u64,
    #[serde(flatten)]
    record: &'a Record,
}

/// Serializes records, one per line.
pub fn corpus_bytes(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(
            &mut out,
            &WireRecord {
                schema: SCHEMA_VERSION,
                record: r,
            },
        )
        .expect("records serialize");
        out.push(b'\n');
    }
    out
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: &Path, records: &[Record]) -> Result<()> {
    write_atomic(path, &corpus_bytes(records))
}
