//! Binary checkpoints.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every parameter
//! tensor in store order as little-endian floats of the recorded precision,
//! followed by the optimizer's first and second moments when present.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::write_atomic;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::{lit, to_f64, AdamW, AdamWConfig, ParamStore, Real, Tensor};
use crate::train::TrainConfig;
use crate::yofo::LengthConfiguration;

pub const MAGIC: &[u8; 8] = b"RATLABCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    /// `"f64"` or `"f32"`.
    pub precision: String,
    pub spec: ModelSpec,
    pub length: LengthConfiguration,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken, skewing included.
    pub step: u64,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real = f64> {
    pub header: Header,
    pub store: ParamStore<T>,
    pub optimizer: Option<AdamW<T>>,
}

/// Fixed description of what is being saved, apart from the tensors.
#[derive(Clone, Debug)]
pub struct Meta<'a> {
    pub spec: &'a ModelSpec,
    pub length: &'a LengthConfiguration,
    pub train: &'a TrainConfig,
    pub vocab: &'a Vocab,
    pub epoch: usize,
    pub step: u64,
}

fn push_values<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        if T::BYTES == 8 {
            out.extend_from_slice(&to_f64(v).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_f32().expect("finite or inf").to_le_bytes());
        }
    }
}

pub fn checkpoint_bytes<T: Real>(
    meta: &Meta<'_>,
    store: &ParamStore<T>,
    optimizer: Option<&AdamW<T>>,
) -> Result<Vec<u8>> {
    let header = Header {
        precision: T::NAME.to_string(),
        spec: meta.spec.clone(),
        length: meta.length.clone(),
        train: meta.train.clone(),
        vocab: meta.vocab.tokens().to_vec(),
        epoch: meta.epoch,
        step: meta.step,
        params: store
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerState {
            config: o.config,
            step: o.step,
        }),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 20 + store.total_elements() * T::BYTES * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        push_values(&mut out, p.value.data());
    }
    if let Some(o) = optimizer {
        for m in o.first.iter().chain(&o.second) {
            push_values(&mut out, m);
        }
    }
    Ok(out)
}

/// Writes atomically via a temporary sibling file.
pub fn save<T: Real>(
    path: &Path,
    meta: &Meta<'_>,
    store: &ParamStore<T>,
    optimizer: Option<&AdamW<T>>,
) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(meta, store, optimizer)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn values<T: Real>(&mut self, n: usize, bytes: usize) -> Result<Vec<T>> {
        let raw = self.take(n * bytes)?;
        Ok(raw
            .chunks_exact(bytes)
            .map(|c| {
                if bytes == 8 {
                    lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                } else {
                    T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .expect("f32 converts")
                }
            })
            .collect())
    }
}

/// Parses a checkpoint, converting stored values to `T` if necessary.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let width = match header.precision.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => return Err(Error::Checkpoint(format!("unknown precision `{other}`"))),
    };
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n = entry.shape.iter().product();
        let values = r.values(n, width)?;
        store.add(
            entry.name.clone(),
            Tensor::new(entry.shape.clone(), values)?,
        );
    }
    let optimizer = match &header.optimizer {
        Some(state) => {
            let mut o = AdamW::new(state.config, &store);
            o.step = state.step;
            for m in o.first.iter_mut().chain(o.second.iter_mut()) {
                let n = m.len();
                *m = r.values(n, width)?;
            }
            Some(o)
        }
        None => None,
    };
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    Ok(Checkpoint {
        header,
        store,
        optimizer,
    })
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

impl<T: Real> Checkpoint<T> {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.header.vocab.clone())
    }

    /// Rebuilds the model structure and checks that the stored tensors match
    /// its parameter layout.
    pub fn model(&self) -> Result<Model> {
        let mut layout = ParamStore::<T>::new();
        let model = Model::build(
            &self.header.spec,
            &mut layout,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        if layout.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but the model has {}",
                self.store.len(),
                layout.len()
            )));
        }
        for (a, b) in layout.iter().zip(self.store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::model::ModelKind;
    use crate::yofo::DecayMode;

    fn spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            model: ModelConfig {
                layers: 2,
                heads: 2,
                d_model: 8,
                d_ff: 16,
                vocab_size: 5,
                max_len: 8,
                dropout: 0.1,
            },
            gate: Default::default(),
            rnp: Default::default(),
        }
    }

    fn roundtrip<T: Real>(kind: ModelKind) {
        let spec = spec(kind);
        let mut store = ParamStore::<T>::new();
        Model::build(&spec, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut vocab = Vocab::new();
        vocab.insert("a");
        vocab.insert("b");
        let length = crate::yofo::make_length_config(1, 1, 0.3, DecayMode::Linear, 2).unwrap();
        let train = TrainConfig::default();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step = 7;
        opt.first[0][0] = lit(0.25);
        opt.second[1][0] = lit(1e-9);
        let meta = Meta {
            spec: &spec,
            length: &length,
            train: &train,
            vocab: &vocab,
            epoch: 3,
            step: 42,
        };
        let bytes = checkpoint_bytes(&meta, &store, Some(&opt)).unwrap();
        let back = from_bytes::<T>(&bytes).unwrap();
        assert_eq!(back.store, store);
        assert_eq!(back.optimizer.as_ref(), Some(&opt));
        assert_eq!(back.header.epoch, 3);
        assert_eq!(back.header.step, 42);
        assert_eq!(back.vocab().unwrap(), vocab);
        back.model().unwrap();
        assert_eq!(
            checkpoint_bytes(&meta, &back.store, back.optimizer.as_ref()).unwrap(),
            bytes
        );
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [
            ModelKind::Yofo,
            ModelKind::Rnp,
            ModelKind::RnpShared,
            ModelKind::Plain,
        ] {
            roundtrip::<f64>(kind);
            roundtrip::<f32>(kind);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let spec = spec(ModelKind::Plain);
        let mut store = ParamStore::<f64>::new();
        Model::build(&spec, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let vocab = Vocab::new();
        let length = LengthConfiguration::default_for(2, 0.5).unwrap();
        let train = TrainConfig::default();
        let meta = Meta {
            spec: &spec,
            length: &length,
            train: &train,
            vocab: &vocab,
            epoch: 0,
            step: 0,
        };
        let bytes = checkpoint_bytes(&meta, &store, None).unwrap();
        assert!(matches!(
            from_bytes::<f64>(&bytes[..bytes.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            from_bytes::<f64>(b"NOTMAGIC0000"),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            from_bytes::<f64>(&extra),
            Err(Error::Checkpoint(_))
        ));

        let mut wrong = from_bytes::<f64>(&bytes).unwrap();
        wrong.header.spec.model.d_ff = 12;
        assert!(matches!(wrong.model(), Err(Error::Checkpoint(_))));
    }
}
