//! One type over every trainable model kind.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Classifier, ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::rnp::{RnpConfig, RnpModel};
use crate::tensor::{to_f64, BinaryMask, ParamStore, Real, Tape};
use crate::yofo::{GateConfig, LossMode, RationaleResult, YofoModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Skimming encoder with the layerwise sparsity loss.
    Yofo,
    /// Skimming encoder with the final-layer sparsity loss only.
    YofoFinal,
    Rnp,
    /// Generate-then-predict with one shared encoder.
    RnpShared,
    /// Full-text classifier without selection.
    Plain,
}

impl ModelKind {
    /// Loss mode this kind trains with, if it has gates.
    pub fn loss_mode(self) -> Option<LossMode> {
        match self {
            ModelKind::Yofo => Some(LossMode::Layerwise),
            ModelKind::YofoFinal => Some(LossMode::FinalLayer),
            _ => None,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub model: ModelConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub rnp: RnpConfig,
}

#[derive(Clone, Debug)]
pub enum Model {
    Yofo(YofoModel),
    Rnp(RnpModel),
    Plain(Classifier),
}

impl Model {
    pub fn build<T: Real, R: Rng + ?Sized>(
        spec: &ModelSpec,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Model> {
        if !store.is_empty() {
            return Err(Error::Contract(
                "models are built into an empty parameter store".into(),
            ));
        }
        Ok(match spec.kind {
            ModelKind::Yofo | ModelKind::YofoFinal => Model::Yofo(YofoModel::new(
                spec.model.clone(),
                spec.gate.clone(),
                store,
                rng,
            )?),
            ModelKind::Rnp | ModelKind::RnpShared => {
                let rnp = RnpConfig {
                    shared: spec.kind == ModelKind::RnpShared,
                    ..spec.rnp.clone()
                };
                Model::Rnp(RnpModel::new(spec.model.clone(), rnp, store, rng)?)
            }
            ModelKind::Plain => {
                Model::Plain(Classifier::new(spec.model.clone(), store, "plain", rng)?)
            }
        })
    }

    pub fn layers(&self) -> usize {
        self.classifier().encoder.layers.len()
    }

    /// The network that produces the label.
    pub fn classifier(&self) -> &Classifier {
        match self {
            Model::Yofo(m) => &m.classifier,
            Model::Rnp(m) => &m.predictor,
            Model::Plain(c) => c,
        }
    }

    /// Noise-free prediction and selection. The plain model keeps every
    /// token at every layer.
    pub fn infer<T: Real>(
        &self,
        store: &ParamStore<T>,
        tokens: &[usize],
    ) -> Result<RationaleResult> {
        match self {
            Model::Yofo(m) => m.infer(store, tokens),
            Model::Rnp(m) => m.infer(store, tokens),
            Model::Plain(c) => {
                let batch = TokenBatch::from_sequences(&[tokens]);
                let mut tape = Tape::new();
                let p = store.bind_frozen(&mut tape);
                let logits =
                    c.logits::<T, rand_chacha::ChaCha8Rng>(&mut tape, &p, &batch, None, &mut None)?;
                let l = tape.data(logits);
                let logits = [to_f64(l[0]), to_f64(l[1])];
                Ok(RationaleResult {
                    prediction: usize::from(logits[1] > logits[0]),
                    logits,
                    kept: vec![(0..=tokens.len()).collect(); self.layers()],
                    rationale: BinaryMask::ones(tokens.len()),
                })
            }
        }
    }
}
