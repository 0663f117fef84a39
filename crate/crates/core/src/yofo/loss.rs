//! Sparsity and contiguity penalties.
//!
//! Scalar versions operate on single sequences (one mask per layer) and are
//! used for reporting; the tape versions operate on padded batches and are
//! averaged over examples, each example only over its real positions.

use serde::{Deserialize, Serialize};

use super::schedule::LengthConfiguration;
use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tape, Tensor, Var};

/// Which sparsity term enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `|mean(m_N) - s|` on the last layer only.
    FinalLayer,
    /// Mean over layers of `|mean(m_i) - l_i|`.
    #[default]
    Layerwise,
}

fn mean(m: &[f64]) -> f64 {
    m.iter().sum::<f64>() / m.len() as f64
}

pub fn sparsity_final(m_n: &[f64], s: f64) -> f64 {
    (mean(m_n) - s).abs()
}

pub fn sparsity_layerwise(masks: &[Vec<f64>], config: &LengthConfiguration) -> Result<f64> {
    if masks.len() != config.targets.len() {
        return Err(Error::Contract(format!(
            "{} layer masks for {} length targets",
            masks.len(),
            config.targets.len()
        )));
    }
    let total: f64 = masks
        .iter()
        .zip(&config.targets)
        .map(|(m, &l)| (mean(m) - l).abs())
        .sum();
    Ok(total / masks.len() as f64)
}

pub fn contiguity(masks: &[Vec<f64>]) -> Result<f64> {
    let len = masks.first().map_or(0, Vec::len);
    if len < 2 || masks.iter().any(|m| m.len() != len) {
        return Err(Error::Contract(
            "contiguity needs equal-length masks of at least 2 positions".into(),
        ));
    }
    let transitions: f64 = masks
        .iter()
        .map(|m| m.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>())
        .sum();
    Ok(transitions / (masks.len() * (len - 1)) as f64)
}

/// `task + beta * sparsity + gamma * contiguity`.
pub fn total_loss(task: f64, sparsity: f64, contiguity: f64, beta: f64, gamma: f64) -> f64 {
    task + beta * sparsity + gamma * contiguity
}

/// Mean over the batch of `|segment_mean(m) - target|`.
fn batch_retention_gap<T: Real>(
    tape: &mut Tape<T>,
    mask: Var,
    lens: &[usize],
    target: f64,
) -> Result<Var> {
    let kept = tape.segment_mean(mask, lens)?;
    let gap = tape.add_scalar(kept, lit(-target));
    let gap = tape.abs(gap);
    Ok(tape.mean(gap))
}

/// Batched final-layer sparsity over `[B, L]` soft masks.
pub fn sparsity_final_tape<T: Real>(
    tape: &mut Tape<T>,
    m_n: Var,
    lens: &[usize],
    s: f64,
) -> Result<Var> {
    batch_retention_gap(tape, m_n, lens, s)
}

pub fn sparsity_layerwise_tape<T: Real>(
    tape: &mut Tape<T>,
    masks: &[Var],
    lens: &[usize],
    config: &LengthConfiguration,
) -> Result<Var> {
    if masks.len() != config.targets.len() || masks.is_empty() {
        return Err(Error::Contract(format!(
            "{} layer masks for {} length targets",
            masks.len(),
            config.targets.len()
        )));
    }
    let mut acc = None;
    for (&m, &l) in masks.iter().zip(&config.targets) {
        let g = batch_retention_gap(tape, m, lens, l)?;
        acc = Some(match acc {
            None => g,
            Some(a) => tape.add(a, g)?,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), lit(1.0 / masks.len() as f64)))
}

/// Batched contiguity: per example, total transitions over its real
/// positions divided by `N (len - 1)`; examples of length 1 contribute 0.
pub fn contiguity_tape<T: Real>(tape: &mut Tape<T>, masks: &[Var], lens: &[usize]) -> Result<Var> {
    if masks.is_empty() {
        return Err(Error::Contract("contiguity over zero layers".into()));
    }
    let n = masks.len() as f64;
    let weights: Vec<T> = lens
        .iter()
        .map(|&len| {
            if len < 2 {
                T::zero()
            } else {
                lit(1.0 / (n * (len - 1) as f64 * lens.len() as f64))
            }
        })
        .collect();
    let w = tape.constant(Tensor::new(vec![lens.len()], weights)?);
    let mut acc = None;
    for &m in masks {
        let v = tape.row_variation(m, lens)?;
        let v = tape.mul(v, w)?;
        let v = tape.sum(v);
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    Ok(acc.expect("nonempty"))
}
