//! Per-layer retention targets.
//!
//! Layers `1..=k` gather information at full length, layers `k+1..=k+d`
//! decay from 1 towards `s`, and the remaining layers hold `s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    Cliff,
    Linear,
    Exponential,
    Logarithmic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthConfiguration {
    pub k: usize,
    pub d: usize,
    pub s: f64,
    pub mode: DecayMode,
    /// `l_1..l_N`.
    pub targets: Vec<f64>,
}

/// Target for layer `i` (1-based) inside the decay region `k < i <= k + d`.
fn decay(mode: DecayMode, i: usize, k: usize, d: usize, s: f64) -> f64 {
    let t = (i - k) as f64;
    let d = d as f64;
    match mode {
        DecayMode::Cliff => s,
        DecayMode::Linear => 1.0 - (1.0 - s) * t / d,
        DecayMode::Exponential => s.powf(t / d),
        DecayMode::Logarithmic => ((s.exp() * t + std::f64::consts::E * (d - t)) / d).ln(),
    }
}

pub fn make_length_config(
    k: usize,
    d: usize,
    s: f64,
    mode: DecayMode,
    layers: usize,
) -> Result<LengthConfiguration> {
    if k > layers {
        return Err(Error::Parameter(format!(
            "k = {k} exceeds the layer count {layers}"
        )));
    }
    if d > layers - k {
        return Err(Error::Parameter(format!(
            "d = {d} exceeds N - k = {}",
            layers - k
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Parameter(format!(
            "target retention s = {s} outside [0, 1]"
        )));
    }
    let targets = (1..=layers)
        .map(|i| {
            if i <= k {
                1.0
            } else if i >= k + d {
                // Pinned so the tail equals `s` without rounding error.
                s
            } else {
                decay(mode, i, k, d, s)
            }
        })
        .collect();
    Ok(LengthConfiguration {
        k,
        d,
        s,
        mode,
        targets,
    })
}

impl LengthConfiguration {
    /// Cliff schedule with `k` scaled from 9 of 12 layers to `layers`.
    pub fn default_for(layers: usize, s: f64) -> Result<Self> {
        let k = ((9.0 * layers as f64 / 12.0).round() as usize).min(layers);
        make_length_config(k, layers - k, s, DecayMode::Cliff, layers)
    }

    pub fn layers(&self) -> usize {
        self.targets.len()
    }

    /// Recomputes the targets and checks they match the stored list.
    pub fn validate(&self) -> Result<()> {
        let fresh = make_length_config(self.k, self.d, self.s, self.mode, self.targets.len())?;
        if fresh.targets != self.targets {
            return Err(Error::Config(
                "stored length targets disagree with (k, d, s, mode)".into(),
            ));
        }
        Ok(())
    }
}
