//! Comparison sampling strategies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::Tensors;
use crate::sampler::{softmax, temperature_logits};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StrategyChoice {
    /// Fixed distribution from the initialization.
    Static,
    /// Temperature moves linearly from `tau_start` to `tau_end` over the first
    /// `switch_fraction` of training, then holds.
    Cooldown {
        tau_start: f64,
        tau_end: f64,
        switch_fraction: f64,
    },
    /// Influence rewards from proxy rollouts plus weighted Reptile.
    InfDds,
    /// Cosine alignment between train and dev gradients as the reward.
    GradAlign,
}

impl StrategyChoice {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyChoice::Static => "static",
            StrategyChoice::Cooldown { .. } => "cooldown",
            StrategyChoice::InfDds => "inf-dds",
            StrategyChoice::GradAlign => "grad-align",
        }
    }

    /// Whether the strategy runs periodic scorer updates.
    pub fn is_dynamic(&self) -> bool {
        matches!(self, StrategyChoice::InfDds | StrategyChoice::GradAlign)
    }

    pub fn validate(&self) -> Result<()> {
        if let StrategyChoice::Cooldown {
            tau_start,
            tau_end,
            switch_fraction,
        } = *self
        {
            if !(tau_start > 0.0) || !(tau_end > 0.0) {
                return Err(Error::Invalid(format!("cooldown temperatures must be positive: {tau_start}, {tau_end}")));
            }
            if !(switch_fraction > 0.0 && switch_fraction < 1.0) {
                return Err(Error::Invalid(format!("switch_fraction must lie in (0, 1), got {switch_fraction}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Temperature in effect at `step` of a cooldown schedule.
///
/// Finite endpoints interpolate linearly in `tau`. When either endpoint is
/// `inf` the interpolation runs in inverse temperature instead, which keeps
/// the intermediate temperatures finite.
pub fn cooldown_temperature(step: u64, total_steps: u64, tau_start: f64, tau_end: f64, switch_fraction: f64) -> f64 {
    let switch = switch_fraction * total_steps as f64;
    let frac = if switch <= 0.0 { 1.0 } else { (step as f64 / switch).min(1.0) };
    if frac >= 1.0 {
        return tau_end;
    }
    if tau_start.is_finite() && tau_end.is_finite() {
        tau_start + frac * (tau_end - tau_start)
    } else {
        1.0 / ((1.0 - frac) / tau_start + frac / tau_end)
    }
}

/// Sampling distribution of the cooldown baseline at `step`.
pub fn cooldown_schedule(
    step: u64,
    total_steps: u64,
    tau_start: f64,
    tau_end: f64,
    switch_fraction: f64,
    sizes: &[usize],
) -> Result<Vec<f64>> {
    StrategyChoice::Cooldown {
        tau_start,
        tau_end,
        switch_fraction,
    }
    .validate()?;
    let tau = cooldown_temperature(step, total_steps, tau_start, tau_end, switch_fraction);
    Ok(softmax(&temperature_logits(sizes, tau)?))
}

/// Cosine similarity of two flattened gradients. A zero-norm gradient
/// yields 0 with a warning.
pub fn grad_alignment_reward(train_grad: &Tensors, dev_grad: &Tensors) -> Result<f64> {
    let a = train_grad.flat();
    let b = dev_grad.flat();
    if a.len() != b.len() {
        return Err(Error::Shape(format!("gradient lengths {} vs {}", a.len(), b.len())));
    }
    cosine(&a, &b)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm gradient in alignment reward; using 0");
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
