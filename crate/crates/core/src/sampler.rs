//! Categorical sampling policy over training domains.
//!
//! The policy is a logit vector `psi`; `P(i) = softmax(psi)_i`. When only a
//! subsample `S` of domains is scored in a round, the policy restricted to
//! `S` is the conditional categorical `P(i | S) = P(i) / sum_{j in S} P(j)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Floor added to normalized weights before taking logs, so zero weights
/// stay representable.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Which log-probability the REINFORCE gradient differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerMode {
    /// `grad log P(i | S)`: nonzero only on coordinates in `S`.
    ConditionalLogprob,
    /// `grad log P(i)` over all coordinates.
    FullLogprob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub psi: Vec<f64>,
    pub scorer_lr: f64,
    pub warmup_steps: u64,
    pub update_every: u64,
    pub subsample_size: usize,
    pub mode: ScorerMode,
    /// `+1` ascends the reward, `-1` descends it.
    pub direction: f64,
    /// Subtract the mean reward over `S` before the update.
    pub center_rewards: bool,
}

impl SamplerState {
    pub fn from_logits(psi: Vec<f64>) -> Self {
        let m = psi.len();
        Self {
            psi,
            scorer_lr: 0.1,
            warmup_steps: 50,
            update_every: 50,
            subsample_size: m,
            mode: ScorerMode::ConditionalLogprob,
            direction: 1.0,
            center_rewards: false,
        }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// FNV-1a digest of the logits' bits.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.psi {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Softmax of the logits with max-subtraction.
pub fn probabilities(state: &SamplerState) -> Vec<f64> {
    softmax(&state.psi)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Logits for the temperature distribution `P(i) ∝ size_i^(1/tau)`.
/// `tau = inf` gives uniform logits.
pub fn temperature_logits(sizes: &[usize], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Invalid(format!("dataset sizes must be positive: {sizes:?}")));
    }
    Ok(sizes.iter().map(|&n| if tau.is_infinite() { 0.0 } else { (n as f64).ln() / tau }).collect())
}

pub fn init_from_temperature(sizes: &[usize], tau: f64) -> Result<SamplerState> {
    Ok(SamplerState::from_logits(temperature_logits(sizes, tau)?))
}

/// Logits reproducing the normalized `weights`.
pub fn init_from_weights(weights: &[f64]) -> Result<SamplerState> {
    if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Invalid(format!("weights must be finite and nonnegative: {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("weights sum to zero".into()));
    }
    Ok(SamplerState::from_logits(
        weights.iter().map(|w| (w / total + WEIGHT_FLOOR).ln()).collect(),
    ))
}

fn check_subset(m: usize, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Invalid("subsample must be nonempty".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= m) {
        return Err(Error::Invalid(format!("subsample index {bad} out of range for {m} datasets")));
    }
    Ok(())
}

/// `P(i | S)` as a dense vector (zero outside `S`).
pub fn conditional_probabilities(state: &SamplerState, subset: &[usize]) -> Result<Vec<f64>> {
    check_subset(state.len(), subset)?;
    let p = probabilities(state);
    let mass: f64 = subset.iter().map(|&i| p[i]).sum();
    let mut out = vec![0.0; p.len()];
    for &i in subset {
        out[i] = p[i] / mass;
    }
    Ok(out)
}

/// Inverse-CDF draw from `P` using one uniform.
pub fn sample_dataset(state: &SamplerState, rng: &mut Rng) -> usize {
    sample_index(&probabilities(state), rng)
}

pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// REINFORCE direction `sum_{i in S} P(i) I_i grad log P(i | S)` (or the
/// full-log-probability variant), before scaling by the learning rate.
pub fn scorer_gradient(state: &SamplerState, subset: &[usize], rewards: &[f64]) -> Result<Vec<f64>> {
    check_subset(state.len(), subset)?;
    if rewards.len() != subset.len() {
        return Err(Error::Invalid(format!("{} rewards for {} datasets", rewards.len(), subset.len())));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("influence reward {r}")));
    }
    let rewards: Vec<f64> = if state.center_rewards {
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        rewards.iter().map(|r| r - mean).collect()
    } else {
        rewards.to_vec()
    };
    let p = probabilities(state);
    let base = match state.mode {
        ScorerMode::ConditionalLogprob => conditional_probabilities(state, subset)?,
        ScorerMode::FullLogprob => p.clone(),
    };
    let mut grad = vec![0.0; state.len()];
    for (&i, &r) in subset.iter().zip(&rewards) {
        let w = p[i] * r;
        if w == 0.0 {
            continue;
        }
        // grad_j log base(i) = delta_ij - base(j), restricted to where base is
        // supported
        for (j, g) in grad.iter_mut().enumerate() {
            let delta = if i == j { 1.0 } else { 0.0 };
            *g += w * (delta - base[j]);
        }
    }
    Ok(grad)
}

/// One gradient step on the logits with the given per-dataset rewards.
/// Returns the gradient that was applied.
pub fn reinforce_update(state: &mut SamplerState, subset: &[usize], rewards: &[f64]) -> Result<Vec<f64>> {
    let grad = scorer_gradient(state, subset, rewards)?;
    let step = state.direction * state.scorer_lr;
    for (psi, g) in state.psi.iter_mut().zip(&grad) {
        *psi += step * g;
    }
    Ok(grad)
}
