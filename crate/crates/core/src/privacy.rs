//! Client-side privacy pipeline: L2 clipping, Gaussian noise and pairwise
//! additive masking.
//!
//! Masks are antisymmetric across each pair of participants, so they cancel
//! exactly (up to floating-point rounding) in the server's sum while hiding
//! each individual update. The server only ever learns the sum.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid dp config: {0}")]
    InvalidConfig(String),
    #[error("epsilon {0} is outside (0, 1], where the classical Gaussian bound holds")]
    EpsilonOutOfRange(f64),
    #[error("client {0} is not a participant in this round")]
    UnknownClient(usize),
    #[error("missing masked updates from clients {0:?}; dropout recovery is not supported")]
    Dropout(Vec<usize>),
    #[error("duplicate masked update from client {0}")]
    Duplicate(usize),
    #[error("masked update length {got} differs from {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Reject ε > 1.
    Strict,
    /// Apply the classical formula for any ε > 0.
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// L2 bound on each client's parameter delta.
    pub clip_norm: f64,
    pub calibration: Calibration,
    /// Pairwise mask amplitude as a multiple of `clip_norm`.
    pub mask_scale_factor: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.2,
            delta: 1e-5,
            clip_norm: 1.0,
            calibration: Calibration::Strict,
            mask_scale_factor: 1e3,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        let bad = |m: String| Err(PrivacyError::InvalidConfig(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {}", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {}", self.delta));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm {}", self.clip_norm));
        }
        if !(self.mask_scale_factor > 0.0 && self.mask_scale_factor.is_finite()) {
            return bad(format!("mask_scale_factor {}", self.mask_scale_factor));
        }
        Ok(())
    }

    pub fn mask_scale(&self) -> f64 {
        self.mask_scale_factor * self.clip_norm
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `delta` down to L2 norm `clip_norm` if it is longer.
pub fn clip_delta(delta: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = l2_norm(delta);
    if norm <= clip_norm || norm == 0.0 {
        return delta.to_vec();
    }
    let scale = clip_norm / norm;
    delta.iter().map(|x| x * scale).collect()
}

/// σ = clip_norm · √(2 ln(1.25/δ)) / ε.
pub fn gaussian_sigma(config: &DpConfig) -> Result<f64, PrivacyError> {
    config.validate()?;
    if config.calibration == Calibration::Strict && config.epsilon > 1.0 {
        return Err(PrivacyError::EpsilonOutOfRange(config.epsilon));
    }
    Ok(config.clip_norm * (2.0 * (1.25 / config.delta).ln()).sqrt() / config.epsilon)
}

/// Adds i.i.d. N(0, σ²) noise to every coordinate.
pub fn add_noise(delta: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return delta.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    delta.iter().map(|x| x + normal.sample(rng)).collect()
}

/// One shared seed per unordered pair of participants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSeedMatrix {
    seeds: BTreeMap<(usize, usize), u64>,
}

impl MaskSeedMatrix {
    /// Deals a fresh seed to every pair in `participants`.
    pub fn deal(participants: &[usize], rng: &mut impl Rng) -> Self {
        let mut ids = participants.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut seeds = BTreeMap::new();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                seeds.insert((i, j), rng.random());
            }
        }
        Self { seeds }
    }

    pub fn seed(&self, i: usize, j: usize) -> Option<u64> {
        let key = if i < j { (i, j) } else { (j, i) };
        if i == j {
            None
        } else {
            self.seeds.get(&key).copied()
        }
    }
}

/// Expands a pair seed to `len` values uniform in `[-scale, scale)`.
fn prg(seed: u64, len: usize, scale: f64) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(move |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

/// `delta + Σ_{j>i} PRG(s_ij) − Σ_{j<i} PRG(s_ij)` over the other participants.
pub fn mask(
    delta: &[f64],
    client_id: usize,
    participants: &[usize],
    seeds: &MaskSeedMatrix,
    scale: f64,
) -> Result<Vec<f64>, PrivacyError> {
    if !participants.contains(&client_id) {
        return Err(PrivacyError::UnknownClient(client_id));
    }
    let mut out = delta.to_vec();
    for &j in participants {
        if j == client_id {
            continue;
        }
        let seed = seeds.seed(client_id, j).ok_or(PrivacyError::UnknownClient(j))?;
        let sign = if j > client_id { 1.0 } else { -1.0 };
        for (o, m) in out.iter_mut().zip(prg(seed, delta.len(), scale)) {
            *o += sign * m;
        }
    }
    Ok(out)
}

/// Coordinate-wise sum of every participant's masked update. Any missing
/// participant aborts with [`PrivacyError::Dropout`].
pub fn unmask_sum(masked: &[(usize, Vec<f64>)], participants: &[usize]) -> Result<Vec<f64>, PrivacyError> {
    let mut present: BTreeMap<usize, &Vec<f64>> = BTreeMap::new();
    for (id, v) in masked {
        if !participants.contains(id) {
            return Err(PrivacyError::UnknownClient(*id));
        }
        if present.insert(*id, v).is_some() {
            return Err(PrivacyError::Duplicate(*id));
        }
    }
    let missing: Vec<usize> = participants.iter().copied().filter(|p| !present.contains_key(p)).collect();
    if !missing.is_empty() {
        return Err(PrivacyError::Dropout(missing));
    }
    let len = present.values().next().map_or(0, |v| v.len());
    let mut sum = vec![0.0; len];
    for v in present.values() {
        if v.len() != len {
            return Err(PrivacyError::LengthMismatch {
                got: v.len(),
                expected: len,
            });
        }
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    Ok(sum)
}
