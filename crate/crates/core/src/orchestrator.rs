//! Tabular Q-learning over resource providers.
//!
//! The state combines the grid's carbon class with the direction and speed of
//! recent accuracy change. Actions are provider ids; a round selects `k` of
//! them by ranking a per-provider score and exploring slot by slot.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::IntensityClass;
use crate::fleet::Fleet;

#[derive(Debug, Error, PartialEq)]
pub enum OrchestratorError {
    #[error("cannot select {k} of {n} providers")]
    TooManySelected { k: usize, n: usize },
    #[error("compute spread must be positive, got {0}")]
    NonPositiveSpread(f64),
    #[error("provider {id} is outside a table of {n} providers")]
    UnknownProvider { id: usize, n: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Velocity {
    Fast,
    Slow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OrchestratorState {
    pub carbon_class: IntensityClass,
    pub accuracy_trend: Trend,
    pub velocity: Velocity,
}

pub const N_STATES: usize = 12;

impl OrchestratorState {
    pub fn index(&self) -> usize {
        let trend = match self.accuracy_trend {
            Trend::Up => 0,
            Trend::Down => 1,
        };
        let velocity = match self.velocity {
            Velocity::Fast => 0,
            Velocity::Slow => 1,
        };
        self.carbon_class.index() * 4 + trend * 2 + velocity
    }

    pub fn from_index(i: usize) -> Option<Self> {
        if i >= N_STATES {
            return None;
        }
        Some(Self {
            carbon_class: IntensityClass::ALL[i / 4],
            accuracy_trend: if (i / 2) % 2 == 0 { Trend::Up } else { Trend::Down },
            velocity: if i % 2 == 0 { Velocity::Fast } else { Velocity::Slow },
        })
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..N_STATES).map(|i| Self::from_index(i).expect("index in range"))
    }

    /// e.g. `low/up/fast`.
    pub fn label(&self) -> String {
        let trend = match self.accuracy_trend {
            Trend::Up => "up",
            Trend::Down => "down",
        };
        let velocity = match self.velocity {
            Velocity::Fast => "fast",
            Velocity::Slow => "slow",
        };
        format!("{}/{}/{}", self.carbon_class.label(), trend, velocity)
    }
}

pub const DEFAULT_VELOCITY_THRESHOLD: f64 = 0.002;

/// Trend is the sign of the last accuracy change (ties count as up). Velocity
/// is an EMA (decay 0.5, starting at 0) of absolute changes, compared against
/// `velocity_threshold`.
pub fn encode_state(
    carbon_class: IntensityClass,
    accuracy_history: &[f64],
    velocity_threshold: f64,
) -> OrchestratorState {
    let mut ema = 0.0;
    let mut last = 0.0;
    for w in accuracy_history.windows(2) {
        last = w[1] - w[0];
        ema = 0.5 * ema + 0.5 * last.abs();
    }
    OrchestratorState {
        carbon_class,
        accuracy_trend: if last >= 0.0 { Trend::Up } else { Trend::Down },
        velocity: if accuracy_history.len() >= 2 && ema >= velocity_threshold {
            Velocity::Fast
        } else {
            Velocity::Slow
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_providers: usize,
    learning_rate: f64,
    discount: f64,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(n_providers: usize, learning_rate: f64, discount: f64) -> Result<Self, OrchestratorError> {
        if n_providers == 0 {
            return Err(OrchestratorError::Invalid("empty provider set".into()));
        }
        if !(0.0..=1.0).contains(&learning_rate) {
            return Err(OrchestratorError::Invalid(format!("learning_rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(OrchestratorError::Invalid(format!("discount {discount}")));
        }
        Ok(Self {
            n_providers,
            learning_rate,
            discount,
            values: vec![0.0; N_STATES * n_providers],
        })
    }

    pub fn n_providers(&self) -> usize {
        self.n_providers
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn row(&self, state: OrchestratorState) -> &[f64] {
        let start = state.index() * self.n_providers;
        &self.values[start..start + self.n_providers]
    }

    pub fn get(&self, state: OrchestratorState, provider: usize) -> f64 {
        self.row(state)[provider]
    }

    pub fn set(&mut self, state: OrchestratorState, provider: usize, value: f64) {
        let n = self.n_providers;
        self.values[state.index() * n + provider] = value;
    }

    /// Shared-reward TD update of every selected provider's entry. The
    /// bootstrap `max_j Q(s', j)` is taken before any entry changes.
    pub fn update(
        &mut self,
        state: OrchestratorState,
        selected: &[usize],
        reward: f64,
        next_state: OrchestratorState,
    ) -> Result<(), OrchestratorError> {
        if let Some(&id) = selected.iter().find(|&&id| id >= self.n_providers) {
            return Err(OrchestratorError::UnknownProvider {
                id,
                n: self.n_providers,
            });
        }
        let best_next = self.row(next_state).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let target = reward + self.discount * best_next;
        for &id in selected {
            let q = self.get(state, id);
            self.set(state, id, q + self.learning_rate * (target - q));
        }
        Ok(())
    }

    /// `state,provider,value` rows, states in index order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,provider,value\n");
        for s in OrchestratorState::all() {
            for (id, v) in self.row(s).iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", s.label(), id, v));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationSchedule {
    pub epsilon: f64,
    pub epsilon_min: f64,
    pub decay: f64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            epsilon_min: 0.01,
            decay: 0.98,
        }
    }
}

impl ExplorationSchedule {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if !(0.0..=1.0).contains(&self.epsilon_min) || !(self.epsilon_min..=1.0).contains(&self.epsilon) {
            return Err(OrchestratorError::Invalid(format!(
                "epsilon {} with floor {}",
                self.epsilon, self.epsilon_min
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(OrchestratorError::Invalid(format!("decay {}", self.decay)));
        }
        Ok(())
    }

    pub fn decay(&mut self) {
        self.epsilon = (self.epsilon * self.decay).max(self.epsilon_min);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 15.0,
            beta: 5.0,
            gamma: 1.0,
        }
    }
}

/// `α·ΔA + β·ΔE − γ·C`.
pub fn reward(accuracy_delta: f64, efficiency_delta: f64, emission_norm: f64, weights: &RewardWeights) -> f64 {
    weights.alpha * accuracy_delta + weights.beta * efficiency_delta - weights.gamma * emission_norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreenCorrectionParams {
    pub lambda: f64,
    /// Reference intensity, gCO₂/kWh.
    pub i_avg: f64,
}

impl Default for GreenCorrectionParams {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            i_avg: 150.0,
        }
    }
}

impl GreenCorrectionParams {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.i_avg > 0.0 && self.i_avg.is_finite()) {
            return Err(OrchestratorError::Invalid(format!(
                "lambda {} / i_avg {}",
                self.lambda, self.i_avg
            )));
        }
        Ok(())
    }
}

/// `q − λ·((C − 1)/σ_C)·(I/I_avg)`: penalises above-average compute more on a
/// dirtier grid.
pub fn corrected_q(
    q: f64,
    compute: f64,
    sigma_c: f64,
    intensity: f64,
    params: &GreenCorrectionParams,
) -> Result<f64, OrchestratorError> {
    if !(sigma_c > 0.0) {
        return Err(OrchestratorError::NonPositiveSpread(sigma_c));
    }
    Ok(q - params.lambda * ((compute - 1.0) / sigma_c) * (intensity / params.i_avg))
}

pub const DEFAULT_PRIORITY_THRESHOLD: f64 = 100.0;

/// `q / max(1, I/threshold)`.
pub fn priority(q_corrected: f64, intensity: f64, i_threshold: f64) -> f64 {
    q_corrected / (intensity / i_threshold).max(1.0)
}

/// Top-`k` of `scores` (descending, lower index wins ties), then each slot
/// independently explores with probability `epsilon`. Exploring slots are
/// refilled by sampling without replacement from every provider not held by
/// an exploiting slot. Returns ids in ascending order.
pub fn select_top_k(
    scores: &[f64],
    k: usize,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, OrchestratorError> {
    let n = scores.len();
    if k > n {
        return Err(OrchestratorError::TooManySelected { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut kept = Vec::with_capacity(k);
    let mut explore = 0;
    for &id in &order[..k] {
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            explore += 1;
        } else {
            kept.push(id);
        }
    }
    if explore > 0 {
        let pool: Vec<usize> = (0..n).filter(|id| !kept.contains(id)).collect();
        kept.extend(index::sample(rng, pool.len(), explore).into_iter().map(|i| pool[i]));
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Scores every provider as `priority(corrected_q(Q(s, i)))` and picks `k`
/// with [`select_top_k`].
#[allow(clippy::too_many_arguments)]
pub fn select_clients(
    state: OrchestratorState,
    fleet: &Fleet,
    k: usize,
    schedule: &ExplorationSchedule,
    intensity: f64,
    qtable: &QTable,
    correction: &GreenCorrectionParams,
    i_threshold: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, OrchestratorError> {
    if qtable.n_providers() != fleet.len() {
        return Err(OrchestratorError::Invalid(format!(
            "q-table covers {} providers, fleet has {}",
            qtable.n_providers(),
            fleet.len()
        )));
    }
    let row = qtable.row(state);
    let scores = fleet
        .providers()
        .iter()
        .map(|p| {
            corrected_q(row[p.id], p.compute, fleet.compute_std(), intensity, correction)
                .map(|q| priority(q, intensity, i_threshold))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    select_top_k(&scores, k, schedule.epsilon, rng)
}
