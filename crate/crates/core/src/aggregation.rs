//! Server-side combination of client models.
//!
//! FedProx changes only the client objective, so its server step is
//! [`fedavg`]. [`fedadam`] treats the averaged client delta as a
//! pseudo-gradient for a bias-corrected Adam step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::{Arch, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no client updates to aggregate")]
    Empty,
    #[error("architecture mismatch: {0} vs {1}")]
    ArchMismatch(Arch, Arch),
    #[error("client {0} reports zero samples")]
    ZeroSamples(usize),
    #[error("delta has {got} values, model has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("server optimizer state does not match the model size")]
    StateMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub n_samples: usize,
}

fn sorted_checked(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>, AggregationError> {
    let first = updates.first().ok_or(AggregationError::Empty)?;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for u in &sorted {
        if u.params.arch() != first.params.arch() {
            return Err(AggregationError::ArchMismatch(first.params.arch(), u.params.arch()));
        }
        if u.n_samples == 0 {
            return Err(AggregationError::ZeroSamples(u.client_id));
        }
    }
    Ok(sorted)
}

/// Sample-weighted average `Σ (nᵢ / Σn) · wᵢ`, accumulated in ascending
/// client-id order.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ModelParams, AggregationError> {
    let sorted = sorted_checked(updates)?;
    let arch = sorted[0].params.arch();
    let total: usize = sorted.iter().map(|u| u.n_samples).sum();
    let mut out = vec![0.0; arch.param_count()];
    for u in &sorted {
        let weight = u.n_samples as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(u.params.values()) {
            *o += weight * v;
        }
    }
    Ok(ModelParams::new(arch, out).expect("convex combination of finite params"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedAdamHyper {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

impl Default for FedAdamHyper {
    fn default() -> Self {
        Self {
            eta: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerOptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl ServerOptState {
    pub fn new(param_count: usize) -> Self {
        Self {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
        }
    }
}

/// One Adam step on `global` along the pseudo-gradient `delta`.
pub fn fedadam_step(
    global: &ModelParams,
    delta: &[f64],
    state: &ServerOptState,
    hyper: &FedAdamHyper,
) -> Result<(ModelParams, ServerOptState), AggregationError> {
    let n = global.param_count();
    if delta.len() != n {
        return Err(AggregationError::LengthMismatch {
            got: delta.len(),
            expected: n,
        });
    }
    if state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(AggregationError::StateMismatch);
    }
    let step_count = state.step_count + 1;
    let bc1 = 1.0 - hyper.beta1.powi(step_count as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step_count as i32);
    let mut m = state.first_moment.clone();
    let mut v = state.second_moment.clone();
    let mut w = global.values().to_vec();
    for i in 0..n {
        let d = delta[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * d;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * d * d;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] += hyper.eta * m_hat / (v_hat.sqrt() + hyper.tau);
    }
    let params = ModelParams::new(global.arch(), w).expect("bounded Adam step keeps params finite");
    Ok((
        params,
        ServerOptState {
            first_moment: m,
            second_moment: v,
            step_count,
        },
    ))
}

/// FedAdam: pseudo-gradient `fedavg(updates) − global`, then [`fedadam_step`].
pub fn fedadam(
    updates: &[ClientUpdate],
    global: &ModelParams,
    state: &ServerOptState,
    hyper: &FedAdamHyper,
) -> Result<(ModelParams, ServerOptState), AggregationError> {
    let avg = fedavg(updates)?;
    if avg.arch() != global.arch() {
        return Err(AggregationError::ArchMismatch(global.arch(), avg.arch()));
    }
    let delta: Vec<f64> = avg.values().iter().zip(global.values()).map(|(a, g)| a - g).collect();
    fedadam_step(global, &delta, state, hyper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ModelParams {
        // logreg 0→… is invalid, so use a 1x1 model and read the weight
        ModelParams::new(Arch::logreg(1, 1), vec![v, 0.0]).unwrap()
    }

    fn upd(id: usize, v: f64, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: scalar(v),
            n_samples: n,
        }
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg(&[upd(0, 0.0, 1), upd(1, 2.0, 1)]).unwrap().values()[0], 1.0);
        assert_eq!(fedavg(&[upd(0, 0.0, 1), upd(1, 4.0, 3)]).unwrap().values()[0], 3.0);
        let single = upd(4, 0.123456789, 17);
        assert_eq!(fedavg(std::slice::from_ref(&single)).unwrap(), single.params);
    }

    #[test]
    fn fedavg_errors() {
        assert_eq!(fedavg(&[]), Err(AggregationError::Empty));
        let other = ClientUpdate {
            client_id: 1,
            params: ModelParams::zeros(Arch::logreg(2, 1)).unwrap(),
            n_samples: 1,
        };
        assert!(matches!(fedavg(&[upd(0, 1.0, 1), other]), Err(AggregationError::ArchMismatch(..))));
        assert_eq!(fedavg(&[upd(3, 1.0, 0)]), Err(AggregationError::ZeroSamples(3)));
    }

    #[test]
    fn fedadam_zero_delta_keeps_global() {
        let g = scalar(0.7);
        let mut state = ServerOptState::new(2);
        state.first_moment = vec![0.5, -0.2];
        state.second_moment = vec![0.3, 0.1];
        state.step_count = 4;
        let (w, s) = fedadam(&[upd(0, 0.7, 5)], &g, &state, &FedAdamHyper::default()).unwrap();
        // m decays by β₁ and stays nonzero, so the step is not exactly zero;
        // with m = v = 0 it is.
        assert!(s.first_moment[0].abs() < 0.5 && s.second_moment[0] < 0.3);
        let zero = ServerOptState::new(2);
        let (w0, _) = fedadam(&[upd(0, 0.7, 5)], &g, &zero, &FedAdamHyper::default()).unwrap();
        assert_eq!(w0, g);
        assert_ne!(w, g);
    }

    #[test]
    fn fedadam_first_step_is_sign_like() {
        let hyper = FedAdamHyper::default();
        for d in [0.5, -0.02, 3.0] {
            let g = scalar(1.0);
            let (w, s) = fedadam(&[upd(0, 1.0 + d, 1)], &g, &ServerOptState::new(2), &hyper).unwrap();
            // hand computation: m̂ = d, v̂ = d²
            let expected = 1.0 + hyper.eta * d / (d.abs() + hyper.tau);
            assert!((w.values()[0] - expected).abs() < 1e-12);
            assert_eq!(s.step_count, 1);
        }
    }

    #[test]
    fn fedadam_constant_delta_step_is_bounded() {
        let hyper = FedAdamHyper::default();
        let mut g = scalar(0.0);
        let mut state = ServerOptState::new(2);
        for _ in 0..100 {
            let target = g.values()[0] + 0.3;
            let (next, s) = fedadam(&[upd(0, target, 1)], &g, &state, &hyper).unwrap();
            let step = (next.values()[0] - g.values()[0]).abs();
            assert!(step <= hyper.eta * (1.0 + 1e-9), "step {step}");
            g = next;
            state = s;
        }
    }

    fn vec_params(values: Vec<f64>) -> ModelParams {
        ModelParams::new(Arch::logreg(values.len() - 1, 1), values).unwrap()
    }

    proptest! {
        #[test]
        fn fedavg_in_convex_hull_and_order_free(
            rows in proptest::collection::vec((proptest::collection::vec(-100.0f64..100.0, 4), 1usize..500), 1..12),
            rotate in 0usize..12,
        ) {
            let updates: Vec<ClientUpdate> = rows.iter().enumerate().map(|(i, (v, n))| ClientUpdate {
                client_id: i * 3,
                params: vec_params(v.clone()),
                n_samples: *n,
            }).collect();
            let avg = fedavg(&updates).unwrap();
            for c in 0..4 {
                let lo = rows.iter().map(|r| r.0[c]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r.0[c]).fold(f64::NEG_INFINITY, f64::max);
                let tol = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
                prop_assert!(avg.values()[c] >= lo - tol && avg.values()[c] <= hi + tol);
            }
            let mut shuffled = updates.clone();
            shuffled.rotate_left(rotate % updates.len());
            shuffled.reverse();
            prop_assert_eq!(fedavg(&shuffled).unwrap(), avg);
        }

        #[test]
        fn equal_weights_give_mean(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 1..10), n in 1usize..100) {
            let updates: Vec<ClientUpdate> = rows.iter().enumerate().map(|(i, v)| ClientUpdate {
                client_id: i,
                params: vec_params(v.clone()),
                n_samples: n,
            }).collect();
            let avg = fedavg(&updates).unwrap();
            for c in 0..3 {
                let mean = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
                prop_assert!((avg.values()[c] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            }
        }
    }
}
