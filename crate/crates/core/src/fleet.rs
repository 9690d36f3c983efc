//! Resource providers and the heterogeneous fleet.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, stream_rng};

pub const COMPUTE_BOUNDS: (f64, f64) = (0.25, 2.0);
pub const EFFICIENCY_BOUNDS: (f64, f64) = (0.5, 1.5);

#[derive(Debug, Error, PartialEq)]
pub enum FleetError {
    #[error("a fleet needs at least 2 providers, got {0}")]
    TooFewProviders(usize),
    #[error("compute capability has zero spread across the fleet")]
    DegenerateCompute,
    #[error("invalid range for {field}: [{lo}, {hi}]")]
    InvalidRange { field: &'static str, lo: f64, hi: f64 },
    #[error("provider {id}: {reason}")]
    InvalidProvider { id: usize, reason: String },
    #[error("provider ids must be 0..n-1 in order; position {position} holds id {id}")]
    BadIds { position: usize, id: usize },
    #[error("empty selection")]
    EmptySelection,
    #[error("unknown provider id {0}")]
    UnknownProvider(usize),
    #[error("fleet json: {0}")]
    Json(String),
}

/// One edge or cloud node: compute capability, bandwidth, energy efficiency
/// and location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProvider {
    pub id: usize,
    /// Normalised compute capability, mean ≈ 1.0.
    pub compute: f64,
    /// MB/s
    pub bandwidth_mbps: f64,
    pub efficiency: f64,
    pub lat: f64,
    pub lon: f64,
}

impl ResourceProvider {
    pub fn validate(&self) -> Result<(), FleetError> {
        let fail = |reason: String| {
            Err(FleetError::InvalidProvider {
                id: self.id,
                reason,
            })
        };
        if !(COMPUTE_BOUNDS.0..=COMPUTE_BOUNDS.1).contains(&self.compute) {
            return fail(format!("compute {} outside {:?}", self.compute, COMPUTE_BOUNDS));
        }
        if !(self.bandwidth_mbps > 0.0 && self.bandwidth_mbps.is_finite()) {
            return fail(format!("bandwidth {} must be positive", self.bandwidth_mbps));
        }
        if !(EFFICIENCY_BOUNDS.0..=EFFICIENCY_BOUNDS.1).contains(&self.efficiency) {
            return fail(format!(
                "efficiency {} outside {:?}",
                self.efficiency, EFFICIENCY_BOUNDS
            ));
        }
        if !(self.lat.is_finite() && self.lon.is_finite()) {
            return fail("location must be finite".into());
        }
        Ok(())
    }
}

/// Uniform sampling ranges for [`sample_fleet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetRanges {
    pub compute: (f64, f64),
    pub bandwidth_mbps: (f64, f64),
    pub efficiency: (f64, f64),
    pub lat: (f64, f64),
    pub lon: (f64, f64),
}

impl Default for FleetRanges {
    fn default() -> Self {
        Self {
            compute: (0.5, 2.0),
            bandwidth_mbps: (5.0, 50.0),
            efficiency: (0.6, 1.4),
            lat: (45.0, 55.0),
            lon: (-5.0, 15.0),
        }
    }
}

impl FleetRanges {
    pub fn validate(&self) -> Result<(), FleetError> {
        let check = |field, (lo, hi): (f64, f64), min: f64, max: f64| {
            if lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max {
                Ok(())
            } else {
                Err(FleetError::InvalidRange { field, lo, hi })
            }
        };
        check("compute", self.compute, COMPUTE_BOUNDS.0, COMPUTE_BOUNDS.1)?;
        check("bandwidth_mbps", self.bandwidth_mbps, f64::MIN_POSITIVE, f64::MAX)?;
        check("efficiency", self.efficiency, EFFICIENCY_BOUNDS.0, EFFICIENCY_BOUNDS.1)?;
        check("lat", self.lat, -90.0, 90.0)?;
        check("lon", self.lon, -180.0, 180.0)
    }
}

/// Seconds per (sample × epoch) at compute capability 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeCoefficients {
    pub sec_per_sample: f64,
}

impl Default for TimeCoefficients {
    fn default() -> Self {
        Self {
            sec_per_sample: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    providers: Vec<ResourceProvider>,
    compute_std: f64,
}

#[derive(Serialize, Deserialize)]
struct ProviderRecord {
    id: usize,
    compute: f64,
    bandwidth_mbps: f64,
    efficiency: f64,
    lat: f64,
    lon: f64,
}

impl Fleet {
    pub fn new(providers: Vec<ResourceProvider>) -> Result<Self, FleetError> {
        if providers.len() < 2 {
            return Err(FleetError::TooFewProviders(providers.len()));
        }
        for (position, p) in providers.iter().enumerate() {
            if p.id != position {
                return Err(FleetError::BadIds { position, id: p.id });
            }
            p.validate()?;
        }
        let compute_std = population_std(providers.iter().map(|p| p.compute));
        if !(compute_std > 0.0) {
            return Err(FleetError::DegenerateCompute);
        }
        Ok(Self {
            providers,
            compute_std,
        })
    }

    pub fn providers(&self) -> &[ResourceProvider] {
        &self.providers
    }

    pub fn len(&self) -> usize {
        self.providers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.providers.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ResourceProvider> {
        self.providers.get(id)
    }

    /// σ_C: population standard deviation of compute capability.
    pub fn compute_std(&self) -> f64 {
        self.compute_std
    }

    /// Synchronous round duration: the slowest selected provider.
    pub fn round_time(
        &self,
        selection: &[usize],
        n_samples: impl Fn(usize) -> usize,
        epochs: usize,
        model_size_mb: f64,
        coeffs: &TimeCoefficients,
    ) -> Result<f64, FleetError> {
        if selection.is_empty() {
            return Err(FleetError::EmptySelection);
        }
        let mut worst = f64::NEG_INFINITY;
        for &id in selection {
            let p = self.get(id).ok_or(FleetError::UnknownProvider(id))?;
            let t = simulated_round_time(p, n_samples(id), epochs, model_size_mb, coeffs);
            worst = worst.max(t);
        }
        Ok(worst)
    }

    pub fn to_json(&self) -> String {
        let records: Vec<ProviderRecord> = self
            .providers
            .iter()
            .map(|p| ProviderRecord {
                id: p.id,
                compute: p.compute,
                bandwidth_mbps: p.bandwidth_mbps,
                efficiency: p.efficiency,
                lat: p.lat,
                lon: p.lon,
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("plain records serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, FleetError> {
        let records: Vec<ProviderRecord> =
            serde_json::from_str(text).map_err(|e| FleetError::Json(e.to_string()))?;
        Self::new(
            records
                .into_iter()
                .map(|r| ResourceProvider {
                    id: r.id,
                    compute: r.compute,
                    bandwidth_mbps: r.bandwidth_mbps,
                    efficiency: r.efficiency,
                    lat: r.lat,
                    lon: r.lon,
                })
                .collect(),
        )
    }
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws `n` providers uniformly from `ranges`.
pub fn sample_fleet(n: usize, ranges: &FleetRanges, seed: u64) -> Result<Fleet, FleetError> {
    if n < 2 {
        return Err(FleetError::TooFewProviders(n));
    }
    ranges.validate()?;
    let mut rng = stream_rng(seed, stream::FLEET, n as u64, 0);
    let providers = (0..n)
        .map(|id| ResourceProvider {
            id,
            compute: uniform(&mut rng, ranges.compute),
            bandwidth_mbps: uniform(&mut rng, ranges.bandwidth_mbps),
            efficiency: uniform(&mut rng, ranges.efficiency),
            lat: uniform(&mut rng, ranges.lat),
            lon: uniform(&mut rng, ranges.lon),
        })
        .collect();
    Fleet::new(providers)
}

/// Simulated seconds for one client's round: local compute plus model
/// download and upload.
pub fn simulated_round_time(
    provider: &ResourceProvider,
    n_samples: usize,
    epochs: usize,
    model_size_mb: f64,
    coeffs: &TimeCoefficients,
) -> f64 {
    let compute = (n_samples * epochs) as f64 * coeffs.sec_per_sample / provider.compute;
    let transfer = 2.0 * model_size_mb / provider.bandwidth_mbps;
    compute + transfer
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn provider(compute: f64, bandwidth: f64) -> ResourceProvider {
        ResourceProvider {
            id: 0,
            compute,
            bandwidth_mbps: bandwidth,
            efficiency: 1.0,
            lat: 0.0,
            lon: 0.0,
        }
    }

    #[test]
    fn same_seed_same_fleet() {
        let r = FleetRanges::default();
        assert_eq!(sample_fleet(50, &r, 3).unwrap(), sample_fleet(50, &r, 3).unwrap());
        assert_ne!(sample_fleet(50, &r, 3).unwrap(), sample_fleet(50, &r, 4).unwrap());
    }

    #[test]
    fn collapsed_ranges_are_degenerate() {
        let r = FleetRanges {
            compute: (1.0, 1.0),
            bandwidth_mbps: (10.0, 10.0),
            efficiency: (1.0, 1.0),
            lat: (0.0, 0.0),
            lon: (0.0, 0.0),
        };
        assert_eq!(sample_fleet(10, &r, 0), Err(FleetError::DegenerateCompute));
    }

    #[test]
    fn too_few_providers() {
        assert_eq!(
            sample_fleet(1, &FleetRanges::default(), 0),
            Err(FleetError::TooFewProviders(1))
        );
    }

    #[test]
    fn ranges_outside_bounds_rejected() {
        let r = FleetRanges {
            compute: (0.1, 2.0),
            ..FleetRanges::default()
        };
        assert!(matches!(
            sample_fleet(5, &r, 0),
            Err(FleetError::InvalidRange { field: "compute", .. })
        ));
    }

    #[test]
    fn round_time_examples() {
        let c = TimeCoefficients {
            sec_per_sample: 0.001,
        };
        let p = provider(1.0, 10.0);
        assert!((simulated_round_time(&p, 1000, 5, 5.0, &c) - 6.0).abs() < 1e-12);
        assert_eq!(simulated_round_time(&p, 0, 5, 5.0, &c), 1.0);

        let fast = provider(2.0, 10.0);
        let compute_slow = simulated_round_time(&p, 1000, 5, 0.0, &c);
        let compute_fast = simulated_round_time(&fast, 1000, 5, 0.0, &c);
        assert_eq!(compute_fast * 2.0, compute_slow);
    }

    #[test]
    fn json_roundtrip() {
        let f = sample_fleet(7, &FleetRanges::default(), 11).unwrap();
        let back = Fleet::from_json(&f.to_json()).unwrap();
        assert_eq!(f, back);
        let v: serde_json::Value = serde_json::from_str(&f.to_json()).unwrap();
        let keys: Vec<&String> = v[0].as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6);
        assert!(v[0].get("bandwidth_mbps").is_some());
    }

    #[test]
    fn rejects_bad_ids() {
        let mut p = sample_fleet(3, &FleetRanges::default(), 1)
            .unwrap()
            .providers()
            .to_vec();
        p[2].id = 7;
        assert_eq!(Fleet::new(p), Err(FleetError::BadIds { position: 2, id: 7 }));
    }

    #[test]
    fn straggler_sets_round_time() {
        let f = sample_fleet(20, &FleetRanges::default(), 5).unwrap();
        let c = TimeCoefficients::default();
        let sizes = |id: usize| 100 + 37 * id;
        let sel = [3, 9, 14, 0];
        let brute = sel
            .iter()
            .map(|&i| simulated_round_time(&f.providers()[i], sizes(i), 5, 0.06, &c))
            .fold(f64::MIN, f64::max);
        assert_eq!(f.round_time(&sel, sizes, 5, 0.06, &c).unwrap(), brute);
        assert_eq!(f.round_time(&[], sizes, 5, 0.06, &c), Err(FleetError::EmptySelection));
        assert_eq!(f.round_time(&[99], sizes, 5, 0.06, &c), Err(FleetError::UnknownProvider(99)));
    }

    proptest! {
        #[test]
        fn default_fleet_invariants(seed in 0u64..100) {
            let f = sample_fleet(50, &FleetRanges::default(), seed).unwrap();
            prop_assert_eq!(f.len(), 50);
            for (i, p) in f.providers().iter().enumerate() {
                prop_assert_eq!(p.id, i);
                prop_assert!(p.validate().is_ok());
            }
            // two-pass oracle
            let xs: Vec<f64> = f.providers().iter().map(|p| p.compute).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            prop_assert!((f.compute_std() - var.sqrt()).abs() < 1e-9);
            prop_assert!(f.compute_std() > 0.0);
        }

        #[test]
        fn round_time_decreases_with_capability(c in 0.25f64..1.9, n in 0.5f64..40.0, samples in 1usize..5000) {
            let coeffs = TimeCoefficients::default();
            let base = simulated_round_time(&provider(c, n), samples, 5, 1.0, &coeffs);
            prop_assert!(simulated_round_time(&provider(c + 0.1, n), samples, 5, 1.0, &coeffs) < base);
            prop_assert!(simulated_round_time(&provider(c, n + 1.0), samples, 5, 1.0, &coeffs) < base);
        }
    }
}
