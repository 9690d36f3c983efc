//! Grid carbon intensity, intensity classes and emission accounting.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::ResourceProvider;
use crate::rng::{stream, stream_rng};

const JOULES_PER_KWH: f64 = 3.6e6;

/// Lowest intensity the model will report, in gCO₂/kWh.
pub const MIN_INTENSITY: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum CarbonError {
    #[error("invalid carbon model: {0}")]
    InvalidModel(String),
    #[error("invalid intensity thresholds: low_max {low_max} must be below high_min {high_min}")]
    InvalidThresholds { low_max: f64, high_min: f64 },
    #[error("invalid energy model: {0}")]
    InvalidEnergyModel(String),
    #[error("provider efficiency must be positive, got {0}")]
    NonPositiveEfficiency(f64),
    #[error("round index {got} is not after the last recorded round {last}")]
    RoundOutOfOrder { got: usize, last: usize },
    #[error("invalid ledger entry: {0}")]
    InvalidEntry(String),
}

/// Sinusoidal grid carbon intensity with optional Gaussian noise:
/// `I(t) = i_base + amplitude * sin(2πt / period_hours + phase) + ε(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarbonModel {
    /// gCO₂/kWh
    pub i_base: f64,
    /// gCO₂/kWh
    pub amplitude: f64,
    pub period_hours: f64,
    /// radians
    pub phase: f64,
    /// Standard deviation of ε(t) in gCO₂/kWh; 0 disables noise.
    pub noise_sigma: f64,
    /// Label of the dedicated noise stream.
    pub rng_stream_id: u64,
}

impl Default for CarbonModel {
    fn default() -> Self {
        Self {
            i_base: 150.0,
            amplitude: 70.0,
            period_hours: 24.0,
            phase: 0.0,
            noise_sigma: 10.0,
            rng_stream_id: 0,
        }
    }
}

impl CarbonModel {
    pub fn validate(&self) -> Result<(), CarbonError> {
        let bad = |msg: &str| Err(CarbonError::InvalidModel(msg.to_string()));
        if !(self.i_base > 0.0 && self.i_base.is_finite()) {
            return bad("i_base must be positive");
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude must be non-negative");
        }
        if !(self.period_hours > 0.0 && self.period_hours.is_finite()) {
            return bad("period_hours must be positive");
        }
        if !self.phase.is_finite() {
            return bad("phase must be finite");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }

    /// Intensity at simulated time `t` (hours) given one draw from the noise
    /// stream. Clamped below at [`MIN_INTENSITY`].
    pub fn intensity_at(&self, t: f64, noise_draw: f64) -> f64 {
        let wave = (2.0 * PI * t / self.period_hours + self.phase).sin();
        (self.i_base + self.amplitude * wave + noise_draw).max(MIN_INTENSITY)
    }

    /// Opens the model's dedicated noise stream for a run.
    pub fn noise_stream(&self, master_seed: u64) -> GridNoise {
        GridNoise {
            rng: stream_rng(master_seed, stream::GRID_NOISE, self.rng_stream_id, 0),
            sigma: self.noise_sigma,
        }
    }

    /// Intensity at `t = start + i * step_hours` for `i in 0..n`, drawing
    /// one noise sample per point.
    pub fn series(&self, start: f64, step_hours: f64, n: usize, master_seed: u64) -> Vec<f64> {
        let mut noise = self.noise_stream(master_seed);
        (0..n)
            .map(|i| self.intensity_at(start + i as f64 * step_hours, noise.draw()))
            .collect()
    }
}

/// Dedicated N(0, σ²) stream for grid noise.
#[derive(Debug, Clone)]
pub struct GridNoise {
    rng: ChaCha8Rng,
    sigma: f64,
}

impl GridNoise {
    pub fn draw(&mut self) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        // sigma validated as finite and positive here
        let normal = Normal::new(0.0, self.sigma).expect("valid sigma");
        normal.sample(&mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityClass {
    Low,
    Medium,
    High,
}

impl IntensityClass {
    pub const ALL: [IntensityClass; 3] = [Self::Low, Self::Medium, Self::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensityThresholds {
    /// Values at or below this are Low.
    pub low_max: f64,
    /// Values at or above this are High.
    pub high_min: f64,
}

impl Default for IntensityThresholds {
    fn default() -> Self {
        Self {
            low_max: 120.0,
            high_min: 180.0,
        }
    }
}

impl IntensityThresholds {
    pub fn new(low_max: f64, high_min: f64) -> Result<Self, CarbonError> {
        let t = Self { low_max, high_min };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CarbonError> {
        if self.low_max < self.high_min {
            Ok(())
        } else {
            Err(CarbonError::InvalidThresholds {
                low_max: self.low_max,
                high_min: self.high_min,
            })
        }
    }
}

pub fn classify_intensity(value: f64, thresholds: &IntensityThresholds) -> IntensityClass {
    if value <= thresholds.low_max {
        IntensityClass::Low
    } else if value >= thresholds.high_min {
        IntensityClass::High
    } else {
        IntensityClass::Medium
    }
}

/// Linear compute-plus-communication energy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    /// Joules per (sample × epoch) at efficiency 1.0.
    pub joules_per_sample_epoch: f64,
    /// Joules per megabyte transferred.
    pub comm_energy_per_megabyte: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        // ~230 J per sample-epoch puts a 10-client MNIST round near 4 kWh.
        Self {
            joules_per_sample_epoch: 230.0,
            comm_energy_per_megabyte: 200.0,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), CarbonError> {
        if !(self.joules_per_sample_epoch > 0.0 && self.joules_per_sample_epoch.is_finite()) {
            return Err(CarbonError::InvalidEnergyModel(
                "joules_per_sample_epoch must be positive".into(),
            ));
        }
        if !(self.comm_energy_per_megabyte > 0.0 && self.comm_energy_per_megabyte.is_finite()) {
            return Err(CarbonError::InvalidEnergyModel(
                "comm_energy_per_megabyte must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Energy in kWh for one client's round: local compute scaled by the
/// provider's efficiency, plus download and upload of the model.
pub fn round_energy(
    provider: &ResourceProvider,
    n_samples: usize,
    epochs: usize,
    model_size_mb: f64,
    energy: &EnergyModel,
) -> Result<f64, CarbonError> {
    if !(provider.efficiency > 0.0) {
        return Err(CarbonError::NonPositiveEfficiency(provider.efficiency));
    }
    let compute_j = (n_samples * epochs) as f64 * energy.joules_per_sample_epoch / provider.efficiency;
    let comm_j = 2.0 * model_size_mb * energy.comm_energy_per_megabyte;
    Ok((compute_j + comm_j) / JOULES_PER_KWH)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub energy_kwh: f64,
    pub intensity_g_per_kwh: f64,
    pub emissions_g: f64,
    pub cumulative_g: f64,
}

/// Per-round energy → emissions log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmissionLedger {
    entries: Vec<LedgerEntry>,
}

impl EmissionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_round(
        &mut self,
        round: usize,
        energy_kwh: f64,
        intensity: f64,
    ) -> Result<&LedgerEntry, CarbonError> {
        if let Some(last) = self.entries.last() {
            if round <= last.round {
                return Err(CarbonError::RoundOutOfOrder {
                    got: round,
                    last: last.round,
                });
            }
        }
        if !(energy_kwh >= 0.0 && energy_kwh.is_finite()) {
            return Err(CarbonError::InvalidEntry(format!("energy {energy_kwh} kWh")));
        }
        if !(intensity >= 0.0 && intensity.is_finite()) {
            return Err(CarbonError::InvalidEntry(format!("intensity {intensity} g/kWh")));
        }
        let emissions_g = energy_kwh * intensity;
        let cumulative_g = self.cumulative_g() + emissions_g;
        self.entries.push(LedgerEntry {
            round,
            energy_kwh,
            intensity_g_per_kwh: intensity,
            emissions_g,
            cumulative_g,
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn cumulative_g(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.cumulative_g)
    }

    pub fn total_energy_kwh(&self) -> f64 {
        self.entries.iter().map(|e| e.energy_kwh).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,energy_kwh,intensity_g_per_kwh,emissions_g,cumulative_g\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.round, e.energy_kwh, e.intensity_g_per_kwh, e.emissions_g, e.cumulative_g
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> CarbonModel {
        CarbonModel {
            noise_sigma: 0.0,
            ..CarbonModel::default()
        }
    }

    fn provider(efficiency: f64) -> ResourceProvider {
        ResourceProvider {
            id: 0,
            compute: 1.0,
            bandwidth_mbps: 10.0,
            efficiency,
            lat: 0.0,
            lon: 0.0,
        }
    }

    #[test]
    fn intensity_at_quarter_points() {
        let m = quiet();
        assert_eq!(m.intensity_at(0.0, 0.0), 150.0);
        assert!((m.intensity_at(6.0, 0.0) - 220.0).abs() < 1e-12);
        assert!((m.intensity_at(18.0, 0.0) - 80.0).abs() < 1e-12);
    }

    #[test]
    fn intensity_clamps_at_one() {
        let m = quiet();
        assert_eq!(m.intensity_at(0.0, -1e6), 1.0);
    }

    #[test]
    fn intensity_extremes_on_minute_grid() {
        for m in [quiet(), CarbonModel { i_base: 50.0, ..quiet() }] {
            let minutes = (m.period_hours * 60.0) as usize;
            let vals: Vec<f64> = (0..=minutes)
                .map(|i| m.intensity_at(i as f64 / 60.0, 0.0))
                .collect();
            let max = vals.iter().cloned().fold(f64::MIN, f64::max);
            let min = vals.iter().cloned().fold(f64::MAX, f64::min);
            assert!((max - (m.i_base + m.amplitude)).abs() < 1e-9);
            assert!((min - (m.i_base - m.amplitude).max(1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_stream_is_seeded_and_toggleable() {
        let noisy = CarbonModel::default();
        let a = noisy.series(0.0, 0.5, 20, 7);
        let b = noisy.series(0.0, 0.5, 20, 7);
        assert_eq!(a, b);
        assert_ne!(a, noisy.series(0.0, 0.5, 20, 8));
        let q = quiet().series(0.0, 0.5, 20, 7);
        for (i, v) in q.iter().enumerate() {
            assert_eq!(*v, quiet().intensity_at(i as f64 * 0.5, 0.0));
        }
    }

    #[test]
    fn validation_rejects_bad_models() {
        assert!(CarbonModel { i_base: 0.0, ..quiet() }.validate().is_err());
        assert!(CarbonModel { amplitude: -1.0, ..quiet() }.validate().is_err());
        assert!(CarbonModel { period_hours: 0.0, ..quiet() }.validate().is_err());
        assert!(CarbonModel { noise_sigma: -0.1, ..quiet() }.validate().is_err());
        assert!(quiet().validate().is_ok());
    }

    #[test]
    fn classify_examples() {
        let t = IntensityThresholds::default();
        assert_eq!(classify_intensity(80.0, &t), IntensityClass::Low);
        assert_eq!(classify_intensity(120.0, &t), IntensityClass::Low);
        assert_eq!(classify_intensity(150.0, &t), IntensityClass::Medium);
        assert_eq!(classify_intensity(180.0, &t), IntensityClass::High);
        assert_eq!(classify_intensity(220.0, &t), IntensityClass::High);
        assert!(IntensityThresholds::new(180.0, 120.0).is_err());
        assert!(IntensityThresholds::new(150.0, 150.0).is_err());
    }

    #[test]
    fn round_energy_examples() {
        let e = EnergyModel::default();
        assert_eq!(round_energy(&provider(1.0), 0, 5, 0.0, &e).unwrap(), 0.0);

        let e = EnergyModel {
            joules_per_sample_epoch: 0.72,
            ..EnergyModel::default()
        };
        let kwh = round_energy(&provider(1.0), 1000, 5, 0.0, &e).unwrap();
        assert!((kwh - 0.001).abs() < 1e-15);

        let one = round_energy(&provider(1.0), 1000, 5, 0.0, &e).unwrap();
        let two = round_energy(&provider(2.0), 1000, 5, 0.0, &e).unwrap();
        assert_eq!(two * 2.0, one);

        assert_eq!(
            round_energy(&provider(0.0), 10, 1, 0.0, &e),
            Err(CarbonError::NonPositiveEfficiency(0.0))
        );
    }

    #[test]
    fn ledger_examples() {
        let mut l = EmissionLedger::new();
        l.record_round(0, 0.0, 150.0).unwrap();
        assert_eq!(l.cumulative_g(), 0.0);

        let mut l = EmissionLedger::new();
        l.record_round(0, 1.0, 150.0).unwrap();
        assert_eq!(l.cumulative_g(), 150.0);
        l.record_round(1, 1.0, 220.0).unwrap();
        assert_eq!(l.cumulative_g(), 370.0);

        assert_eq!(
            l.record_round(1, 1.0, 220.0).unwrap_err(),
            CarbonError::RoundOutOfOrder { got: 1, last: 1 }
        );
        assert!(l.record_round(0, 1.0, 220.0).is_err());
    }

    #[test]
    fn ledger_csv_shape() {
        let mut l = EmissionLedger::new();
        l.record_round(0, 1.0, 150.0).unwrap();
        l.record_round(3, 0.5, 100.0).unwrap();
        let csv = l.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "round,energy_kwh,intensity_g_per_kwh,emissions_g,cumulative_g");
        assert_eq!(lines[2], "3,0.5,100,50,200");
        assert_eq!(lines.len(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn periodic_without_noise(t in 0.0f64..500.0, phase in -3.2f64..3.2, period in 1.0f64..48.0) {
                let m = CarbonModel { phase, period_hours: period, ..quiet() };
                prop_assert!((m.intensity_at(t, 0.0) - m.intensity_at(t + period, 0.0)).abs() < 1e-9);
            }

            #[test]
            fn classification_is_monotone(a in 0.0f64..400.0, b in 0.0f64..400.0) {
                let t = IntensityThresholds::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(classify_intensity(lo, &t) <= classify_intensity(hi, &t));
            }

            #[test]
            fn ledger_cumulative_matches_sum(rounds in proptest::collection::vec((0.0f64..10.0, 1.0f64..400.0), 1..60)) {
                let mut l = EmissionLedger::new();
                for (i, (e, inten)) in rounds.iter().enumerate() {
                    l.record_round(i, *e, *inten).unwrap();
                }
                let sum: f64 = l.entries().iter().map(|e| e.emissions_g).sum();
                prop_assert!((l.cumulative_g() - sum).abs() <= 1e-9 * sum.max(1.0));
                for w in l.entries().windows(2) {
                    prop_assert!(w[1].cumulative_g >= w[0].cumulative_g);
                }
                for e in l.entries() {
                    prop_assert_eq!(e.emissions_g, e.energy_kwh * e.intensity_g_per_kwh);
                }
            }
        }
    }
}
