//! Deterministic simulator for carbon-aware, privacy-preserving federated
//! learning.
//!
//! The crate is organised by subsystem:
//!
//! - [`carbon`]: grid carbon-intensity model, intensity classes, energy and
//!   emission accounting.
//! - [`fleet`]: heterogeneous resource providers and simulated round times.
//! - [`data`]: IDX (MNIST) ingestion, synthetic blobs, Dirichlet non-IID
//!   partitioning.
//! - [`learning`]: flat-vector logistic regression / MLP, proximal local SGD,
//!   evaluation.
//! - [`aggregation`]: FedAvg and FedAdam server updates.
//! - [`privacy`]: clipping, Gaussian noise and pairwise additive masking.
//! - [`orchestrator`]: tabular Q-learning client selection with the
//!   green-aware correction and carbon-normalised priority.
//! - [`harness`]: the round loop, variant matrix and report export.
//!
//! Every random draw comes from a stream derived from the run's master seed
//! (see [`rng`]), so a run is a pure function of its configuration.

pub mod aggregation;
pub mod carbon;
pub mod data;
pub mod fleet;
pub mod harness;
pub mod learning;
pub mod orchestrator;
pub mod privacy;
pub mod rng;

pub use aggregation::{fedadam, fedavg, AggregationError, ClientUpdate, FedAdamHyper, ServerOptState};
pub use carbon::{
    classify_intensity, round_energy, CarbonModel, EmissionLedger, EnergyModel, IntensityClass,
    IntensityThresholds,
};
pub use data::{dirichlet_partition, parse_idx, synthetic_classification, Dataset, Partition};
pub use fleet::{sample_fleet, simulated_round_time, Fleet, FleetRanges, ResourceProvider};
pub use harness::{
    run_experiment, run_matrix, ExperimentConfig, RoundMetrics, RunReport, Scheduler, Strategy,
};
pub use learning::{
    adaptive_mu, evaluate, init_model, local_train, loss_and_grad, Arch, EvalReport, ModelParams,
    TrainConfig,
};
pub use orchestrator::{
    corrected_q, encode_state, priority, reward, ExplorationSchedule, OrchestratorState, QTable,
};
pub use privacy::{clip_delta, gaussian_sigma, mask, unmask_sum, DpConfig, MaskSeedMatrix};
