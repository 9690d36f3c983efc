//! The round loop, the variant matrix and report export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregation::{fedadam, fedadam_step, fedavg, AggregationError, ClientUpdate, FedAdamHyper, ServerOptState};
use crate::carbon::{classify_intensity, round_energy, CarbonError, CarbonModel, EmissionLedger, EnergyModel, IntensityThresholds};
use crate::data::{dirichlet_partition, load_mnist, synthetic_classification, DataError, Dataset, MnistPaths, Partition, PartitionError};
use crate::fleet::{sample_fleet, Fleet, FleetError, FleetRanges, TimeCoefficients};
use crate::learning::{adaptive_mu, evaluate, init_model, local_train, Arch, LearningError, ModelParams, TrainConfig};
use crate::orchestrator::{
    corrected_q, encode_state, priority, reward, select_clients, select_top_k, ExplorationSchedule,
    GreenCorrectionParams, OrchestratorError, QTable, RewardWeights, DEFAULT_PRIORITY_THRESHOLD,
    DEFAULT_VELOCITY_THRESHOLD,
};
use crate::privacy::{add_noise, clip_delta, gaussian_sigma, mask, unmask_sum, Calibration, DpConfig, MaskSeedMatrix, PrivacyError};
use crate::rng::{derive_seed, stream, stream_rng};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Carbon(#[from] CarbonError),
    #[error("round {round}: {source}")]
    Learning { round: usize, source: LearningError },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("round {round}: {source}")]
    Privacy { round: usize, source: PrivacyError },
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("run '{label}' failed: {source}")]
    Run { label: String, source: Box<HarnessError> },
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("imported report is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    Fedprox,
    Fedadam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Q-learning with the green correction and carbon-normalised priority.
    RlGreen,
    /// Q-learning on raw Q-values.
    RlOnly,
    /// Priority ranking with Q ≡ 1, no learning.
    GreenOnly,
    /// Uniform k-subset.
    Random,
}

impl Scheduler {
    pub fn label(self) -> &'static str {
        match self {
            Self::RlGreen => "rl_green",
            Self::RlOnly => "rl_only",
            Self::GreenOnly => "green_only",
            Self::Random => "random",
        }
    }

    fn learns(self) -> bool {
        matches!(self, Self::RlGreen | Self::RlOnly)
    }
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Self::Fedavg => "fedavg",
            Self::Fedprox => "fedprox",
            Self::Fedadam => "fedadam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub class_sep: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_test: 1000,
            n_features: 20,
            n_classes: 4,
            class_sep: 3.0,
        }
    }
}

fn default_dp() -> DpConfig {
    DpConfig {
        calibration: Calibration::Relaxed,
        ..DpConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    pub mnist_dir: PathBuf,
    pub synthetic: SyntheticConfig,
    pub arch: ArchKind,
    pub mlp_hidden: usize,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// `None` picks 0.05 for logreg and 0.01 for the MLP.
    pub learning_rate: Option<f64>,
    pub dirichlet_alpha: f64,
    pub strategy: Strategy,
    pub scheduler: Scheduler,
    /// Per-slot exploration probability for the green-only scheduler.
    pub green_only_exploration: f64,
    pub privacy_enabled: bool,
    pub master_seed: u64,
    /// Parallel client training within a round. Results do not depend on it.
    pub parallel: bool,
    pub start_hour: f64,
    pub round_hours: f64,
    pub carbon: CarbonModel,
    pub thresholds: IntensityThresholds,
    pub energy: EnergyModel,
    pub time: TimeCoefficients,
    pub fleet: FleetRanges,
    pub dp: DpConfig,
    pub reward: RewardWeights,
    pub correction: GreenCorrectionParams,
    pub exploration: ExplorationSchedule,
    pub q_learning_rate: f64,
    pub q_discount: f64,
    pub velocity_threshold: f64,
    pub priority_threshold: f64,
    pub mu_base: f64,
    pub fedadam: FedAdamHyper,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            synthetic: SyntheticConfig::default(),
            arch: ArchKind::Logreg,
            mlp_hidden: 64,
            n_clients: 50,
            clients_per_round: 10,
            rounds: 100,
            local_epochs: 5,
            batch_size: 32,
            learning_rate: None,
            dirichlet_alpha: 0.5,
            strategy: Strategy::Fedavg,
            scheduler: Scheduler::RlGreen,
            green_only_exploration: 0.0,
            privacy_enabled: false,
            master_seed: 0,
            parallel: true,
            start_hour: 0.0,
            round_hours: 0.5,
            carbon: CarbonModel::default(),
            thresholds: IntensityThresholds::default(),
            energy: EnergyModel::default(),
            time: TimeCoefficients::default(),
            fleet: FleetRanges::default(),
            dp: default_dp(),
            reward: RewardWeights::default(),
            correction: GreenCorrectionParams::default(),
            exploration: ExplorationSchedule::default(),
            q_learning_rate: 0.1,
            q_discount: 0.9,
            velocity_threshold: DEFAULT_VELOCITY_THRESHOLD,
            priority_threshold: DEFAULT_PRIORITY_THRESHOLD,
            mu_base: 0.01,
            fedadam: FedAdamHyper::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_clients < 2 {
            return bad(format!("n_clients {} < 2", self.n_clients));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return bad(format!(
                "clients_per_round {} must be in 1..={}",
                self.clients_per_round, self.n_clients
            ));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.round_hours >= 0.0 && self.round_hours.is_finite() && self.start_hour.is_finite()) {
            return bad(format!("round_hours {}", self.round_hours));
        }
        if !(0.0..=1.0).contains(&self.green_only_exploration) {
            return bad(format!("green_only_exploration {}", self.green_only_exploration));
        }
        if !(self.priority_threshold > 0.0) {
            return bad(format!("priority_threshold {}", self.priority_threshold));
        }
        if !(self.velocity_threshold >= 0.0) {
            return bad(format!("velocity_threshold {}", self.velocity_threshold));
        }
        if !(self.mu_base >= 0.0 && self.mu_base.is_finite()) {
            return bad(format!("mu_base {}", self.mu_base));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return bad(format!("dirichlet_alpha {}", self.dirichlet_alpha));
        }
        if self.arch == ArchKind::Mlp && self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        if ![self.reward.alpha, self.reward.beta, self.reward.gamma].iter().all(|w| w.is_finite()) {
            return bad("reward weights must be finite".into());
        }
        self.carbon.validate()?;
        self.thresholds.validate()?;
        self.energy.validate()?;
        self.fleet.validate()?;
        self.correction.validate()?;
        self.exploration.validate()?;
        QTable::new(self.n_clients, self.q_learning_rate, self.q_discount)?;
        self.train_config(0.0, 0).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.privacy_enabled {
            gaussian_sigma(&self.dp).map_err(|source| HarnessError::Privacy { round: 0, source })?;
        }
        Ok(())
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.arch {
            ArchKind::Logreg => 0.05,
            ArchKind::Mlp => 0.01,
        })
    }

    fn model_arch(&self, inputs: usize, classes: usize) -> Arch {
        match self.arch {
            ArchKind::Logreg => Arch::logreg(inputs, classes),
            ArchKind::Mlp => Arch::mlp(inputs, self.mlp_hidden, classes),
        }
    }

    fn train_config(&self, prox_mu: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.effective_learning_rate(),
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            prox_mu,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Short `scheduler/strategy[+dp]` label.
    pub fn label(&self) -> String {
        let mut s = format!("{}/{}", self.scheduler.label(), self.strategy.label());
        if self.privacy_enabled {
            s.push_str("+dp");
        }
        s
    }

    fn data_key(&self) -> String {
        let key = (self.dataset, &self.mnist_dir, &self.synthetic, self.master_seed);
        match self.dataset {
            DatasetKind::Mnist => format!("mnist:{}", self.mnist_dir.display()),
            DatasetKind::Synthetic => serde_json::to_string(&key).expect("key serialises"),
        }
    }
}

/// Loads the (train, test) sets a config asks for.
pub fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset), HarnessError> {
    match config.dataset {
        DatasetKind::Mnist => Ok(load_mnist(&MnistPaths::in_dir(&config.mnist_dir))?),
        DatasetKind::Synthetic => {
            let s = &config.synthetic;
            let all = synthetic_classification(
                s.n_train + s.n_test,
                s.n_features,
                s.n_classes,
                s.class_sep,
                config.master_seed,
            )?;
            Ok(all.split_at(s.n_train))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub test_accuracy: f64,
    pub round_emissions_g: f64,
    pub cumulative_emissions_g: f64,
    pub simulated_round_time_s: f64,
    pub bytes_exchanged: u64,
    /// Exploration probability used for this round's selection.
    pub epsilon: f64,
    pub reward: f64,
    pub selected_ids: Vec<usize>,
    pub intensity_g_per_kwh: f64,
    pub energy_kwh: f64,
}

pub const METRICS_CSV_HEADER: &str = "round,test_accuracy,round_emissions_g,cumulative_emissions_g,simulated_round_time_s,bytes_exchanged,epsilon,reward,selected_ids,intensity_g_per_kwh,energy_kwh";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub initial_accuracy: f64,
    pub rounds: Vec<RoundMetrics>,
    pub final_accuracy: f64,
    pub cumulative_co2_g: f64,
    pub mean_round_co2_g: f64,
    pub mean_round_time_s: f64,
    pub total_communication_mb: f64,
    pub model_size_mb: f64,
    /// Final Q-table for the learning schedulers.
    pub q_table: Option<QTable>,
}

struct Aggregates {
    final_accuracy: f64,
    cumulative_co2_g: f64,
    mean_round_co2_g: f64,
    mean_round_time_s: f64,
    total_communication_mb: f64,
}

fn aggregates(initial_accuracy: f64, rounds: &[RoundMetrics]) -> Aggregates {
    let n = rounds.len().max(1) as f64;
    let cumulative = rounds.last().map_or(0.0, |r| r.cumulative_emissions_g);
    Aggregates {
        final_accuracy: rounds.last().map_or(initial_accuracy, |r| r.test_accuracy),
        cumulative_co2_g: cumulative,
        mean_round_co2_g: cumulative / n,
        mean_round_time_s: rounds.iter().map(|r| r.simulated_round_time_s).sum::<f64>() / n,
        total_communication_mb: rounds.iter().map(|r| r.bytes_exchanged).sum::<u64>() as f64 / 1e6,
    }
}

impl RunReport {
    fn from_rounds(
        config: ExperimentConfig,
        initial_accuracy: f64,
        rounds: Vec<RoundMetrics>,
        model_size_mb: f64,
        q_table: Option<QTable>,
    ) -> Self {
        let a = aggregates(initial_accuracy, &rounds);
        Self {
            config_hash: config.hash(),
            config,
            initial_accuracy,
            rounds,
            final_accuracy: a.final_accuracy,
            cumulative_co2_g: a.cumulative_co2_g,
            mean_round_co2_g: a.mean_round_co2_g,
            mean_round_time_s: a.mean_round_time_s,
            total_communication_mb: a.total_communication_mb,
            model_size_mb,
            q_table,
        }
    }

    /// Checks the stored aggregates and hash against recomputation.
    pub fn check_consistency(&self) -> Result<(), HarnessError> {
        let a = aggregates(self.initial_accuracy, &self.rounds);
        let pairs = [
            ("final_accuracy", a.final_accuracy, self.final_accuracy),
            ("cumulative_co2_g", a.cumulative_co2_g, self.cumulative_co2_g),
            ("mean_round_co2_g", a.mean_round_co2_g, self.mean_round_co2_g),
            ("mean_round_time_s", a.mean_round_time_s, self.mean_round_time_s),
            ("total_communication_mb", a.total_communication_mb, self.total_communication_mb),
        ];
        for (name, recomputed, stored) in pairs {
            if recomputed.to_bits() != stored.to_bits() {
                return Err(HarnessError::Inconsistent(format!("{name}: stored {stored}, recomputed {recomputed}")));
            }
        }
        if self.config.hash() != self.config_hash {
            return Err(HarnessError::Inconsistent("config hash does not match config".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let report: Self = serde_json::from_str(text)?;
        report.check_consistency()?;
        Ok(report)
    }

    /// One line per round under [`METRICS_CSV_HEADER`]; selected ids are
    /// `;`-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.rounds {
            let ids: Vec<String> = r.selected_ids.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.test_accuracy,
                r.round_emissions_g,
                r.cumulative_emissions_g,
                r.simulated_round_time_s,
                r.bytes_exchanged,
                r.epsilon,
                r.reward,
                ids.join(";"),
                r.intensity_g_per_kwh,
                r.energy_kwh
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

pub fn export_report(report: &RunReport, format: ExportFormat, path: &Path) -> Result<(), HarnessError> {
    let body = match format {
        ExportFormat::Csv => report.to_csv(),
        ExportFormat::Json => report.to_json(),
    };
    fs::write(path, body).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn import_report(path: &Path) -> Result<RunReport, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunReport::from_json(&text)
}

/// Everything fixed at round 0: data split, fleet and initial model.
pub struct Setup {
    pub partition: Partition,
    pub fleet: Fleet,
    pub initial_model: ModelParams,
}

pub fn setup(config: &ExperimentConfig, train: &Dataset) -> Result<Setup, HarnessError> {
    let seed = config.master_seed;
    let partition = dirichlet_partition(
        train.labels(),
        config.n_clients,
        config.dirichlet_alpha,
        derive_seed(seed, stream::PARTITION, 0, 0),
    )?;
    let fleet = sample_fleet(config.n_clients, &config.fleet, derive_seed(seed, stream::FLEET, 0, 0))?;
    let arch = config.model_arch(train.n_features(), train.n_classes());
    let initial_model =
        init_model(arch, derive_seed(seed, stream::INIT, 0, 0)).map_err(|source| HarnessError::Learning { round: 0, source })?;
    Ok(Setup {
        partition,
        fleet,
        initial_model,
    })
}

/// Loads the configured dataset and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let (train, test) = load_data(config)?;
    run_experiment_with_data(config, &train, &test)
}

/// Runs the experiment on already loaded data.
pub fn run_experiment_with_data(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let Setup {
        partition,
        fleet,
        initial_model,
    } = setup(config, train)?;
    let seed = config.master_seed;
    let k = config.clients_per_round;
    let model_size_mb = initial_model.size_mb();
    let encoded_bytes = initial_model.encoded_len() as u64;
    let sizes = partition.sizes();

    let client_energy = fleet
        .providers()
        .iter()
        .map(|p| round_energy(p, sizes[p.id], config.local_epochs, model_size_mb, &config.energy))
        .collect::<Result<Vec<f64>, _>>()?;
    // expected round energy of a uniformly random k-subset
    let baseline_energy = k as f64 * client_energy.iter().sum::<f64>() / fleet.len() as f64;

    let intensities = config
        .carbon
        .series(config.start_hour, config.round_hours, config.rounds + 1, seed);
    let sigma = if config.privacy_enabled {
        gaussian_sigma(&config.dp).map_err(|source| HarnessError::Privacy { round: 0, source })?
    } else {
        0.0
    };

    let learn = |round: usize, e: LearningError| HarnessError::Learning { round, source: e };
    let initial_accuracy = evaluate(&initial_model, test).map_err(|e| learn(0, e))?.accuracy;

    let mut global = initial_model;
    let mut opt_state = ServerOptState::new(global.param_count());
    let mut qtable = QTable::new(fleet.len(), config.q_learning_rate, config.q_discount)?;
    let mut schedule = config.exploration;
    let mut ledger = EmissionLedger::new();
    let mut history = vec![initial_accuracy];
    let mut state = encode_state(
        classify_intensity(intensities[0], &config.thresholds),
        &history,
        config.velocity_threshold,
    );
    let mut rounds = Vec::with_capacity(config.rounds);

    for r in 0..config.rounds {
        let round = r + 1;
        let intensity = intensities[r];
        let mut select_rng = stream_rng(seed, stream::SELECT, round as u64, 0);
        let epsilon = match config.scheduler {
            Scheduler::RlGreen | Scheduler::RlOnly => schedule.epsilon,
            Scheduler::GreenOnly => config.green_only_exploration,
            Scheduler::Random => 1.0,
        };
        let selected = match config.scheduler {
            Scheduler::RlGreen => select_clients(
                state,
                &fleet,
                k,
                &schedule,
                intensity,
                &qtable,
                &config.correction,
                config.priority_threshold,
                &mut select_rng,
            )?,
            Scheduler::RlOnly => select_top_k(qtable.row(state), k, schedule.epsilon, &mut select_rng)?,
            Scheduler::GreenOnly => {
                let scores = fleet
                    .providers()
                    .iter()
                    .map(|p| {
                        corrected_q(1.0, p.compute, fleet.compute_std(), intensity, &config.correction)
                            .map(|q| priority(q, intensity, config.priority_threshold))
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                select_top_k(&scores, k, config.green_only_exploration, &mut select_rng)?
            }
            Scheduler::Random => {
                let mut ids = index::sample(&mut select_rng, fleet.len(), k).into_vec();
                ids.sort_unstable();
                ids
            }
        };

        let train_one = |&id: &usize| -> Result<ClientUpdate, LearningError> {
            let mu = match config.strategy {
                Strategy::Fedprox => adaptive_mu(config.mu_base, fleet.providers()[id].compute),
                _ => 0.0,
            };
            let tc = config.train_config(mu, derive_seed(seed, stream::TRAIN, round as u64, id as u64));
            let outcome = local_train(&global, train, partition.client(id), &tc)?;
            Ok(ClientUpdate {
                client_id: id,
                params: outcome.params,
                n_samples: sizes[id],
            })
        };
        let updates: Vec<ClientUpdate> = if config.parallel {
            selected.par_iter().map(train_one).collect::<Result<_, _>>()
        } else {
            selected.iter().map(train_one).collect::<Result<_, _>>()
        }
        .map_err(|e| learn(round, e))?;

        global = if config.privacy_enabled {
            let delta = private_mean_delta(&global, &updates, &config.dp, sigma, seed, round, config.parallel)?;
            match config.strategy {
                Strategy::Fedadam => {
                    let (w, s) = fedadam_step(&global, &delta, &opt_state, &config.fedadam)?;
                    opt_state = s;
                    w
                }
                _ => {
                    let values = global.values().iter().zip(&delta).map(|(g, d)| g + d).collect();
                    ModelParams::new(global.arch(), values).map_err(|e| learn(round, e))?
                }
            }
        } else {
            match config.strategy {
                Strategy::Fedadam => {
                    let (w, s) = fedadam(&updates, &global, &opt_state, &config.fedadam)?;
                    opt_state = s;
                    w
                }
                _ => fedavg(&updates)?,
            }
        };

        let accuracy = evaluate(&global, test).map_err(|e| learn(round, e))?.accuracy;
        let energy: f64 = selected.iter().map(|&id| client_energy[id]).sum();
        let entry = ledger.record_round(round, energy, intensity)?.clone();
        let time = fleet.round_time(&selected, |id| sizes[id], config.local_epochs, model_size_mb, &config.time)?;

        let efficiency_delta = (baseline_energy - energy) / baseline_energy;
        let emission_norm = entry.emissions_g / (baseline_energy * config.correction.i_avg);
        let round_reward = reward(
            accuracy - history[history.len() - 1],
            efficiency_delta,
            emission_norm,
            &config.reward,
        );
        history.push(accuracy);
        let next_state = encode_state(
            classify_intensity(intensities[r + 1], &config.thresholds),
            &history,
            config.velocity_threshold,
        );
        if config.scheduler.learns() {
            qtable.update(state, &selected, round_reward, next_state)?;
            schedule.decay();
        }
        state = next_state;

        rounds.push(RoundMetrics {
            round,
            test_accuracy: accuracy,
            round_emissions_g: entry.emissions_g,
            cumulative_emissions_g: entry.cumulative_g,
            simulated_round_time_s: time,
            bytes_exchanged: 2 * k as u64 * encoded_bytes,
            epsilon,
            reward: round_reward,
            selected_ids: selected,
            intensity_g_per_kwh: intensity,
            energy_kwh: energy,
        });
    }

    let q_table = config.scheduler.learns().then_some(qtable);
    Ok(RunReport::from_rounds(
        config.clone(),
        initial_accuracy,
        rounds,
        model_size_mb,
        q_table,
    ))
}

/// Clip → noise → weight → mask on every client, then the server's unmasked
/// sum, which is the sample-weighted mean of the privatised deltas. Client
/// `i`'s noise comes from stream `(DP_NOISE, round, i)` of `master_seed`.
pub fn private_mean_delta(
    global: &ModelParams,
    updates: &[ClientUpdate],
    dp: &DpConfig,
    sigma: f64,
    master_seed: u64,
    round: usize,
    parallel: bool,
) -> Result<Vec<f64>, HarnessError> {
    let seed = master_seed;
    let privacy = |source| HarnessError::Privacy { round, source };
    let participants: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    let seeds = MaskSeedMatrix::deal(&participants, &mut stream_rng(seed, stream::MASK_SEEDS, round as u64, 0));
    let mask_one = |u: &ClientUpdate| -> Result<(usize, Vec<f64>), PrivacyError> {
        let delta: Vec<f64> = u.params.values().iter().zip(global.values()).map(|(w, g)| w - g).collect();
        let clipped = clip_delta(&delta, dp.clip_norm);
        let mut rng = stream_rng(seed, stream::DP_NOISE, round as u64, u.client_id as u64);
        let noisy = add_noise(&clipped, sigma, &mut rng);
        let weight = u.n_samples as f64 / total as f64;
        let weighted: Vec<f64> = noisy.iter().map(|x| x * weight).collect();
        Ok((u.client_id, mask(&weighted, u.client_id, &participants, &seeds, dp.mask_scale())?))
    };
    let masked: Vec<(usize, Vec<f64>)> = if parallel {
        updates.par_iter().map(mask_one).collect::<Result<_, _>>()
    } else {
        updates.iter().map(mask_one).collect::<Result<_, _>>()
    }
    .map_err(privacy)?;
    unmask_sum(&masked, &participants).map_err(privacy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    pub config_hash: String,
    pub accuracy: f64,
    pub co2_per_round_g: f64,
    pub time_per_round_s: f64,
    pub cumulative_co2_g: f64,
}

impl MatrixRow {
    fn from_report(label: String, r: &RunReport) -> Self {
        Self {
            label,
            config_hash: r.config_hash.clone(),
            accuracy: r.final_accuracy,
            co2_per_round_g: r.mean_round_co2_g,
            time_per_round_s: r.mean_round_time_s,
            cumulative_co2_g: r.cumulative_co2_g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// Sorted by descending accuracy.
    pub rows: Vec<MatrixRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,accuracy,co2_g_per_round,time_s_per_round,cumulative_co2_g\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.label, r.accuracy, r.co2_per_round_g, r.time_per_round_s, r.cumulative_co2_g
            );
        }
        out
    }

    /// Fixed-width text table for terminals.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<24} {:>9} {:>14} {:>13} {:>16}\n",
            "variant", "accuracy", "CO2 g/round", "time s/round", "cumulative CO2 g"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>8.2}% {:>14.2} {:>13.2} {:>16.1}",
                r.label,
                100.0 * r.accuracy,
                r.co2_per_round_g,
                r.time_per_round_s,
                r.cumulative_co2_g
            );
        }
        out
    }
}

/// Runs every config (sharing loaded datasets) and returns the reports in
/// input order plus the accuracy-sorted comparison table.
pub fn run_matrix(configs: &[ExperimentConfig]) -> Result<(Vec<RunReport>, ComparisonTable), HarnessError> {
    if configs.is_empty() {
        return Err(HarnessError::Config("empty matrix".into()));
    }
    let mut cache: BTreeMap<String, (Dataset, Dataset)> = BTreeMap::new();
    let mut reports = Vec::with_capacity(configs.len());
    for config in configs {
        let wrap = |e: HarnessError| HarnessError::Run {
            label: config.label(),
            source: Box::new(e),
        };
        config.validate().map_err(wrap)?;
        let key = config.data_key();
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), load_data(config).map_err(wrap)?);
        }
        let (train, test) = &cache[&key];
        reports.push(run_experiment_with_data(config, train, test).map_err(wrap)?);
    }
    let mut rows: Vec<MatrixRow> = reports
        .iter()
        .map(|r| MatrixRow::from_report(r.config.label(), r))
        .collect();
    rows.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then_with(|| a.label.cmp(&b.label)));
    Ok((reports, ComparisonTable { rows }))
}

/// The six comparison variants: the three schedulers under FedAvg plus
/// random selection under each aggregation strategy.
pub fn default_matrix(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let variant = |scheduler, strategy| ExperimentConfig {
        scheduler,
        strategy,
        ..base.clone()
    };
    vec![
        variant(Scheduler::RlGreen, Strategy::Fedavg),
        variant(Scheduler::RlOnly, Strategy::Fedavg),
        variant(Scheduler::GreenOnly, Strategy::Fedavg),
        variant(Scheduler::Random, Strategy::Fedavg),
        variant(Scheduler::Random, Strategy::Fedprox),
        variant(Scheduler::Random, Strategy::Fedadam),
    ]
}
