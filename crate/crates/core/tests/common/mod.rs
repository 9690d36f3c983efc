#![allow(dead_code)]

use std::path::PathBuf;

use greenfed::harness::{DatasetKind, SyntheticConfig};
use greenfed::orchestrator::{select_top_k, OrchestratorState, QTable};
use greenfed::{ExperimentConfig, ExplorationSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `$MNIST_DIR`, or `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn small_synthetic() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetKind::Synthetic,
        synthetic: SyntheticConfig {
            n_train: 1200,
            n_test: 400,
            n_features: 12,
            n_classes: 4,
            class_sep: 4.0,
        },
        n_clients: 12,
        clients_per_round: 4,
        rounds: 8,
        local_epochs: 2,
        ..ExperimentConfig::default()
    }
}

/// Two arms in a single state, reward 1.0 for arm 1 and 0.0 for arm 0, one
/// arm per round under the default schedule. Returns the greedy choice after
/// `rounds` rounds.
pub fn bandit_greedy_arm(seed: u64, rounds: usize) -> usize {
    let state = OrchestratorState::from_index(0).unwrap();
    let mut q = QTable::new(2, 0.1, 0.9).unwrap();
    let mut schedule = ExplorationSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..rounds {
        let arm = select_top_k(q.row(state), 1, schedule.epsilon, &mut rng).unwrap()[0];
        let r = if arm == 1 { 1.0 } else { 0.0 };
        q.update(state, &[arm], r, state).unwrap();
        schedule.decay();
    }
    select_top_k(q.row(state), 1, 0.0, &mut rng).unwrap()[0]
}

/// Largest relative error between analytic and central-difference gradients
/// over random coordinates and points.
pub fn gradient_check(arch: greenfed::Arch, prox_mu: f64, points: usize, coords: usize, seed: u64) -> f64 {
    use greenfed::{loss_and_grad, synthetic_classification, ModelParams};
    use rand::Rng;

    let data = synthetic_classification(64, arch.inputs(), arch.classes(), 3.0, seed).unwrap();
    let batch: Vec<usize> = (0..16).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let n = arch.param_count();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        let anchor: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        let params = ModelParams::new(arch, w.clone()).unwrap();
        let anchor = ModelParams::new(arch, anchor).unwrap();
        let (_, grad) = loss_and_grad(&params, &data, &batch, &anchor, prox_mu).unwrap();
        for _ in 0..coords {
            let c = rng.random_range(0..n);
            let mut plus = w.clone();
            plus[c] += h;
            let mut minus = w.clone();
            minus[c] -= h;
            let f = |v: Vec<f64>| loss_and_grad(&ModelParams::new(arch, v).unwrap(), &data, &batch, &anchor, prox_mu).unwrap().0;
            let numeric = (f(plus) - f(minus)) / (2.0 * h);
            let scale = grad[c].abs().max(numeric.abs());
            let err = if scale == 0.0 { 0.0 } else { (grad[c] - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}
