//! Per-class Dirichlet non-IID partitioning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::rng::{stream, stream_rng};

const MAX_RESAMPLES: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("dirichlet concentration must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("need at least one client")]
    NoClients,
    #[error("{n_samples} samples cannot give each of {n_clients} clients a non-empty shard")]
    Unsatisfiable { n_samples: usize, n_clients: usize },
    #[error("partition invalid: {0}")]
    Invalid(String),
    #[error("partition json: {0}")]
    Json(String),
}

/// Client → sample-index assignment. Each list is sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.assignments[id]
    }

    /// Checks disjointness, exact coverage of `0..n_samples` and non-empty
    /// shards.
    pub fn validate(&self, n_samples: usize) -> Result<(), PartitionError> {
        let mut owner = vec![usize::MAX; n_samples];
        for (client, idxs) in self.assignments.iter().enumerate() {
            if idxs.is_empty() {
                return Err(PartitionError::Invalid(format!("client {client} is empty")));
            }
            for &i in idxs {
                if i >= n_samples {
                    return Err(PartitionError::Invalid(format!("index {i} out of range")));
                }
                if owner[i] != usize::MAX {
                    return Err(PartitionError::Invalid(format!(
                        "index {i} owned by clients {} and {client}",
                        owner[i]
                    )));
                }
                owner[i] = client;
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(PartitionError::Invalid(format!("index {i} unassigned")));
        }
        Ok(())
    }

    /// `{"0": [...], "1": [...], ...}` in client order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index lists serialize")
    }

    pub fn from_json(text: &str, alpha: f64) -> Result<Self, PartitionError> {
        let raw: BTreeMap<String, Vec<usize>> =
            serde_json::from_str(text).map_err(|e| PartitionError::Json(e.to_string()))?;
        let mut keyed = BTreeMap::new();
        for (k, v) in raw {
            let id: usize = k
                .parse()
                .map_err(|_| PartitionError::Json(format!("client id {k:?} is not an integer")))?;
            keyed.insert(id, v);
        }
        if keyed.keys().copied().ne(0..keyed.len()) {
            return Err(PartitionError::Json("client ids must be 0..n-1".into()));
        }
        Ok(Self {
            assignments: keyed.into_values().collect(),
            alpha,
        })
    }
}

impl Serialize for Partition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.assignments.len()))?;
        for (id, idxs) in self.assignments.iter().enumerate() {
            map.serialize_entry(&id.to_string(), idxs)?;
        }
        map.end()
    }
}

fn dirichlet(rng: &mut impl Rng, gamma: &Gamma<f64>, k: usize) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // very small alpha can underflow every draw to zero
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Splits `indices` into `props.len()` consecutive runs with sizes
/// `floor(cumsum(p) * n)` differences; the last client takes the remainder.
fn split_by_proportions(indices: &[usize], props: &[f64]) -> Vec<Vec<usize>> {
    let n = indices.len();
    let mut out = Vec::with_capacity(props.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (j, p) in props.iter().enumerate() {
        let end = if j + 1 == props.len() {
            n
        } else {
            cum += p;
            ((cum * n as f64).floor() as usize).clamp(start, n)
        };
        out.push(indices[start..end].to_vec());
        start = end;
    }
    out
}

fn empty_clients(per_class: &[Vec<Vec<usize>>], n_clients: usize) -> usize {
    (0..n_clients)
        .filter(|&c| per_class.iter().all(|split| split[c].is_empty()))
        .count()
}

/// Splits each class's samples across `n_clients` with proportions drawn
/// from Dirichlet(alpha · 1).
///
/// If some client ends up empty, the proportion vector of the largest class
/// is redrawn up to 10 times (a redraw is kept only if it reduces the number
/// of empty clients). Remaining empty clients then receive one sample each
/// from the currently largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition, PartitionError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(PartitionError::InvalidAlpha(alpha));
    }
    if n_clients == 0 {
        return Err(PartitionError::NoClients);
    }
    if labels.len() < n_clients {
        return Err(PartitionError::Unsatisfiable {
            n_samples: labels.len(),
            n_clients,
        });
    }
    if n_clients == 1 {
        return Ok(Partition {
            assignments: vec![(0..labels.len()).collect()],
            alpha,
        });
    }

    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut rng = stream_rng(seed, stream::PARTITION, n_clients as u64, 0);
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| PartitionError::InvalidAlpha(alpha))?;

    let mut per_class = Vec::with_capacity(n_classes);
    for idxs in by_class.iter_mut() {
        idxs.shuffle(&mut rng);
        let props = dirichlet(&mut rng, &gamma, n_clients);
        per_class.push(split_by_proportions(idxs, &props));
    }

    let largest_class = (0..n_classes)
        .max_by(|&a, &b| by_class[a].len().cmp(&by_class[b].len()).then(b.cmp(&a)))
        .expect("at least one class");
    let mut empty = empty_clients(&per_class, n_clients);
    for _ in 0..MAX_RESAMPLES {
        if empty == 0 {
            break;
        }
        let props = dirichlet(&mut rng, &gamma, n_clients);
        let candidate = split_by_proportions(&by_class[largest_class], &props);
        let previous = std::mem::replace(&mut per_class[largest_class], candidate);
        let now = empty_clients(&per_class, n_clients);
        if now < empty {
            empty = now;
        } else {
            per_class[largest_class] = previous;
        }
    }

    let mut assignments: Vec<Vec<usize>> = (0..n_clients)
        .map(|c| {
            let mut v: Vec<usize> = per_class.iter().flat_map(|split| split[c].iter().copied()).collect();
            v.sort_unstable();
            v
        })
        .collect();

    while let Some(target) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..n_clients)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("n_clients > 0");
        if assignments[donor].len() <= 1 {
            return Err(PartitionError::Unsatisfiable {
                n_samples: labels.len(),
                n_clients,
            });
        }
        let moved = assignments[donor].pop().expect("donor non-empty");
        assignments[target].push(moved);
    }

    Ok(Partition { assignments, alpha })
}
