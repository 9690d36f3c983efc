//! Flat-vector models, proximal mini-batch SGD and evaluation.
//!
//! Parameters live in one contiguous `Vec<f64>` so aggregation, clipping
//! and masking can treat every architecture the same way. Layout per dense
//! layer is the row-major weight matrix (`outputs × inputs`) followed by the
//! bias vector.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::rng::{stream, stream_rng};

#[derive(Debug, Error, PartialEq)]
pub enum LearningError {
    #[error("architecture has a zero-sized layer: {0}")]
    ZeroSizedLayer(Arch),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("non-finite parameter values")]
    NonFinite,
    #[error("bad parameter encoding: {0}")]
    BadEncoding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Logreg {
        inputs: usize,
        classes: usize,
    },
    /// One ReLU hidden layer.
    Mlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Arch {
    pub fn logreg(inputs: usize, classes: usize) -> Self {
        Arch::Logreg { inputs, classes }
    }

    pub fn mlp(inputs: usize, hidden: usize, classes: usize) -> Self {
        Arch::Mlp {
            inputs,
            hidden,
            classes,
        }
    }

    pub fn inputs(&self) -> usize {
        match *self {
            Arch::Logreg { inputs, .. } | Arch::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::Logreg { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Arch::Logreg { inputs, classes } => inputs * classes + classes,
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => inputs * hidden + hidden + hidden * classes + classes,
        }
    }

    fn validate(&self) -> Result<(), LearningError> {
        let zero = match *self {
            Arch::Logreg { inputs, classes } => inputs == 0 || classes == 0,
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => inputs == 0 || hidden == 0 || classes == 0,
        };
        if zero {
            Err(LearningError::ZeroSizedLayer(*self))
        } else {
            Ok(())
        }
    }

    /// Dense layers as (inputs, outputs).
    fn layers(&self) -> Vec<(usize, usize)> {
        match *self {
            Arch::Logreg { inputs, classes } => vec![(inputs, classes)],
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => vec![(inputs, hidden), (hidden, classes)],
        }
    }

    /// One-line text descriptor used as the serialization header.
    pub fn descriptor(&self) -> String {
        self.to_string()
    }

    pub fn parse_descriptor(line: &str) -> Result<Self, LearningError> {
        let bad = || LearningError::BadEncoding(format!("arch descriptor {line:?}"));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let arch = match parts.as_slice() {
            ["logreg", i, c] => Arch::logreg(num(i)?, num(c)?),
            ["mlp", i, h, c, "relu"] => Arch::mlp(num(i)?, num(h)?, num(c)?),
            _ => return Err(bad()),
        };
        arch.validate()?;
        Ok(arch)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Arch::Logreg { inputs, classes } => write!(f, "logreg {inputs} {classes}"),
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => write!(f, "mlp {inputs} {hidden} {classes} relu"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Arch,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: Arch, values: Vec<f64>) -> Result<Self, LearningError> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(LearningError::ShapeMismatch(format!(
                "{} values for {} ({} params)",
                values.len(),
                arch,
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LearningError::NonFinite);
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Arch) -> Result<Self, LearningError> {
        Self::new(arch, vec![0.0; arch.param_count()])
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Descriptor line, `\n`, then little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.arch.descriptor().into_bytes();
        out.push(b'\n');
        out.reserve(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LearningError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| LearningError::BadEncoding("missing descriptor line".into()))?;
        let line = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| LearningError::BadEncoding("descriptor is not utf-8".into()))?;
        let arch = Arch::parse_descriptor(line)?;
        let body = &bytes[nl + 1..];
        if body.len() != arch.param_count() * 8 {
            return Err(LearningError::BadEncoding(format!(
                "{} payload bytes for {} params",
                body.len(),
                arch.param_count()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(arch, values)
    }

    /// Size of the serialized encoding in bytes.
    pub fn encoded_len(&self) -> usize {
        encoded_len(&self.arch)
    }

    /// Size of the serialized encoding in MB (10⁶ bytes).
    pub fn size_mb(&self) -> f64 {
        self.encoded_len() as f64 / 1e6
    }

    fn check_same_arch(&self, other: &ModelParams) -> Result<(), LearningError> {
        if self.arch == other.arch {
            Ok(())
        } else {
            Err(LearningError::ShapeMismatch(format!(
                "{} vs {}",
                self.arch, other.arch
            )))
        }
    }
}

pub fn encoded_len(arch: &Arch) -> usize {
    arch.descriptor().len() + 1 + arch.param_count() * 8
}

/// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
pub fn init_model(arch: Arch, seed: u64) -> Result<ModelParams, LearningError> {
    arch.validate()?;
    let mut rng = stream_rng(seed, stream::INIT, arch.param_count() as u64, 0);
    let mut values = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layers() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ModelParams::new(arch, values)
}

/// μᵢ = max(0, μ_base · (2 − Cᵢ)).
pub fn adaptive_mu(mu_base: f64, compute: f64) -> f64 {
    (mu_base * (2.0 - compute)).max(0.0)
}

/// Scratch buffers for one forward/backward pass.
struct Scratch {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Scratch {
    fn new(arch: &Arch) -> Self {
        let h = match *arch {
            Arch::Mlp { hidden, .. } => hidden,
            Arch::Logreg { .. } => 0,
        };
        let c = arch.classes();
        Self {
            hidden_pre: vec![0.0; h],
            hidden: vec![0.0; h],
            logits: vec![0.0; c],
            dlogits: vec![0.0; c],
            dhidden: vec![0.0; h],
        }
    }
}

fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Stable `log Σ exp(z)`.
fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn forward(params: &[f64], arch: &Arch, x: &[f64], s: &mut Scratch) {
    match *arch {
        Arch::Logreg { inputs, classes } => {
            let (w, b) = params.split_at(inputs * classes);
            dense_forward(w, b, x, &mut s.logits);
        }
        Arch::Mlp {
            inputs,
            hidden,
            classes,
        } => {
            let (w1, rest) = params.split_at(inputs * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden * classes);
            dense_forward(w1, b1, x, &mut s.hidden_pre);
            for (h, p) in s.hidden.iter_mut().zip(&s.hidden_pre) {
                *h = p.max(0.0);
            }
            dense_forward(w2, b2, &s.hidden, &mut s.logits);
        }
    }
}

/// Cross-entropy of the current logits against `label`; fills `dlogits`
/// with `softmax - onehot`.
fn softmax_xent(s: &mut Scratch, label: usize) -> f64 {
    let lse = log_sum_exp(&s.logits);
    for (d, z) in s.dlogits.iter_mut().zip(&s.logits) {
        *d = (z - lse).exp();
    }
    s.dlogits[label] -= 1.0;
    lse - s.logits[label]
}

fn outer_add(grad_w: &mut [f64], grad_b: &mut [f64], delta: &[f64], x: &[f64], scale: f64) {
    let n_in = x.len();
    for ((row, gb), d) in grad_w.chunks_exact_mut(n_in).zip(grad_b.iter_mut()).zip(delta) {
        let k = d * scale;
        if k == 0.0 {
            continue;
        }
        *gb += k;
        for (g, xi) in row.iter_mut().zip(x) {
            *g += k * xi;
        }
    }
}

/// Adds `scale · ∂loss/∂params` for one sample into `grad`; returns its loss.
fn backward_one(params: &[f64], arch: &Arch, x: &[f64], label: usize, grad: &mut [f64], scale: f64, s: &mut Scratch) -> f64 {
    forward(params, arch, x, s);
    let loss = softmax_xent(s, label);
    match *arch {
        Arch::Logreg { inputs, classes } => {
            let (gw, gb) = grad.split_at_mut(inputs * classes);
            outer_add(gw, gb, &s.dlogits, x, scale);
        }
        Arch::Mlp {
            inputs,
            hidden,
            classes,
        } => {
            let w2 = &params[inputs * hidden + hidden..inputs * hidden + hidden + hidden * classes];
            let (g1, g2) = grad.split_at_mut(inputs * hidden + hidden);
            let (gw1, gb1) = g1.split_at_mut(inputs * hidden);
            let (gw2, gb2) = g2.split_at_mut(hidden * classes);
            outer_add(gw2, gb2, &s.dlogits, &s.hidden, scale);
            s.dhidden.iter_mut().for_each(|v| *v = 0.0);
            for (row, d) in w2.chunks_exact(hidden).zip(&s.dlogits) {
                for (dh, w) in s.dhidden.iter_mut().zip(row) {
                    *dh += d * w;
                }
            }
            for (dh, pre) in s.dhidden.iter_mut().zip(&s.hidden_pre) {
                if *pre <= 0.0 {
                    *dh = 0.0;
                }
            }
            outer_add(gw1, gb1, &s.dhidden, x, scale);
        }
    }
    loss
}

fn check_data(arch: &Arch, data: &Dataset) -> Result<(), LearningError> {
    if arch.inputs() != data.n_features() || arch.classes() < data.n_classes() {
        return Err(LearningError::ShapeMismatch(format!(
            "{} cannot consume {} features / {} classes",
            arch,
            data.n_features(),
            data.n_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over `batch` plus `(prox_mu / 2)·‖params − anchor‖²`,
/// and its gradient. The gradient is written into `grad`.
fn loss_and_grad_into(
    params: &[f64],
    arch: &Arch,
    data: &Dataset,
    batch: &[usize],
    anchor: &[f64],
    prox_mu: f64,
    grad: &mut [f64],
    s: &mut Scratch,
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        loss += backward_one(params, arch, data.row(i), data.label(i), grad, scale, s);
    }
    loss *= scale;
    if prox_mu != 0.0 {
        let mut sq = 0.0;
        for ((g, w), a) in grad.iter_mut().zip(params).zip(anchor) {
            let d = w - a;
            sq += d * d;
            *g += prox_mu * d;
        }
        loss += 0.5 * prox_mu * sq;
    }
    loss
}

/// Proximal mini-batch objective and gradient.
pub fn loss_and_grad(
    params: &ModelParams,
    data: &Dataset,
    batch: &[usize],
    anchor: &ModelParams,
    prox_mu: f64,
) -> Result<(f64, Vec<f64>), LearningError> {
    if batch.is_empty() {
        return Err(LearningError::EmptyBatch);
    }
    params.check_same_arch(anchor)?;
    check_data(&params.arch, data)?;
    if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(LearningError::ShapeMismatch(format!("batch index {bad} out of range")));
    }
    let mut grad = vec![0.0; params.param_count()];
    let mut s = Scratch::new(&params.arch);
    let loss = loss_and_grad_into(&params.values, &params.arch, data, batch, &anchor.values, prox_mu, &mut grad, &mut s);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Proximal weight μᵢ; 0 disables the proximal term.
    pub prox_mu: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            local_epochs: 5,
            prox_mu: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LearningError::InvalidConfig(format!(
                "learning_rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(LearningError::InvalidConfig(
                "batch_size and local_epochs must be at least 1".into(),
            ));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(LearningError::InvalidConfig(format!("prox_mu {}", self.prox_mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Full-shard objective at the starting (global) parameters.
    pub initial_loss: f64,
    /// Full-shard objective at the returned parameters.
    pub final_loss: f64,
}

/// Runs `local_epochs` of shuffled mini-batch SGD on the client's shard,
/// starting from and anchored to `global`.
pub fn local_train(
    global: &ModelParams,
    data: &Dataset,
    shard: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome, LearningError> {
    config.validate()?;
    if shard.is_empty() {
        return Err(LearningError::EmptyDataset);
    }
    check_data(&global.arch, data)?;
    let arch = global.arch;
    let anchor = global.values.as_slice();
    let mut w = global.values.clone();
    let mut grad = vec![0.0; w.len()];
    let mut s = Scratch::new(&arch);

    let initial_loss = shard_objective(&w, &arch, data, shard, anchor, config.prox_mu, &mut s);

    let mut rng = stream_rng(config.seed, stream::TRAIN, shard.len() as u64, 0);
    let mut order = shard.to_vec();
    let mut step = 0;
    for epoch in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let loss = loss_and_grad_into(&w, &arch, data, batch, anchor, config.prox_mu, &mut grad, &mut s);
            if !loss.is_finite() {
                return Err(LearningError::Diverged { epoch, step, loss });
            }
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= config.learning_rate * g;
            }
            step += 1;
        }
    }

    let final_loss = shard_objective(&w, &arch, data, shard, anchor, config.prox_mu, &mut s);
    if !final_loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
        return Err(LearningError::Diverged {
            epoch: config.local_epochs,
            step,
            loss: final_loss,
        });
    }
    Ok(TrainOutcome {
        params: ModelParams { arch, values: w },
        initial_loss,
        final_loss,
    })
}

fn shard_objective(w: &[f64], arch: &Arch, data: &Dataset, shard: &[usize], anchor: &[f64], mu: f64, s: &mut Scratch) -> f64 {
    let mut loss = 0.0;
    for &i in shard {
        forward(w, arch, data.row(i), s);
        loss += log_sum_exp(&s.logits) - s.logits[data.label(i)];
    }
    loss /= shard.len() as f64;
    if mu != 0.0 {
        let sq: f64 = w.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
        loss += 0.5 * mu * sq;
    }
    loss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// nats per sample
    pub mean_loss: f64,
}

/// Argmax accuracy (ties go to the lowest class index) and mean
/// cross-entropy over the whole dataset.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<EvalReport, LearningError> {
    if data.is_empty() {
        return Err(LearningError::EmptyDataset);
    }
    check_data(&params.arch, data)?;
    let mut s = Scratch::new(&params.arch);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..data.len() {
        forward(&params.values, &params.arch, data.row(i), &mut s);
        let mut best = 0;
        for (k, z) in s.logits.iter().enumerate() {
            if *z > s.logits[best] {
                best = k;
            }
        }
        let label = data.label(i);
        correct += (best == label) as usize;
        loss += log_sum_exp(&s.logits) - s.logits[label];
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_loss: (loss / n).max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_classification;

    fn blobs() -> Dataset {
        synthetic_classification(300, 6, 3, 4.0, 5).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(init_model(Arch::logreg(784, 10), 0).unwrap().param_count(), 7850);
        assert_eq!(init_model(Arch::mlp(784, 64, 10), 0).unwrap().param_count(), 50890);
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let arch = Arch::mlp(5, 4, 3);
        let a = init_model(arch, 1).unwrap();
        assert_eq!(a, init_model(arch, 1).unwrap());
        assert_ne!(a, init_model(arch, 2).unwrap());
        let v = a.values();
        assert!(v[20..24].iter().all(|&b| b == 0.0));
        assert!(v[36..].iter().all(|&b| b == 0.0));
        let bound = 1.0 / 5f64.sqrt();
        assert!(v[..20].iter().all(|w| w.abs() <= bound));
        assert!(v[..20].iter().any(|&w| w != 0.0));
    }

    #[test]
    fn zero_sized_layers_rejected() {
        assert!(init_model(Arch::logreg(0, 10), 0).is_err());
        assert!(init_model(Arch::mlp(10, 0, 10), 0).is_err());
    }

    #[test]
    fn encoding_roundtrip_and_size() {
        let p = init_model(Arch::logreg(784, 10), 3).unwrap();
        let bytes = p.to_bytes();
        assert!(bytes.starts_with(b"logreg 784 10\n"));
        assert_eq!(bytes.len(), 14 + 7850 * 8);
        assert_eq!(p.encoded_len(), bytes.len());
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), p);

        let m = init_model(Arch::mlp(4, 3, 2), 3).unwrap();
        assert_eq!(ModelParams::from_bytes(&m.to_bytes()).unwrap(), m);

        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ModelParams::from_bytes(b"cnn 1 2\n").is_err());
    }

    #[test]
    fn adaptive_mu_examples() {
        assert_eq!(adaptive_mu(0.01, 1.0), 0.01);
        assert_eq!(adaptive_mu(0.01, 2.0), 0.0);
        assert!((adaptive_mu(0.01, 0.5) - 0.015).abs() < 1e-18);
        assert_eq!(adaptive_mu(0.01, 2.5), 0.0);
    }

    #[test]
    fn prox_term_vanishes_at_anchor() {
        let d = blobs();
        let p = init_model(Arch::mlp(6, 5, 3), 2).unwrap();
        let batch: Vec<usize> = (0..16).collect();
        let (l0, g0) = loss_and_grad(&p, &d, &batch, &p, 0.0).unwrap();
        let (l1, g1) = loss_and_grad(&p, &d, &batch, &p, 3.0).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn prox_gradient_adds_mu_times_offset() {
        let d = blobs();
        let p = init_model(Arch::logreg(6, 3), 2).unwrap();
        let anchor = init_model(Arch::logreg(6, 3), 9).unwrap();
        let batch: Vec<usize> = (0..10).collect();
        let (l0, g0) = loss_and_grad(&p, &d, &batch, &anchor, 0.0).unwrap();
        let (l1, g1) = loss_and_grad(&p, &d, &batch, &anchor, 0.5).unwrap();
        let sq: f64 = p.values().iter().zip(anchor.values()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((l1 - l0 - 0.25 * sq).abs() < 1e-12);
        for ((a, b), (w, z)) in g0.iter().zip(&g1).zip(p.values().iter().zip(anchor.values())) {
            assert!((b - a - 0.5 * (w - z)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let d = blobs();
        let p = init_model(Arch::logreg(5, 3), 0).unwrap();
        assert!(matches!(loss_and_grad(&p, &d, &[0], &p, 0.0), Err(LearningError::ShapeMismatch(_))));
        let q = init_model(Arch::logreg(6, 3), 0).unwrap();
        let r = init_model(Arch::mlp(6, 2, 3), 0).unwrap();
        assert!(matches!(loss_and_grad(&q, &d, &[0], &r, 0.0), Err(LearningError::ShapeMismatch(_))));
        assert_eq!(loss_and_grad(&q, &d, &[], &q, 0.0), Err(LearningError::EmptyBatch));
    }

    #[test]
    fn loss_is_finite_for_huge_logits() {
        let d = Dataset::new(vec![1.0], 1, vec![1], 2).unwrap();
        let p = ModelParams::new(Arch::logreg(1, 2), vec![1e4, -1e4, 0.0, 0.0]).unwrap();
        let (loss, grad) = loss_and_grad(&p, &d, &[0], &p, 0.0).unwrap();
        assert!((loss - 2e4).abs() < 1e-6);
        assert!(grad.iter().all(|g| g.is_finite()));
        let e = evaluate(&p, &d).unwrap();
        assert_eq!(e.accuracy, 0.0);
        assert!(e.mean_loss.is_finite());
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let d = blobs();
        let g = init_model(Arch::logreg(6, 3), 4).unwrap();
        let shard: Vec<usize> = (0..50).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            prox_mu: 0.1,
            ..TrainConfig::default()
        };
        let out = local_train(&g, &d, &shard, &cfg).unwrap();
        assert_eq!(out.params, g);
    }

    #[test]
    fn single_sample_single_step() {
        // Hand-built logreg: two features, two classes, zero weights.
        // softmax of zero logits = (0.5, 0.5); label 1 → dlogits = (0.5, -0.5).
        let d = Dataset::new(vec![1.0, 2.0], 2, vec![1], 2).unwrap();
        let g = ModelParams::zeros(Arch::logreg(2, 2)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 1,
            local_epochs: 1,
            prox_mu: 0.0,
            seed: 0,
        };
        let out = local_train(&g, &d, &[0], &cfg).unwrap();
        let expected = [-0.05, -0.1, 0.05, 0.1, -0.05, 0.05];
        for (a, b) in out.params.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((out.initial_loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let d = blobs();
        let g = init_model(Arch::mlp(6, 8, 3), 4).unwrap();
        let shard: Vec<usize> = (0..200).collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            seed: 17,
            ..TrainConfig::default()
        };
        let a = local_train(&g, &d, &shard, &cfg).unwrap();
        assert!(a.final_loss < a.initial_loss);
        let b = local_train(&g, &d, &shard, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let d = Dataset::new(vec![1e200, 1e200], 2, vec![0], 2).unwrap();
        let g = ModelParams::new(Arch::logreg(2, 2), vec![1e200, 1e200, -1e200, -1e200, 0.0, 0.0]).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            local_train(&g, &d, &[0], &cfg),
            Err(LearningError::Diverged { epoch: 0, step: 0, .. })
        ));
    }

    #[test]
    fn constant_zero_model_predicts_class_zero() {
        // brute-force oracle: every prediction is class 0 by tie-break
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let feats: Vec<f64> = (0..100 * 4).map(|i| (i % 7) as f64 / 7.0).collect();
        let d = Dataset::new(feats, 4, labels.clone(), 10).unwrap();
        let p = ModelParams::zeros(Arch::logreg(4, 10)).unwrap();
        let e = evaluate(&p, &d).unwrap();
        let oracle = labels.iter().filter(|&&l| l == 0).count() as f64 / 100.0;
        assert_eq!(e.accuracy, oracle);
        assert_eq!(e.accuracy, 0.1);
        assert!((e.mean_loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits() {
        let d = Dataset::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], 2).unwrap();
        let p = ModelParams::new(Arch::logreg(2, 2), vec![100.0, 0.0, 0.0, 100.0, 0.0, 0.0]).unwrap();
        let e = evaluate(&p, &d).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert!(e.mean_loss < 1e-40);
    }

    #[test]
    fn accuracy_permutation_invariant() {
        let d = blobs();
        let p = init_model(Arch::logreg(6, 3), 8).unwrap();
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.reverse();
        idx.swap(3, 100);
        let shuffled = d.subset(&idx);
        assert_eq!(evaluate(&p, &d).unwrap().accuracy, evaluate(&p, &shuffled).unwrap().accuracy);
    }

    #[test]
    fn evaluate_empty_is_error() {
        let d = blobs().subset(&[]);
        let p = init_model(Arch::logreg(6, 3), 8).unwrap();
        assert_eq!(evaluate(&p, &d), Err(LearningError::EmptyDataset));
    }
}
