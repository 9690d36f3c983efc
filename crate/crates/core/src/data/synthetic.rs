use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset};
use crate::rng::{stream, stream_rng};

/// Gaussian blobs with unit variance. Class `c` is centred at
/// `class_sep / √2 · e_c`, so every pair of class means is exactly
/// `class_sep` apart. Labels cycle `0, 1, …, n_classes-1`, and each feature is
/// min-max rescaled to [0, 1] over the whole set.
pub fn synthetic_classification(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_samples == 0 || n_features == 0 {
        return Err(DataError::Invalid("sizes must be positive".into()));
    }
    if n_classes < 2 {
        return Err(DataError::Invalid("need at least 2 classes".into()));
    }
    if n_features < n_classes {
        return Err(DataError::Invalid(format!(
            "{n_features} features cannot hold {n_classes} orthogonal class means"
        )));
    }
    if !(class_sep >= 0.0 && class_sep.is_finite()) {
        return Err(DataError::Invalid(format!("class_sep {class_sep}")));
    }

    let mut rng = stream_rng(seed, stream::SYNTHETIC, n_features as u64, n_classes as u64);
    let offset = class_sep / std::f64::consts::SQRT_2;
    let labels: Vec<usize> = (0..n_samples).map(|i| i % n_classes).collect();
    let mut features = Vec::with_capacity(n_samples * n_features);
    for &label in &labels {
        for f in 0..n_features {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(if f == label { z + offset } else { z });
        }
    }

    for f in 0..n_features {
        let column = features.iter().skip(f).step_by(n_features);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for v in features.iter_mut().skip(f).step_by(n_features) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }

    Dataset::new(features, n_features, labels, n_classes)
}
