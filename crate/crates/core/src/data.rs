//! Dataset synthesis and loading.

use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{self, NormalStream};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    SyntheticBlobs {
        n_samples: usize,
        n_classes: usize,
        input_dim: usize,
        separation: f64,
        seed: u64,
    },
    CsvFile {
        path: PathBuf,
        label_column: String,
    },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::SyntheticBlobs {
            n_samples,
            n_classes,
            input_dim,
            separation,
            ..
        } = *self
        {
            if n_classes < 2 {
                return Err(Error::config("dataset.n_classes", "need at least 2 classes"));
            }
            if n_samples < n_classes {
                return Err(Error::config("dataset.n_samples", "need at least one sample per class"));
            }
            if input_dim == 0 {
                return Err(Error::config("dataset.input_dim", "must be positive"));
            }
            if !(separation > 0.0 && separation.is_finite()) {
                return Err(Error::config("dataset.separation", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Batch> {
        self.validate()?;
        match self {
            DatasetSpec::SyntheticBlobs {
                n_samples,
                n_classes,
                input_dim,
                separation,
                seed,
            } => synthetic_blobs(*n_samples, *n_classes, *input_dim, *separation, *seed),
            DatasetSpec::CsvFile { path, label_column } => load_csv(path, label_column),
        }
    }
}

/// Gaussian blobs: class `k` has mean `separation * u_k` with `u_k` a seeded
/// random unit vector; samples add unit-variance isotropic noise. Sample `i`
/// belongs to class `i mod n_classes`.
pub fn synthetic_blobs(
    n_samples: usize,
    n_classes: usize,
    input_dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Batch> {
    let mean_base = rng::derive_seed(seed, "blobs-means", &[]);
    let noise_base = rng::derive_seed(seed, "blobs-noise", &[]);
    let means: Vec<Vec<f64>> = (0..n_classes as u64)
        .map(|k| {
            let mut u = vec![0.0; input_dim];
            NormalStream::new(mean_base, k).fill(&mut u);
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x *= separation / norm);
            u
        })
        .collect();
    let mut inputs = Vec::with_capacity(n_samples * input_dim);
    let mut labels = Vec::with_capacity(n_samples);
    let mut noise = vec![0.0; input_dim];
    for i in 0..n_samples {
        let k = i % n_classes;
        NormalStream::new(noise_base, i as u64).fill(&mut noise);
        inputs.extend(means[k].iter().zip(&noise).map(|(m, e)| m + e));
        labels.push(k);
    }
    Batch::classification(inputs, input_dim, labels)
}

/// Reads a headed CSV whose `label_column` holds class indices; every other
/// column is a numeric feature.
pub fn load_csv(path: &std::path::Path, label_column: &str) -> Result<Batch> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::config("dataset.label_column", format!("column `{label_column}` not found")))?;
    let input_dim = headers.len() - 1;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        for (j, field) in row.iter().enumerate() {
            let bad = || Error::config("dataset.path", format!("data row {}: bad value `{field}`", line + 1));
            if j == label_idx {
                labels.push(field.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                inputs.push(v);
            }
        }
    }
    if input_dim == 0 {
        return Err(Error::config("dataset.path", "no feature columns"));
    }
    Batch::classification(inputs, input_dim, labels)
}

/// Seeded shuffle, then the first `round(eval_fraction * n)` rows become the
/// evaluation set. Returns `(train, eval)`.
pub fn split_train_eval(data: &Batch, eval_fraction: f64, seed: u64) -> Result<(Batch, Batch)> {
    let n = data.len();
    let n_eval = ((eval_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(Error::config("dataset.n_samples", "need at least two samples to split"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded_rng(seed, "eval-split", &[]));
    let eval = data.select(&idx[..n_eval])?;
    let train = data.select(&idx[n_eval..])?;
    Ok((train, eval))
}
