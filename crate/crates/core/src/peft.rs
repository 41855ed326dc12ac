//! Parameter-efficient trainable masks and the similarity-aware profiler.
//!
//! Trainable layouts, per dense layer and in layer order:
//!
//! * `Full`: the whole model layout.
//! * `BiasOnly`: the layer's `fan_out` biases, which replace the frozen ones.
//! * `LowRank(r)`: factor `A` (`r x fan_in`, row-major), factor `B`
//!   (`fan_out x r`, row-major), then `fan_out` bias deltas. The effective
//!   weight is `W + B A` and the effective bias is `b + delta`.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fwdgrad::{self, DerivativeMode, PerturbationSeed};
use crate::model::{self, Batch, DenseLayer, ModelSpec, ParamVector, PassCounter};
use crate::rng;
use crate::sampling::cosine_similarity;

/// Bound of the uniform init used for low-rank `A` factors.
pub const LOW_RANK_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainableMask {
    Full,
    BiasOnly,
    LowRank { rank: usize },
}

impl fmt::Display for TrainableMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainableMask::Full => f.write_str("full"),
            TrainableMask::BiasOnly => f.write_str("bias_only"),
            TrainableMask::LowRank { rank } => write!(f, "low_rank:{rank}"),
        }
    }
}

impl FromStr for TrainableMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(TrainableMask::Full),
            "bias_only" => Ok(TrainableMask::BiasOnly),
            other => {
                let rank = other
                    .strip_prefix("low_rank:")
                    .and_then(|r| r.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::config("mask", format!("unknown scheme `{other}` (full, bias_only, low_rank:<r>)"))
                    })?;
                Ok(TrainableMask::LowRank { rank })
            }
        }
    }
}

impl TrainableMask {
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if let TrainableMask::LowRank { rank } = *self {
            let limit = model
                .layers()
                .iter()
                .map(|l| l.fan_in.min(l.fan_out))
                .min()
                .unwrap_or(0);
            if rank == 0 || rank >= limit {
                return Err(Error::InvalidRank { rank, limit });
            }
        }
        Ok(())
    }

    fn layer_dim(&self, layer: &DenseLayer) -> usize {
        match *self {
            TrainableMask::Full => layer.weight_len() + layer.fan_out,
            TrainableMask::BiasOnly => layer.fan_out,
            TrainableMask::LowRank { rank } => rank * (layer.fan_in + layer.fan_out) + layer.fan_out,
        }
    }

    pub fn trainable_dim(&self, model: &ModelSpec) -> Result<usize> {
        self.validate(model)?;
        Ok(model.layers().iter().map(|l| self.layer_dim(l)).sum())
    }

    fn check_dims(&self, model: &ModelSpec, frozen: &[f64], trainable: &[f64]) -> Result<()> {
        if frozen.len() != model.param_count() {
            return Err(Error::shape("frozen parameters", model.param_count(), frozen.len()));
        }
        let dim = self.trainable_dim(model)?;
        if trainable.len() != dim {
            return Err(Error::shape("trainable parameters", dim, trainable.len()));
        }
        Ok(())
    }

    /// Composes frozen and trainable weights into a full parameter vector.
    pub fn materialize(&self, model: &ModelSpec, frozen: &[f64], trainable: &[f64]) -> Result<ParamVector> {
        self.check_dims(model, frozen, trainable)?;
        let rank = match *self {
            TrainableMask::Full => return Ok(trainable.to_vec().into()),
            TrainableMask::BiasOnly => 0,
            TrainableMask::LowRank { rank } => rank,
        };
        let mut full = frozen.to_vec();
        let mut t = 0;
        for layer in model.layers() {
            let bias = layer.bias_offset..layer.bias_offset + layer.fan_out;
            if let TrainableMask::BiasOnly = self {
                full[bias].copy_from_slice(&trainable[t..t + layer.fan_out]);
                t += layer.fan_out;
                continue;
            }
            let a = &trainable[t..t + rank * layer.fan_in];
            t += rank * layer.fan_in;
            let b = &trainable[t..t + layer.fan_out * rank];
            t += layer.fan_out * rank;
            for o in 0..layer.fan_out {
                for i in 0..layer.fan_in {
                    let delta: f64 = (0..rank).map(|k| b[o * rank + k] * a[k * layer.fan_in + i]).sum();
                    full[layer.weight_offset + o * layer.fan_in + i] += delta;
                }
            }
            for (f, d) in full[bias].iter_mut().zip(&trainable[t..t + layer.fan_out]) {
                *f += d;
            }
            t += layer.fan_out;
        }
        Ok(full.into())
    }

    /// Chain rule from a full-model gradient to the trainable coordinates.
    pub fn pullback(
        &self,
        model: &ModelSpec,
        frozen: &[f64],
        trainable: &[f64],
        full_grad: &[f64],
    ) -> Result<ParamVector> {
        self.check_dims(model, frozen, trainable)?;
        if full_grad.len() != model.param_count() {
            return Err(Error::shape("full gradient", model.param_count(), full_grad.len()));
        }
        let rank = match *self {
            TrainableMask::Full => return Ok(full_grad.to_vec().into()),
            TrainableMask::BiasOnly => 0,
            TrainableMask::LowRank { rank } => rank,
        };
        let mut out = Vec::with_capacity(trainable.len());
        let mut t = 0;
        for layer in model.layers() {
            let bias_grad = &full_grad[layer.bias_offset..layer.bias_offset + layer.fan_out];
            if let TrainableMask::BiasOnly = self {
                out.extend_from_slice(bias_grad);
                continue;
            }
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let a = &trainable[t..t + rank * fi];
            let b = &trainable[t + rank * fi..t + rank * (fi + fo)];
            let gw = &full_grad[layer.weight_offset..layer.bias_offset];
            // dA = B^T G
            for k in 0..rank {
                for i in 0..fi {
                    out.push((0..fo).map(|o| b[o * rank + k] * gw[o * fi + i]).sum());
                }
            }
            // dB = G A^T
            for o in 0..fo {
                for k in 0..rank {
                    out.push((0..fi).map(|i| gw[o * fi + i] * a[k * fi + i]).sum());
                }
            }
            out.extend_from_slice(bias_grad);
            t += rank * (fi + fo) + fo;
        }
        Ok(out.into())
    }

    /// Starting trainable vector: `Full` copies the frozen model, `BiasOnly`
    /// copies the frozen biases, `LowRank` draws `A` uniform in
    /// `[-LOW_RANK_INIT_SCALE, LOW_RANK_INIT_SCALE]` with `B = 0` and zero
    /// bias deltas, so the composed model equals the frozen one.
    pub fn initial_trainable(&self, model: &ModelSpec, frozen: &[f64], seed: u64) -> Result<ParamVector> {
        if frozen.len() != model.param_count() {
            return Err(Error::shape("frozen parameters", model.param_count(), frozen.len()));
        }
        self.validate(model)?;
        let out = match *self {
            TrainableMask::Full => frozen.to_vec(),
            TrainableMask::BiasOnly => model
                .layers()
                .iter()
                .flat_map(|l| frozen[l.bias_offset..l.bias_offset + l.fan_out].iter().copied())
                .collect(),
            TrainableMask::LowRank { rank } => {
                let mut rng = rng::seeded_rng(seed, "low-rank-init", &[rank as u64]);
                let mut out = Vec::new();
                for l in model.layers() {
                    for _ in 0..rank * l.fan_in {
                        out.push(rng.gen_range(-LOW_RANK_INIT_SCALE..=LOW_RANK_INIT_SCALE));
                    }
                    out.extend(std::iter::repeat_n(0.0, l.fan_out * rank + l.fan_out));
                }
                out
            }
        };
        Ok(out.into())
    }
}

/// One row of the profiler's ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub mask: TrainableMask,
    pub trainable_dim: usize,
    pub score: f64,
}

/// Scores each candidate by the cosine similarity between the mean of
/// `n_perturbations` forward gradients and the backpropagation gradient at
/// the candidate's starting point, then ranks by score (descending) with
/// near-ties (within 1e-9) going to the smaller trainable dimension.
pub fn peft_profile(
    model: &ModelSpec,
    frozen: &[f64],
    candidates: &[TrainableMask],
    public_batch: &Batch,
    n_perturbations: usize,
    master_seed: u64,
    mode: DerivativeMode,
) -> Result<Vec<ProfileEntry>> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate masks to profile"));
    }
    if n_perturbations == 0 {
        return Err(Error::config("profile.n_perturbations", "must be at least 1"));
    }
    let entries = candidates
        .par_iter()
        .map(|mask| profile_one(model, frozen, *mask, public_batch, n_perturbations, master_seed, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_entries(entries))
}

fn profile_one(
    model: &ModelSpec,
    frozen: &[f64],
    mask: TrainableMask,
    batch: &Batch,
    n: usize,
    master_seed: u64,
    mode: DerivativeMode,
) -> Result<ProfileEntry> {
    let dim = mask.trainable_dim(model)?;
    let theta = mask.initial_trainable(model, frozen, master_seed)?;
    let bp = model::analytic_gradient(model, frozen, &mask, &theta, batch)?;
    // Candidates sharing a dimension share a seed set.
    let base_seed = rng::derive_seed(master_seed, "peft-profile", &[dim as u64]);
    let counter = PassCounter::new();
    let objective = fwdgrad::ModelObjective::new(model, frozen, &mask, batch, &counter);
    let mut mean = ParamVector::zeros(dim);
    let base_loss = objective_base_loss(&objective, &theta, mode)?;
    let mut v = vec![0.0; dim];
    for index in 0..n as u64 {
        fwdgrad::fill_perturbation(PerturbationSeed { base_seed, index }, &mut v);
        let dd = fwdgrad::directional_derivative(&objective, &theta, &v, mode, base_loss)?;
        mean.axpy(dd, &v);
    }
    mean.scale(1.0 / n as f64);
    let score = match cosine_similarity(&mean, &bp) {
        Ok(s) => s,
        Err(_) => {
            warn!("profiler: zero gradient for mask {mask}, scoring 0");
            0.0
        }
    };
    Ok(ProfileEntry {
        mask,
        trainable_dim: dim,
        score,
    })
}

fn objective_base_loss(
    objective: &fwdgrad::ModelObjective<'_>,
    theta: &[f64],
    mode: DerivativeMode,
) -> Result<Option<f64>> {
    use fwdgrad::Objective;
    match mode {
        DerivativeMode::ForwardDiff(_) => Ok(Some(objective.loss(theta)?)),
        _ => Ok(None),
    }
}

fn rank_entries(mut entries: Vec<ProfileEntry>) -> Vec<ProfileEntry> {
    const TIE: f64 = 1e-9;
    // Bucketing turns the tie tolerance into a total order.
    entries.sort_by(|a, b| {
        let qa = (a.score / TIE).round() as i64;
        let qb = (b.score / TIE).round() as i64;
        qb.cmp(&qa).then(a.trainable_dim.cmp(&b.trainable_dim))
    });
    entries
}
