//! Discriminative perturbation sampling.
//!
//! The server draws a pool of candidate seeds, expands each into its
//! direction, and keeps the ones best aligned with the previous round's
//! aggregated gradient. Only the surviving seed identifiers are dispatched.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fwdgrad::{fill_perturbation, PerturbationSeed};
use crate::model::dot;
use crate::rng::{self, NormalStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub keep_ratio: f64,
    /// Candidates drawn per requested seed; `None` means `1 / keep_ratio`.
    pub oversample_factor: Option<f64>,
    /// Rank by signed rather than absolute cosine.
    pub signed: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            keep_ratio: 1.0,
            oversample_factor: None,
            signed: false,
        }
    }
}

impl SamplerConfig {
    pub fn with_keep_ratio(keep_ratio: f64) -> Self {
        SamplerConfig {
            keep_ratio,
            ..Default::default()
        }
    }

    pub fn oversample(&self) -> f64 {
        self.oversample_factor.unwrap_or(1.0 / self.keep_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::config("sampler.keep_ratio", "must lie in (0, 1]"));
        }
        let over = self.oversample();
        if !(over >= 1.0 && over.is_finite()) {
            return Err(Error::config("sampler.oversample_factor", "must be a finite value >= 1"));
        }
        if self.keep_ratio * over < 1.0 - 1e-12 {
            return Err(Error::config(
                "sampler.oversample_factor",
                "keep_ratio * oversample_factor must be at least 1",
            ));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.keep_ratio >= 1.0
    }

    fn pool_size(&self, requested: usize) -> usize {
        // The epsilon absorbs representation error, e.g. 1 / 0.2.
        ((requested as f64 * self.oversample()) - 1e-9).ceil().max(requested as f64) as usize
    }
}

/// `a . b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine operands", a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Where a round's candidate seeds come from: consecutive indices under one
/// base seed, starting at `start_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    pub base_seed: u64,
    pub start_index: u64,
}

impl SeedStream {
    pub fn new(base_seed: u64) -> Self {
        SeedStream {
            base_seed,
            start_index: 0,
        }
    }

    fn seed(&self, offset: usize) -> PerturbationSeed {
        PerturbationSeed {
            base_seed: self.base_seed,
            index: self.start_index + offset as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredSeeds {
    /// Survivors, best first.
    pub seeds: Vec<PerturbationSeed>,
    /// Candidates consumed from the stream; the next request starts after them.
    pub candidates_drawn: usize,
}

/// Picks `requested` seeds from the stream. Without a usable previous
/// gradient, or with `keep_ratio = 1`, the first `requested` candidates pass
/// through untouched.
pub fn filter_seeds(
    g_prev: Option<&[f64]>,
    requested: usize,
    config: &SamplerConfig,
    dim: usize,
    stream: SeedStream,
) -> Result<FilteredSeeds> {
    if requested == 0 {
        return Err(Error::config("sampler", "requested seed count must be at least 1"));
    }
    config.validate()?;
    let passthrough = || FilteredSeeds {
        seeds: (0..requested).map(|i| stream.seed(i)).collect(),
        candidates_drawn: requested,
    };
    let g = match g_prev {
        Some(g) if !config.is_identity() => g,
        _ => return Ok(passthrough()),
    };
    if g.len() != dim {
        return Err(Error::shape("previous gradient", dim, g.len()));
    }
    let g_norm = dot(g, g).sqrt();
    if g_norm == 0.0 || !g_norm.is_finite() {
        warn!("previous gradient is degenerate (norm {g_norm}); dispatching unfiltered seeds");
        return Ok(passthrough());
    }
    let pool = config.pool_size(requested);
    let mut scored: Vec<(f64, PerturbationSeed)> = (0..pool)
        .into_par_iter()
        .map_init(
            || vec![0.0; dim],
            |v, i| {
                let seed = stream.seed(i);
                fill_perturbation(seed, v);
                let cos = cosine_similarity(v, g).unwrap_or(0.0);
                (if config.signed { cos } else { cos.abs() }, seed)
            },
        )
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.index.cmp(&b.1.index)));
    scored.truncate(requested);
    Ok(FilteredSeeds {
        seeds: scored.into_iter().map(|(_, s)| s).collect(),
        candidates_drawn: pool,
    })
}

/// Fraction of `n_samples` Gaussian directions whose `|cos|` against a fixed
/// random unit vector is below `threshold`.
pub fn orthogonality_census(dim: usize, n_samples: usize, threshold: f64, seed: u64) -> Result<f64> {
    if n_samples < 1000 {
        return Err(Error::config("census.n_samples", "need at least 1000 samples"));
    }
    if dim == 0 {
        return Err(Error::config("census.dim", "must be positive"));
    }
    let mut reference = vec![0.0; dim];
    NormalStream::new(rng::derive_seed(seed, "census-reference", &[]), 0).fill(&mut reference);
    let base = rng::derive_seed(seed, "census-samples", &[]);
    let below = (0..n_samples as u64)
        .into_par_iter()
        .map_init(
            || vec![0.0; dim],
            |v, index| {
                NormalStream::new(base, index).fill(v);
                match cosine_similarity(v, &reference) {
                    Ok(c) => (c.abs() < threshold) as usize,
                    Err(_) => 1,
                }
            },
        )
        .sum::<usize>();
    Ok(below as f64 / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fwdgrad::gen_perturbation;

    #[test]
    fn cosine_hand_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::UndefinedSimilarity)
        ));
    }

    #[test]
    fn identity_filter_returns_prefix() {
        let stream = SeedStream { base_seed: 4, start_index: 10 };
        let g = vec![1.0; 8];
        let out = filter_seeds(Some(&g), 3, &SamplerConfig::with_keep_ratio(1.0), 8, stream).unwrap();
        let idx: Vec<u64> = out.seeds.iter().map(|s| s.index).collect();
        assert_eq!(idx, vec![10, 11, 12]);
        assert_eq!(out.candidates_drawn, 3);
        let round0 = filter_seeds(None, 3, &SamplerConfig::with_keep_ratio(0.2), 8, stream).unwrap();
        assert_eq!(round0, out);
    }

    #[test]
    fn keeps_best_aligned_candidate() {
        // Two candidates in 2-D; the survivor must be the one with larger |cos|.
        let stream = SeedStream::new(99);
        let g = [1.0, 0.0];
        let out = filter_seeds(Some(&g), 1, &SamplerConfig::with_keep_ratio(0.5), 2, stream).unwrap();
        assert_eq!(out.candidates_drawn, 2);
        let c: Vec<f64> = (0..2)
            .map(|i| cosine_similarity(&gen_perturbation(stream.seed(i), 2), &g).unwrap().abs())
            .collect();
        let best = if c[0] >= c[1] { 0 } else { 1 };
        assert_eq!(out.seeds, vec![stream.seed(best)]);
    }

    #[test]
    fn zero_gradient_falls_back() {
        let stream = SeedStream::new(1);
        let out = filter_seeds(Some(&[0.0; 4]), 2, &SamplerConfig::with_keep_ratio(0.5), 4, stream).unwrap();
        assert_eq!(out.candidates_drawn, 2);
    }

    #[test]
    fn pool_size_handles_inexact_ratios() {
        assert_eq!(SamplerConfig::with_keep_ratio(0.2).pool_size(1), 5);
        assert_eq!(SamplerConfig::with_keep_ratio(0.2).pool_size(3), 15);
        assert_eq!(SamplerConfig::with_keep_ratio(0.3).pool_size(3), 10);
        assert_eq!(SamplerConfig::with_keep_ratio(1.0).pool_size(7), 7);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::with_keep_ratio(0.0).validate().is_err());
        assert!(SamplerConfig::with_keep_ratio(1.5).validate().is_err());
        let bad = SamplerConfig {
            keep_ratio: 0.2,
            oversample_factor: Some(2.0),
            signed: false,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn census_trivial_threshold() {
        assert_eq!(orthogonality_census(4, 1000, 1.0, 0).unwrap(), 1.0);
        assert!(orthogonality_census(4, 10, 0.5, 0).is_err());
    }
}
