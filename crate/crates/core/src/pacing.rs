//! Variance-controlled perturbation pacing.
//!
//! The controller watches the spread of the forward gradients uploaded in the
//! current round. While the half-split variance exceeds the threshold it grows
//! the round's perturbation budget, first by adding devices and, once every
//! device is in use, by asking each device for more perturbations.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fwdgrad::{reconstruct, ForwardGradientRecord};
use crate::model::ParamVector;

/// How the half-split statistic combines coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// `|| 0.5 [ (m1 - m)^2 + (m2 - m)^2 ] ||` with elementwise squares.
    #[default]
    Elementwise,
    /// `0.5 [ (|m1| - |m|)^2 + (|m2| - |m|)^2 ]` over vector norms.
    ScalarNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacingConfig {
    pub variance_threshold: f64,
    pub max_devices: usize,
    pub max_perturbations_per_device: usize,
    pub min_records_for_variance: usize,
    pub variance_kind: VarianceKind,
}

impl Default for PacingConfig {
    fn default() -> Self {
        PacingConfig {
            variance_threshold: 0.3,
            max_devices: 100,
            max_perturbations_per_device: 50,
            min_records_for_variance: 4,
            variance_kind: VarianceKind::Elementwise,
        }
    }
}

impl PacingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variance_threshold.is_nan() || self.variance_threshold <= 0.0 {
            return Err(Error::config("pacing.variance_threshold", "must be positive"));
        }
        if self.max_devices == 0 {
            return Err(Error::config("pacing.max_devices", "must be at least 1"));
        }
        if self.max_perturbations_per_device == 0 {
            return Err(Error::config("pacing.max_perturbations_per_device", "must be at least 1"));
        }
        if self.min_records_for_variance < 4 {
            return Err(Error::config("pacing.min_records", "must be at least 4"));
        }
        Ok(())
    }
}

/// Devices taking part in a round and the perturbations each evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation {
    pub active_devices: usize,
    pub perturbations_per_device: usize,
}

impl Allocation {
    pub fn new(active_devices: usize, perturbations_per_device: usize) -> Self {
        Allocation {
            active_devices,
            perturbations_per_device,
        }
    }

    /// Global perturbation size.
    pub fn global_ps(&self) -> usize {
        self.active_devices * self.perturbations_per_device
    }

    pub fn validate(&self, config: &PacingConfig) -> Result<()> {
        if self.active_devices == 0 || self.active_devices > config.max_devices {
            return Err(Error::config("pacing.initial_devices", "must lie in 1..=max_devices"));
        }
        if self.perturbations_per_device == 0 || self.perturbations_per_device > config.max_perturbations_per_device {
            return Err(Error::config(
                "pacing.initial_perturbations",
                "must lie in 1..=max_perturbations_per_device",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacingDecision {
    StopAndAggregate { budget_exhausted: bool },
    AddDevices(usize),
    AddPerturbations(usize),
}

impl PacingDecision {
    pub fn is_stop(&self) -> bool {
        matches!(self, PacingDecision::StopAndAggregate { .. })
    }

    /// Allocation after applying this decision.
    pub fn apply(&self, alloc: Allocation) -> Allocation {
        match *self {
            PacingDecision::StopAndAggregate { .. } => alloc,
            PacingDecision::AddDevices(n) => Allocation::new(alloc.active_devices + n, alloc.perturbations_per_device),
            PacingDecision::AddPerturbations(k) => {
                Allocation::new(alloc.active_devices, alloc.perturbations_per_device + k)
            }
        }
    }
}

impl fmt::Display for PacingDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PacingDecision::StopAndAggregate { budget_exhausted: false } => f.write_str("stop"),
            PacingDecision::StopAndAggregate { budget_exhausted: true } => f.write_str("stop_exhausted"),
            PacingDecision::AddDevices(n) => write!(f, "add_devices:{n}"),
            PacingDecision::AddPerturbations(k) => write!(f, "add_perturbations:{k}"),
        }
    }
}

/// Half-split statistic over already reconstructed gradients. The first half
/// takes the extra element when the count is odd.
pub fn half_split_variance(grads: &[ParamVector], kind: VarianceKind) -> Result<f64> {
    if grads.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: grads.len(),
        });
    }
    let dim = grads[0].len();
    let first = grads.len().div_ceil(2);
    // Running mean: exact when all inputs coincide.
    let mean_of = |gs: &[ParamVector]| {
        let mut m = ParamVector::zeros(dim);
        for (k, g) in gs.iter().enumerate() {
            let w = 1.0 / (k + 1) as f64;
            for (mi, gi) in m.iter_mut().zip(g.iter()) {
                *mi += (gi - *mi) * w;
            }
        }
        m
    };
    let m1 = mean_of(&grads[..first]);
    let m2 = mean_of(&grads[first..]);
    let m = mean_of(grads);
    let d = match kind {
        VarianceKind::Elementwise => m1
            .iter()
            .zip(m2.iter())
            .zip(m.iter())
            .map(|((a, b), c)| {
                let s = 0.5 * ((a - c) * (a - c) + (b - c) * (b - c));
                s * s
            })
            .sum::<f64>()
            .sqrt(),
        VarianceKind::ScalarNorm => {
            let n = m.norm();
            0.5 * ((m1.norm() - n).powi(2) + (m2.norm() - n).powi(2))
        }
    };
    Ok(d)
}

/// Half-split variance of the forward gradients rebuilt from `records`,
/// taken in the order given.
pub fn gradient_variance(
    records: &[ForwardGradientRecord],
    dim: usize,
    min_records: usize,
    kind: VarianceKind,
) -> Result<f64> {
    if records.len() < min_records.max(2) {
        return Err(Error::InsufficientData {
            needed: min_records.max(2),
            got: records.len(),
        });
    }
    let grads: Vec<ParamVector> = records.iter().map(|r| reconstruct(r, dim)).collect();
    half_split_variance(&grads, kind)
}

/// Stop once `variance <= threshold`; otherwise grow devices (doubling) and
/// then perturbations per device (+50%, rounded up), both capped.
pub fn pacing_decision(variance: f64, config: &PacingConfig, alloc: Allocation) -> PacingDecision {
    if variance <= config.variance_threshold {
        return PacingDecision::StopAndAggregate {
            budget_exhausted: false,
        };
    }
    if alloc.active_devices < config.max_devices {
        let target = (alloc.active_devices * 2).min(config.max_devices);
        return PacingDecision::AddDevices(target - alloc.active_devices);
    }
    if alloc.perturbations_per_device < config.max_perturbations_per_device {
        let p = alloc.perturbations_per_device;
        let target = p.div_ceil(2).saturating_add(p).min(config.max_perturbations_per_device);
        return PacingDecision::AddPerturbations(target - p);
    }
    PacingDecision::StopAndAggregate {
        budget_exhausted: true,
    }
}

/// Peak memory approximation: the model plus two trainable-sized buffers.
pub fn memory_estimate(model_bytes: u64, trainable_param_count: u64, bytes_per_param: u64) -> u64 {
    model_bytes + 2 * trainable_param_count * bytes_per_param
}

/// Whether a record submitted to the collector was kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submission {
    Accepted,
    /// Arrived after the controller stopped the round.
    Discarded,
}

/// One controller evaluation, as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacingEvent {
    pub round: usize,
    pub records_seen: usize,
    /// `None` while too few records have arrived.
    pub variance: Option<f64>,
    pub decision: PacingDecision,
    pub devices: usize,
    pub perts_per_device: usize,
}

pub const PACING_CSV_HEADER: &str = "round,records_seen,D,decision,devices,perts_per_device";

pub fn write_pacing_csv<W: Write>(out: W, events: &[PacingEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PACING_CSV_HEADER.split(','))?;
    for e in events {
        w.write_record([
            e.round.to_string(),
            e.records_seen.to_string(),
            e.variance.map(|d| d.to_string()).unwrap_or_default(),
            e.decision.to_string(),
            e.devices.to_string(),
            e.perts_per_device.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Append-only record buffer for one round plus the single controller that
/// judges it. Clients may keep submitting while the server evaluates; once a
/// stop is issued, late records are discarded.
#[derive(Debug)]
pub struct RecordCollector {
    round: usize,
    dim: usize,
    config: PacingConfig,
    alloc: Allocation,
    records: Vec<ForwardGradientRecord>,
    discarded: usize,
    stopped: Option<PacingDecision>,
    last_variance: Option<f64>,
    events: Vec<PacingEvent>,
}

impl RecordCollector {
    pub fn new(round: usize, dim: usize, config: PacingConfig, alloc: Allocation) -> Self {
        RecordCollector {
            round,
            dim,
            config,
            alloc,
            records: Vec::new(),
            discarded: 0,
            stopped: None,
            last_variance: None,
            events: Vec::new(),
        }
    }

    pub fn submit(&mut self, record: ForwardGradientRecord) -> Submission {
        if self.stopped.is_some() {
            self.discarded += 1;
            Submission::Discarded
        } else {
            self.records.push(record);
            Submission::Accepted
        }
    }

    /// Orders the buffer by `(client_id, seed)`, computes the statistic and
    /// issues a decision. Returns the existing decision if already stopped.
    pub fn evaluate(&mut self) -> PacingDecision {
        if let Some(d) = self.stopped {
            return d;
        }
        self.sort_records();
        let variance = gradient_variance(
            &self.records,
            self.dim,
            self.config.min_records_for_variance,
            self.config.variance_kind,
        )
        .ok();
        let decision = pacing_decision(variance.unwrap_or(f64::INFINITY), &self.config, self.alloc);
        self.events.push(PacingEvent {
            round: self.round,
            records_seen: self.records.len(),
            variance,
            decision,
            devices: self.alloc.active_devices,
            perts_per_device: self.alloc.perturbations_per_device,
        });
        self.last_variance = variance;
        self.alloc = decision.apply(self.alloc);
        if decision.is_stop() {
            self.stopped = Some(decision);
        }
        decision
    }

    fn sort_records(&mut self) {
        self.records.sort_by_key(|r| (r.client_id, r.seed));
    }

    pub fn allocation(&self) -> Allocation {
        self.alloc
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.is_some()
    }

    pub fn discarded(&self) -> usize {
        self.discarded
    }

    pub fn variance_at_stop(&self) -> Option<f64> {
        self.stopped.and(self.last_variance)
    }

    pub fn events(&self) -> &[PacingEvent] {
        &self.events
    }

    /// Records accepted so far, ordered by `(client_id, seed)`.
    pub fn into_records(mut self) -> (Vec<ForwardGradientRecord>, Vec<PacingEvent>) {
        self.sort_records();
        (self.records, self.events)
    }
}
