//! Round protocol: dispatch, client computation, paced collection and
//! aggregation.
//!
//! Everything that crosses the simulated network is encoded with [`crate::wire`]
//! and decoded on the other side, so byte counts come from the real
//! serializers. Uploads are scalar records; the server regenerates each
//! perturbation from its seed.

pub mod partition;
mod train;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fwdgrad::{self, fill_perturbation, DerivativeMode, ForwardGradientRecord, ModelObjective, PerturbationSeed};
use crate::model::{self, Batch, ModelSpec, ParamVector, PassCounter};
use crate::pacing::{Allocation, PacingConfig, PacingDecision, PacingEvent, RecordCollector};
use crate::peft::TrainableMask;
use crate::rng;
use crate::sampling::{filter_seeds, SamplerConfig, SeedStream};
use crate::wire::{self, DispatchKind, DispatchMessage};

pub use partition::{partition_data, partition_indices, PartitionScheme};
pub use train::{
    bp_baseline, train, train_experiment, BaselineReport, Experiment, MetricsHistory, MetricsRow, TrainOutcome,
    METRICS_CSV_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    FedSgd,
    FedAvg { local_epochs: usize },
}

/// Derivative mode with an optional fixed step; without one the step is
/// `DerivativeMode::default_step` at the current point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeSetting {
    Forward(Option<f64>),
    Central(Option<f64>),
    Analytic,
}

impl DerivativeSetting {
    pub fn resolve(&self, theta: &[f64]) -> DerivativeMode {
        match *self {
            DerivativeSetting::Forward(h) => {
                DerivativeMode::ForwardDiff(h.unwrap_or_else(|| DerivativeMode::default_step(theta)))
            }
            DerivativeSetting::Central(h) => {
                DerivativeMode::CentralDiff(h.unwrap_or_else(|| DerivativeMode::default_step(theta)))
            }
            DerivativeSetting::Analytic => DerivativeMode::Analytic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Serial,
    /// Clients run on the current rayon pool. Results are identical to serial.
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: u32,
    pub shard: Batch,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub theta: ParamVector,
    pub frozen: ParamVector,
    pub mask: TrainableMask,
    pub model: ModelSpec,
    pub g_prev: Option<ParamVector>,
    pub master_seed: u64,
    pub alloc: Allocation,
    pub pacing: PacingConfig,
    pub sampler: SamplerConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub derivative: DerivativeSetting,
    pub aggregation: Aggregation,
}

impl ServerState {
    pub fn trainable_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let dim = self.mask.trainable_dim(&self.model)?;
        if self.theta.len() != dim {
            return Err(Error::shape("server trainable", dim, self.theta.len()));
        }
        if !self.theta.is_finite() {
            return Err(Error::Numeric("server parameters are not finite".into()));
        }
        if let Some(g) = &self.g_prev {
            if g.len() != dim {
                return Err(Error::shape("previous gradient", dim, g.len()));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if let Aggregation::FedAvg { local_epochs: 0 } = self.aggregation {
            return Err(Error::config("train.local_epochs", "must be at least 1"));
        }
        self.pacing.validate()?;
        self.alloc.validate(&self.pacing)?;
        self.sampler.validate()
    }
}

/// What one round did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundMetrics {
    /// 1-based index of the completed round.
    pub round: usize,
    /// Perturbations aggregated this round.
    pub global_ps: usize,
    pub forward_passes: u64,
    pub variance_at_stop: Option<f64>,
    /// Mean unperturbed minibatch loss over the participating clients.
    pub train_loss: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub devices: usize,
    pub seeds_dispatched: usize,
    pub model_messages: usize,
    pub seed_messages: usize,
    pub records_uploaded: usize,
    pub records_discarded: usize,
    pub records_failed: usize,
    pub failed_clients: Vec<u32>,
    pub budget_exhausted: bool,
    pub events: Vec<PacingEvent>,
}

/// Mean of the reconstructed forward gradients. Records are ordered by
/// `(client_id, seed)` first so the floating-point sum is schedule-independent.
pub fn mean_forward_gradient(records: &[ForwardGradientRecord], dim: usize) -> Result<ParamVector> {
    if records.is_empty() {
        return Err(Error::Empty("no records to aggregate"));
    }
    let mut ordered: Vec<&ForwardGradientRecord> = records.iter().collect();
    ordered.sort_by_key(|r| (r.client_id, r.seed));
    let mut sum = ParamVector::zeros(dim);
    let mut v = vec![0.0; dim];
    for r in ordered {
        fill_perturbation(r.seed, &mut v);
        sum.axpy(r.dd, &v);
    }
    sum.scale(1.0 / records.len() as f64);
    Ok(sum)
}

/// FedSGD step: `theta - lr * mean(dd_i * v_i)`.
pub fn aggregate_fedsgd(records: &[ForwardGradientRecord], dim: usize, lr: f64, theta: &[f64]) -> Result<ParamVector> {
    if theta.len() != dim {
        return Err(Error::shape("aggregation parameters", dim, theta.len()));
    }
    let g = mean_forward_gradient(records, dim)?;
    Ok(sgd_step(theta, lr, &g))
}

fn sgd_step(theta: &[f64], lr: f64, g: &[f64]) -> ParamVector {
    let mut out = ParamVector::from(theta.to_vec());
    out.axpy(-lr, g);
    out
}

/// A client's parameters after local training, weighted by its shard size.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub theta: ParamVector,
    pub shard_size: usize,
}

/// FedAvg server step: shard-size weighted mean of the local parameters.
pub fn aggregate_fedavg(updates: &[LocalUpdate]) -> Result<ParamVector> {
    let first = updates.first().ok_or(Error::Empty("no local updates to average"))?;
    let total: usize = updates.iter().map(|u| u.shard_size).sum();
    if total == 0 {
        return Err(Error::Empty("local updates carry zero weight"));
    }
    let mut out = ParamVector::zeros(first.theta.len());
    for u in updates {
        if u.theta.len() != out.len() {
            return Err(Error::shape("local update", out.len(), u.theta.len()));
        }
        out.axpy(u.shard_size as f64 / total as f64, &u.theta);
    }
    Ok(out)
}

/// Result of `local_forward_sgd`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTraining {
    pub theta: ParamVector,
    pub records: Vec<ForwardGradientRecord>,
    pub passes_used: u64,
    pub first_base_loss: Option<f64>,
}

/// Runs one local forward-gradient SGD step per `(minibatch, seeds)` pair:
/// `theta <- theta - lr * mean(g)` over that step's seeds.
#[allow(clippy::too_many_arguments)]
pub fn local_forward_sgd(
    model: &ModelSpec,
    frozen: &[f64],
    mask: &TrainableMask,
    theta: &[f64],
    steps: &[(Batch, Vec<PerturbationSeed>)],
    lr: f64,
    derivative: DerivativeSetting,
    client_id: u32,
) -> Result<LocalTraining> {
    let mut local = ParamVector::from(theta.to_vec());
    let mut records = Vec::new();
    let mut passes = 0;
    let mut first_base_loss = None;
    for (e, (batch, seeds)) in steps.iter().enumerate() {
        let counter = PassCounter::new();
        let objective = ModelObjective::new(model, frozen, mask, batch, &counter);
        let mode = derivative.resolve(&local);
        let out = fwdgrad::client_round_compute(&objective, &local, seeds, mode, client_id, batch.len() as u32)?;
        if e == 0 {
            first_base_loss = out.base_loss;
        }
        passes += out.passes_used;
        let g = mean_forward_gradient(&out.records, local.len())?;
        local = sgd_step(&local, lr, &g);
        records.extend(out.records);
    }
    Ok(LocalTraining {
        theta: local,
        records,
        passes_used: passes,
        first_base_loss,
    })
}

/// Seeded client order for a round; the first `active_devices` take part.
pub fn client_order(master_seed: u64, round: usize, n_clients: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_clients).collect();
    order.shuffle(&mut rng::seeded_rng(master_seed, "client-order", &[round as u64]));
    order
}

/// Minibatch for `(round, client, step)`: up to `batch_size` distinct rows of
/// the shard in seeded order.
pub fn client_minibatch(shard: &Batch, batch_size: usize, master_seed: u64, round: usize, client_id: u32, step: usize) -> Result<Batch> {
    let mut rows: Vec<usize> = (0..shard.len()).collect();
    let mut rng = rng::seeded_rng(master_seed, "minibatch", &[round as u64, client_id as u64, step as u64]);
    let (picked, _) = rows.partial_shuffle(&mut rng, batch_size.min(shard.len()));
    shard.select(picked)
}

/// Hands out filtered seeds from one round's stream.
struct Dispatcher<'a> {
    stream: SeedStream,
    g_prev: Option<&'a [f64]>,
    sampler: &'a SamplerConfig,
    dim: usize,
}

impl Dispatcher<'_> {
    fn draw(&mut self, n: usize) -> Result<Vec<PerturbationSeed>> {
        let out = filter_seeds(self.g_prev, n, self.sampler, self.dim, self.stream)?;
        self.stream.start_index += out.candidates_drawn as u64;
        Ok(out.seeds)
    }
}

/// Per-round view of one participating client.
struct Session {
    client_id: u32,
    batch: Batch,
    base_loss: Option<f64>,
    failed: bool,
}

struct Job {
    session: usize,
    message: Vec<u8>,
}

struct JobResult {
    session: usize,
    outcome: Result<(Vec<u8>, u64, Option<f64>)>,
    seeds: usize,
}

/// Client side of one dispatch: decode, evaluate, encode the upload.
fn client_job(server: &ServerState, held_theta: &[f64], session: &Session, message: &[u8]) -> Result<(Vec<u8>, u64, Option<f64>, ParamVector)> {
    let msg = DispatchMessage::decode(message)?;
    let theta: ParamVector = match msg.kind {
        DispatchKind::Model => msg.trainable.into(),
        DispatchKind::Seeds => held_theta.to_vec().into(),
    };
    let counter = PassCounter::new();
    let objective = ModelObjective::new(&server.model, &server.frozen, &server.mask, &session.batch, &counter);
    let mode = server.derivative.resolve(&theta);
    let cached = session.base_loss.filter(|_| matches!(mode, DerivativeMode::ForwardDiff(_)));
    let out = client_compute_cached(&objective, &theta, &msg.seeds, mode, msg.client_id, session.batch.len() as u32, cached)?;
    let mut upload = Vec::with_capacity(out.records.len() * wire::RECORD_BYTES);
    for r in &out.records {
        upload.extend_from_slice(&wire::encode_record(r));
    }
    Ok((upload, out.passes_used, out.base_loss.or(cached), theta))
}

/// `client_round_compute` that can reuse an unperturbed loss from an earlier
/// dispatch in the same round.
fn client_compute_cached(
    objective: &ModelObjective<'_>,
    theta: &[f64],
    seeds: &[PerturbationSeed],
    mode: DerivativeMode,
    client_id: u32,
    batch_size: u32,
    cached_base: Option<f64>,
) -> Result<fwdgrad::ClientCompute> {
    use fwdgrad::Objective;
    let Some(base) = cached_base else {
        return fwdgrad::client_round_compute(objective, theta, seeds, mode, client_id, batch_size);
    };
    let start = objective.passes();
    let mut v = vec![0.0; theta.len()];
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        fill_perturbation(seed, &mut v);
        let dd = fwdgrad::directional_derivative(objective, theta, &v, mode, Some(base))?;
        records.push(ForwardGradientRecord {
            client_id,
            seed,
            dd,
            batch_size,
        });
    }
    Ok(fwdgrad::ClientCompute {
        records,
        passes_used: objective.passes() - start,
        base_loss: None,
    })
}

fn decode_upload(bytes: &[u8]) -> Result<Vec<ForwardGradientRecord>> {
    bytes.chunks(wire::RECORD_BYTES).map(wire::decode_record).collect()
}

/// Unperturbed loss for metrics; not counted as a forward pass.
fn metric_loss(server: &ServerState, batch: &Batch) -> Option<f64> {
    let full = server.mask.materialize(&server.model, &server.frozen, &server.theta).ok()?;
    model::full_loss(&server.model, &full, batch).ok()
}

/// Executes one round and updates the server in place.
pub fn run_round(server: &mut ServerState, clients: &[ClientState], exec: Execution) -> Result<RoundMetrics> {
    server.validate()?;
    if clients.is_empty() {
        return Err(Error::Empty("no clients"));
    }
    match server.aggregation {
        Aggregation::FedSgd => run_fedsgd_round(server, clients, exec),
        Aggregation::FedAvg { local_epochs } => run_fedavg_round(server, clients, exec, local_epochs),
    }
}

fn effective_pacing(server: &ServerState, n_clients: usize) -> (PacingConfig, Allocation) {
    let mut cfg = server.pacing;
    cfg.max_devices = cfg.max_devices.min(n_clients);
    let alloc = Allocation::new(
        server.alloc.active_devices.min(cfg.max_devices),
        server.alloc.perturbations_per_device,
    );
    (cfg, alloc)
}

fn round_stream(server: &ServerState) -> SeedStream {
    SeedStream::new(rng::derive_seed(server.master_seed, "round-seeds", &[server.round as u64]))
}

fn run_fedsgd_round(server: &mut ServerState, clients: &[ClientState], exec: Execution) -> Result<RoundMetrics> {
    let dim = server.trainable_dim();
    let round = server.round;
    let (cfg, alloc) = effective_pacing(server, clients.len());
    let order = client_order(server.master_seed, round, clients.len());
    let g_prev = server.g_prev.take();
    let mut dispatcher = Dispatcher {
        stream: round_stream(server),
        g_prev: g_prev.as_deref(),
        sampler: &server.sampler,
        dim,
    };
    let mut collector = RecordCollector::new(round, dim, cfg, alloc);
    let mut metrics = RoundMetrics {
        round: round + 1,
        ..Default::default()
    };
    let mut sessions: Vec<Session> = Vec::new();
    let mut jobs: Vec<Job> = Vec::new();

    let activate = |n: usize, perts: usize, sessions: &mut Vec<Session>, jobs: &mut Vec<Job>, m: &mut RoundMetrics, d: &mut Dispatcher<'_>| -> Result<()> {
        for &client in order.iter().skip(sessions.len()).take(n) {
            let c = &clients[client];
            let batch = client_minibatch(&c.shard, server.batch_size, server.master_seed, round, c.client_id, 0)?;
            let seeds = d.draw(perts)?;
            let message = DispatchMessage {
                kind: DispatchKind::Model,
                round: round as u32,
                client_id: c.client_id,
                trainable: server.theta.to_vec(),
                seeds,
            }
            .encode();
            m.bytes_down += message.len() as u64;
            m.model_messages += 1;
            m.seeds_dispatched += perts;
            jobs.push(Job {
                session: sessions.len(),
                message,
            });
            sessions.push(Session {
                client_id: c.client_id,
                batch,
                base_loss: None,
                failed: false,
            });
        }
        Ok(())
    };
    activate(alloc.active_devices, alloc.perturbations_per_device, &mut sessions, &mut jobs, &mut metrics, &mut dispatcher)?;

    loop {
        let results = execute_jobs(server, &sessions, std::mem::take(&mut jobs), exec);
        for res in results {
            let s = &mut sessions[res.session];
            match res.outcome.and_then(|(upload, passes, base)| Ok((decode_upload(&upload)?, upload.len(), passes, base))) {
                Ok((records, bytes, passes, base)) => {
                    metrics.bytes_up += bytes as u64;
                    metrics.forward_passes += passes;
                    metrics.records_uploaded += records.len();
                    s.base_loss = s.base_loss.or(base);
                    for r in records {
                        if collector.submit(r) == crate::pacing::Submission::Discarded {
                            metrics.records_discarded += 1;
                        }
                    }
                }
                Err(e) => {
                    warn!("round {}: client {} failed: {e}", round + 1, s.client_id);
                    s.failed = true;
                    metrics.records_failed += res.seeds;
                    if !metrics.failed_clients.contains(&s.client_id) {
                        metrics.failed_clients.push(s.client_id);
                    }
                }
            }
        }
        let decision = collector.evaluate();
        debug!("round {}: {decision}", round + 1);
        match decision {
            PacingDecision::StopAndAggregate { budget_exhausted } => {
                metrics.budget_exhausted = budget_exhausted;
                break;
            }
            PacingDecision::AddDevices(n) => {
                let perts = collector.allocation().perturbations_per_device;
                activate(n, perts, &mut sessions, &mut jobs, &mut metrics, &mut dispatcher)?;
            }
            PacingDecision::AddPerturbations(k) => {
                for (i, s) in sessions.iter().enumerate().filter(|(_, s)| !s.failed) {
                    let seeds = dispatcher.draw(k)?;
                    let message = DispatchMessage {
                        kind: DispatchKind::Seeds,
                        round: round as u32,
                        client_id: s.client_id,
                        trainable: Vec::new(),
                        seeds,
                    }
                    .encode();
                    metrics.bytes_down += message.len() as u64;
                    metrics.seed_messages += 1;
                    metrics.seeds_dispatched += k;
                    jobs.push(Job { session: i, message });
                }
            }
        }
    }

    metrics.variance_at_stop = collector.variance_at_stop();
    let final_alloc = collector.allocation();
    let (records, events) = collector.into_records();
    metrics.events = events;
    if records.is_empty() {
        return Err(Error::Numeric(format!("round {}: every client failed", round + 1)));
    }
    metrics.global_ps = records.len();
    metrics.devices = sessions.len();
    let losses: Vec<f64> = sessions
        .iter()
        .filter(|s| !s.failed)
        .filter_map(|s| s.base_loss.or_else(|| metric_loss(server, &s.batch)))
        .collect();
    metrics.train_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);

    let g = mean_forward_gradient(&records, dim)?;
    server.theta = sgd_step(&server.theta, server.lr, &g);
    server.g_prev = Some(g);
    server.alloc = final_alloc;
    server.round += 1;
    Ok(metrics)
}

fn execute_jobs(server: &ServerState, sessions: &[Session], jobs: Vec<Job>, exec: Execution) -> Vec<JobResult> {
    let run = |job: &Job| {
        let s = &sessions[job.session];
        let seeds = DispatchMessage::decode(&job.message).map(|m| m.seeds.len()).unwrap_or(0);
        let outcome = client_job(server, &server.theta, s, &job.message).map(|(up, p, b, _)| (up, p, b));
        JobResult {
            session: job.session,
            outcome,
            seeds,
        }
    };
    match exec {
        Execution::Serial => jobs.iter().map(run).collect(),
        Execution::Parallel => jobs.par_iter().map(run).collect(),
    }
}

fn run_fedavg_round(server: &mut ServerState, clients: &[ClientState], exec: Execution, local_epochs: usize) -> Result<RoundMetrics> {
    let dim = server.trainable_dim();
    let round = server.round;
    let (_, alloc) = effective_pacing(server, clients.len());
    let order = client_order(server.master_seed, round, clients.len());
    let g_prev = server.g_prev.take();
    let mut dispatcher = Dispatcher {
        stream: round_stream(server),
        g_prev: g_prev.as_deref(),
        sampler: &server.sampler,
        dim,
    };
    let k = alloc.perturbations_per_device;
    let mut metrics = RoundMetrics {
        round: round + 1,
        devices: alloc.active_devices,
        ..Default::default()
    };
    struct AvgJob {
        client: usize,
        message: Vec<u8>,
        steps: Vec<Batch>,
    }
    let mut jobs = Vec::new();
    for &client in order.iter().take(alloc.active_devices) {
        let c = &clients[client];
        let seeds = dispatcher.draw(k * local_epochs)?;
        let message = DispatchMessage {
            kind: DispatchKind::Model,
            round: round as u32,
            client_id: c.client_id,
            trainable: server.theta.to_vec(),
            seeds,
        }
        .encode();
        metrics.bytes_down += message.len() as u64;
        metrics.model_messages += 1;
        metrics.seeds_dispatched += k * local_epochs;
        let steps = (0..local_epochs)
            .map(|e| client_minibatch(&c.shard, server.batch_size, server.master_seed, round, c.client_id, e))
            .collect::<Result<Vec<_>>>()?;
        jobs.push(AvgJob { client, message, steps });
    }
    let srv = &*server;
    let run = |job: &AvgJob| -> Result<(Vec<u8>, u64, Option<f64>)> {
        let msg = DispatchMessage::decode(&job.message)?;
        let steps: Vec<(Batch, Vec<PerturbationSeed>)> = job
            .steps
            .iter()
            .cloned()
            .zip(msg.seeds.chunks(k).map(<[_]>::to_vec))
            .collect();
        let out = local_forward_sgd(&srv.model, &srv.frozen, &srv.mask, &msg.trainable, &steps, srv.lr, srv.derivative, msg.client_id)?;
        let mut upload = Vec::new();
        for r in &out.records {
            upload.extend_from_slice(&wire::encode_record(r));
        }
        Ok((upload, out.passes_used, out.first_base_loss))
    };
    let results: Vec<_> = match exec {
        Execution::Serial => jobs.iter().map(run).collect(),
        Execution::Parallel => jobs.par_iter().map(run).collect(),
    };

    let mut updates = Vec::new();
    let mut all_records = Vec::new();
    let mut losses = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        let c = &clients[job.client];
        match res.and_then(|(up, p, b)| Ok((decode_upload(&up)?, up.len(), p, b))) {
            Ok((records, bytes, passes, base)) => {
                metrics.bytes_up += bytes as u64;
                metrics.forward_passes += passes;
                metrics.records_uploaded += records.len();
                // Replay the local trajectory from the scalar uploads.
                let mut local = server.theta.clone();
                for chunk in records.chunks(k) {
                    let g = mean_forward_gradient(chunk, dim)?;
                    local = sgd_step(&local, server.lr, &g);
                }
                updates.push(LocalUpdate {
                    theta: local,
                    shard_size: c.shard.len(),
                });
                if let Some(b) = base.or_else(|| metric_loss(server, &job.steps[0])) {
                    losses.push(b);
                }
                all_records.extend(records);
            }
            Err(e) => {
                warn!("round {}: client {} failed: {e}", round + 1, c.client_id);
                metrics.records_failed += k * local_epochs;
                metrics.failed_clients.push(c.client_id);
            }
        }
    }
    if updates.is_empty() {
        return Err(Error::Numeric(format!("round {}: every client failed", round + 1)));
    }
    metrics.global_ps = all_records.len();
    metrics.train_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    server.g_prev = Some(mean_forward_gradient(&all_records, dim)?);
    server.theta = aggregate_fedavg(&updates)?;
    server.alloc = alloc;
    server.round += 1;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::{Activation, LossKind};
    use crate::pacing::VarianceKind;

    fn fixed_pacing(devices: usize, perts: usize) -> (PacingConfig, Allocation) {
        (
            PacingConfig {
                variance_threshold: f64::INFINITY,
                max_devices: devices,
                max_perturbations_per_device: perts,
                min_records_for_variance: 4,
                variance_kind: VarianceKind::Elementwise,
            },
            Allocation::new(devices, perts),
        )
    }

    fn setup(n_clients: usize, devices: usize, perts: usize, derivative: DerivativeSetting) -> (ServerState, Vec<ClientState>) {
        let model = ModelSpec::mlp(vec![3, 4, 2], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let frozen = model.init_params(5);
        let data = synthetic_blobs(60, 2, 3, 2.0, 1).unwrap();
        let clients = partition_data(&data, PartitionScheme::Uniform { n_clients }, 2)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, shard)| ClientState {
                client_id: i as u32,
                shard,
            })
            .collect();
        let (pacing, alloc) = fixed_pacing(devices, perts);
        let server = ServerState {
            round: 0,
            theta: frozen.clone(),
            frozen,
            mask: TrainableMask::Full,
            model,
            g_prev: None,
            master_seed: 11,
            alloc,
            pacing,
            sampler: SamplerConfig::default(),
            lr: 0.1,
            batch_size: 8,
            derivative,
            aggregation: Aggregation::FedSgd,
        };
        (server, clients)
    }

    #[test]
    fn fedsgd_step_hand_case() {
        // mean of (2, 0) and (0, 2) is (1, 1)
        let g = [1.0, 1.0];
        assert_eq!(&sgd_step(&[0.5, 0.5], 0.1, &g)[..], &[0.4, 0.4]);
    }

    #[test]
    fn fedsgd_reconstructs_from_seeds() {
        let s1 = PerturbationSeed { base_seed: 1, index: 0 };
        let s2 = PerturbationSeed { base_seed: 1, index: 1 };
        let (v1, v2) = (fwdgrad::gen_perturbation(s1, 2), fwdgrad::gen_perturbation(s2, 2));
        let recs = [
            ForwardGradientRecord { client_id: 0, seed: s1, dd: 1.5, batch_size: 8 },
            ForwardGradientRecord { client_id: 1, seed: s2, dd: -0.5, batch_size: 8 },
        ];
        let out = aggregate_fedsgd(&recs, 2, 0.1, &[0.5, 0.5]).unwrap();
        for j in 0..2 {
            let g = (1.5 * v1[j] + -0.5 * v2[j]) / 2.0;
            assert!((out[j] - (0.5 - 0.1 * g)).abs() < 1e-15);
        }
        let same = aggregate_fedsgd(&recs[..1], 2, 0.0, &[0.5, 0.5]).unwrap();
        assert_eq!(&same[..], &[0.5, 0.5]);
    }

    #[test]
    fn fedavg_weighting() {
        let a = LocalUpdate { theta: vec![1.0, 0.0].into(), shard_size: 10 };
        let b = LocalUpdate { theta: vec![0.0, 4.0].into(), shard_size: 30 };
        assert_eq!(&aggregate_fedavg(&[a, b]).unwrap()[..], &[0.25, 3.0]);
        let same: ParamVector = vec![0.5, -0.75].into();
        let twins = [
            LocalUpdate { theta: same.clone(), shard_size: 3 },
            LocalUpdate { theta: same.clone(), shard_size: 5 },
        ];
        assert_eq!(aggregate_fedavg(&twins).unwrap(), same);
        assert!(aggregate_fedavg(&[]).is_err());
    }

    #[test]
    fn single_client_single_perturbation_analytic_update() {
        let (mut server, clients) = setup(1, 1, 1, DerivativeSetting::Analytic);
        let theta = server.theta.clone();
        let metrics = run_round(&mut server, &clients, Execution::Serial).unwrap();
        assert_eq!(metrics.global_ps, 1);
        let seed = PerturbationSeed {
            base_seed: rng::derive_seed(11, "round-seeds", &[0]),
            index: 0,
        };
        let v = fwdgrad::gen_perturbation(seed, theta.len());
        let batch = client_minibatch(&clients[0].shard, 8, 11, 0, 0, 0).unwrap();
        let grad = model::analytic_gradient(&server.model, &server.frozen, &server.mask, &theta, &batch).unwrap();
        let dd = grad.dot(&v);
        for j in 0..theta.len() {
            let expected = theta[j] - 0.1 * (dd * v[j]);
            assert!((server.theta[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn byte_accounting_matches_serializers() {
        let (mut server, clients) = setup(6, 3, 4, DerivativeSetting::Forward(None));
        let dim = server.trainable_dim();
        let m = run_round(&mut server, &clients, Execution::Serial).unwrap();
        assert_eq!(m.model_messages, 3);
        assert_eq!(m.bytes_up as usize, m.records_uploaded * wire::RECORD_BYTES);
        let expected_down = m.model_messages * (wire::DISPATCH_HEADER_BYTES + 8 * dim)
            + m.seed_messages * wire::DISPATCH_HEADER_BYTES
            + m.seeds_dispatched * wire::SEED_BYTES;
        assert_eq!(m.bytes_down as usize, expected_down);
        assert_eq!(m.seeds_dispatched, m.global_ps + m.records_discarded + m.records_failed);
        assert_eq!(m.forward_passes, 3 * (4 + 1));
    }

    #[test]
    fn fedavg_one_epoch_one_client_matches_fedsgd() {
        let (mut sgd, clients) = setup(1, 1, 5, DerivativeSetting::Forward(Some(1e-4)));
        let mut avg = sgd.clone();
        avg.aggregation = Aggregation::FedAvg { local_epochs: 1 };
        run_round(&mut sgd, &clients, Execution::Serial).unwrap();
        run_round(&mut avg, &clients, Execution::Serial).unwrap();
        assert_eq!(sgd.theta, avg.theta);
        assert_eq!(sgd.g_prev, avg.g_prev);
    }

    #[test]
    fn rounds_are_deterministic_and_schedule_independent() {
        let (mut a, clients) = setup(8, 4, 3, DerivativeSetting::Forward(None));
        a.pacing.variance_threshold = 1e-3;
        a.pacing.max_devices = 8;
        a.pacing.max_perturbations_per_device = 6;
        a.sampler = SamplerConfig::with_keep_ratio(0.5);
        let mut b = a.clone();
        for _ in 0..3 {
            let ma = run_round(&mut a, &clients, Execution::Serial).unwrap();
            let mb = run_round(&mut b, &clients, Execution::Parallel).unwrap();
            assert_eq!(ma, mb);
        }
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn pacing_grows_devices_then_perturbations() {
        let (mut server, clients) = setup(4, 1, 1, DerivativeSetting::Forward(None));
        server.pacing.variance_threshold = 1e-12;
        server.pacing.max_devices = 4;
        server.pacing.max_perturbations_per_device = 3;
        let m = run_round(&mut server, &clients, Execution::Serial).unwrap();
        assert!(m.budget_exhausted);
        assert_eq!(m.devices, 4);
        assert_eq!(m.global_ps, 12);
        assert_eq!(server.alloc, Allocation::new(4, 3));
        // base loss cached across top-up dispatches: one pass per seed plus one per client
        assert_eq!(m.forward_passes, 12 + 4);
    }
}
