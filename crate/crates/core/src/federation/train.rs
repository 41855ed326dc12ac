use std::io::{Read, Write};

use log::info;
use rand::seq::SliceRandom;

use super::{partition_data, run_round, ClientState, Execution, RoundMetrics, ServerState};
use crate::config::RunConfig;
use crate::data::{self, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, ParamVector};
use crate::pacing::PacingEvent;
use crate::peft::TrainableMask;
use crate::rng;

pub const METRICS_CSV_HEADER: &str =
    "round,global_ps,forward_passes_cum,variance_at_stop,train_loss,eval_accuracy,bytes_up_cum,bytes_down_cum";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub global_ps: usize,
    pub forward_passes_cum: u64,
    pub variance_at_stop: Option<f64>,
    pub train_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub bytes_up_cum: u64,
    pub bytes_down_cum: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsHistory {
    pub rows: Vec<MetricsRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_CSV_HEADER.split(','))?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.global_ps.to_string(),
                r.forward_passes_cum.to_string(),
                opt(r.variance_at_stop),
                opt(r.train_loss),
                opt(r.eval_accuracy),
                r.bytes_up_cum.to_string(),
                r.bytes_down_cum.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        if reader.headers()?.iter().collect::<Vec<_>>().join(",") != METRICS_CSV_HEADER {
            return Err(Error::Wire("unexpected metrics header".into()));
        }
        let bad = |f: &str| Error::Wire(format!("bad metrics field `{f}`"));
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(s)) };
        let maybe = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != 8 {
                return Err(Error::Wire(format!("metrics row has {} fields", rec.len())));
            }
            rows.push(MetricsRow {
                round: rec[0].parse().map_err(|_| bad(&rec[0]))?,
                global_ps: rec[1].parse().map_err(|_| bad(&rec[1]))?,
                forward_passes_cum: rec[2].parse().map_err(|_| bad(&rec[2]))?,
                variance_at_stop: maybe(&rec[3])?,
                train_loss: maybe(&rec[4])?,
                eval_accuracy: maybe(&rec[5])?,
                bytes_up_cum: rec[6].parse().map_err(|_| bad(&rec[6]))?,
                bytes_down_cum: rec[7].parse().map_err(|_| bad(&rec[7]))?,
            });
        }
        Ok(MetricsHistory { rows })
    }

    /// First round whose evaluation met `target`.
    pub fn rounds_to(&self, target: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.eval_accuracy.is_some_and(|a| a >= target))
            .map(|r| r.round)
    }

    /// Cumulative forward passes when `target` was first met.
    pub fn passes_to(&self, target: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.eval_accuracy.is_some_and(|a| a >= target))
            .map(|r| r.forward_passes_cum)
    }
}

/// Everything a run needs, built deterministically from the config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: ModelSpec,
    pub mask: TrainableMask,
    pub train_set: Batch,
    pub eval_set: Batch,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub target_accuracy: f64,
    pub max_rounds: usize,
    pub eval_interval: usize,
}

impl Experiment {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let master = cfg.train.master_seed;
        let model = cfg.model_spec()?;
        let mask = cfg.mask()?;
        let spec = match cfg.dataset_spec()? {
            DatasetSpec::SyntheticBlobs {
                n_samples,
                n_classes,
                input_dim,
                separation,
                seed,
            } => DatasetSpec::SyntheticBlobs {
                n_samples,
                n_classes,
                input_dim,
                separation,
                seed: rng::derive_seed(master, "dataset", &[seed]),
            },
            csv => csv,
        };
        let full = spec.load()?;
        let (train_set, eval_set) =
            data::split_train_eval(&full, cfg.dataset.eval_fraction, rng::derive_seed(master, "eval-split", &[]))?;
        let shards = partition_data(&train_set, cfg.partition_scheme(), rng::derive_seed(master, "partition", &[]))?;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(i, shard)| ClientState {
                client_id: i as u32,
                shard,
            })
            .collect();
        let frozen = model.init_params(rng::derive_seed(master, "frozen-init", &[]));
        let theta = mask.initial_trainable(&model, &frozen, rng::derive_seed(master, "trainable-init", &[]))?;
        let server = ServerState {
            round: 0,
            theta,
            frozen,
            mask,
            model: model.clone(),
            g_prev: None,
            master_seed: master,
            alloc: cfg.initial_allocation(),
            pacing: cfg.pacing_config(),
            sampler: cfg.sampler_config(),
            lr: cfg.train.lr,
            batch_size: cfg.train.batch_size,
            derivative: cfg.derivative_setting(),
            aggregation: cfg.aggregation(),
        };
        Ok(Experiment {
            model,
            mask,
            train_set,
            eval_set,
            clients,
            server,
            target_accuracy: cfg.train.target_accuracy,
            max_rounds: cfg.train.max_rounds,
            eval_interval: cfg.train.eval_interval,
        })
    }

    pub fn eval_accuracy(&self, theta: &[f64]) -> Result<f64> {
        model::accuracy(&self.model, &self.server.frozen, &self.mask, theta, &self.eval_set)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: MetricsHistory,
    pub reached_target: bool,
    pub rounds_run: usize,
    pub final_accuracy: f64,
    pub theta: ParamVector,
    pub mask: TrainableMask,
    pub rounds: Vec<RoundMetrics>,
}

impl TrainOutcome {
    pub fn pacing_events(&self) -> Vec<PacingEvent> {
        self.rounds.iter().flat_map(|r| r.events.iter().copied()).collect()
    }
}

/// Runs rounds until the evaluation accuracy reaches the target or the round
/// budget is spent. Evaluates at round 0, every `eval_interval` rounds and at
/// the last round.
pub fn train(cfg: &RunConfig, exec: Execution) -> Result<TrainOutcome> {
    let exp = Experiment::prepare(cfg)?;
    train_experiment(exp, exec)
}

pub fn train_experiment(mut exp: Experiment, exec: Execution) -> Result<TrainOutcome> {
    let mut history = MetricsHistory::default();
    let mut rounds = Vec::new();
    let mut acc = exp.eval_accuracy(&exp.server.theta)?;
    history.rows.push(MetricsRow {
        round: 0,
        global_ps: 0,
        forward_passes_cum: 0,
        variance_at_stop: None,
        train_loss: None,
        eval_accuracy: Some(acc),
        bytes_up_cum: 0,
        bytes_down_cum: 0,
    });
    let mut reached = acc >= exp.target_accuracy;
    let (mut passes, mut up, mut down) = (0u64, 0u64, 0u64);
    while !reached && exp.server.round < exp.max_rounds {
        let m = run_round(&mut exp.server, &exp.clients, exec).map_err(|e| match e {
            Error::Numeric(detail) => Error::Diverged {
                round: exp.server.round + 1,
                detail,
            },
            other => other,
        })?;
        if !exp.server.theta.is_finite() || m.train_loss.is_some_and(|l| !l.is_finite()) {
            return Err(Error::Diverged {
                round: m.round,
                detail: format!("loss {:?}", m.train_loss),
            });
        }
        passes += m.forward_passes;
        up += m.bytes_up;
        down += m.bytes_down;
        let evaluate = m.round % exp.eval_interval == 0 || m.round == exp.max_rounds;
        let eval_accuracy = if evaluate {
            acc = exp.eval_accuracy(&exp.server.theta)?;
            reached = acc >= exp.target_accuracy;
            Some(acc)
        } else {
            None
        };
        info!(
            "round {} ps={} passes={} D={:?} loss={:?} acc={:?}",
            m.round, m.global_ps, passes, m.variance_at_stop, m.train_loss, eval_accuracy
        );
        history.rows.push(MetricsRow {
            round: m.round,
            global_ps: m.global_ps,
            forward_passes_cum: passes,
            variance_at_stop: m.variance_at_stop,
            train_loss: m.train_loss,
            eval_accuracy,
            bytes_up_cum: up,
            bytes_down_cum: down,
        });
        rounds.push(m);
    }
    Ok(TrainOutcome {
        history,
        reached_target: reached,
        rounds_run: exp.server.round,
        final_accuracy: acc,
        theta: exp.server.theta,
        mask: exp.mask,
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// Mean eval accuracy over the last tenth of the steps.
    pub converged_accuracy: f64,
    pub steps: usize,
}

/// Centralized minibatch SGD with exact gradients on the same training split
/// and starting point as the federated run.
pub fn bp_baseline(cfg: &RunConfig, steps: usize, lr: f64, batch_size: usize) -> Result<BaselineReport> {
    let exp = Experiment::prepare(cfg)?;
    let mut theta = exp.server.theta.clone();
    let mut rng = rng::seeded_rng(cfg.train.master_seed, "bp-baseline", &[]);
    let mut rows: Vec<usize> = (0..exp.train_set.len()).collect();
    let mut history = vec![exp.eval_accuracy(&theta)?];
    for _ in 0..steps {
        let (picked, _) = rows.partial_shuffle(&mut rng, batch_size.min(exp.train_set.len()));
        let batch = exp.train_set.select(picked)?;
        let g = model::analytic_gradient(&exp.model, &exp.server.frozen, &exp.mask, &theta, &batch)?;
        theta.axpy(-lr, &g);
        history.push(exp.eval_accuracy(&theta)?);
    }
    let tail = &history[history.len() - (steps / 10).max(1)..];
    Ok(BaselineReport {
        final_accuracy: *history.last().unwrap_or(&0.0),
        best_accuracy: history.iter().copied().fold(0.0, f64::max),
        converged_accuracy: tail.iter().sum::<f64>() / tail.len() as f64,
        steps,
    })
}
