//! One pass/fail line per acceptance criterion. Run with
//! `cargo test -p fwdfed --test acceptance -- --nocapture` to see the report.

use std::time::{Duration, Instant};

use fwdfed::data::synthetic_blobs;
use fwdfed::federation::{self, bp_baseline, ClientState, Execution, Experiment, ServerState};
use fwdfed::fwdgrad::{
    client_round_compute, directional_derivative, gen_perturbation, unbiasedness_error, DerivativeMode,
    ModelObjective, Objective, PerturbationSeed,
};
use fwdfed::model::{Activation, LossKind, PassCounter};
use fwdfed::pacing::{half_split_variance, memory_estimate, VarianceKind};
use fwdfed::sampling::{cosine_similarity, orthogonality_census};
use fwdfed::wire::{self, DispatchKind, DispatchMessage};
use fwdfed::{Batch, ModelSpec, ParamVector, RunConfig, TrainableMask};

type Outcome = Result<(bool, String), String>;

struct Report {
    lines: Vec<(usize, &'static str, bool, String, Duration)>,
}

impl Report {
    fn check(&mut self, id: usize, name: &'static str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let elapsed = start.elapsed();
        println!(
            "{} criterion {id:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        self.lines.push((id, name, pass, detail, elapsed));
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// `z = 2 (x^2 + y^2)`.
struct Bowl;

impl Objective for Bowl {
    fn dim(&self) -> usize {
        2
    }
    fn loss(&self, t: &[f64]) -> fwdfed::Result<f64> {
        Ok(2.0 * (t[0] * t[0] + t[1] * t[1]))
    }
    fn gradient(&self, t: &[f64]) -> fwdfed::Result<ParamVector> {
        Ok(vec![4.0 * t[0], 4.0 * t[1]].into())
    }
    fn passes(&self) -> u64 {
        0
    }
}

fn small_mlp() -> (ModelSpec, ParamVector, Batch) {
    let model = ModelSpec::mlp(vec![4, 8, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap();
    let theta = model.init_params(7);
    let batch = synthetic_blobs(32, 3, 4, 2.0, 3).unwrap();
    (model, theta, batch)
}

fn majority(votes: &[bool]) -> bool {
    votes.iter().filter(|v| **v).count() * 2 > votes.len()
}

fn fixed(cfg: &RunConfig, devices: usize, perts: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.pacing.variance_threshold = f64::INFINITY;
    c.pacing.initial_devices = devices;
    c.pacing.initial_perturbations = perts;
    c
}

fn seeded(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.train.master_seed = seed;
    c
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn unbiasedness() -> Outcome {
    let start = Instant::now();
    let (model, theta, batch) = small_mlp();
    let counter = PassCounter::new();
    let mask = TrainableMask::Full;
    let obj = ModelObjective::new(&model, &theta, &mask, &batch, &counter);
    if obj.dim() != 67 {
        return Err(format!("dim {}", obj.dim()));
    }
    let e200k = unbiasedness_error(&obj, &theta, 200_000, DerivativeMode::Analytic, 1).map_err(err)?;
    // RMS over independent repeats so the ratio reflects the expected error.
    let rms = |n: usize| -> Result<f64, String> {
        let mut s = 0.0;
        for rep in 0..4 {
            let e = unbiasedness_error(&obj, &theta, n, DerivativeMode::Analytic, 100 + rep).map_err(err)?;
            s += e * e;
        }
        Ok((s / 4.0).sqrt())
    };
    let ratio = rms(50_000)? / rms(200_000)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = e200k <= 0.05 && (1.4..=2.6).contains(&ratio) && secs < 30.0;
    Ok((
        pass,
        format!("rel_err(200k)={e200k:.4} (<=0.05), err(50k)/err(200k)={ratio:.3} (2 +/- 30%), {secs:.1}s (<30s)"),
    ))
}

fn fd_error_ratio<O: Objective>(obj: &O, theta: &[f64], v: &[f64]) -> Result<f64, String> {
    let exact = directional_derivative(obj, theta, v, DerivativeMode::Analytic, None).map_err(err)?;
    let e = |h| -> Result<f64, String> {
        Ok((directional_derivative(obj, theta, v, DerivativeMode::ForwardDiff(h), None).map_err(err)? - exact).abs())
    };
    Ok(e(1e-2)? / e(1e-3)?)
}

fn finite_difference() -> Outcome {
    let bowl = fd_error_ratio(&Bowl, &[0.5, 0.5], &[1.0, 0.0])?;
    let (model, theta, batch) = small_mlp();
    let counter = PassCounter::new();
    let mask = TrainableMask::Full;
    let obj = ModelObjective::new(&model, &theta, &mask, &batch, &counter);
    let v = gen_perturbation(PerturbationSeed { base_seed: 5, index: 0 }, obj.dim());
    let mlp = fd_error_ratio(&obj, &theta, &v)?;
    let ok = |r: f64| (5.0..=20.0).contains(&r);
    Ok((ok(bowl) && ok(mlp), format!("err(1e-2)/err(1e-3): quadratic={bowl:.3}, mlp={mlp:.3} (in [5, 20])")))
}

fn pass_accounting() -> Outcome {
    let (model, theta, batch) = small_mlp();
    let counter = PassCounter::new();
    let mask = TrainableMask::Full;
    let obj = ModelObjective::new(&model, &theta, &mask, &batch, &counter);
    let seeds: Vec<_> = (0..50).map(|index| PerturbationSeed { base_seed: 9, index }).collect();
    let h = DerivativeMode::default_step(&theta);
    let out = client_round_compute(&obj, &theta, &seeds, DerivativeMode::ForwardDiff(h), 0, batch.len() as u32)
        .map_err(err)?;
    let pass = out.passes_used == 51 && counter.get() == 51 && out.records.len() == 50;
    Ok((pass, format!("N=50 forward-difference perturbations used {} passes (expect 51)", counter.get())))
}

fn census() -> Outcome {
    let oracle = 2.0 * (0.5 * (1.0 + libm::erf(0.03 * 1000f64.sqrt() / std::f64::consts::SQRT_2))) - 1.0;
    let frac = orthogonality_census(1000, 100_000, 0.03, 0).map_err(err)?;
    let pass = (frac - oracle).abs() <= 0.01 && (oracle - 0.657).abs() < 1e-3;
    Ok((pass, format!("fraction |cos|<0.03 = {frac:.4}, oracle {oracle:.4} (+/- 0.01)")))
}

fn variance_cases() -> Outcome {
    let pv = |v: &[f64]| ParamVector::from(v.to_vec());
    let same = vec![pv(&[0.3, -1.2, 4.0]); 6];
    let d0 = half_split_variance(&same, VarianceKind::Elementwise).map_err(err)?;
    let d1 = half_split_variance(&[pv(&[1.0, 0.0]), pv(&[-1.0, 0.0])], VarianceKind::Elementwise).map_err(err)?;
    let grads: Vec<ParamVector> = (0..7).map(|i| gen_perturbation(PerturbationSeed { base_seed: 3, index: i }, 5)).collect();
    let c = 3.7;
    let scaled: Vec<ParamVector> = grads
        .iter()
        .map(|g| {
            let mut s = g.clone();
            s.scale(c);
            s
        })
        .collect();
    let d = half_split_variance(&grads, VarianceKind::Elementwise).map_err(err)?;
    let dc = half_split_variance(&scaled, VarianceKind::Elementwise).map_err(err)?;
    let rel = (dc - c * c * d).abs() / (c * c * d);
    let pass = d0 == 0.0 && d1 == 1.0 && rel <= 1e-12;
    Ok((pass, format!("identical D={d0}, opposite pair D={d1}, scaling rel err={rel:.1e}")))
}

fn pacing_behavior() -> Outcome {
    let mut votes = Vec::new();
    let mut detail = Vec::new();
    for seed in SEEDS {
        let cfg = seeded(seed);
        let target = cfg.train.target_accuracy;
        let adaptive = federation::train(&cfg, Execution::Parallel).map_err(err)?;
        // Monotonicity over the whole round budget, not just until the target.
        let mut full_cfg = cfg.clone();
        full_cfg.train.target_accuracy = 1.0;
        let full = federation::train(&full_cfg, Execution::Parallel).map_err(err)?;
        let ps: Vec<usize> = full.history.rows.iter().skip(1).map(|r| r.global_ps).collect();
        let pairs = ps.len().saturating_sub(1);
        let mono = if pairs == 0 {
            1.0
        } else {
            ps.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / pairs as f64
        };
        let small = fixed(&cfg, cfg.pacing.initial_devices, cfg.pacing.initial_perturbations);
        let large = fixed(&cfg, cfg.pacing.max_devices, cfg.pacing.max_perturbations_per_device);
        let mut best: Option<u64> = None;
        for c in [&small, &large] {
            let out = federation::train(c, Execution::Parallel).map_err(err)?;
            if let Some(p) = out.history.passes_to(target) {
                best = Some(best.map_or(p, |b| b.min(p)));
            }
        }
        let own = adaptive.history.passes_to(target);
        let efficient = match (own, best) {
            (Some(a), Some(b)) => a as f64 <= 1.5 * b as f64,
            (Some(_), None) => true,
            (None, _) => false,
        };
        votes.push(mono >= 0.9 && efficient);
        detail.push(format!("seed {seed}: monotone {:.0}% of {pairs} pairs, passes {own:?} vs best fixed {best:?}", mono * 100.0));
    }
    Ok((majority(&votes), detail.join("; ")))
}

fn sampling_direction() -> Outcome {
    let mut votes = Vec::new();
    let mut detail = Vec::new();
    for seed in SEEDS {
        let base = seeded(seed);
        let target = base.train.target_accuracy;
        let mut filtered = base.clone();
        filtered.sampler.keep_ratio = 0.2;
        let r_full = federation::train(&base, Execution::Parallel).map_err(err)?.history.rounds_to(target);
        let r_kept = federation::train(&filtered, Execution::Parallel).map_err(err)?.history.rounds_to(target);
        votes.push(matches!((r_kept, r_full), (Some(a), Some(b)) if a <= b) || (r_kept.is_some() && r_full.is_none()));
        detail.push(format!("seed {seed}: {r_kept:?} vs {r_full:?}"));
    }
    Ok((majority(&votes), format!("rounds keep 0.2 vs 1.0: {}", detail.join("; "))))
}

fn convergence_parity() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let bp = bp_baseline(&cfg, 3000, cfg.train.lr, cfg.train.batch_size).map_err(err)?;
    let mut run = cfg.clone();
    run.train.max_rounds = 500;
    run.train.target_accuracy = (bp.converged_accuracy - 0.02).max(0.0);
    let out = federation::train(&run, Execution::Serial).map_err(err)?;
    let best = out.history.rows.iter().filter_map(|r| r.eval_accuracy).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = out.reached_target && elapsed < Duration::from_secs(300);
    Ok((
        pass,
        format!(
            "BP converged {:.4}; forward reached {best:.4} at round {:?} of 500",
            bp.converged_accuracy,
            out.history.rounds_to(run.train.target_accuracy)
        ),
    ))
}

fn csv_bytes(cfg: &RunConfig, exec: Execution) -> Result<Vec<u8>, String> {
    let out = federation::train(cfg, exec).map_err(err)?;
    let mut buf = Vec::new();
    out.history.write_csv(&mut buf).map_err(err)?;
    Ok(buf)
}

fn determinism() -> Outcome {
    let mut variants = vec![RunConfig::default()];
    let mut c = RunConfig::default();
    c.sampler.keep_ratio = 0.2;
    c.derivative.mode = fwdfed::config::ModeKind::Central;
    c.train.master_seed = 11;
    variants.push(c);
    let mut c = RunConfig::default();
    c.train.aggregation = fwdfed::config::AggregationKind::Fedavg;
    c.train.local_epochs = 3;
    c.train.max_rounds = 40;
    variants.push(c);
    let mut identical = 0;
    for cfg in &variants {
        if csv_bytes(cfg, Execution::Serial)? == csv_bytes(cfg, Execution::Parallel)? {
            identical += 1;
        }
    }
    Ok((
        identical == variants.len(),
        format!("{identical}/{} configs produce byte-identical serial/parallel metrics CSVs", variants.len()),
    ))
}

fn accounting() -> Outcome {
    let cfg = RunConfig::default();
    let exp = Experiment::prepare(&cfg).map_err(err)?;
    let model_bytes = (exp.model.param_count() * 8) as u64;
    let mut checks = Vec::new();
    for mask in [TrainableMask::Full, TrainableMask::BiasOnly, TrainableMask::LowRank { rank: 2 }] {
        let dim = mask.trainable_dim(&exp.model).map_err(err)? as u64;
        checks.push(memory_estimate(model_bytes, dim, 8) == model_bytes + 2 * dim * 8);
        let mut server: ServerState = exp.server.clone();
        server.mask = mask;
        server.theta = mask.initial_trainable(&exp.model, &server.frozen, 1).map_err(err)?;
        let clients: Vec<ClientState> = exp.clients.clone();
        let m = federation::run_round(&mut server, &clients, Execution::Serial).map_err(err)?;
        checks.push(m.bytes_up == (m.records_uploaded * wire::RECORD_BYTES) as u64);
        let model_msg = DispatchMessage {
            kind: DispatchKind::Model,
            round: 0,
            client_id: 0,
            trainable: vec![0.0; dim as usize],
            seeds: Vec::new(),
        }
        .encode()
        .len() as u64;
        let seed_msg = DispatchMessage {
            kind: DispatchKind::Seeds,
            round: 0,
            client_id: 0,
            trainable: Vec::new(),
            seeds: Vec::new(),
        }
        .encode()
        .len() as u64;
        let formula = m.model_messages as u64 * (wire::DISPATCH_HEADER_BYTES as u64 + 8 * dim)
            + m.seed_messages as u64 * wire::DISPATCH_HEADER_BYTES as u64
            + (m.seeds_dispatched * wire::SEED_BYTES) as u64;
        let serialized = m.model_messages as u64 * model_msg
            + m.seed_messages as u64 * seed_msg
            + (m.seeds_dispatched * wire::SEED_BYTES) as u64;
        checks.push(m.bytes_down == formula && formula == serialized);
    }
    let record = wire::encode_record(&fwdfed::ForwardGradientRecord {
        client_id: 1,
        seed: PerturbationSeed { base_seed: 2, index: 3 },
        dd: 0.5,
        batch_size: 8,
    });
    checks.push(record.len() == wire::RECORD_BYTES);
    checks.push(memory_estimate(1000, 10, 8) == 1160);
    let ok = checks.iter().filter(|c| **c).count();
    Ok((
        ok == checks.len(),
        format!("{ok}/{} byte/memory identities hold across full, bias-only and low-rank masks", checks.len()),
    ))
}

fn scalability() -> Outcome {
    let cfg = RunConfig::default();
    let exp = Experiment::prepare(&cfg).map_err(err)?;
    let counter = PassCounter::new();
    let rows: Vec<usize> = (0..64).collect();
    let batch = exp.train_set.select(&rows).map_err(err)?;
    let obj = ModelObjective::new(&exp.model, &exp.server.frozen, &exp.mask, &batch, &counter);
    let theta = &exp.server.theta;
    let oracle = obj.gradient(theta).map_err(err)?;
    let dim = obj.dim();
    let grid = [10usize, 100, 1000];
    let trials = 10u64;
    let mut cos_votes = Vec::new();
    let mut cos_detail = Vec::new();
    for seed in SEEDS {
        let mut means = Vec::new();
        for &n in &grid {
            let mut total = 0.0;
            for t in 0..trials {
                let base_seed = seed * 1_000_003 + n as u64 * 101 + t;
                let mut g = ParamVector::zeros(dim);
                for index in 0..n as u64 {
                    let v = gen_perturbation(PerturbationSeed { base_seed, index }, dim);
                    g.axpy(oracle.dot(&v) / n as f64, &v);
                }
                total += cosine_similarity(&g, &oracle).map_err(err)?;
            }
            means.push(total / trials as f64);
        }
        cos_votes.push(means.windows(2).all(|w| w[1] >= w[0]));
        cos_detail.push(format!("{:.3}/{:.3}/{:.3}", means[0], means[1], means[2]));
    }
    let mut dev_votes = Vec::new();
    let mut dev_detail = Vec::new();
    for seed in SEEDS {
        let mut rounds = Vec::new();
        for devices in [1usize, 5, 25] {
            let mut c = fixed(&seeded(seed), devices, 10);
            c.partition.n_clients = 25;
            c.pacing.max_devices = 25;
            let out = federation::train(&c, Execution::Parallel).map_err(err)?;
            rounds.push(out.history.rounds_to(c.train.target_accuracy).unwrap_or(usize::MAX));
        }
        dev_votes.push(rounds.windows(2).all(|w| w[1] <= w[0]));
        dev_detail.push(format!("{rounds:?}"));
    }
    let pass = majority(&cos_votes) && majority(&dev_votes);
    Ok((
        pass,
        format!(
            "mean cosine at 10/100/1000 perturbations: {}; rounds at 1/5/25 devices: {}",
            cos_detail.join(", "),
            dev_detail.join(", ")
        ),
    ))
}

#[test]
fn acceptance() {
    println!();
    let mut report = Report { lines: Vec::new() };
    report.check(1, "unbiasedness", unbiasedness);
    report.check(2, "finite-difference consistency", finite_difference);
    report.check(3, "pass accounting", pass_accounting);
    report.check(4, "orthogonality census", census);
    report.check(5, "variance statistic", variance_cases);
    report.check(6, "pacing behavior", pacing_behavior);
    report.check(7, "discriminative sampling", sampling_direction);
    report.check(8, "convergence parity", convergence_parity);
    report.check(9, "determinism", determinism);
    report.check(10, "wire and memory accounting", accounting);
    report.check(11, "scalability", scalability);
    let failed: Vec<_> = report.lines.iter().filter(|l| !l.2).map(|l| l.0).collect();
    println!("{}/{} criteria passed", report.lines.len() - failed.len(), report.lines.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
