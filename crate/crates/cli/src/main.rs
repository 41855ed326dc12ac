use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fwdfed::federation::{Experiment, Execution};
use fwdfed::fwdgrad::{unbiasedness_error, DerivativeMode, DiagonalQuadratic};
use fwdfed::{pacing, peft, wire, Error, RunConfig};
use log::info;

const EXIT_CONFIG: u8 = 1;
const EXIT_BUDGET: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "fwdfed", version, about = "Backprop-free federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `train.master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Simulate clients on this many threads; results do not change.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Federated training; writes metrics.csv, pacing.csv and checkpoint.bin.
    Train,
    /// Ranks the configured candidate masks; writes profile.csv.
    ProfilePeft,
    /// One training run per `ablation.ratios` keep ratio; writes ablation.csv.
    AblateSampling,
    /// Relative error of the mean forward gradient on a random quadratic.
    CheckUnbiased,
}

enum Failure {
    Config(String),
    Diverged(String),
    Other(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::Numeric(_) => Failure::Diverged(e.to_string()),
            Error::Config { .. } | Error::InvalidRank { .. } => Failure::Config(e.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FWDFED_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execution(common: &Common) -> Execution {
    if common.parallel > 1 {
        // Read by rayon when its global pool starts.
        std::env::set_var("RAYON_NUM_THREADS", common.parallel.to_string());
        Execution::Parallel
    } else {
        Execution::Serial
    }
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    let cfg = load_config(&cli.common)?;
    let exec = execution(&cli.common);
    let out = &cli.common.out;
    match cli.command {
        Command::Train => cmd_train(&cfg, exec, out),
        Command::ProfilePeft => cmd_profile_peft(&cfg, out),
        Command::AblateSampling => cmd_ablate_sampling(&cfg, exec, out),
        Command::CheckUnbiased => cmd_check_unbiased(&cfg),
    }
}

fn cmd_train(cfg: &RunConfig, exec: Execution, out: &Path) -> Result<u8, Failure> {
    let outcome = fwdfed::train(cfg, exec)?;
    outcome.history.write_csv(create(out, "metrics.csv")?)?;
    pacing::write_pacing_csv(create(out, "pacing.csv")?, &outcome.pacing_events())?;
    let checkpoint = wire::Checkpoint {
        round: outcome.rounds_run as u64,
        mask: outcome.mask,
        trainable: outcome.theta.clone(),
    };
    let mut ck = create(out, "checkpoint.bin")?;
    checkpoint.write_to(&mut ck)?;
    ck.flush()?;
    let passes = outcome.history.rows.last().map_or(0, |r| r.forward_passes_cum);
    println!(
        "rounds={} accuracy={:.4} forward_passes={passes} reached_target={}",
        outcome.rounds_run, outcome.final_accuracy, outcome.reached_target
    );
    Ok(if outcome.reached_target { 0 } else { EXIT_BUDGET })
}

fn cmd_profile_peft(cfg: &RunConfig, out: &Path) -> Result<u8, Failure> {
    let exp = Experiment::prepare(cfg)?;
    let candidates = cfg.candidate_masks()?;
    let n_public = cfg.profile.public_samples.min(exp.train_set.len());
    let rows: Vec<usize> = (0..n_public).collect();
    let public = exp.train_set.select(&rows)?;
    let mode = cfg.derivative_setting().resolve(&exp.server.frozen);
    let entries = peft::peft_profile(
        &exp.model,
        &exp.server.frozen,
        &candidates,
        &public,
        cfg.profile.n_perturbations,
        cfg.train.master_seed,
        mode,
    )?;
    let mut csv = create(out, "profile.csv")?;
    writeln!(csv, "mask,trainable_dim,score")?;
    println!("{:<16} {:>14} {:>10}", "mask", "trainable_dim", "score");
    for e in &entries {
        writeln!(csv, "{},{},{}", e.mask, e.trainable_dim, e.score)?;
        println!("{:<16} {:>14} {:>10.4}", e.mask.to_string(), e.trainable_dim, e.score);
    }
    csv.flush()?;
    Ok(0)
}

fn cmd_ablate_sampling(cfg: &RunConfig, exec: Execution, out: &Path) -> Result<u8, Failure> {
    let mut csv = create(out, "ablation.csv")?;
    writeln!(csv, "keep_ratio,rounds_to_target,passes_to_target")?;
    for &ratio in &cfg.ablation.ratios {
        let mut run_cfg = cfg.clone();
        run_cfg.sampler.keep_ratio = ratio;
        let outcome = fwdfed::train(&run_cfg, exec)?;
        let target = cfg.train.target_accuracy;
        let rounds = outcome.history.rounds_to(target);
        let passes = outcome.history.passes_to(target);
        info!("keep_ratio {ratio}: rounds {rounds:?}, passes {passes:?}");
        let show = |v: Option<String>| v.unwrap_or_default();
        writeln!(
            csv,
            "{ratio},{},{}",
            show(rounds.map(|r| r.to_string())),
            show(passes.map(|p| p.to_string()))
        )?;
        println!(
            "keep_ratio={ratio} rounds_to_target={} passes_to_target={}",
            show(rounds.map(|r| r.to_string())),
            show(passes.map(|p| p.to_string()))
        );
    }
    csv.flush()?;
    Ok(0)
}

fn cmd_check_unbiased(cfg: &RunConfig) -> Result<u8, Failure> {
    let check = &cfg.check;
    let objective = DiagonalQuadratic::random(check.dim, check.seed);
    let theta = vec![0.0; check.dim];
    let err = unbiasedness_error(&objective, &theta, check.n_perturbations, DerivativeMode::Analytic, check.seed)?;
    let pass = err <= check.tolerance;
    println!(
        "dim={} n_perturbations={} relative_error={err:.6} tolerance={} pass={pass}",
        check.dim, check.n_perturbations, check.tolerance
    );
    Ok(if pass { 0 } else { EXIT_BUDGET })
}
