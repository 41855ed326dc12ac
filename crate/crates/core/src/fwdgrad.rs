//! Perturbations, directional derivatives and forward gradients.

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, ParamVector, PassCounter};
use crate::peft::TrainableMask;
use crate::rng::NormalStream;

/// Identifies one perturbation direction: expanding the same seed at the same
/// dimension always yields the same vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PerturbationSeed {
    pub base_seed: u64,
    pub index: u64,
}

/// The unit a client uploads: a seed and the slope measured along it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardGradientRecord {
    pub client_id: u32,
    pub seed: PerturbationSeed,
    pub dd: f64,
    pub batch_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeMode {
    ForwardDiff(f64),
    CentralDiff(f64),
    /// Exact `grad . v` from the backpropagation oracle. Tests and baselines only.
    Analytic,
}

impl DerivativeMode {
    /// Relative finite-difference step `1e-3 * (1 + max|theta|)`.
    pub fn default_step(theta: &[f64]) -> f64 {
        1e-3 * (1.0 + theta.iter().fold(0.0f64, |m, x| m.max(x.abs())))
    }

    pub fn name(&self) -> &'static str {
        match self {
            DerivativeMode::ForwardDiff(_) => "forward",
            DerivativeMode::CentralDiff(_) => "central",
            DerivativeMode::Analytic => "analytic",
        }
    }

    fn step(&self) -> Option<f64> {
        match *self {
            DerivativeMode::ForwardDiff(h) | DerivativeMode::CentralDiff(h) => Some(h),
            DerivativeMode::Analytic => None,
        }
    }
}

/// A scalar loss over a trainable vector, evaluated by forward passes.
pub trait Objective {
    fn dim(&self) -> usize;
    /// One forward pass.
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    /// Exact gradient; only the `Analytic` mode calls this.
    fn gradient(&self, theta: &[f64]) -> Result<ParamVector>;
    /// Forward passes consumed so far.
    fn passes(&self) -> u64;
}

/// A model restricted to its trainable coordinates on a fixed batch.
pub struct ModelObjective<'a> {
    model: &'a ModelSpec,
    frozen: &'a [f64],
    mask: &'a TrainableMask,
    batch: &'a Batch,
    counter: &'a PassCounter,
}

impl<'a> ModelObjective<'a> {
    pub fn new(
        model: &'a ModelSpec,
        frozen: &'a [f64],
        mask: &'a TrainableMask,
        batch: &'a Batch,
        counter: &'a PassCounter,
    ) -> Self {
        ModelObjective {
            model,
            frozen,
            mask,
            batch,
            counter,
        }
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.mask.trainable_dim(self.model).unwrap_or(0)
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        model::forward_loss(self.model, self.frozen, self.mask, theta, self.batch, self.counter)
    }

    fn gradient(&self, theta: &[f64]) -> Result<ParamVector> {
        model::analytic_gradient(self.model, self.frozen, self.mask, theta, self.batch)
    }

    fn passes(&self) -> u64 {
        self.counter.get()
    }
}

/// Expands a seed into `dim` i.i.d. standard normal coordinates.
pub fn gen_perturbation(seed: PerturbationSeed, dim: usize) -> ParamVector {
    let mut v = vec![0.0; dim];
    fill_perturbation(seed, &mut v);
    v.into()
}

pub fn fill_perturbation(seed: PerturbationSeed, out: &mut [f64]) {
    NormalStream::new(seed.base_seed, seed.index).fill(out);
}

fn shifted(theta: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    theta.iter().zip(v).map(|(t, d)| t + h * d).collect()
}

/// Slope of the objective at `theta` along `v`.
///
/// With `ForwardDiff` a supplied `base_loss` must equal the loss at `theta`;
/// it saves one forward pass.
pub fn directional_derivative<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    v: &[f64],
    mode: DerivativeMode,
    base_loss: Option<f64>,
) -> Result<f64> {
    if v.len() != theta.len() {
        return Err(Error::shape("perturbation", theta.len(), v.len()));
    }
    if let Some(h) = mode.step() {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Numeric(format!("{} step h = {h} must be positive", mode.name())));
        }
    }
    let dd = match mode {
        DerivativeMode::ForwardDiff(h) => {
            let base = match base_loss {
                Some(b) => b,
                None => objective.loss(theta)?,
            };
            (objective.loss(&shifted(theta, v, h))? - base) / h
        }
        DerivativeMode::CentralDiff(h) => {
            let plus = objective.loss(&shifted(theta, v, h))?;
            let minus = objective.loss(&shifted(theta, v, -h))?;
            (plus - minus) / (2.0 * h)
        }
        DerivativeMode::Analytic => objective.gradient(theta)?.dot(v),
    };
    if !dd.is_finite() {
        let h = mode.step().map(|h| format!(" with h = {h}")).unwrap_or_default();
        return Err(Error::Numeric(format!(
            "{} directional derivative{h} is {dd}",
            mode.name()
        )));
    }
    Ok(dd)
}

/// Forward gradient `dd * v`.
pub fn assemble_forward_gradient(dd: f64, v: &[f64]) -> ParamVector {
    v.iter().map(|x| dd * x).collect::<Vec<_>>().into()
}

/// Result of one client's pass over its assigned seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCompute {
    pub records: Vec<ForwardGradientRecord>,
    pub passes_used: u64,
    /// Unperturbed loss, when the mode computed it.
    pub base_loss: Option<f64>,
}

/// Evaluates every seed on one minibatch. `ForwardDiff` computes the base
/// loss once and reuses it, so `N` seeds cost `N + 1` passes; `CentralDiff`
/// costs `2N`. Records come back in the order the seeds were given.
pub fn client_round_compute<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    seeds: &[PerturbationSeed],
    mode: DerivativeMode,
    client_id: u32,
    batch_size: u32,
) -> Result<ClientCompute> {
    if seeds.is_empty() {
        return Err(Error::Empty("client was dispatched no seeds"));
    }
    let start = objective.passes();
    let base_loss = match mode {
        DerivativeMode::ForwardDiff(_) => Some(objective.loss(theta)?),
        _ => None,
    };
    let mut v = vec![0.0; theta.len()];
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        fill_perturbation(seed, &mut v);
        let dd = directional_derivative(objective, theta, &v, mode, base_loss)?;
        records.push(ForwardGradientRecord {
            client_id,
            seed,
            dd,
            batch_size,
        });
    }
    Ok(ClientCompute {
        records,
        passes_used: objective.passes() - start,
        base_loss,
    })
}

/// Rebuilds `dd * v(seed)` from a record.
pub fn reconstruct(record: &ForwardGradientRecord, dim: usize) -> ParamVector {
    let mut v = gen_perturbation(record.seed, dim);
    v.scale(record.dd);
    v
}

/// `f(theta) = 0.5 * sum(a_i * (theta_i - c_i)^2)` with seeded curvatures in
/// `[0.5, 2)` and centers in `[-1, 1)`. Thread-safe.
#[derive(Debug)]
pub struct DiagonalQuadratic {
    curvature: Vec<f64>,
    center: Vec<f64>,
    passes: std::sync::atomic::AtomicU64,
}

impl DiagonalQuadratic {
    pub fn random(dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(seed, "diagonal-quadratic", &[dim as u64]);
        let curvature = (0..dim).map(|_| rng.gen_range(0.5..2.0)).collect();
        let center = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DiagonalQuadratic {
            curvature,
            center,
            passes: Default::default(),
        }
    }
}

impl Objective for DiagonalQuadratic {
    fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::shape("quadratic input", self.dim(), theta.len()));
        }
        self.passes.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        Ok(0.5
            * theta
                .iter()
                .zip(&self.curvature)
                .zip(&self.center)
                .map(|((t, a), c)| a * (t - c) * (t - c))
                .sum::<f64>())
    }

    fn gradient(&self, theta: &[f64]) -> Result<ParamVector> {
        if theta.len() != self.dim() {
            return Err(Error::shape("quadratic input", self.dim(), theta.len()));
        }
        Ok(theta
            .iter()
            .zip(&self.curvature)
            .zip(&self.center)
            .map(|((t, a), c)| a * (t - c))
            .collect::<Vec<_>>()
            .into())
    }

    fn passes(&self) -> u64 {
        self.passes.load(std::sync::atomic::Ordering::Relaxed)
    }
}

/// Relative L2 distance between the mean of `n` forward gradients (seeds
/// `base_seed:0..n`) and the exact gradient at `theta`.
pub fn unbiasedness_error<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    n: usize,
    mode: DerivativeMode,
    base_seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Empty("no perturbations"));
    }
    let oracle = objective.gradient(theta)?;
    let base = match mode {
        DerivativeMode::ForwardDiff(_) => Some(objective.loss(theta)?),
        _ => None,
    };
    let mut sum = ParamVector::zeros(theta.len());
    let mut v = vec![0.0; theta.len()];
    for index in 0..n as u64 {
        fill_perturbation(PerturbationSeed { base_seed, index }, &mut v);
        let dd = match mode {
            DerivativeMode::Analytic => oracle.dot(&v),
            _ => directional_derivative(objective, theta, &v, mode, base)?,
        };
        sum.axpy(dd, &v);
    }
    sum.scale(1.0 / n as f64);
    let norm = oracle.norm();
    if norm == 0.0 {
        return Err(Error::Numeric("oracle gradient is zero".into()));
    }
    sum.axpy(-1.0, &oracle);
    Ok(sum.norm() / norm)
}
