//! Run configuration: a TOML file whose keys may be written either as
//! `[section]` tables or as dotted keys (`pacing.variance_threshold = 0.3`).
//! Every key has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::federation::{Aggregation, DerivativeSetting, PartitionScheme};
use crate::model::{Activation, LossKind, ModelKind, ModelSpec};
use crate::pacing::{Allocation, PacingConfig, VarianceKind};
use crate::peft::TrainableMask;
use crate::sampling::SamplerConfig;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Mlp,
            layers: vec![8, 16, 4],
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub scheme: String,
    /// Candidates for `profile-peft`.
    pub candidates: Vec<String>,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            scheme: "full".into(),
            candidates: vec!["full".into(), "bias_only".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub eval_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Blobs,
            n_samples: 2000,
            n_classes: 4,
            input_dim: 8,
            separation: 4.0,
            seed: 1,
            path: None,
            label_column: "label".into(),
            eval_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Uniform,
    LabelSkew,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub scheme: PartitionKind,
    pub n_clients: usize,
    pub classes_per_client: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            scheme: PartitionKind::LabelSkew,
            n_clients: 20,
            classes_per_client: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacingSection {
    /// `inf` disables pacing: every round uses the initial allocation.
    pub variance_threshold: f64,
    pub max_devices: usize,
    pub max_perturbations_per_device: usize,
    pub min_records: usize,
    pub initial_devices: usize,
    pub initial_perturbations: usize,
    pub variance_kind: VarianceKind,
}

impl Default for PacingSection {
    fn default() -> Self {
        PacingSection {
            variance_threshold: 0.3,
            max_devices: 16,
            max_perturbations_per_device: 50,
            min_records: 4,
            initial_devices: 2,
            initial_perturbations: 2,
            variance_kind: VarianceKind::Elementwise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub keep_ratio: f64,
    pub oversample_factor: Option<f64>,
    pub signed: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            keep_ratio: 1.0,
            oversample_factor: None,
            signed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    Fedsgd,
    Fedavg,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub aggregation: AggregationKind,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub target_accuracy: f64,
    pub max_rounds: usize,
    pub eval_interval: usize,
    pub master_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            aggregation: AggregationKind::Fedsgd,
            local_epochs: 1,
            lr: 0.2,
            batch_size: 8,
            target_accuracy: 0.95,
            max_rounds: 300,
            eval_interval: 1,
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Forward,
    Central,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerivativeSection {
    pub mode: ModeKind,
    /// Fixed step; absent means `1e-3 * (1 + max|theta|)`.
    pub h: Option<f64>,
}

impl Default for DerivativeSection {
    fn default() -> Self {
        DerivativeSection {
            mode: ModeKind::Forward,
            h: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub n_perturbations: usize,
    /// Public batch drawn from the training split.
    pub public_samples: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            n_perturbations: 1000,
            public_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    pub dim: usize,
    pub n_perturbations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection {
            dim: 50,
            n_perturbations: 200_000,
            tolerance: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub ratios: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { ratios: vec![0.2, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub mask: MaskSection,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub pacing: PacingSection,
    pub sampler: SamplerSection,
    pub train: TrainSection,
    pub derivative: DerivativeSection,
    pub profile: ProfileSection,
    pub check: CheckSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    /// Parses and validates. Errors carry the line of the offending key when
    /// it can be located.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let msg = e.message().to_string();
            Error::Config {
                field: line.map(|l| format!("line {l}")).unwrap_or_else(|| "config".into()),
                reason: msg,
            }
        })?;
        cfg.validate().map_err(|e| anchor(text, e))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_spec()?;
        let mask = self.mask()?;
        mask.validate(&model)?;
        for c in self.candidate_masks()? {
            c.validate(&model).map_err(|e| Error::config("mask.candidates", e.to_string()))?;
        }
        let dataset = self.dataset_spec()?;
        dataset.validate()?;
        if let DatasetSpec::SyntheticBlobs { n_classes, input_dim, .. } = dataset {
            if input_dim != model.input_dim() {
                return Err(Error::config("model.layers", "first size must equal dataset.input_dim"));
            }
            if model.loss == LossKind::CrossEntropy && n_classes > model.output_dim() {
                return Err(Error::config("model.layers", "output size must cover dataset.n_classes"));
            }
        }
        if model.loss != LossKind::CrossEntropy {
            return Err(Error::config("model.loss", "training runs need a classification loss"));
        }
        if !(self.dataset.eval_fraction > 0.0 && self.dataset.eval_fraction < 1.0) {
            return Err(Error::config("dataset.eval_fraction", "must lie in (0, 1)"));
        }
        if self.partition.n_clients == 0 {
            return Err(Error::config("partition.n_clients", "must be at least 1"));
        }
        if self.partition.scheme == PartitionKind::LabelSkew && self.partition.classes_per_client == 0 {
            return Err(Error::config("partition.classes_per_client", "must be at least 1"));
        }
        let pacing = self.pacing_config();
        pacing.validate()?;
        self.initial_allocation().validate(&pacing)?;
        self.sampler_config().validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&t.target_accuracy) {
            return Err(Error::config("train.target_accuracy", "must lie in [0, 1]"));
        }
        if t.eval_interval == 0 {
            return Err(Error::config("train.eval_interval", "must be at least 1"));
        }
        if t.aggregation == AggregationKind::Fedavg && t.local_epochs == 0 {
            return Err(Error::config("train.local_epochs", "must be at least 1"));
        }
        if let Some(h) = self.derivative.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config("derivative.h", "must be positive"));
            }
        }
        if self.profile.n_perturbations == 0 {
            return Err(Error::config("profile.n_perturbations", "must be at least 1"));
        }
        if self.profile.public_samples == 0 {
            return Err(Error::config("profile.public_samples", "must be at least 1"));
        }
        if self.check.dim < 2 {
            return Err(Error::config("check.dim", "must be at least 2"));
        }
        if self.check.n_perturbations == 0 {
            return Err(Error::config("check.n_perturbations", "must be at least 1"));
        }
        if self.check.tolerance.is_nan() || self.check.tolerance <= 0.0 {
            return Err(Error::config("check.tolerance", "must be positive"));
        }
        if let Some(bad) = self.ablation.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::config("ablation.ratios", format!("ratio {bad} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let spec = ModelSpec {
            kind: self.model.kind,
            layer_sizes: self.model.layers.clone(),
            activation: self.model.activation,
            loss: self.model.loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mask(&self) -> Result<TrainableMask> {
        self.mask
            .scheme
            .parse()
            .map_err(|e: Error| Error::config("mask.scheme", e.to_string()))
    }

    pub fn candidate_masks(&self) -> Result<Vec<TrainableMask>> {
        self.mask
            .candidates
            .iter()
            .map(|c| c.parse().map_err(|e: Error| Error::config("mask.candidates", e.to_string())))
            .collect()
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let d = &self.dataset;
        Ok(match d.kind {
            DatasetKind::Blobs => DatasetSpec::SyntheticBlobs {
                n_samples: d.n_samples,
                n_classes: d.n_classes,
                input_dim: d.input_dim,
                separation: d.separation,
                seed: d.seed,
            },
            DatasetKind::Csv => DatasetSpec::CsvFile {
                path: d
                    .path
                    .clone()
                    .ok_or_else(|| Error::config("dataset.path", "required when dataset.kind = \"csv\""))?,
                label_column: d.label_column.clone(),
            },
        })
    }

    pub fn partition_scheme(&self) -> PartitionScheme {
        let p = &self.partition;
        match p.scheme {
            PartitionKind::Uniform => PartitionScheme::Uniform { n_clients: p.n_clients },
            PartitionKind::LabelSkew => PartitionScheme::LabelSkew {
                n_clients: p.n_clients,
                classes_per_client: p.classes_per_client,
            },
        }
    }

    pub fn pacing_config(&self) -> PacingConfig {
        PacingConfig {
            variance_threshold: self.pacing.variance_threshold,
            max_devices: self.pacing.max_devices,
            max_perturbations_per_device: self.pacing.max_perturbations_per_device,
            min_records_for_variance: self.pacing.min_records,
            variance_kind: self.pacing.variance_kind,
        }
    }

    pub fn initial_allocation(&self) -> Allocation {
        Allocation::new(self.pacing.initial_devices, self.pacing.initial_perturbations)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            keep_ratio: self.sampler.keep_ratio,
            oversample_factor: self.sampler.oversample_factor,
            signed: self.sampler.signed,
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        match self.train.aggregation {
            AggregationKind::Fedsgd => Aggregation::FedSgd,
            AggregationKind::Fedavg => Aggregation::FedAvg {
                local_epochs: self.train.local_epochs,
            },
        }
    }

    pub fn derivative_setting(&self) -> DerivativeSetting {
        match self.derivative.mode {
            ModeKind::Forward => DerivativeSetting::Forward(self.derivative.h),
            ModeKind::Central => DerivativeSetting::Central(self.derivative.h),
            ModeKind::Analytic => DerivativeSetting::Analytic,
        }
    }
}

/// Line (1-based) where `section.key` is assigned, either inside a
/// `[section]` table or as a dotted key.
fn locate_key(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = dotted.rsplit_once('.').unwrap_or(("", dotted));
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs: String = lhs.split('.').map(str::trim).collect::<Vec<_>>().join(".");
        let full = if current.is_empty() { lhs } else { format!("{current}.{lhs}") };
        if full == dotted || (section.is_empty() && full.ends_with(&format!(".{key}"))) {
            return Some(i + 1);
        }
    }
    None
}

fn anchor(text: &str, err: Error) -> Error {
    match err {
        Error::Config { field, reason } => {
            let reason = match locate_key(text, &field) {
                Some(line) => format!("{reason} (line {line})"),
                None => reason,
            };
            Error::Config { field, reason }
        }
        Error::InvalidRank { .. } => {
            let line = locate_key(text, "mask.scheme");
            Error::Config {
                field: "mask.scheme".into(),
                reason: match line {
                    Some(l) => format!("{err} (line {l})"),
                    None => err.to_string(),
                },
            }
        }
        other => other,
    }
}
