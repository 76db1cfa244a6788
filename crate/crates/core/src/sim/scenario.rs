use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::client::{select_depth, ClientProfile, LocalTraining, MemoryModel};
use crate::datagen::{task_preset, PartitionMode, TaskSpec, TASK_PRESETS};
use crate::error::{Error, Result};
use crate::model::{ExitSet, ModelConfig};
use crate::server::AggregationStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Centralized,
    HomoFl,
    HeteroFl,
}

/// A task preset name or a full task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRef {
    Preset(String),
    Spec(TaskSpec),
}

/// A memory preset name (`kws`, `er`, `asr`, `sid`) or explicit coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MemoryRef {
    Preset(String),
    Model(MemoryModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub exits: ExitSet,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: default_width(),
            hidden: default_hidden(),
            depth: default_depth(),
            exits: ExitSet::default(),
        }
    }
}

/// `count` identical clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientGroup {
    #[serde(default = "default_count")]
    pub count: usize,
    pub samples: usize,
    pub memory_budget_mb: f64,
    pub device_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default = "default_data_seed")]
    pub data: u64,
    #[serde(default = "default_training_seed")]
    pub training: u64,
    #[serde(default = "default_sampling_seed")]
    pub sampling: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: default_data_seed(),
            training: default_training_seed(),
            sampling: default_sampling_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationScenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub mode: Mode,
    #[serde(default = "default_strategy")]
    pub strategy: AggregationStrategy,
    pub task: TaskRef,
    /// Defaults to the preset matching the task name.
    #[serde(default)]
    pub memory_model: Option<MemoryRef>,
    #[serde(default)]
    pub model: ModelSection,
    pub clients: Vec<ClientGroup>,
    /// Defaults to two speakers per client.
    #[serde(default)]
    pub speakers: Option<usize>,
    #[serde(default = "default_speaker_bias")]
    pub speaker_bias: f64,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
    pub rounds: usize,
    #[serde(default = "default_fraction", deserialize_with = "fraction")]
    pub fraction: f64,
    #[serde(default = "default_epochs", deserialize_with = "epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr", deserialize_with = "learning_rate")]
    pub lr: f64,
    #[serde(default = "default_batch_size", deserialize_with = "batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub seeds: Seeds,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_strategy() -> AggregationStrategy {
    AggregationStrategy::LayerwiseDepthWeighted
}
fn default_width() -> usize {
    8
}
fn default_hidden() -> usize {
    16
}
fn default_depth() -> usize {
    12
}
fn default_count() -> usize {
    1
}
fn default_data_seed() -> u64 {
    1
}
fn default_training_seed() -> u64 {
    2
}
fn default_sampling_seed() -> u64 {
    3
}
fn default_speaker_bias() -> f64 {
    1.0
}
fn default_partition() -> PartitionMode {
    PartitionMode::NonIidBySpeaker
}
fn default_fraction() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    1
}
fn default_lr() -> f64 {
    0.05
}
fn default_batch_size() -> usize {
    8
}
fn default_eval_samples() -> usize {
    1000
}

fn epochs<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<usize, D::Error> {
    let v = usize::deserialize(d)?;
    if !(1..=3).contains(&v) {
        return Err(serde::de::Error::custom(format!(
            "local epochs must be within 1..=3, got {v}"
        )));
    }
    Ok(v)
}

fn fraction<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if !(v > 0.0 && v <= 1.0) {
        return Err(serde::de::Error::custom(format!(
            "sampling fraction must be in (0, 1], got {v}"
        )));
    }
    Ok(v)
}

fn learning_rate<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(serde::de::Error::custom(format!("lr must be finite and >= 0, got {v}")));
    }
    Ok(v)
}

fn batch_size<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<usize, D::Error> {
    let v = usize::deserialize(d)?;
    if v == 0 {
        return Err(serde::de::Error::custom("batch_size must be >= 1"));
    }
    Ok(v)
}

/// Parses, resolves presets and validates a scenario. Every default ends
/// up explicit in the returned value, so serializing it echoes the full
/// configuration.
pub fn parse_scenario(text: &str) -> Result<FederationScenario> {
    let mut de = serde_json::Deserializer::from_str(text);
    let raw: FederationScenario = match serde_path_to_error::deserialize(&mut de) {
        Ok(v) => v,
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            return Err(Error::Scenario {
                path,
                line: inner.line(),
                column: inner.column(),
                detail: inner.to_string(),
            });
        }
    };
    de.end().map_err(|e| Error::Scenario {
        path: ".".into(),
        line: e.line(),
        column: e.column(),
        detail: e.to_string(),
    })?;
    raw.resolve()
}

pub fn parse_config(path: &Path) -> Result<FederationScenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text)
}

impl FederationScenario {
    fn resolve(mut self) -> Result<Self> {
        let mut spec = match &self.task {
            TaskRef::Spec(s) => s.clone(),
            TaskRef::Preset(name) => task_preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown task preset `{name}` (available: {})",
                    TASK_PRESETS.join(", ")
                ))
            })?,
        };
        spec.id = 0;
        let memory = match &self.memory_model {
            Some(MemoryRef::Model(m)) => *m,
            Some(MemoryRef::Preset(name)) => MemoryModel::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown memory preset `{name}`")))?,
            None => MemoryModel::preset(&spec.name).ok_or_else(|| {
                Error::Config(format!(
                    "task `{}` has no memory preset; set memory_model explicitly",
                    spec.name
                ))
            })?,
        };
        self.task = TaskRef::Spec(spec);
        self.memory_model = Some(MemoryRef::Model(memory));
        let k = self.client_count();
        self.speakers = Some(self.speakers.unwrap_or(2 * k));
        self.validate()?;
        Ok(self)
    }

    pub fn task_spec(&self) -> &TaskSpec {
        match &self.task {
            TaskRef::Spec(s) => s,
            TaskRef::Preset(_) => panic!("scenario used before resolution"),
        }
    }

    pub fn memory(&self) -> MemoryModel {
        match &self.memory_model {
            Some(MemoryRef::Model(m)) => *m,
            _ => panic!("scenario used before resolution"),
        }
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers.unwrap_or(2 * self.client_count())
    }

    pub fn client_count(&self) -> usize {
        self.clients.iter().map(|g| g.count).sum()
    }

    pub fn model_config(&self) -> ModelConfig {
        let spec = self.task_spec();
        ModelConfig {
            input_dim: spec.input_dim,
            width: self.model.width,
            hidden: self.model.hidden,
            depth: self.model.depth,
            exits: self.model.exits.clone(),
            task_classes: vec![spec.classes],
        }
    }

    /// Clients with ids `0..K` in group order.
    pub fn profiles(&self) -> Vec<ClientProfile> {
        let mut out = Vec::with_capacity(self.client_count());
        for g in &self.clients {
            for _ in 0..g.count {
                out.push(ClientProfile {
                    id: out.len() as u32,
                    samples: g.samples,
                    memory_budget_mb: g.memory_budget_mb,
                    device_speed: g.device_speed,
                    task: 0,
                });
            }
        }
        out
    }

    /// Trained depth per client, `None` where no exit fits.
    pub fn depths(&self) -> Vec<Option<usize>> {
        let memory = self.memory();
        self.profiles()
            .iter()
            .map(|p| select_depth(p, self.task_spec(), &self.model.exits, &memory).ok())
            .collect()
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let config = self.model_config();
        config.validate()?;
        self.task_spec().validate(&config.exits)?;
        self.memory().validate()?;
        self.local_training().validate()?;
        if self.clients.is_empty() {
            return Err(Error::Config("at least one client group is required".into()));
        }
        if self.clients.iter().any(|g| g.count == 0) {
            return Err(Error::Config("client group count must be >= 1".into()));
        }
        for p in self.profiles() {
            p.validate()?;
        }
        let k = self.client_count();
        if self.fraction * (k as f64) < 1.0 {
            return Err(Error::Config(format!(
                "fraction {} of {k} clients selects nobody",
                self.fraction
            )));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be >= 1".into()));
        }
        if !(self.speaker_bias >= 0.0) || !self.speaker_bias.is_finite() {
            return Err(Error::Config("speaker_bias must be finite and >= 0".into()));
        }
        let speakers = self.speaker_count();
        if speakers == 0 || (self.partition == PartitionMode::NonIidBySpeaker && speakers < k) {
            return Err(Error::Config(format!(
                "non-IID partition needs at least {k} speakers, got {speakers}"
            )));
        }
        let mut distinct: Vec<usize> = self.depths().into_iter().flatten().collect();
        distinct.sort_unstable();
        distinct.dedup();
        match self.mode {
            Mode::HomoFl if distinct.len() != 1 => Err(Error::Config(format!(
                "homo_fl needs every client at one depth, budgets give {distinct:?}"
            ))),
            Mode::HeteroFl if distinct.len() < 2 => Err(Error::Config(format!(
                "hetero_fl needs at least two distinct client depths, budgets give {distinct:?}"
            ))),
            _ => Ok(()),
        }
    }

    /// Pretty JSON of the resolved scenario.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}
