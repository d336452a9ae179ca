//! Experiment configuration: one TOML or JSON document.
//!
//! Loading reports every problem at once: missing required keys, unknown
//! keys, type errors per section and out-of-range values.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::advantage::AdvantageConfig;
use crate::controllers::{ControllerKind, FixedTimePlan};
use crate::env::{EnvConfig, FlowSource};
use crate::error::{Error, Result};
use crate::flows::{load_flows, RateSchedule};
use crate::mdp::ObservationSchema;
use crate::netmodel::{build_grid_network, default_phase_table, load_network, phase_table_from_lists, LinkTemplates, TrafficNetwork};
use crate::nn::{Activation, OptimizerConfig};
use crate::sim::SimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub rows: usize,
    pub cols: usize,
    /// Network file; overrides the generated grid.
    pub file: Option<PathBuf>,
    pub links: LinkTemplates,
    /// Movement ids per phase; the built-in 8-phase table when absent.
    pub phase_table: Option<Vec<Vec<usize>>>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            rows: 3,
            cols: 3,
            file: None,
            links: LinkTemplates::default(),
            phase_table: None,
        }
    }
}

impl NetworkConfig {
    pub fn build(&self) -> Result<TrafficNetwork> {
        if let Some(path) = &self.file {
            return load_network(path);
        }
        let table = match &self.phase_table {
            Some(lists) => phase_table_from_lists(lists),
            None => default_phase_table(),
        };
        build_grid_network(self.rows, self.cols, &self.links, &table)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Constant Poisson arrival rate, vehicles per second.
    pub rate: f64,
    /// `[start_s, rate]` segments; replaces `rate` when present.
    pub schedule: Option<Vec<(f64, f64)>>,
    /// Fixed trip file used for every episode.
    pub file: Option<PathBuf>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            rate: 0.3,
            schedule: None,
            file: None,
        }
    }
}

impl FlowConfig {
    pub fn source(&self, horizon: f64) -> Result<FlowSource> {
        if let Some(path) = &self.file {
            return Ok(FlowSource::Fixed(Arc::new(load_flows(path)?)));
        }
        let schedule = match &self.schedule {
            Some(s) => RateSchedule { segments: s.clone() },
            None => RateSchedule::constant(self.rate),
        };
        schedule.validate()?;
        Ok(FlowSource::Poisson { schedule, horizon })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub episode_len_steps: usize,
    /// Control interval in seconds.
    pub delta_t: u32,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            episode_len_steps: 720,
            delta_t: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            actor_hidden: vec![128, 128],
            critic_hidden: vec![256, 256],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Workers apply gradients to the shared store as soon as they are ready.
    Async,
    /// Workers roll out from one snapshot; their averaged gradient is applied once.
    Sync,
    /// Workers take turns on one thread, each applying in order.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Training episode budget, summed over workers.
    pub episodes: usize,
    pub workers: usize,
    /// Environment steps per rollout segment.
    pub rollout_len: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Evaluate (and checkpoint) every this many episodes; 0 evaluates only
    /// at the start and end.
    pub eval_every: usize,
    pub eval_seeds: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            episodes: 1000,
            workers: 8,
            rollout_len: 40,
            schedule: Schedule::Async,
            seed: 0,
            eval_every: 50,
            eval_seeds: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerType {
    /// The trained actor.
    Policy,
    FixedTime,
    Greedy,
    MaxPressure,
}

impl ControllerType {
    pub fn classical(self) -> Option<ControllerKind> {
        match self {
            ControllerType::Policy => None,
            ControllerType::FixedTime => Some(ControllerKind::FixedTime),
            ControllerType::Greedy => Some(ControllerKind::Greedy),
            ControllerType::MaxPressure => Some(ControllerKind::MaxPressure),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(rename = "type")]
    pub kind: ControllerType,
    pub plan: FixedTimePlan,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            kind: ControllerType::Policy,
            plan: FixedTimePlan::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub flows: FlowConfig,
    pub episode: EpisodeConfig,
    pub sim: SimConfig,
    pub observation: ObservationSchema,
    pub model: ModelConfig,
    pub advantage: AdvantageConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub controller: ControllerConfig,
}

/// Keys a config document must state explicitly.
pub const REQUIRED_KEYS: [&str; 2] = ["training.episodes", "advantage.mode"];

impl ExperimentConfig {
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            episode_len_steps: self.episode.episode_len_steps,
            delta_t: self.episode.delta_t,
            sim: self.sim,
            observation: self.observation,
        }
    }

    pub fn horizon_s(&self) -> f64 {
        (self.episode.episode_len_steps as u64 * self.episode.delta_t as u64) as f64
    }

    pub fn flow_source(&self) -> Result<FlowSource> {
        self.flows.source(self.horizon_s())
    }

    /// Semantic checks that do not need the network.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.network.file.is_none() && (self.network.rows == 0 || self.network.cols == 0) {
            out.push("network.rows and network.cols must be >= 1".into());
        }
        if self.flows.file.is_none() {
            let schedule = match &self.flows.schedule {
                Some(s) => RateSchedule { segments: s.clone() },
                None => RateSchedule::constant(self.flows.rate),
            };
            if let Err(e) = schedule.validate() {
                out.push(format!("flows: {e}"));
            }
        }
        if self.episode.episode_len_steps == 0 {
            out.push("episode.episode_len_steps must be >= 1".into());
        }
        if self.episode.delta_t == 0 {
            out.push("episode.delta_t must be >= 1".into());
        }
        if self.sim.saturation_flow == 0 {
            out.push("sim.saturation_flow must be >= 1".into());
        }
        if !(self.sim.vehicle_spacing_m > 0.0) {
            out.push("sim.vehicle_spacing_m must be > 0".into());
        }
        if !(self.observation.wait_norm_s > 0.0) {
            out.push("observation.wait_norm_s must be > 0".into());
        }
        if !(self.observation.queue_norm > 0.0) {
            out.push("observation.queue_norm must be > 0".into());
        }
        for (name, h) in [
            ("model.actor_hidden", &self.model.actor_hidden),
            ("model.critic_hidden", &self.model.critic_hidden),
        ] {
            if h.iter().any(|&w| w == 0) {
                out.push(format!("{name} widths must be >= 1"));
            }
        }
        out.extend(self.advantage.problems());
        out.extend(self.optimizer.problems());
        if self.training.workers == 0 {
            out.push("training.workers must be >= 1".into());
        }
        if self.training.rollout_len == 0 {
            out.push("training.rollout_len must be >= 1".into());
        }
        if self.training.eval_seeds == 0 {
            out.push("training.eval_seeds must be >= 1".into());
        }
        if self.controller.plan.0.is_empty() || self.controller.plan.0.iter().any(|e| e.duration_s == 0) {
            out.push("controller.plan must be non-empty with positive durations".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        crate::netmodel::hex_digest(text.as_bytes())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn lookup<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |cur, k| cur.get(k))
}

fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(k)) = (given, known) else {
        return;
    };
    for (key, val) in g {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            None => out.push(format!("unknown key `{path}`")),
            Some(sub) => unknown_keys(val, sub, &path, out),
        }
    }
}

/// Parses a document already decoded into a JSON value.
pub fn config_from_value(v: &Value) -> Result<ExperimentConfig> {
    let mut errors = Vec::new();
    if !v.is_object() {
        return Err(Error::Config(vec!["config must be a table/object".into()]));
    }
    for key in REQUIRED_KEYS {
        if lookup(v, key).is_none() {
            errors.push(format!("missing required key `{key}`"));
        }
    }
    let defaults = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    unknown_keys(v, &defaults, "", &mut errors);

    // Deserialize section by section so type errors name their section.
    let mut merged = defaults.clone();
    if let (Value::Object(m), Value::Object(g)) = (&mut merged, v) {
        for (key, val) in g {
            if let Some(known) = m.get(key) {
                let val = known_only(val, known);
                m.insert(key.clone(), val);
            }
        }
    }
    macro_rules! section {
        ($name:literal, $ty:ty) => {{
            match serde_json::from_value::<$ty>(merged[$name].clone()) {
                Ok(x) => Some(x),
                Err(e) => {
                    if !e.to_string().starts_with("unknown field") {
                        errors.push(format!("{}: {e}", $name));
                    }
                    None
                }
            }
        }};
    }
    let network = section!("network", NetworkConfig);
    let flows = section!("flows", FlowConfig);
    let episode = section!("episode", EpisodeConfig);
    let sim = section!("sim", SimConfig);
    let observation = section!("observation", ObservationSchema);
    let model = section!("model", ModelConfig);
    let advantage = section!("advantage", AdvantageConfig);
    let optimizer = section!("optimizer", OptimizerConfig);
    let training = section!("training", TrainingConfig);
    let controller = section!("controller", ControllerConfig);
    let parsed = (|| {
        Some(ExperimentConfig {
            network: network?,
            flows: flows?,
            episode: episode?,
            sim: sim?,
            observation: observation?,
            model: model?,
            advantage: advantage?,
            optimizer: optimizer?,
            training: training?,
            controller: controller?,
        })
    })();
    if let Some(cfg) = &parsed {
        errors.extend(cfg.problems());
    }
    match parsed {
        Some(cfg) if errors.is_empty() => Ok(cfg),
        _ => Err(Error::Config(errors)),
    }
}

// Drops unknown object keys so they are reported once rather than also
// failing the section's deserialization.
fn known_only(given: &Value, known: &Value) -> Value {
    match (given, known) {
        (Value::Object(g), Value::Object(k)) if !k.is_empty() => Value::Object(
            g.iter()
                .filter_map(|(key, val)| k.get(key).map(|sub| (key.clone(), known_only(val, sub))))
                .collect(),
        ),
        _ => given.clone(),
    }
}

/// TOML unless the text parses as JSON.
pub fn config_from_str(text: &str) -> Result<ExperimentConfig> {
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(_) => toml::from_str(text).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?,
    };
    config_from_value(&value)
}

/// Loads a config file; relative `network.file` and `flows.file` paths are
/// resolved against the config's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = config_from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.network.file, &mut cfg.flows.file].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}
