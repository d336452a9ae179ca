//! Decision-level environment: one step is one control interval.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{generate_scheduled_flows, FlowSpec, RateSchedule};
use crate::mdp::{augment, local_reward, neighborhood_reward, observe, Observation, ObservationSchema};
use crate::netmodel::TrafficNetwork;
use crate::sim::{EpisodeMetrics, SimConfig, SimState, StepMetrics};

/// Where an episode's trips come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowSource {
    /// The same trips every episode.
    Fixed(Arc<FlowSpec>),
    /// Fresh Poisson demand drawn from the episode seed.
    Poisson { schedule: RateSchedule, horizon: f64 },
}

impl FlowSource {
    pub fn flows(&self, net: &TrafficNetwork, seed: u64) -> Result<Arc<FlowSpec>> {
        match self {
            FlowSource::Fixed(f) => Ok(Arc::clone(f)),
            FlowSource::Poisson { schedule, horizon } => {
                Ok(Arc::new(generate_scheduled_flows(net, schedule, *horizon, seed)?))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub episode_len_steps: usize,
    /// Control interval in seconds.
    pub delta_t: u32,
    pub sim: SimConfig,
    pub observation: ObservationSchema,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            episode_len_steps: 720,
            delta_t: 5,
            sim: SimConfig::default(),
            observation: ObservationSchema::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observations: Vec<Observation>,
    pub local_rewards: Vec<f64>,
    pub neighborhood_rewards: Vec<f64>,
    pub metrics: StepMetrics,
    pub done: bool,
}

/// Interface a simulator backend exposes to controllers and the trainer.
pub trait Environment {
    fn num_agents(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn obs_width(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>>;
    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep>;
}

pub struct GridEnv {
    net: Arc<TrafficNetwork>,
    source: FlowSource,
    config: EnvConfig,
    state: Option<SimState>,
    steps: usize,
}

impl GridEnv {
    pub fn new(net: Arc<TrafficNetwork>, source: FlowSource, config: EnvConfig) -> Result<Self> {
        if config.delta_t == 0 || config.episode_len_steps == 0 {
            return Err(Error::InvalidArgument(
                "episode_len_steps and delta_t must be positive".into(),
            ));
        }
        if !(config.observation.wait_norm_s > 0.0 && config.observation.queue_norm > 0.0) {
            return Err(Error::InvalidArgument(
                "observation.wait_norm_s and observation.queue_norm must be positive".into(),
            ));
        }
        let p = net.intersections[0].num_phases();
        if net.intersections.iter().any(|s| s.num_phases() != p) {
            return Err(Error::Network("agents must share one action space".into()));
        }
        Ok(GridEnv {
            net,
            source,
            config,
            state: None,
            steps: 0,
        })
    }

    pub fn net(&self) -> &TrafficNetwork {
        &self.net
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Simulator state; fails before the first reset.
    pub fn state(&self) -> Result<&SimState> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("environment used before reset".into()))
    }

    pub fn episode_metrics(&self) -> Result<EpisodeMetrics> {
        Ok(self.state()?.episode_metrics())
    }

    pub fn observe_all(&self) -> Result<Vec<Observation>> {
        let st = self.state()?;
        (0..self.net.num_intersections())
            .map(|i| observe(st, &self.net, i, &self.config.observation))
            .collect()
    }

    /// Augmented feature vectors for every agent.
    pub fn augmented_features(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        (0..self.net.num_intersections())
            .map(|i| Ok(augment(obs, &self.net, i)?.features()))
            .collect()
    }
}

impl Environment for GridEnv {
    fn num_agents(&self) -> usize {
        self.net.num_intersections()
    }

    fn num_actions(&self) -> usize {
        self.net.intersections[0].num_phases()
    }

    fn obs_width(&self) -> usize {
        self.config.observation.width_for(&self.net)
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>> {
        let flows = self.source.flows(&self.net, seed)?;
        self.state = Some(SimState::reset_with(&self.net, &flows, seed, self.config.sim)?);
        self.steps = 0;
        self.observe_all()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep> {
        if self.steps >= self.config.episode_len_steps {
            return Err(Error::InvalidArgument("episode already finished; reset first".into()));
        }
        let net = Arc::clone(&self.net);
        let st = self
            .state
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("environment used before reset".into()))?;
        let metrics = st.step(&net, joint_action, self.config.delta_t)?;
        self.steps += 1;
        let n = net.num_intersections();
        let st = self.state()?;
        let local_rewards = (0..n)
            .map(|i| local_reward(st, &net, i))
            .collect::<Result<Vec<_>>>()?;
        let neighborhood_rewards = (0..n)
            .map(|i| neighborhood_reward(&local_rewards, &net, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnvStep {
            observations: self.observe_all()?,
            local_rewards,
            neighborhood_rewards,
            metrics,
            done: self.steps == self.config.episode_len_steps,
        })
    }
}
