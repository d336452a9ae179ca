//! Phase-selection controllers: fixed cycle, greedy queue, max-pressure and
//! learned policy.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::GridEnv;
use crate::error::{Error, Result};
use crate::mdp::Observation;
use crate::netmodel::IntersectionSpec;
use crate::nn::{actor_forward, Mlp, ModelParams};
use crate::sim::pressure_of;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub phase: usize,
    pub duration_s: u32,
}

/// An ordered phase cycle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixedTimePlan(pub Vec<PlanEntry>);

impl Default for FixedTimePlan {
    /// NS-straight, NS-left, EW-straight, EW-left, 30 s each.
    fn default() -> Self {
        FixedTimePlan(
            (0..4)
                .map(|phase| PlanEntry {
                    phase,
                    duration_s: 30,
                })
                .collect(),
        )
    }
}

impl FixedTimePlan {
    pub fn cycle_length(&self) -> u64 {
        self.0.iter().map(|e| e.duration_s as u64).sum()
    }

    pub fn validate(&self, num_phases: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidArgument("fixed-time plan is empty".into()));
        }
        for e in &self.0 {
            if e.duration_s == 0 {
                return Err(Error::InvalidArgument(format!(
                    "fixed-time plan entry for phase {} has zero duration",
                    e.phase
                )));
            }
            if e.phase >= num_phases {
                return Err(Error::PhaseOutOfRange {
                    phase: e.phase,
                    len: num_phases,
                });
            }
        }
        Ok(())
    }
}

pub fn fixed_time_action(clock: u64, plan: &FixedTimePlan) -> Result<usize> {
    let cycle = plan.cycle_length();
    if plan.0.is_empty() || cycle == 0 {
        return Err(Error::InvalidArgument("fixed-time plan is empty".into()));
    }
    let mut pos = clock % cycle;
    for e in &plan.0 {
        if pos < e.duration_s as u64 {
            return Ok(e.phase);
        }
        pos -= e.duration_s as u64;
    }
    unreachable!("position lies within the cycle")
}

/// First index of the maximum; the lowest id wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Phase whose movements carry the largest total incoming queue.
pub fn greedy_action(obs: &Observation, spec: &IntersectionSpec) -> usize {
    let totals: Vec<f64> = spec
        .phase_table
        .iter()
        .map(|p| {
            p.movements
                .iter()
                .filter_map(|&m| {
                    let lane = spec.movements[m].in_lane;
                    spec.incoming_lanes.iter().position(|&l| l == lane)
                })
                .map(|k| obs.incoming_queues[k])
                .sum()
        })
        .collect();
    argmax(&totals)
}

pub fn max_pressure_action(pressures: &[f64]) -> usize {
    argmax(pressures)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    Argmax,
}

pub fn sample_action<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Result<usize> {
    let w = WeightedIndex::new(dist).map_err(|e| Error::InvalidArgument(format!("policy distribution: {e}")))?;
    Ok(w.sample(rng))
}

pub fn policy_action<R: Rng + ?Sized>(actor: &Mlp, z_aug: &[f64], mode: ActionMode, rng: &mut R) -> Result<usize> {
    let pi = actor_forward(actor, z_aug)?;
    match mode {
        ActionMode::Sample => sample_action(&pi, rng),
        ActionMode::Argmax => Ok(argmax(&pi)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    FixedTime,
    Greedy,
    MaxPressure,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::FixedTime => "fixed_time",
            ControllerKind::Greedy => "greedy",
            ControllerKind::MaxPressure => "max_pressure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ControllerKind::FixedTime, ControllerKind::Greedy, ControllerKind::MaxPressure]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// Anything that picks a joint action at a decision boundary.
#[derive(Clone, Debug)]
pub enum Controller {
    FixedTime(FixedTimePlan),
    Greedy,
    MaxPressure,
    Policy { params: Arc<ModelParams>, mode: ActionMode },
}

impl Controller {
    pub fn from_kind(kind: ControllerKind, plan: &FixedTimePlan) -> Self {
        match kind {
            ControllerKind::FixedTime => Controller::FixedTime(plan.clone()),
            ControllerKind::Greedy => Controller::Greedy,
            ControllerKind::MaxPressure => Controller::MaxPressure,
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, env: &GridEnv, obs: &[Observation], rng: &mut R) -> Result<Vec<usize>> {
        let net = env.net();
        let n = net.num_intersections();
        match self {
            Controller::FixedTime(plan) => {
                let a = fixed_time_action(env.state()?.clock, plan)?;
                Ok(vec![a; n])
            }
            Controller::Greedy => Ok((0..n).map(|i| greedy_action(&obs[i], &net.intersections[i])).collect()),
            Controller::MaxPressure => {
                let st = env.state()?;
                (0..n)
                    .map(|i| Ok(max_pressure_action(&pressure_of(st, net, i)?)))
                    .collect()
            }
            Controller::Policy { params, mode } => {
                let feats = env.augmented_features(obs)?;
                feats
                    .iter()
                    .map(|z| policy_action(&params.actor, z, *mode, rng))
                    .collect()
            }
        }
    }
}
