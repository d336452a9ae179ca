//! Per-agent observations, neighborhood augmentation, rewards and rollout
//! storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{neighbors_of, TrafficNetwork, NUM_SLOTS};
use crate::sim::{pressure_of, SimState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaKind {
    /// Phase one-hot and incoming queues.
    Cityflow,
    /// Adds outgoing queues and normalized head waits.
    Sumo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSchema {
    pub schema: SchemaKind,
    pub wait_norm_s: f64,
    /// Queue and pressure features are divided by this (1 keeps raw counts).
    pub queue_norm: f64,
    pub pressure: bool,
}

impl Default for ObservationSchema {
    fn default() -> Self {
        ObservationSchema {
            schema: SchemaKind::Cityflow,
            wait_norm_s: 60.0,
            queue_norm: 1.0,
            pressure: false,
        }
    }
}

impl ObservationSchema {
    pub fn width(&self, num_phases: usize, lanes_in: usize, lanes_out: usize) -> usize {
        let mut w = num_phases + lanes_in;
        if self.schema == SchemaKind::Sumo {
            w += lanes_out + lanes_in;
        }
        if self.pressure {
            w += num_phases;
        }
        w
    }

    pub fn width_for(&self, net: &TrafficNetwork) -> usize {
        let spec = &net.intersections[0];
        self.width(
            spec.num_phases(),
            spec.incoming_lanes.len(),
            spec.outgoing_lanes.len(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub phase_onehot: Vec<f64>,
    pub incoming_queues: Vec<f64>,
    pub outgoing_queues: Vec<f64>,
    pub head_waits: Vec<f64>,
    pub pressure: Option<Vec<f64>>,
}

impl Observation {
    pub fn width(&self) -> usize {
        self.phase_onehot.len()
            + self.incoming_queues.len()
            + self.outgoing_queues.len()
            + self.head_waits.len()
            + self.pressure.as_ref().map_or(0, |p| p.len())
    }

    pub fn write_features(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.phase_onehot);
        out.extend_from_slice(&self.incoming_queues);
        out.extend_from_slice(&self.outgoing_queues);
        out.extend_from_slice(&self.head_waits);
        if let Some(p) = &self.pressure {
            out.extend_from_slice(p);
        }
    }

    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        self.write_features(&mut v);
        v
    }
}

pub fn observe(
    state: &SimState,
    net: &TrafficNetwork,
    i: usize,
    schema: &ObservationSchema,
) -> Result<Observation> {
    let spec = net.intersection(i)?;
    let mut phase_onehot = vec![0.0; spec.num_phases()];
    phase_onehot[state.agent_phase[i]] = 1.0;
    let queue = |lanes: &[crate::netmodel::LaneId]| -> Result<Vec<f64>> {
        lanes
            .iter()
            .map(|&l| state.lane_queue_length(l).map(|q| q as f64 / schema.queue_norm))
            .collect()
    };
    let incoming_queues = queue(&spec.incoming_lanes)?;
    let (outgoing_queues, head_waits) = match schema.schema {
        SchemaKind::Cityflow => (Vec::new(), Vec::new()),
        SchemaKind::Sumo => {
            let waits = spec
                .incoming_lanes
                .iter()
                .map(|&l| state.head_wait(l).map(|w| (w / schema.wait_norm_s).min(1.0)))
                .collect::<Result<Vec<_>>>()?;
            (queue(&spec.outgoing_lanes)?, waits)
        }
    };
    let pressure = if schema.pressure {
        Some(
            pressure_of(state, net, i)?
                .into_iter()
                .map(|p| p / schema.queue_norm)
                .collect(),
        )
    } else {
        None
    };
    Ok(Observation {
        phase_onehot,
        incoming_queues,
        outgoing_queues,
        head_waits,
        pressure,
    })
}

/// Own observation followed by the four compass slots (zero-padded where no
/// neighbor exists) and the slot validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedObservation {
    pub own: Observation,
    pub neighbors: [Option<Observation>; NUM_SLOTS],
    pub mask: [bool; NUM_SLOTS],
}

impl AugmentedObservation {
    pub fn width(&self) -> usize {
        augmented_width(self.own.width())
    }

    pub fn features(&self) -> Vec<f64> {
        let w = self.own.width();
        let mut out = Vec::with_capacity(augmented_width(w));
        self.own.write_features(&mut out);
        for slot in &self.neighbors {
            match slot {
                Some(o) => o.write_features(&mut out),
                None => out.extend(std::iter::repeat_n(0.0, w)),
            }
        }
        out.extend(self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        out
    }
}

pub fn augmented_width(obs_width: usize) -> usize {
    (1 + NUM_SLOTS) * obs_width + NUM_SLOTS
}

pub fn augment(obs_all: &[Observation], net: &TrafficNetwork, i: usize) -> Result<AugmentedObservation> {
    if obs_all.len() != net.num_intersections() {
        return Err(Error::WidthMismatch {
            expected: net.num_intersections(),
            got: obs_all.len(),
        });
    }
    let slots = neighbors_of(net, i)?;
    Ok(AugmentedObservation {
        own: obs_all[i].clone(),
        neighbors: slots.slots.map(|s| s.map(|j| obs_all[j].clone())),
        mask: slots.mask(),
    })
}

/// Negative total queue over the intersection's incoming lanes.
pub fn local_reward(state: &SimState, net: &TrafficNetwork, i: usize) -> Result<f64> {
    let spec = net.intersection(i)?;
    let mut total = 0usize;
    for &l in &spec.incoming_lanes {
        total += state.lane_queue_length(l)?;
    }
    Ok(-(total as f64))
}

pub fn neighborhood_reward(local_rewards: &[f64], net: &TrafficNetwork, i: usize) -> Result<f64> {
    if local_rewards.len() != net.num_intersections() {
        return Err(Error::WidthMismatch {
            expected: net.num_intersections(),
            got: local_rewards.len(),
        });
    }
    let slots = neighbors_of(net, i)?;
    Ok(local_rewards[i] + slots.valid().map(|j| local_rewards[j]).sum::<f64>())
}

/// Compass-ordered one-hot rows, all-zero for absent slots.
pub fn encode_neighbor_actions(actions: &[Option<usize>; NUM_SLOTS], num_actions: usize) -> Vec<f64> {
    let mut out = vec![0.0; NUM_SLOTS * num_actions];
    for (k, a) in actions.iter().enumerate() {
        if let Some(a) = a {
            out[k * num_actions + a] = 1.0;
        }
    }
    out
}

pub fn neighbor_actions(net: &TrafficNetwork, i: usize, joint: &[usize]) -> Result<[Option<usize>; NUM_SLOTS]> {
    Ok(neighbors_of(net, i)?.slots.map(|s| s.map(|j| joint[j])))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub t: usize,
    pub z_aug: Vec<f64>,
    pub action: usize,
    pub neighbor_actions: [Option<usize>; NUM_SLOTS],
    pub policy_dist: Vec<f64>,
    pub critic_vec: Vec<f64>,
    /// State-value head output (used by the A3C variants).
    pub value: f64,
    pub local_reward: f64,
    pub neighborhood_reward: f64,
}

/// Record at the step following a truncated rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapRecord {
    pub z_aug: Vec<f64>,
    pub neighbor_actions: [Option<usize>; NUM_SLOTS],
    pub policy_dist: Vec<f64>,
    pub critic_vec: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentRollout {
    pub records: Vec<TransitionRecord>,
    pub bootstrap: Option<BootstrapRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub agents: Vec<AgentRollout>,
    /// The rollout ended with the episode.
    pub terminal: bool,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.records.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the shared-length, bootstrap and distribution invariants.
    pub fn validate(&self, num_actions: usize) -> Result<()> {
        let t = self.len();
        for (i, a) in self.agents.iter().enumerate() {
            if a.records.len() != t {
                return Err(Error::Shape(format!(
                    "agent {i} has {} records, expected {t}",
                    a.records.len()
                )));
            }
            if a.bootstrap.is_some() == self.terminal {
                return Err(Error::Shape(format!(
                    "agent {i}: bootstrap must be present iff the rollout is truncated"
                )));
            }
            for r in &a.records {
                if r.action >= num_actions {
                    return Err(Error::PhaseOutOfRange { phase: r.action, len: num_actions });
                }
                let s: f64 = r.policy_dist.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Shape(format!(
                        "agent {i} step {}: policy sums to {s}",
                        r.t
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowSpec;
    use crate::netmodel::{build_grid_network, default_phase_table, LinkTemplates};

    fn grid(rows: usize, cols: usize) -> TrafficNetwork {
        build_grid_network(rows, cols, &LinkTemplates::default(), &default_phase_table()).unwrap()
    }

    fn fresh(net: &TrafficNetwork) -> SimState {
        SimState::reset(net, &FlowSpec::empty(100.0), 0).unwrap()
    }

    #[test]
    fn fresh_observation() {
        let net = grid(2, 2);
        let s = fresh(&net);
        let o = observe(&s, &net, 1, &ObservationSchema::default()).unwrap();
        let mut e0 = vec![0.0; 8];
        e0[0] = 1.0;
        assert_eq!(o.phase_onehot, e0);
        assert!(o.incoming_queues.iter().all(|&q| q == 0.0));
        assert_eq!(o.width(), ObservationSchema::default().width_for(&net));
        assert_eq!(o, observe(&s, &net, 1, &ObservationSchema::default()).unwrap());
    }

    #[test]
    fn observation_matches_lane_queues() {
        let net = grid(2, 2);
        let mut s = fresh(&net);
        let spec = &net.intersections[0];
        for (k, &count) in [2usize, 0, 1, 3].iter().enumerate() {
            for _ in 0..count {
                s.lane_queues[spec.incoming_lanes[k].0].queued.push_back(usize::MAX);
            }
        }
        let o = observe(&s, &net, 0, &ObservationSchema::default()).unwrap();
        for (k, &l) in spec.incoming_lanes.iter().enumerate() {
            assert_eq!(o.incoming_queues[k], s.lane_queue_length(l).unwrap() as f64);
        }
        assert_eq!(&o.incoming_queues[..4], &[2.0, 0.0, 1.0, 3.0]);
        assert_eq!(local_reward(&s, &net, 0).unwrap(), -6.0);

        let scaled = ObservationSchema {
            queue_norm: 4.0,
            pressure: true,
            ..Default::default()
        };
        let o2 = observe(&s, &net, 0, &scaled).unwrap();
        assert_eq!(&o2.incoming_queues[..4], &[0.5, 0.0, 0.25, 0.75]);
        let p = pressure_of(&s, &net, 0).unwrap();
        assert_eq!(o2.pressure.unwrap(), p.iter().map(|x| x / 4.0).collect::<Vec<_>>());
        // rewards stay in raw counts
        assert_eq!(local_reward(&s, &net, 0).unwrap(), -6.0);
    }

    #[test]
    fn sumo_schema_width() {
        let net = grid(3, 3);
        let schema = ObservationSchema {
            schema: SchemaKind::Sumo,
            pressure: true,
            ..Default::default()
        };
        let o = observe(&fresh(&net), &net, 4, &schema).unwrap();
        assert_eq!(o.width(), 8 + 12 + 12 + 12 + 8);
        assert_eq!(o.width(), schema.width_for(&net));
    }

    #[test]
    fn augmentation_padding_and_order() {
        let net = grid(1, 1);
        let s = fresh(&net);
        let schema = ObservationSchema::default();
        let obs = vec![observe(&s, &net, 0, &schema).unwrap()];
        let z = augment(&obs, &net, 0).unwrap();
        assert_eq!(z.mask, [false; 4]);
        let f = z.features();
        let w = obs[0].width();
        assert_eq!(f.len(), augmented_width(w));
        assert!(f[w..].iter().all(|&x| x == 0.0));

        let net = grid(3, 3);
        let obs: Vec<Observation> = (0..9)
            .map(|i| {
                let mut o = observe(&fresh(&net), &net, i, &schema).unwrap();
                o.incoming_queues[0] = i as f64;
                o
            })
            .collect();
        let z = augment(&obs, &net, 4).unwrap();
        assert_eq!(z.mask, [true; 4]);
        let tags: Vec<f64> = z.neighbors.iter().map(|o| o.as_ref().unwrap().incoming_queues[0]).collect();
        assert_eq!(tags, vec![1.0, 5.0, 7.0, 3.0]);
        let f = z.features();
        assert_eq!(f[8], 4.0);
        assert_eq!(f[w + 8], 1.0);
        assert_eq!(&f[f.len() - 4..], &[1.0; 4]);

        // agents outside the neighborhood don't matter
        let mut shuffled = obs.clone();
        shuffled.swap(0, 8);
        shuffled.swap(2, 6);
        assert_eq!(augment(&shuffled, &net, 4).unwrap(), z);
    }

    #[test]
    fn neighborhood_reward_sums() {
        let net = grid(3, 3);
        let mut r = vec![0.0; 9];
        r[4] = -4.0;
        r[1] = -2.0;
        r[5] = -3.0;
        r[7] = -1.0;
        assert_eq!(neighborhood_reward(&r, &net, 4).unwrap(), -10.0);
        let single = grid(1, 1);
        assert_eq!(neighborhood_reward(&[-7.0], &single, 0).unwrap(), -7.0);
        assert_eq!(neighborhood_reward(&[0.0; 9], &net, 3).unwrap(), 0.0);
    }

    #[test]
    fn neighbor_action_encoding() {
        let enc = encode_neighbor_actions(&[Some(1), None, Some(0), None], 3);
        assert_eq!(enc, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
