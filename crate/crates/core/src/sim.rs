//! Deterministic point-queue traffic simulator.
//!
//! Vehicles traverse each link at the link's free-flow speed and then join a
//! FIFO queue at the stop line in the lane matching their next turn. During
//! each one-second micro-step an intersection that is not in yellow moves up
//! to `saturation_flow` vehicles from the head of every lane whose movement
//! is active, provided the downstream link has spare capacity.
//!
//! Micro-step order: new departures enter, queues discharge, queued vehicles
//! accrue one second of delay, driving vehicles advance, metrics sample.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{shortest_route, FlowSpec};
use crate::netmodel::{LaneId, LinkId, TrafficNetwork};

const ARRIVAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub yellow_s: u32,
    /// Vehicles per lane per green second.
    pub saturation_flow: u32,
    /// Jam spacing used for link storage capacity.
    pub vehicle_spacing_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            yellow_s: 2,
            saturation_flow: 1,
            vehicle_spacing_m: 7.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleMode {
    Driving,
    Queued,
    Finished,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleState {
    pub id: u64,
    pub route: Arc<[LinkId]>,
    pub route_index: usize,
    pub link_position: f64,
    pub mode: VehicleMode,
    pub entry_time: f64,
    pub exit_time: Option<f64>,
    /// Wait at the current intersection; reset on discharge.
    pub queue_wait_accum: f64,
    pub total_delay_accum: f64,
}

impl VehicleState {
    pub fn current_link(&self) -> LinkId {
        self.route[self.route_index]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneQueue {
    pub lane: LaneId,
    pub queued: VecDeque<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct PendingTrip {
    id: u64,
    depart_time: f64,
    route: Arc<[LinkId]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Accumulator {
    ticks: u64,
    queue_sum: f64,
    lane_samples: u64,
    speed_sum: f64,
    wait_sum: f64,
    vehicle_seconds: u64,
}

/// Aggregates over the micro-steps of one `step` call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub avg_queue_length: f64,
    pub avg_speed: f64,
    pub avg_intersection_delay: f64,
    pub vehicles_entered: u64,
    pub vehicles_exited: u64,
    pub in_network: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub avg_queue_length: f64,
    pub avg_speed: f64,
    pub avg_intersection_delay: f64,
    pub avg_cumulative_delay: f64,
    pub avg_trip_time: Option<f64>,
    pub vehicles_entered: u64,
    pub vehicles_exited: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub clock: u64,
    pub vehicles: Vec<VehicleState>,
    pub lane_queues: Vec<LaneQueue>,
    pub agent_phase: Vec<usize>,
    pub yellow_remaining: Vec<u32>,
    pub rng_seed: u64,
    pub config: SimConfig,
    pending: VecDeque<PendingTrip>,
    driving: Vec<usize>,
    occupancy: Vec<u32>,
    capacity: Vec<u32>,
    entered: u64,
    exited: u64,
    acc: Accumulator,
}

impl SimState {
    pub fn reset(net: &TrafficNetwork, flows: &FlowSpec, seed: u64) -> Result<SimState> {
        Self::reset_with(net, flows, seed, SimConfig::default())
    }

    pub fn reset_with(
        net: &TrafficNetwork,
        flows: &FlowSpec,
        seed: u64,
        config: SimConfig,
    ) -> Result<SimState> {
        flows.validate(net)?;
        let mut routes: HashMap<(usize, usize), Arc<[LinkId]>> = HashMap::new();
        let mut pending = VecDeque::with_capacity(flows.trips.len());
        for t in &flows.trips {
            let key = (t.origin, t.destination);
            if !routes.contains_key(&key) {
                let r = shortest_route(net, t.origin, t.destination)?;
                routes.insert(key, r.into());
            }
            pending.push_back(PendingTrip {
                id: t.id,
                depart_time: t.depart_time,
                route: routes[&key].clone(),
            });
        }
        let capacity = net
            .links
            .iter()
            .map(|l| {
                let per_lane = (l.length_m / config.vehicle_spacing_m).floor() as u32;
                (per_lane * l.lanes).max(1)
            })
            .collect();
        let n = net.num_intersections();
        Ok(SimState {
            clock: 0,
            vehicles: Vec::new(),
            lane_queues: (0..net.num_lanes())
                .map(|k| LaneQueue {
                    lane: LaneId(k),
                    queued: VecDeque::new(),
                })
                .collect(),
            agent_phase: vec![0; n],
            yellow_remaining: vec![0; n],
            rng_seed: seed,
            config,
            pending,
            driving: Vec::new(),
            occupancy: vec![0; net.links.len()],
            capacity,
            entered: 0,
            exited: 0,
            acc: Accumulator::default(),
        })
    }

    pub fn pending_departures(&self) -> usize {
        self.pending.len()
    }

    pub fn entered(&self) -> u64 {
        self.entered
    }

    pub fn exited(&self) -> u64 {
        self.exited
    }

    /// Vehicles currently driving or queued.
    pub fn in_network(&self) -> u64 {
        self.vehicles
            .iter()
            .filter(|v| v.mode != VehicleMode::Finished)
            .count() as u64
    }

    pub fn link_occupancy(&self, link: LinkId) -> u32 {
        self.occupancy[link]
    }

    pub fn link_capacity(&self, link: LinkId) -> u32 {
        self.capacity[link]
    }

    pub fn lane_queue_length(&self, lane: LaneId) -> Result<usize> {
        self.lane_queues
            .get(lane.0)
            .map(|q| q.queued.len())
            .ok_or(Error::UnknownLane(lane.0))
    }

    /// Accumulated wait of the vehicle at the head of `lane` (0 if empty).
    pub fn head_wait(&self, lane: LaneId) -> Result<f64> {
        let q = self.lane_queues.get(lane.0).ok_or(Error::UnknownLane(lane.0))?;
        Ok(q.queued
            .front()
            .map_or(0.0, |&v| self.vehicles[v].queue_wait_accum))
    }

    /// Appends a vehicle to the tail of a lane queue as if it had just
    /// arrived at the stop line. Intended for scripted scenarios.
    pub fn inject_queued(&mut self, net: &TrafficNetwork, route: &[LinkId], route_index: usize) -> Result<usize> {
        if route_index >= route.len() || route.iter().any(|&l| l >= net.links.len()) {
            return Err(Error::InvalidArgument("route does not resolve".into()));
        }
        let link = route[route_index];
        let lane = self.lane_for(net, route, route_index)?;
        let idx = self.vehicles.len();
        self.vehicles.push(VehicleState {
            id: u64::MAX - idx as u64,
            route: route.into(),
            route_index,
            link_position: net.links[link].length_m,
            mode: VehicleMode::Queued,
            entry_time: self.clock as f64,
            exit_time: None,
            queue_wait_accum: 0.0,
            total_delay_accum: 0.0,
        });
        self.occupancy[link] += 1;
        self.entered += 1;
        self.lane_queues[lane.0].queued.push_back(idx);
        Ok(idx)
    }

    fn lane_for(&self, net: &TrafficNetwork, route: &[LinkId], k: usize) -> Result<LaneId> {
        let link = route[k];
        let next = route
            .get(k + 1)
            .ok_or_else(|| Error::InvalidArgument("no lane on the final link".into()))?;
        let turn = net.turn_between(link, *next).ok_or_else(|| {
            Error::InvalidArgument(format!("links {link} and {next} are not connected"))
        })?;
        Ok(LaneId::new(link, turn))
    }

    /// Advances `dt` one-second micro-steps under `joint_action`.
    pub fn step(&mut self, net: &TrafficNetwork, joint_action: &[usize], dt: u32) -> Result<StepMetrics> {
        let n = net.num_intersections();
        if dt == 0 {
            return Err(Error::InvalidArgument("step duration must be positive".into()));
        }
        if joint_action.len() != n {
            return Err(Error::WidthMismatch {
                expected: n,
                got: joint_action.len(),
            });
        }
        for (i, &a) in joint_action.iter().enumerate() {
            let len = net.intersections[i].num_phases();
            if a >= len {
                return Err(Error::PhaseOutOfRange { phase: a, len });
            }
        }
        for (i, &a) in joint_action.iter().enumerate() {
            if a != self.agent_phase[i] {
                self.agent_phase[i] = a;
                self.yellow_remaining[i] = self.config.yellow_s;
            }
        }
        let before = self.acc;
        let (entered0, exited0) = (self.entered, self.exited);
        for _ in 0..dt {
            self.micro_step(net);
        }
        let d = |a: f64, b: f64, n: u64| if n == 0 { 0.0 } else { (a - b) / n as f64 };
        let lane_samples = self.acc.lane_samples - before.lane_samples;
        let veh_s = self.acc.vehicle_seconds - before.vehicle_seconds;
        Ok(StepMetrics {
            avg_queue_length: d(self.acc.queue_sum, before.queue_sum, lane_samples),
            avg_speed: d(self.acc.speed_sum, before.speed_sum, veh_s),
            avg_intersection_delay: d(self.acc.wait_sum, before.wait_sum, veh_s),
            vehicles_entered: self.entered - entered0,
            vehicles_exited: self.exited - exited0,
            in_network: self.entered - self.exited,
        })
    }

    fn micro_step(&mut self, net: &TrafficNetwork) {
        let now = self.clock as f64;

        // departures
        while self.pending.front().is_some_and(|p| p.depart_time <= now) {
            let p = self.pending.pop_front().expect("front checked");
            let idx = self.vehicles.len();
            self.occupancy[p.route[0]] += 1;
            self.vehicles.push(VehicleState {
                id: p.id,
                route: p.route,
                route_index: 0,
                link_position: 0.0,
                mode: VehicleMode::Driving,
                entry_time: now,
                exit_time: None,
                queue_wait_accum: 0.0,
                total_delay_accum: 0.0,
            });
            self.driving.push(idx);
            self.entered += 1;
        }

        // discharge
        for spec in &net.intersections {
            let i = spec.id;
            if self.yellow_remaining[i] > 0 {
                continue;
            }
            let phase = &spec.phase_table[self.agent_phase[i]];
            for &m in &phase.movements {
                let lane = spec.movements[m].in_lane;
                for _ in 0..self.config.saturation_flow {
                    let Some(&v) = self.lane_queues[lane.0].queued.front() else {
                        break;
                    };
                    let veh = &self.vehicles[v];
                    let cur = veh.current_link();
                    let next = veh.route[veh.route_index + 1];
                    if self.occupancy[next] >= self.capacity[next] {
                        break;
                    }
                    self.lane_queues[lane.0].queued.pop_front();
                    self.occupancy[cur] -= 1;
                    self.occupancy[next] += 1;
                    let veh = &mut self.vehicles[v];
                    veh.route_index += 1;
                    veh.link_position = 0.0;
                    veh.mode = VehicleMode::Driving;
                    veh.queue_wait_accum = 0.0;
                    self.driving.push(v);
                }
            }
        }

        // queued vehicles wait this second
        let mut queued_count = 0u64;
        let mut wait_sum = 0.0;
        for q in &self.lane_queues {
            for &v in &q.queued {
                let veh = &mut self.vehicles[v];
                veh.queue_wait_accum += 1.0;
                veh.total_delay_accum += 1.0;
                wait_sum += veh.queue_wait_accum;
                queued_count += 1;
            }
        }

        // driving
        let mut speed_sum = 0.0;
        let driving_count = self.driving.len() as u64;
        let mut still_driving = Vec::with_capacity(self.driving.len());
        let driving = std::mem::take(&mut self.driving);
        for v in driving {
            let link_id = self.vehicles[v].current_link();
            let link = &net.links[link_id];
            speed_sum += link.speed_limit_mps;
            let veh = &mut self.vehicles[v];
            let remaining = link.length_m - veh.link_position;
            veh.link_position += link.speed_limit_mps.min(remaining);
            if link.length_m - veh.link_position > ARRIVAL_TOL {
                still_driving.push(v);
                continue;
            }
            veh.link_position = link.length_m;
            if veh.route_index + 1 == veh.route.len() {
                veh.mode = VehicleMode::Finished;
                veh.exit_time = Some(now + 1.0);
                self.occupancy[link_id] -= 1;
                self.exited += 1;
            } else {
                veh.mode = VehicleMode::Queued;
                let turn = net
                    .turn_between(link_id, veh.route[veh.route_index + 1])
                    .expect("routes follow connected links");
                self.lane_queues[LaneId::new(link_id, turn).0].queued.push_back(v);
            }
        }
        self.driving = still_driving;

        // sampling
        let mut queue_sum = 0.0;
        let mut lanes = 0u64;
        for spec in &net.intersections {
            for lane in &spec.incoming_lanes {
                queue_sum += self.lane_queues[lane.0].queued.len() as f64;
                lanes += 1;
            }
        }
        self.acc.ticks += 1;
        self.acc.queue_sum += queue_sum;
        self.acc.lane_samples += lanes;
        self.acc.speed_sum += speed_sum;
        self.acc.wait_sum += wait_sum;
        self.acc.vehicle_seconds += driving_count + queued_count;

        for y in &mut self.yellow_remaining {
            *y = y.saturating_sub(1);
        }
        self.clock += 1;
    }

    pub fn episode_metrics(&self) -> EpisodeMetrics {
        let ratio = |a: f64, n: u64| if n == 0 { 0.0 } else { a / n as f64 };
        let delays: f64 = self.vehicles.iter().map(|v| v.total_delay_accum).sum();
        let trips: Vec<f64> = self
            .vehicles
            .iter()
            .filter_map(|v| v.exit_time.map(|e| e - v.entry_time))
            .collect();
        EpisodeMetrics {
            avg_queue_length: ratio(self.acc.queue_sum, self.acc.lane_samples),
            avg_speed: ratio(self.acc.speed_sum, self.acc.vehicle_seconds),
            avg_intersection_delay: ratio(self.acc.wait_sum, self.acc.vehicle_seconds),
            avg_cumulative_delay: ratio(delays, self.vehicles.len() as u64),
            avg_trip_time: (!trips.is_empty())
                .then(|| trips.iter().sum::<f64>() / trips.len() as f64),
            vehicles_entered: self.entered,
            vehicles_exited: self.exited,
        }
    }
}

pub fn lane_queue_length(state: &SimState, lane: LaneId) -> Result<usize> {
    state.lane_queue_length(lane)
}

/// Per-phase pressure: sum over the phase's movements of incoming minus
/// outgoing lane queue length.
pub fn pressure_of(state: &SimState, net: &TrafficNetwork, i: usize) -> Result<Vec<f64>> {
    let spec = net.intersection(i)?;
    let q = |lane: LaneId| state.lane_queues[lane.0].queued.len() as f64;
    Ok(spec
        .phase_table
        .iter()
        .map(|p| {
            p.movements
                .iter()
                .map(|&m| {
                    let mv = &spec.movements[m];
                    q(mv.in_lane) - q(mv.out_lane)
                })
                .sum()
        })
        .collect())
}

pub fn episode_metrics(state: &SimState) -> EpisodeMetrics {
    state.episode_metrics()
}
