//! Synthetic origin-destination flows and routing.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{LinkId, NodeId, TrafficNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripRecord {
    pub id: u64,
    pub origin: NodeId,
    pub destination: NodeId,
    #[serde(rename = "depart_time_s")]
    pub depart_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    #[serde(rename = "horizon_s")]
    pub horizon: f64,
    pub trips: Vec<TripRecord>,
}

impl FlowSpec {
    pub fn empty(horizon: f64) -> Self {
        FlowSpec {
            horizon,
            trips: Vec::new(),
        }
    }

    pub fn validate(&self, net: &TrafficNetwork) -> Result<()> {
        let mut last = f64::NEG_INFINITY;
        for t in &self.trips {
            for node in [t.origin, t.destination] {
                if !net.is_boundary(node) {
                    return Err(Error::UnknownNode(node));
                }
            }
            if t.origin == t.destination {
                return Err(Error::InvalidArgument(format!(
                    "trip {} has identical origin and destination",
                    t.id
                )));
            }
            if !(t.depart_time >= 0.0) || t.depart_time > self.horizon {
                return Err(Error::InvalidArgument(format!(
                    "trip {} departs at {} outside [0, {}]",
                    t.id, t.depart_time, self.horizon
                )));
            }
            if t.depart_time < last {
                return Err(Error::InvalidArgument("trips are not sorted by depart time".into()));
            }
            last = t.depart_time;
        }
        Ok(())
    }
}

/// Piecewise-constant arrival rate: `(start_s, vehicles_per_s)` segments,
/// each active until the next start (the last until the horizon).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub segments: Vec<(f64, f64)>,
}

impl RateSchedule {
    pub fn constant(rate: f64) -> Self {
        RateSchedule {
            segments: vec![(0.0, rate)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidArgument("rate schedule is empty".into()));
        }
        if self.segments[0].0 != 0.0 {
            return Err(Error::InvalidArgument("rate schedule must start at 0 s".into()));
        }
        for w in self.segments.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::InvalidArgument(
                    "rate schedule starts must be increasing".into(),
                ));
            }
        }
        if self.segments.iter().any(|&(_, r)| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument("arrival rate must be positive".into()));
        }
        Ok(())
    }
}

pub fn generate_flows(
    net: &TrafficNetwork,
    arrival_rate: f64,
    horizon: f64,
    seed: u64,
) -> Result<FlowSpec> {
    generate_scheduled_flows(net, &RateSchedule::constant(arrival_rate), horizon, seed)
}

/// Poisson arrivals with origin and destination drawn uniformly over
/// distinct boundary nodes.
pub fn generate_scheduled_flows(
    net: &TrafficNetwork,
    schedule: &RateSchedule,
    horizon: f64,
    seed: u64,
) -> Result<FlowSpec> {
    schedule.validate()?;
    if !(horizon >= 0.0) {
        return Err(Error::InvalidArgument("horizon must be non-negative".into()));
    }
    let b = net.boundary.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "flow generation needs at least 2 boundary nodes, network has {b}"
        )));
    }
    let first = net.num_intersections();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut router = Router::new(net);
    let mut trips = Vec::new();
    for (k, &(start, rate)) in schedule.segments.iter().enumerate() {
        let end = schedule
            .segments
            .get(k + 1)
            .map_or(horizon, |s| s.0)
            .min(horizon);
        let gap = Exp::new(rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut t = start;
        loop {
            t += gap.sample(&mut rng);
            if t > end {
                break;
            }
            let o = rng.random_range(0..b);
            let mut d = rng.random_range(0..b - 1);
            if d >= o {
                d += 1;
            }
            let (origin, destination) = (first + o, first + d);
            if router.route(origin, destination).is_err() {
                continue;
            }
            trips.push(TripRecord {
                id: trips.len() as u64,
                origin,
                destination,
                depart_time: t,
            });
        }
    }
    Ok(FlowSpec { horizon, trips })
}

/// Free-flow shortest path; equal-cost paths are ordered by their node-id
/// sequence and the lexicographically smallest wins.
pub fn route_of(net: &TrafficNetwork, trip: &TripRecord) -> Result<Vec<LinkId>> {
    shortest_route(net, trip.origin, trip.destination)
}

const COST_TOL: f64 = 1e-9;

pub fn shortest_route(net: &TrafficNetwork, origin: NodeId, destination: NodeId) -> Result<Vec<LinkId>> {
    for node in [origin, destination] {
        if !net.is_boundary(node) {
            return Err(Error::UnknownNode(node));
        }
    }
    if origin == destination {
        return Err(Error::Unreachable {
            from: origin,
            to: destination,
        });
    }
    let n = net.num_nodes();
    let mut out_links: Vec<Vec<LinkId>> = vec![Vec::new(); n];
    for l in &net.links {
        out_links[l.from].push(l.id);
    }
    // label-correcting search; labels are (cost, node path, link path)
    let mut best: Vec<Option<(f64, Vec<NodeId>, Vec<LinkId>)>> = vec![None; n];
    best[origin] = Some((0.0, vec![origin], Vec::new()));
    let mut changed = true;
    while changed {
        changed = false;
        for u in 0..n {
            let Some((cost, nodes, links)) = best[u].clone() else {
                continue;
            };
            // routes may only pass through intersections
            if u != origin && net.is_boundary(u) {
                continue;
            }
            for &l in &out_links[u] {
                let link = &net.links[l];
                let v = link.to;
                if nodes.contains(&v) {
                    continue;
                }
                let c = cost + link.free_flow_time();
                let better = match &best[v] {
                    None => true,
                    Some((bc, bn, _)) => {
                        if c < bc - COST_TOL {
                            true
                        } else if (c - bc).abs() <= COST_TOL {
                            let mut cand = nodes.clone();
                            cand.push(v);
                            cand < *bn
                        } else {
                            false
                        }
                    }
                };
                if better {
                    let mut nn = nodes.clone();
                    nn.push(v);
                    let mut nl = links.clone();
                    nl.push(l);
                    best[v] = Some((c, nn, nl));
                    changed = true;
                }
            }
        }
    }
    best[destination]
        .take()
        .map(|(_, _, links)| links)
        .ok_or(Error::Unreachable {
            from: origin,
            to: destination,
        })
}

/// Memoizing route lookup over boundary pairs.
#[derive(Debug)]
pub struct Router<'a> {
    net: &'a TrafficNetwork,
    cache: HashMap<(NodeId, NodeId), Vec<LinkId>>,
}

impl<'a> Router<'a> {
    pub fn new(net: &'a TrafficNetwork) -> Self {
        Router {
            net,
            cache: HashMap::new(),
        }
    }

    pub fn route(&mut self, origin: NodeId, destination: NodeId) -> Result<&[LinkId]> {
        if !self.cache.contains_key(&(origin, destination)) {
            let r = shortest_route(self.net, origin, destination)?;
            self.cache.insert((origin, destination), r);
        }
        Ok(&self.cache[&(origin, destination)])
    }
}

pub fn route_free_flow_time(net: &TrafficNetwork, route: &[LinkId]) -> f64 {
    route.iter().map(|&l| net.links[l].free_flow_time()).sum()
}

pub fn flows_to_json(spec: &FlowSpec) -> String {
    let mut s = serde_json::to_string_pretty(spec).expect("flow spec serializes");
    s.push('\n');
    s
}

/// Parses a flow file: either `{horizon_s, trips}` or a bare trip array
/// (horizon then taken as the last departure time).
pub fn flows_from_json(text: &str) -> Result<FlowSpec> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(Error::from_json)?;
    if value.is_array() {
        let trips: Vec<TripRecord> = serde_json::from_str(text).map_err(Error::from_json)?;
        let horizon = trips.iter().map(|t| t.depart_time).fold(0.0, f64::max);
        return Ok(FlowSpec { horizon, trips });
    }
    serde_json::from_str::<FlowSpec>(text).map_err(Error::from_json)
}

pub fn save_flows(spec: &FlowSpec, path: &Path) -> Result<()> {
    std::fs::write(path, flows_to_json(spec))?;
    Ok(())
}

pub fn load_flows(path: &Path) -> Result<FlowSpec> {
    flows_from_json(&std::fs::read_to_string(path)?)
}
