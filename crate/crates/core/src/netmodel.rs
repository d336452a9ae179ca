//! Road-network model.
//!
//! A network is a `rows x cols` grid of identical four-leg intersections.
//! Every directed road link ends in three stop-line lanes (left, straight,
//! right); lane `k` of link `l` has id `3 * l + k`. Intersections are numbered
//! row-major from the north-west corner. Every compass side without a
//! neighboring intersection gets a boundary terminal node (ids follow the
//! intersections) carrying one source link into the grid and one sink link
//! out of it.
//!
//! Movements are numbered `3 * approach + turn`, where `approach` is the
//! compass side the vehicle arrives from (N, E, S, W) and `turn` is
//! left/straight/right.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_SLOTS: usize = 4;
pub const TURNS: usize = 3;
pub const MOVEMENTS_PER_INTERSECTION: usize = NUM_SLOTS * TURNS;

pub type NodeId = usize;
pub type LinkId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Direction {
        Self::ALL[i % 4]
    }

    pub fn opposite(self) -> Direction {
        Self::from_index(self.index() + 2)
    }

    /// Heading after performing `turn` while travelling towards `self`.
    pub fn turned(self, turn: Turn) -> Direction {
        match turn {
            Turn::Left => Self::from_index(self.index() + 3),
            Turn::Straight => self,
            Turn::Right => Self::from_index(self.index() + 1),
        }
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, Direction::East | Direction::West)
    }

    pub fn short(self) -> char {
        ['N', 'E', 'S', 'W'][self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Straight, Turn::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneId(pub usize);

impl LaneId {
    pub fn new(link: LinkId, turn: Turn) -> Self {
        LaneId(link * TURNS + turn.index())
    }

    pub fn link(self) -> LinkId {
        self.0 / TURNS
    }

    pub fn turn(self) -> Turn {
        Turn::ALL[self.0 % TURNS]
    }
}

/// Connection from one incoming lane to one outgoing lane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Movement {
    pub id: usize,
    pub approach: Direction,
    pub kind: Turn,
    pub in_lane: LaneId,
    pub out_lane: LaneId,
}

impl Movement {
    pub fn id_of(approach: Direction, kind: Turn) -> usize {
        approach.index() * TURNS + kind.index()
    }

    pub fn exit_side(&self) -> Direction {
        self.approach.opposite().turned(self.kind)
    }
}

/// Two non-right movements conflict unless they come from the same approach,
/// or are both straights (or both lefts) from opposite approaches. Right
/// turns never conflict.
pub fn movements_conflict(a: usize, b: usize) -> bool {
    let (da, ta) = (Direction::from_index(a / TURNS), Turn::ALL[a % TURNS]);
    let (db, tb) = (Direction::from_index(b / TURNS), Turn::ALL[b % TURNS]);
    if ta == Turn::Right || tb == Turn::Right || da == db {
        return false;
    }
    !(db == da.opposite() && ta == tb)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub id: usize,
    /// Sorted movement ids.
    pub movements: Vec<usize>,
}

impl Phase {
    pub fn new(id: usize, movements: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = movements.into_iter().collect();
        Phase {
            id,
            movements: set.into_iter().collect(),
        }
    }
}

fn phase_with_rights(id: usize, main: &[(Direction, Turn)]) -> Phase {
    let rights = Direction::ALL
        .iter()
        .map(|&d| Movement::id_of(d, Turn::Right));
    let mains = main.iter().map(|&(d, t)| Movement::id_of(d, t));
    Phase::new(id, mains.chain(rights))
}

/// The eight-phase table: NS-straight, NS-left, EW-straight, EW-left, then
/// straight+left for N, S, E and W individually. Right turns are permitted
/// in every phase.
pub fn default_phase_table() -> Vec<Phase> {
    use Direction::*;
    use Turn::*;
    let mains: [&[(Direction, Turn)]; 8] = [
        &[(North, Straight), (South, Straight)],
        &[(North, Left), (South, Left)],
        &[(East, Straight), (West, Straight)],
        &[(East, Left), (West, Left)],
        &[(North, Straight), (North, Left)],
        &[(South, Straight), (South, Left)],
        &[(East, Straight), (East, Left)],
        &[(West, Straight), (West, Left)],
    ];
    mains
        .iter()
        .enumerate()
        .map(|(id, m)| phase_with_rights(id, m))
        .collect()
}

/// Builds a phase table from raw movement-id lists (ids assigned in order).
pub fn phase_table_from_lists(lists: &[Vec<usize>]) -> Vec<Phase> {
    lists
        .iter()
        .enumerate()
        .map(|(id, l)| Phase::new(id, l.iter().copied()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkTemplate {
    pub lanes: u32,
    pub length_m: f64,
    pub speed_limit_mps: f64,
}

/// Link attributes by orientation: streets run east-west, avenues north-south.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkTemplates {
    pub street: LinkTemplate,
    pub avenue: LinkTemplate,
}

impl Default for LinkTemplates {
    fn default() -> Self {
        LinkTemplates {
            street: LinkTemplate {
                lanes: 2,
                length_m: 200.0,
                speed_limit_mps: 20.0,
            },
            avenue: LinkTemplate {
                lanes: 1,
                length_m: 200.0,
                speed_limit_mps: 40.0 / 3.6,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadLink {
    pub id: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub lanes: u32,
    pub length_m: f64,
    pub speed_limit_mps: f64,
}

impl RoadLink {
    pub fn free_flow_time(&self) -> f64 {
        self.length_m / self.speed_limit_mps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSpec {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    /// Incoming link per approach side (N, E, S, W).
    pub incoming_links: [LinkId; NUM_SLOTS],
    /// Outgoing link per exit side (N, E, S, W).
    pub outgoing_links: [LinkId; NUM_SLOTS],
    /// N, E, S, W approaches, each left/straight/right.
    pub incoming_lanes: Vec<LaneId>,
    pub outgoing_lanes: Vec<LaneId>,
    /// Indexed by movement id.
    pub movements: Vec<Movement>,
    pub phase_table: Vec<Phase>,
}

impl IntersectionSpec {
    pub fn num_phases(&self) -> usize {
        self.phase_table.len()
    }

    /// Movements of `phase_id` in ascending movement-id order.
    pub fn movements_of_phase(&self, phase_id: usize) -> Result<Vec<Movement>> {
        let phase = self
            .phase_table
            .get(phase_id)
            .ok_or(Error::PhaseOutOfRange {
                phase: phase_id,
                len: self.phase_table.len(),
            })?;
        phase
            .movements
            .iter()
            .map(|&m| {
                self.movements.get(m).copied().ok_or_else(|| {
                    Error::Network(format!(
                        "phase {phase_id} references unknown movement {m}"
                    ))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryNode {
    pub id: NodeId,
    pub intersection: usize,
    pub side: Direction,
    pub source_link: LinkId,
    pub sink_link: LinkId,
}

/// Fixed four-slot (N, E, S, W) neighbor list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeighborSlots {
    pub slots: [Option<usize>; NUM_SLOTS],
}

impl NeighborSlots {
    pub fn mask(&self) -> [bool; NUM_SLOTS] {
        self.slots.map(|s| s.is_some())
    }

    pub fn valid_count(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn valid(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().flatten().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficNetwork {
    pub rows: usize,
    pub cols: usize,
    pub intersections: Vec<IntersectionSpec>,
    pub links: Vec<RoadLink>,
    pub adjacency: Vec<[Option<usize>; NUM_SLOTS]>,
    pub boundary: Vec<BoundaryNode>,
}

pub fn build_grid_network(
    rows: usize,
    cols: usize,
    templates: &LinkTemplates,
    phase_table: &[Phase],
) -> Result<TrafficNetwork> {
    if rows == 0 || cols == 0 {
        return Err(Error::Network(format!(
            "grid dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if phase_table.is_empty() {
        return Err(Error::Network("phase table is empty".into()));
    }
    let n = rows * cols;
    let neighbor = |i: usize, d: Direction| -> Option<usize> {
        let (r, c) = (i / cols, i % cols);
        match d {
            Direction::North if r > 0 => Some(i - cols),
            Direction::South if r + 1 < rows => Some(i + cols),
            Direction::West if c > 0 => Some(i - 1),
            Direction::East if c + 1 < cols => Some(i + 1),
            _ => None,
        }
    };
    let adjacency: Vec<[Option<usize>; 4]> = (0..n)
        .map(|i| Direction::ALL.map(|d| neighbor(i, d)))
        .collect();

    let template = |d: Direction| {
        if d.is_horizontal() {
            templates.street
        } else {
            templates.avenue
        }
    };
    let mut links = Vec::new();
    let mut push_link = |from: NodeId, to: NodeId, d: Direction| -> LinkId {
        let t = template(d);
        let id = links.len();
        links.push(RoadLink {
            id,
            from,
            to,
            lanes: t.lanes,
            length_m: t.length_m,
            speed_limit_mps: t.speed_limit_mps,
        });
        id
    };

    let mut outgoing = vec![[usize::MAX; 4]; n];
    let mut incoming = vec![[usize::MAX; 4]; n];
    for i in 0..n {
        for d in Direction::ALL {
            if let Some(j) = adjacency[i][d.index()] {
                let l = push_link(i, j, d);
                outgoing[i][d.index()] = l;
                // arrives at j from the side facing i
                incoming[j][d.opposite().index()] = l;
            }
        }
    }
    let mut boundary = Vec::new();
    for i in 0..n {
        for d in Direction::ALL {
            if adjacency[i][d.index()].is_none() {
                let node = n + boundary.len();
                let source = push_link(node, i, d);
                let sink = push_link(i, node, d);
                incoming[i][d.index()] = source;
                outgoing[i][d.index()] = sink;
                boundary.push(BoundaryNode {
                    id: node,
                    intersection: i,
                    side: d,
                    source_link: source,
                    sink_link: sink,
                });
            }
        }
    }

    let intersections = (0..n)
        .map(|i| {
            let mut movements = Vec::with_capacity(MOVEMENTS_PER_INTERSECTION);
            for approach in Direction::ALL {
                for kind in Turn::ALL {
                    let exit = approach.opposite().turned(kind);
                    movements.push(Movement {
                        id: Movement::id_of(approach, kind),
                        approach,
                        kind,
                        in_lane: LaneId::new(incoming[i][approach.index()], kind),
                        out_lane: LaneId::new(outgoing[i][exit.index()], kind),
                    });
                }
            }
            let lanes_of = |ls: &[LinkId; 4]| -> Vec<LaneId> {
                ls.iter()
                    .flat_map(|&l| Turn::ALL.map(|t| LaneId::new(l, t)))
                    .collect()
            };
            IntersectionSpec {
                id: i,
                row: i / cols,
                col: i % cols,
                incoming_links: incoming[i],
                outgoing_links: outgoing[i],
                incoming_lanes: lanes_of(&incoming[i]),
                outgoing_lanes: lanes_of(&outgoing[i]),
                movements,
                phase_table: phase_table
                    .iter()
                    .enumerate()
                    .map(|(id, p)| Phase::new(id, p.movements.iter().copied()))
                    .collect(),
            }
        })
        .collect();

    Ok(TrafficNetwork {
        rows,
        cols,
        intersections,
        links,
        adjacency,
        boundary,
    })
}

impl TrafficNetwork {
    pub fn num_intersections(&self) -> usize {
        self.intersections.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.intersections.len() + self.boundary.len()
    }

    pub fn num_lanes(&self) -> usize {
        self.links.len() * TURNS
    }

    pub fn num_phases(&self) -> usize {
        self.intersections
            .first()
            .map(|s| s.num_phases())
            .unwrap_or(0)
    }

    pub fn is_boundary(&self, node: NodeId) -> bool {
        node >= self.intersections.len() && node < self.num_nodes()
    }

    pub fn boundary_node(&self, node: NodeId) -> Option<&BoundaryNode> {
        node.checked_sub(self.intersections.len())
            .and_then(|k| self.boundary.get(k))
    }

    pub fn intersection(&self, i: usize) -> Result<&IntersectionSpec> {
        self.intersections
            .get(i)
            .ok_or(Error::UnknownIntersection(i))
    }

    /// Number of links between two intersections.
    pub fn internal_link_count(&self) -> usize {
        self.links
            .iter()
            .filter(|l| !self.is_boundary(l.from) && !self.is_boundary(l.to))
            .count()
    }

    /// Turn taken at the downstream intersection of `from` when continuing
    /// onto `to`, if the two links meet at an intersection.
    pub fn turn_between(&self, from: LinkId, to: LinkId) -> Option<Turn> {
        let a = self.links.get(from)?;
        let b = self.links.get(to)?;
        if a.to != b.from || self.is_boundary(a.to) {
            return None;
        }
        let spec = &self.intersections[a.to];
        let approach = Direction::ALL
            .into_iter()
            .find(|d| spec.incoming_links[d.index()] == from)?;
        let exit = Direction::ALL
            .into_iter()
            .find(|d| spec.outgoing_links[d.index()] == to)?;
        Turn::ALL
            .into_iter()
            .find(|&t| approach.opposite().turned(t) == exit)
    }

    /// Stable digest of the serialized network file.
    pub fn digest(&self) -> String {
        let text = self.to_file().to_json();
        hex_digest(text.as_bytes())
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            rows: self.rows,
            cols: self.cols,
            links: self
                .links
                .iter()
                .map(|l| LinkRecord {
                    from: l.from,
                    to: l.to,
                    lanes: l.lanes,
                    length_m: l.length_m,
                    speed_limit_mps: l.speed_limit_mps,
                })
                .collect(),
            phase_table: self
                .intersections
                .first()
                .map(|s| s.phase_table.iter().map(|p| p.movements.clone()).collect())
                .unwrap_or_default(),
        }
    }

    pub fn from_file(file: &NetworkFile) -> Result<TrafficNetwork> {
        let table = phase_table_from_lists(&file.phase_table);
        let mut net = build_grid_network(file.rows, file.cols, &LinkTemplates::default(), &table)?;
        if file.links.len() != net.links.len() {
            return Err(Error::Network(format!(
                "expected {} links for a {}x{} grid, file has {}",
                net.links.len(),
                file.rows,
                file.cols,
                file.links.len()
            )));
        }
        for (link, rec) in net.links.iter_mut().zip(&file.links) {
            if link.from != rec.from || link.to != rec.to {
                return Err(Error::Network(format!(
                    "link {} expected {}->{}, file has {}->{}",
                    link.id, link.from, link.to, rec.from, rec.to
                )));
            }
            link.lanes = rec.lanes;
            link.length_m = rec.length_m;
            link.speed_limit_mps = rec.speed_limit_mps;
        }
        Ok(net)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn neighbors_of(net: &TrafficNetwork, i: usize) -> Result<NeighborSlots> {
    net.adjacency
        .get(i)
        .map(|slots| NeighborSlots { slots: *slots })
        .ok_or(Error::UnknownIntersection(i))
}

pub fn movements_of_phase(spec: &IntersectionSpec, phase_id: usize) -> Result<Vec<Movement>> {
    spec.movements_of_phase(phase_id)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

pub fn validate_network(net: &TrafficNetwork) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut violation = |entity: String, rule: &str| {
        out.push(Violation {
            entity,
            rule: rule.to_string(),
        })
    };
    let n = net.intersections.len();

    for l in &net.links {
        let entity = format!("link {}", l.id);
        if !(l.length_m > 0.0) {
            violation(entity.clone(), "length must be positive");
        }
        if !(l.speed_limit_mps > 0.0) {
            violation(entity.clone(), "speed limit must be positive");
        }
        if l.lanes < 1 {
            violation(entity.clone(), "at least one lane required");
        }
        if l.from >= net.num_nodes() || l.to >= net.num_nodes() {
            violation(entity, "endpoint does not resolve");
        }
    }

    if net.adjacency.len() != n {
        violation("adjacency".into(), "one slot list per intersection");
    }
    for (i, slots) in net.adjacency.iter().enumerate() {
        for d in Direction::ALL {
            if let Some(j) = slots[d.index()] {
                let back = net
                    .adjacency
                    .get(j)
                    .and_then(|s| s[d.opposite().index()]);
                if back != Some(i) {
                    violation(
                        format!("E_{i}{j}"),
                        "adjacency is not symmetric (E_ij != E_ji)",
                    );
                }
            }
        }
    }

    // connectivity over the adjacency graph
    if n > 0 && net.adjacency.len() == n {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in net.adjacency[i].iter().flatten() {
                if *j < n && !seen[*j] {
                    seen[*j] = true;
                    stack.push(*j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            violation("network".into(), "intersection graph is not connected");
        }
    }

    for spec in &net.intersections {
        let entity = format!("intersection {}", spec.id);
        if spec.incoming_lanes.is_empty() || spec.outgoing_lanes.is_empty() {
            violation(entity.clone(), "lane lists must be non-empty");
        }
        let lane_ok = |lane: LaneId| lane.link() < net.links.len();
        let mut pairs = BTreeSet::new();
        for m in &spec.movements {
            if !lane_ok(m.in_lane) || !lane_ok(m.out_lane) {
                violation(format!("{entity} movement {}", m.id), "lane does not resolve");
                continue;
            }
            if net.links[m.in_lane.link()].to != spec.id
                || net.links[m.out_lane.link()].from != spec.id
            {
                violation(
                    format!("{entity} movement {}", m.id),
                    "lanes do not belong to this intersection",
                );
            }
            if !pairs.insert((m.in_lane, m.out_lane)) {
                violation(format!("{entity} movement {}", m.id), "duplicate (in, out) lane pair");
            }
        }
        for (k, phase) in spec.phase_table.iter().enumerate() {
            let pe = format!("{entity} phase {k}");
            if phase.id != k {
                violation(pe.clone(), "phase ids must be 0..|A|-1");
            }
            if phase.movements.is_empty() {
                violation(pe.clone(), "phase has no movements");
            }
            if phase.movements.iter().any(|&m| m >= spec.movements.len()) {
                violation(pe.clone(), "phase references unknown movement");
                continue;
            }
            for (x, &a) in phase.movements.iter().enumerate() {
                for &b in &phase.movements[x + 1..] {
                    if movements_conflict(a, b) {
                        violation(
                            pe.clone(),
                            &format!("conflicting movements {a} and {b}"),
                        );
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub from: NodeId,
    pub to: NodeId,
    pub lanes: u32,
    pub length_m: f64,
    pub speed_limit_mps: f64,
}

/// On-disk network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub rows: usize,
    pub cols: usize,
    pub links: Vec<LinkRecord>,
    pub phase_table: Vec<Vec<usize>>,
}

impl NetworkFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("network file serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<NetworkFile> {
        serde_json::from_str(text).map_err(Error::from_json)
    }
}

pub fn load_network(path: &std::path::Path) -> Result<TrafficNetwork> {
    let text = std::fs::read_to_string(path)?;
    TrafficNetwork::from_file(&NetworkFile::from_json(&text)?)
}

pub fn save_network(net: &TrafficNetwork, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, net.to_file().to_json())?;
    Ok(())
}
