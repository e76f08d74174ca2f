//! Static description of a signalized road network.
//!
//! Intersections are nodes, links are one-directional road segments between
//! two intersections and every link is split into lanes. Lane index 0 of a
//! link is the innermost lane. Movements are lane-to-lane permissions across
//! an intersection and phases group movements that may run together.

mod grid;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{build_grid, EcMap, GridSpec};

pub type NodeId = usize;
pub type LinkId = usize;
pub type LaneId = usize;
pub type PhaseId = usize;

/// Vehicles per lane for a link of the given length when no capacity is configured.
pub const METERS_PER_VEHICLE: f64 = 7.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("grid dimensions must be at least 2x2, got {rows}x{cols}")]
    InvalidDimensions { rows: usize, cols: usize },
    #[error("link {link}: {reason}")]
    InvalidLink { link: LinkId, reason: String },
    #[error("link {link} references unknown intersection {node}")]
    UnknownNode { link: LinkId, node: NodeId },
    #[error("link {link} is a self loop at intersection {node}")]
    SelfLoop { link: LinkId, node: NodeId },
    #[error("intersection {node} has two {dir} links heading {heading}")]
    DuplicateHeading {
        node: NodeId,
        dir: &'static str,
        heading: Heading,
    },
    #[error("intersection {node}: incoming link {link} has no permissible movement")]
    DeadEnd { node: NodeId, link: LinkId },
    #[error("intersection {node} has {count} phases, at least 2 are required")]
    TooFewPhases { node: NodeId, count: usize },
}

/// Compass heading of a link, i.e. the direction of travel along it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        match self {
            Heading::N => 0,
            Heading::E => 1,
            Heading::S => 2,
            Heading::W => 3,
        }
    }

    pub fn opposite(self) -> Heading {
        Heading::ALL[(self.index() + 2) % 4]
    }

    /// Heading after a right turn.
    pub fn right(self) -> Heading {
        Heading::ALL[(self.index() + 1) % 4]
    }

    /// Heading after a left turn.
    pub fn left(self) -> Heading {
        Heading::ALL[(self.index() + 3) % 4]
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Heading::N => "N",
            Heading::E => "E",
            Heading::S => "S",
            Heading::W => "W",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    /// Turn needed to go from a link heading `from` onto a link heading `to`.
    /// U-turns are not permissible.
    pub fn between(from: Heading, to: Heading) -> Option<Turn> {
        if to == from {
            Some(Turn::Straight)
        } else if to == from.right() {
            Some(Turn::Right)
        } else if to == from.left() {
            Some(Turn::Left)
        } else {
            None
        }
    }

    fn is_left(self) -> bool {
        self == Turn::Left
    }
}

/// One directional road segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: LinkId,
    /// Tail intersection.
    pub from: NodeId,
    /// Head intersection.
    pub to: NodeId,
    pub heading: Heading,
    pub length_m: f64,
    pub lane_count: u32,
    /// Vehicles per lane, `x_max`.
    pub lane_capacity: u32,
    /// Extra vehicles the link can hold while an emergency lane is open.
    pub emergency_capacity: f64,
    pub free_flow_speed: f64,
    pub emv_max_speed: f64,
    pub first_lane: LaneId,
}

impl LinkSpec {
    /// `k`: lane count times lane capacity.
    pub fn normal_capacity(&self) -> u32 {
        self.lane_count * self.lane_capacity
    }

    pub fn lanes(&self) -> Range<LaneId> {
        self.first_lane..self.first_lane + self.lane_count as usize
    }

    pub fn free_flow_time(&self) -> f64 {
        self.length_m / self.free_flow_speed
    }

    /// Turns a vehicle in lane `index` may take, given which turns exist at
    /// the head intersection.
    ///
    /// The innermost lane turns left, the others go straight or right. When
    /// the approach has no left turn (or only a left turn) every lane serves
    /// whatever remains.
    pub(crate) fn lane_turns(&self, index: u32, available: &[Turn]) -> Vec<Turn> {
        let through: Vec<Turn> = available.iter().copied().filter(|t| !t.is_left()).collect();
        let has_left = available.contains(&Turn::Left);
        if self.lane_count == 1 || through.is_empty() || !has_left {
            return available.to_vec();
        }
        if index == 0 {
            vec![Turn::Left]
        } else {
            through
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub link: LinkId,
    /// 0 is the innermost lane.
    pub index: u32,
}

/// Traffic crossing an intersection from an incoming lane to an outgoing lane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Movement {
    pub from_lane: LaneId,
    pub to_lane: LaneId,
    pub from_link: LinkId,
    pub to_link: LinkId,
    pub turn: Turn,
}

/// A signal phase: the movements allowed to run together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub id: PhaseId,
    /// Index into [`STANDARD_PHASES`] this phase was derived from.
    pub standard: usize,
    /// Indices into the owning intersection's movement list.
    pub movements: Vec<usize>,
}

/// Movement class of a standard phase entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TurnClass {
    /// Straight and right turns.
    Through,
    Left,
}

/// The eight standard phases of a four-arm intersection. Each entry lists the
/// approaches (the side vehicles arrive from) and which movement class is green.
pub const STANDARD_PHASES: [&[(Heading, TurnClass)]; 8] = [
    &[(Heading::N, TurnClass::Through), (Heading::S, TurnClass::Through)],
    &[(Heading::E, TurnClass::Through), (Heading::W, TurnClass::Through)],
    &[(Heading::N, TurnClass::Left), (Heading::S, TurnClass::Left)],
    &[(Heading::E, TurnClass::Left), (Heading::W, TurnClass::Left)],
    &[(Heading::N, TurnClass::Through), (Heading::N, TurnClass::Left)],
    &[(Heading::E, TurnClass::Through), (Heading::E, TurnClass::Left)],
    &[(Heading::S, TurnClass::Through), (Heading::S, TurnClass::Left)],
    &[(Heading::W, TurnClass::Through), (Heading::W, TurnClass::Left)],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSpec {
    pub id: NodeId,
    /// Incoming links ordered by approach (N, E, S, W).
    pub incoming_links: Vec<LinkId>,
    /// Outgoing links ordered by heading (N, E, S, W).
    pub outgoing_links: Vec<LinkId>,
    pub incoming_lanes: Vec<LaneId>,
    pub outgoing_lanes: Vec<LaneId>,
    pub movements: Vec<Movement>,
    pub phases: Vec<Phase>,
    /// Intersections sharing a link with this one, ascending.
    pub neighbors: Vec<NodeId>,
    /// Row and column for grid networks.
    pub grid_pos: Option<(usize, usize)>,
}

impl IntersectionSpec {
    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    /// Lowest phase id that lets traffic from `from_link` continue onto `to_link`.
    pub fn phase_for_link_movement(&self, from_link: LinkId, to_link: LinkId) -> Option<PhaseId> {
        self.phases.iter().find_map(|p| {
            p.movements
                .iter()
                .any(|&m| {
                    let mv = &self.movements[m];
                    mv.from_link == from_link && mv.to_link == to_link
                })
                .then_some(p.id)
        })
    }

    pub fn phase_permits_link_movement(&self, phase: PhaseId, from_link: LinkId, to_link: LinkId) -> bool {
        self.phases[phase].movements.iter().any(|&m| {
            let mv = &self.movements[m];
            mv.from_link == from_link && mv.to_link == to_link
        })
    }
}

/// Input for building a [`Network`] from an explicit link list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkInput {
    pub from: NodeId,
    pub to: NodeId,
    pub heading: Heading,
    pub length_m: f64,
    pub lanes: u32,
    pub lane_capacity: Option<u32>,
    #[serde(default)]
    pub ec_coefficient: f64,
    pub free_flow_speed: f64,
    pub emv_max_speed: f64,
}

/// Immutable traffic network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub intersections: Vec<IntersectionSpec>,
    pub links: Vec<LinkSpec>,
    pub lanes: Vec<Lane>,
    /// For every lane, the movements leaving it at its head intersection
    /// (indices into that intersection's movement list).
    lane_movements: Vec<Vec<usize>>,
    link_index: BTreeMap<(NodeId, NodeId), LinkId>,
}

impl Network {
    /// Builds and validates a network with `node_count` intersections.
    pub fn from_links(
        node_count: usize,
        inputs: &[LinkInput],
        grid_positions: Option<&[(usize, usize)]>,
    ) -> Result<Network, NetworkError> {
        let mut links = Vec::with_capacity(inputs.len());
        let mut lanes = Vec::new();
        let mut link_index = BTreeMap::new();
        for (id, inp) in inputs.iter().enumerate() {
            for node in [inp.from, inp.to] {
                if node >= node_count {
                    return Err(NetworkError::UnknownNode { link: id, node });
                }
            }
            if inp.from == inp.to {
                return Err(NetworkError::SelfLoop { link: id, node: inp.from });
            }
            let invalid = |reason: &str| NetworkError::InvalidLink {
                link: id,
                reason: reason.to_string(),
            };
            if !(inp.length_m > 0.0) || !inp.length_m.is_finite() {
                return Err(invalid("length must be positive"));
            }
            if inp.lanes == 0 {
                return Err(invalid("lane count must be at least 1"));
            }
            let lane_capacity = inp
                .lane_capacity
                .unwrap_or_else(|| (inp.length_m / METERS_PER_VEHICLE).floor() as u32);
            if lane_capacity == 0 {
                return Err(invalid("lane capacity must be at least 1"));
            }
            if !(inp.ec_coefficient >= 0.0) {
                return Err(invalid("emergency capacity coefficient must be non-negative"));
            }
            if !(inp.free_flow_speed > 0.0) {
                return Err(invalid("free-flow speed must be positive"));
            }
            if !(inp.emv_max_speed >= inp.free_flow_speed) {
                return Err(invalid("EMV max speed must be at least the free-flow speed"));
            }
            if link_index.insert((inp.from, inp.to), id).is_some() {
                return Err(invalid("parallel link between the same intersections"));
            }
            let first_lane = lanes.len();
            for index in 0..inp.lanes {
                lanes.push(Lane {
                    id: lanes.len(),
                    link: id,
                    index,
                });
            }
            let normal = (inp.lanes * lane_capacity) as f64;
            links.push(LinkSpec {
                id,
                from: inp.from,
                to: inp.to,
                heading: inp.heading,
                length_m: inp.length_m,
                lane_count: inp.lanes,
                lane_capacity,
                emergency_capacity: inp.ec_coefficient * normal,
                free_flow_speed: inp.free_flow_speed,
                emv_max_speed: inp.emv_max_speed,
                first_lane,
            });
        }

        let mut intersections = Vec::with_capacity(node_count);
        let mut lane_movements = vec![Vec::new(); lanes.len()];
        for node in 0..node_count {
            let spec = build_intersection(node, &links, grid_positions.map(|g| g[node]))?;
            for (mi, mv) in spec.movements.iter().enumerate() {
                lane_movements[mv.from_lane].push(mi);
            }
            intersections.push(spec);
        }

        Ok(Network {
            intersections,
            links,
            lanes,
            lane_movements,
            link_index,
        })
    }

    pub fn node_count(&self) -> usize {
        self.intersections.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn lane_count(&self) -> usize {
        self.lanes.len()
    }

    pub fn link(&self, id: LinkId) -> &LinkSpec {
        &self.links[id]
    }

    pub fn lane_link(&self, lane: LaneId) -> &LinkSpec {
        &self.links[self.lanes[lane].link]
    }

    pub fn intersection(&self, id: NodeId) -> &IntersectionSpec {
        &self.intersections[id]
    }

    pub fn link_between(&self, from: NodeId, to: NodeId) -> Option<LinkId> {
        self.link_index.get(&(from, to)).copied()
    }

    /// Movements leaving `lane` at its head intersection.
    pub fn lane_movements(&self, lane: LaneId) -> impl Iterator<Item = &Movement> + '_ {
        let node = self.links[self.lanes[lane].link].to;
        self.lane_movements[lane]
            .iter()
            .map(move |&m| &self.intersections[node].movements[m])
    }

    /// Whether any lane of `from_link` may continue onto `to_link`.
    pub fn link_movement_exists(&self, from_link: LinkId, to_link: LinkId) -> bool {
        let link = &self.links[from_link];
        link.lanes()
            .any(|l| self.lane_movements(l).any(|m| m.to_link == to_link))
    }

    /// Lanes of `link` a vehicle may use if it continues onto `next` (or any
    /// lane when the link ends its trip).
    pub fn lanes_for(&self, link: LinkId, next: Option<LinkId>) -> impl Iterator<Item = LaneId> + '_ {
        self.links[link]
            .lanes()
            .filter(move |&l| match next {
                None => true,
                Some(n) => self.lane_movements(l).any(|m| m.to_link == n),
            })
    }

    pub fn out_neighbors(&self, node: NodeId) -> impl Iterator<Item = (LinkId, NodeId)> + '_ {
        self.intersections[node]
            .outgoing_links
            .iter()
            .map(move |&l| (l, self.links[l].to))
    }

    /// Hop distances over the undirected intersection graph, `None` when unreachable.
    pub fn hop_distances(&self, from: NodeId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count()];
        let mut queue = VecDeque::new();
        dist[from] = Some(0);
        queue.push_back(from);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &v in &self.intersections[u].neighbors {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Minimum number of links connecting `i` and `j`, ignoring direction.
    pub fn graph_distance(&self, i: NodeId, j: NodeId) -> Option<usize> {
        self.hop_distances(i)[j]
    }

    pub fn distance_matrix(&self) -> Vec<Vec<Option<usize>>> {
        (0..self.node_count()).map(|i| self.hop_distances(i)).collect()
    }

    /// Whether `to` can be reached from `from` following link directions.
    pub fn reachable(&self, from: NodeId, to: NodeId) -> bool {
        let mut seen = vec![false; self.node_count()];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(u) = stack.pop() {
            if u == to {
                return true;
            }
            for (_, v) in self.out_neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        false
    }

    /// Intersections with fewer than four neighbors.
    pub fn border_nodes(&self) -> Vec<NodeId> {
        self.intersections
            .iter()
            .filter(|i| i.neighbors.len() < 4)
            .map(|i| i.id)
            .collect()
    }

    pub fn is_grid(&self) -> bool {
        self.intersections.iter().all(|i| i.grid_pos.is_some())
    }
}

fn build_intersection(
    node: NodeId,
    links: &[LinkSpec],
    grid_pos: Option<(usize, usize)>,
) -> Result<IntersectionSpec, NetworkError> {
    let mut incoming: Vec<&LinkSpec> = links.iter().filter(|l| l.to == node).collect();
    let mut outgoing: Vec<&LinkSpec> = links.iter().filter(|l| l.from == node).collect();
    incoming.sort_by_key(|l| l.heading.opposite().index());
    outgoing.sort_by_key(|l| l.heading.index());
    for w in incoming.windows(2) {
        if w[0].heading == w[1].heading {
            return Err(NetworkError::DuplicateHeading {
                node,
                dir: "incoming",
                heading: w[0].heading,
            });
        }
    }
    for w in outgoing.windows(2) {
        if w[0].heading == w[1].heading {
            return Err(NetworkError::DuplicateHeading {
                node,
                dir: "outgoing",
                heading: w[0].heading,
            });
        }
    }

    let mut movements = Vec::new();
    for inc in &incoming {
        let targets: Vec<(&LinkSpec, Turn)> = outgoing
            .iter()
            .filter(|o| o.to != inc.from)
            .filter_map(|o| Turn::between(inc.heading, o.heading).map(|t| (*o, t)))
            .collect();
        if targets.is_empty() {
            return Err(NetworkError::DeadEnd { node, link: inc.id });
        }
        let available: Vec<Turn> = {
            let mut t: Vec<Turn> = targets.iter().map(|(_, t)| *t).collect();
            t.sort();
            t
        };
        for index in 0..inc.lane_count {
            let turns = inc.lane_turns(index, &available);
            for (out, turn) in &targets {
                if !turns.contains(turn) {
                    continue;
                }
                for to_lane in out.lanes() {
                    movements.push(Movement {
                        from_lane: inc.first_lane + index as usize,
                        to_lane,
                        from_link: inc.id,
                        to_link: out.id,
                        turn: *turn,
                    });
                }
            }
        }
    }

    let mut phases: Vec<Phase> = Vec::new();
    if !movements.is_empty() {
        for (standard, entries) in STANDARD_PHASES.iter().enumerate() {
            let members: Vec<usize> = movements
                .iter()
                .enumerate()
                .filter(|(_, mv)| {
                    let approach = links[mv.from_link].heading.opposite();
                    let class = if mv.turn.is_left() {
                        TurnClass::Left
                    } else {
                        TurnClass::Through
                    };
                    entries.contains(&(approach, class))
                })
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() || phases.iter().any(|p| p.movements == members) {
                continue;
            }
            phases.push(Phase {
                id: phases.len(),
                standard,
                movements: members,
            });
        }
        if phases.len() < 2 {
            return Err(NetworkError::TooFewPhases {
                node,
                count: phases.len(),
            });
        }
    }

    let mut neighbors: Vec<NodeId> = incoming
        .iter()
        .map(|l| l.from)
        .chain(outgoing.iter().map(|l| l.to))
        .collect();
    neighbors.sort_unstable();
    neighbors.dedup();

    Ok(IntersectionSpec {
        id: node,
        incoming_links: incoming.iter().map(|l| l.id).collect(),
        outgoing_links: outgoing.iter().map(|l| l.id).collect(),
        incoming_lanes: incoming.iter().flat_map(|l| l.lanes()).collect(),
        outgoing_lanes: outgoing.iter().flat_map(|l| l.lanes()).collect(),
        movements,
        phases,
        neighbors,
        grid_pos,
    })
}
