//! Mesoscopic point-queue simulator.
//!
//! Time advances in 1 s sub-steps; one decision step is five sub-steps with
//! the signal phases held fixed. A vehicle entering a link becomes
//! dischargeable after the free-flow traversal time and then waits in its
//! lane's FIFO queue for a green movement and saturation credit.

use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::cmp::Reverse;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{LaneId, LinkId, Network, NodeId, PhaseId};
use crate::scenario::{ArrivalProcess, EmvDispatch, FlowSpec, Scenario, SimConfig};

pub const SUBSTEP_S: f64 = 1.0;
pub const SUBSTEPS_PER_STEP: u32 = 5;
pub const STEP_S: f64 = SUBSTEP_S * SUBSTEPS_PER_STEP as f64;

const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("expected {expected} phase actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("intersection {node}: phase {phase} out of range (has {count})")]
    InvalidPhase {
        node: NodeId,
        phase: PhaseId,
        count: usize,
    },
}

/// EMV travel speed on a link and whether an emergency lane forms.
///
/// The EMV runs at `s_f` iff `n <= k + c_ec - k / l`; otherwise it is held to
/// the link's average speed `s_i`. The comparison is done as
/// `n*l <= k*l + c_ec*l - k` to keep integer inputs exact.
pub fn emv_speed(n: u32, k: u32, l: u32, c_ec: f64, s_i: f64, s_f: f64) -> (f64, bool) {
    let lhs = n as f64 * l as f64;
    let rhs = (k as f64 * l as f64 - k as f64) + c_ec * l as f64;
    if lhs <= rhs {
        (s_f, true)
    } else {
        (s_i, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleClass {
    Emv,
    Regular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vehicle {
    pub id: u32,
    pub class: VehicleClass,
    pub origin: NodeId,
    pub destination: NodeId,
    pub spawn_s: f64,
    pub completion_s: Option<f64>,
    pub lane: Option<LaneId>,
    route: Arc<[LinkId]>,
    route_idx: usize,
}

impl Vehicle {
    pub fn route(&self) -> &[LinkId] {
        &self.route
    }

    pub fn current_link(&self) -> LinkId {
        self.route[self.route_idx]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Queued {
    vid: u32,
    ready_at: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmvStatus {
    Pending,
    Active,
    Arrived,
}

/// One link of the EMV trip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmvLeg {
    pub link: LinkId,
    pub enter_s: f64,
    pub exit_s: Option<f64>,
    /// Distance covered at the maximum EMV speed.
    pub fast_m: f64,
    /// Distance covered at the link average speed.
    pub slow_m: f64,
}

impl EmvLeg {
    /// Counted as an emergency lane if most of the link was driven at full speed.
    pub fn emergency_lane(&self) -> bool {
        self.fast_m > self.slow_m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmvState {
    pub status: EmvStatus,
    pub origin: NodeId,
    pub destination: NodeId,
    pub dispatch_s: f64,
    pub arrival_s: Option<f64>,
    pub link: Option<LinkId>,
    pub pos_m: f64,
    pub speed: f64,
    pub legs: Vec<EmvLeg>,
}

impl EmvState {
    pub fn is_active(&self) -> bool {
        self.status == EmvStatus::Active
    }
}

/// Chooses where the EMV goes when it reaches an intersection.
pub trait Navigator {
    fn next_hop(&self, node: NodeId) -> Option<NodeId>;
}

/// Navigator that always defers to the simulator's fallback rule.
pub struct NoNavigator;

impl Navigator for NoNavigator {
    fn next_hop(&self, _node: NodeId) -> Option<NodeId> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Spawn,
    EnterLink,
    Complete,
    EmvDispatch,
    EmvEnterLink,
    EmvArrive,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Spawn => "spawn",
            EventKind::EnterLink => "enter_link",
            EventKind::Complete => "complete",
            EventKind::EmvDispatch => "emv_dispatch",
            EventKind::EmvEnterLink => "emv_enter_link",
            EventKind::EmvArrive => "emv_arrive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_s: f64,
    pub kind: EventKind,
    pub vehicle: u32,
    pub lane: Option<LaneId>,
}

/// Vehicle id used for the EMV in events.
pub const EMV_ID: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// EMV arrival minus dispatch; absent until it arrives.
    pub t_emv: Option<f64>,
    /// Mean completion minus spawn over completed trips.
    pub t_avg: Option<f64>,
    pub spawned: u64,
    pub completed: u64,
    pub in_network: u64,
    /// Arrivals still waiting for room on their entry link.
    pub deferred: u64,
    pub emergency_lanes: usize,
    pub emv_links: usize,
    /// EMV time so far when it has not arrived, for censored reporting.
    pub emv_elapsed: Option<f64>,
}

impl Metrics {
    /// `t_emv`, or the time elapsed since dispatch when the EMV is still travelling.
    pub fn t_emv_or_censored(&self) -> Option<f64> {
        self.t_emv.or(self.emv_elapsed)
    }
}

#[derive(Clone, Debug)]
struct Source {
    od: Option<(NodeId, NodeId)>,
    /// Arrival rate in vehicles per second.
    rate: f64,
    start_s: f64,
    end_s: f64,
    lanes: u32,
    acc: f64,
    pending: VecDeque<(NodeId, NodeId)>,
}

#[derive(Clone, Debug)]
pub struct Simulator {
    net: Arc<Network>,
    cfg: SimConfig,
    clock: u64,
    lanes: Vec<VecDeque<Queued>>,
    credit: Vec<f64>,
    phases: Vec<PhaseId>,
    /// Per node, per phase: membership of each movement.
    phase_masks: Vec<Vec<Vec<bool>>>,
    vehicles: Vec<Vehicle>,
    sources: Vec<Source>,
    border: Vec<NodeId>,
    routes: HashMap<(NodeId, NodeId), Arc<[LinkId]>>,
    emv: EmvState,
    emv_dist: Vec<f64>,
    rng: ChaCha8Rng,
    spawned: u64,
    completed: u64,
    trip_time_sum: f64,
    events: Option<Vec<Event>>,
}

impl Simulator {
    pub fn new(scenario: &Scenario, seed: u64) -> Simulator {
        Simulator::with_parts(
            Arc::new(scenario.network.clone()),
            scenario.sim.clone(),
            &scenario.flows,
            &scenario.emv,
            seed,
        )
    }

    pub fn with_parts(
        net: Arc<Network>,
        cfg: SimConfig,
        flows: &[FlowSpec],
        emv: &EmvDispatch,
        seed: u64,
    ) -> Simulator {
        let mut sources = Vec::new();
        for f in flows {
            if f.random_od {
                sources.push(Source {
                    od: None,
                    rate: f.rate / 3600.0,
                    start_s: f.start_s,
                    end_s: f.end_s,
                    lanes: f.lanes,
                    acc: 0.0,
                    pending: VecDeque::new(),
                });
            } else {
                for &(o, d) in &f.od {
                    sources.push(Source {
                        od: Some((o, d)),
                        rate: f.rate / 3600.0,
                        start_s: f.start_s,
                        end_s: f.end_s,
                        lanes: 0,
                        acc: 0.0,
                        pending: VecDeque::new(),
                    });
                }
            }
        }
        let phase_masks = net
            .intersections
            .iter()
            .map(|i| {
                i.phases
                    .iter()
                    .map(|p| {
                        let mut m = vec![false; i.movements.len()];
                        for &x in &p.movements {
                            m[x] = true;
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        let emv_dist = shortest_lengths_to(&net, emv.destination);
        let mut sim = Simulator {
            border: net.border_nodes(),
            lanes: vec![VecDeque::new(); net.lane_count()],
            credit: vec![0.0; net.lane_count()],
            phases: vec![0; net.node_count()],
            phase_masks,
            vehicles: Vec::new(),
            sources,
            routes: HashMap::new(),
            emv: EmvState {
                status: EmvStatus::Pending,
                origin: emv.origin,
                destination: emv.destination,
                dispatch_s: emv.dispatch_s,
                arrival_s: None,
                link: None,
                pos_m: 0.0,
                speed: 0.0,
                legs: Vec::new(),
            },
            emv_dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spawned: 0,
            completed: 0,
            trip_time_sum: 0.0,
            events: None,
            clock: 0,
            cfg,
            net,
        };
        for s in 0..sim.sources.len() {
            if let Some((o, d)) = sim.sources[s].od {
                let route = sim.route(o, d);
                let first = sim.net.link(route[0]).lane_count;
                sim.sources[s].lanes = first;
            }
        }
        sim
    }

    /// Drops the EMV trip; it is never dispatched.
    pub fn without_emv(mut self) -> Simulator {
        self.emv.dispatch_s = f64::INFINITY;
        self
    }

    pub fn enable_events(&mut self) {
        self.events.get_or_insert_with(Vec::new);
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        self.events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_arc(&self) -> Arc<Network> {
        self.net.clone()
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn clock(&self) -> f64 {
        self.clock as f64 * SUBSTEP_S
    }

    pub fn phases(&self) -> &[PhaseId] {
        &self.phases
    }

    pub fn emv(&self) -> &EmvState {
        &self.emv
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn spawned(&self) -> u64 {
        self.spawned
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    /// Vehicles currently on links, counted from the lane queues.
    pub fn in_network(&self) -> u64 {
        self.lanes.iter().map(|q| q.len() as u64).sum()
    }

    pub fn deferred(&self) -> u64 {
        self.sources.iter().map(|s| s.pending.len() as u64).sum()
    }

    /// `x(l)` for every lane. The EMV counts on the innermost lane of its link.
    pub fn lane_counts(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.lanes.iter().map(|q| q.len() as u32).collect();
        if let (EmvStatus::Active, Some(link)) = (self.emv.status, self.emv.link) {
            c[self.net.link(link).first_lane] += 1;
        }
        c
    }

    /// Regular vehicles on a link.
    pub fn link_vehicle_count(&self, link: LinkId) -> u32 {
        self.net.link(link).lanes().map(|l| self.lanes[l].len() as u32).sum()
    }

    /// Mean speed of regular vehicles on the link: queued vehicles stand
    /// still, the others run at free-flow speed. Empty links report free flow.
    pub fn link_average_speed(&self, link: LinkId) -> f64 {
        let spec = self.net.link(link);
        let now = self.clock();
        let mut total = 0usize;
        let mut moving = 0usize;
        for l in spec.lanes() {
            let q = &self.lanes[l];
            total += q.len();
            moving += q.len() - q.partition_point(|v| v.ready_at <= now + EPS);
        }
        if total == 0 {
            spec.free_flow_speed
        } else {
            spec.free_flow_speed * moving as f64 / total as f64
        }
    }

    /// EMV speed on `link` under the current state.
    pub fn link_emv_speed(&self, link: LinkId) -> (f64, bool) {
        let spec = self.net.link(link);
        emv_speed(
            self.link_vehicle_count(link),
            spec.normal_capacity(),
            spec.lane_count,
            spec.emergency_capacity,
            self.link_average_speed(link),
            spec.emv_max_speed,
        )
    }

    /// Current EMV travel-time estimate for a link, clamped for stalled queues.
    pub fn intra_link_travel_time(&self, link: LinkId) -> f64 {
        let (speed, _) = self.link_emv_speed(link);
        let cap = self.cfg.max_link_time_s;
        if speed <= 0.0 {
            cap
        } else {
            (self.net.link(link).length_m / speed).min(cap)
        }
    }

    /// Travel-time field over all links.
    pub fn travel_times(&self) -> Vec<f64> {
        (0..self.net.link_count())
            .map(|l| self.intra_link_travel_time(l))
            .collect()
    }

    pub fn is_done(&self) -> bool {
        let t = self.clock();
        t + EPS >= self.cfg.episode_cap_s()
            || (t + EPS >= self.cfg.horizon_s && self.emv.status != EmvStatus::Active)
    }

    pub fn metrics(&self) -> Metrics {
        let t_emv = self.emv.arrival_s.map(|a| a - self.emv.dispatch_s);
        let emv_elapsed = match self.emv.status {
            EmvStatus::Active => Some(self.clock() - self.emv.dispatch_s),
            _ => None,
        };
        let done_legs = self.emv.legs.iter().filter(|l| l.exit_s.is_some() || self.emv.status == EmvStatus::Arrived);
        let emergency_lanes = done_legs.filter(|l| l.emergency_lane()).count();
        Metrics {
            t_emv,
            t_avg: (self.completed > 0).then(|| self.trip_time_sum / self.completed as f64),
            spawned: self.spawned,
            completed: self.completed,
            in_network: self.in_network(),
            deferred: self.deferred(),
            emergency_lanes,
            emv_links: self.emv.legs.len(),
            emv_elapsed,
        }
    }

    /// Validates and installs one phase per intersection.
    pub fn set_phases(&mut self, actions: &[PhaseId]) -> Result<(), SimError> {
        if actions.len() != self.net.node_count() {
            return Err(SimError::ActionCount {
                expected: self.net.node_count(),
                got: actions.len(),
            });
        }
        for (node, &phase) in actions.iter().enumerate() {
            let count = self.net.intersection(node).phase_count();
            if phase >= count {
                return Err(SimError::InvalidPhase { node, phase, count });
            }
        }
        self.phases.copy_from_slice(actions);
        Ok(())
    }

    /// One decision step: install phases and run five sub-steps.
    pub fn step(&mut self, actions: &[PhaseId], nav: &dyn Navigator) -> Result<(), SimError> {
        self.set_phases(actions)?;
        for _ in 0..SUBSTEPS_PER_STEP {
            self.substep(nav);
        }
        Ok(())
    }

    fn phase_permits(&self, node: NodeId, from_lane: LaneId, to_link: LinkId) -> bool {
        let spec = self.net.intersection(node);
        let mask = &self.phase_masks[node][self.phases[node]];
        spec.movements
            .iter()
            .enumerate()
            .any(|(i, m)| mask[i] && m.from_lane == from_lane && m.to_link == to_link)
    }

    fn lane_has_green(&self, node: NodeId, lane: LaneId) -> bool {
        let spec = self.net.intersection(node);
        let mask = &self.phase_masks[node][self.phases[node]];
        spec.movements
            .iter()
            .enumerate()
            .any(|(i, m)| mask[i] && m.from_lane == lane)
    }

    /// Least-occupied lane of `link` with room that serves `next`, ties to the
    /// lowest index.
    fn entry_lane(&self, link: LinkId, next: Option<LinkId>) -> Option<LaneId> {
        let cap = self.net.link(link).lane_capacity as usize;
        self.net
            .lanes_for(link, next)
            .filter(|&l| self.lanes[l].len() < cap)
            .min_by_key(|&l| (self.lanes[l].len(), l))
    }

    fn log(&mut self, time_s: f64, kind: EventKind, vehicle: u32, lane: Option<LaneId>) {
        if let Some(ev) = self.events.as_mut() {
            ev.push(Event {
                time_s,
                kind,
                vehicle,
                lane,
            });
        }
    }

    /// Advance one second with the installed phases.
    pub fn substep(&mut self, nav: &dyn Navigator) {
        let now = self.clock();
        let end = now + SUBSTEP_S;
        self.discharge(now, end);
        self.move_emv(now, nav);
        self.spawn(now, end);
        self.clock += 1;
    }

    fn discharge(&mut self, now: f64, end: f64) {
        let rate = self.cfg.saturation_rate * SUBSTEP_S;
        let cap = rate.max(1.0);
        for node in 0..self.net.node_count() {
            let incoming = self.net.intersection(node).incoming_lanes.clone();
            for lane in incoming {
                let green = self.lane_has_green(node, lane);
                if green {
                    self.credit[lane] = (self.credit[lane] + rate).min(cap);
                } else {
                    self.credit[lane] = 0.0;
                }
                loop {
                    let Some(&head) = self.lanes[lane].front() else { break };
                    if head.ready_at > now + EPS {
                        break;
                    }
                    let v = &self.vehicles[head.vid as usize];
                    let last = v.route_idx + 1 == v.route.len();
                    if last {
                        self.lanes[lane].pop_front();
                        let v = &mut self.vehicles[head.vid as usize];
                        v.completion_s = Some(end);
                        v.lane = None;
                        self.trip_time_sum += end - v.spawn_s;
                        self.completed += 1;
                        self.log(end, EventKind::Complete, head.vid, Some(lane));
                        continue;
                    }
                    if !green || self.credit[lane] < 1.0 - EPS {
                        break;
                    }
                    let next = v.route[v.route_idx + 1];
                    let after = v.route.get(v.route_idx + 2).copied();
                    if !self.phase_permits(node, lane, next) {
                        break;
                    }
                    let Some(target) = self.entry_lane(next, after) else { break };
                    self.lanes[lane].pop_front();
                    self.credit[lane] -= 1.0;
                    let ready_at = end + self.net.link(next).free_flow_time();
                    self.lanes[target].push_back(Queued {
                        vid: head.vid,
                        ready_at,
                    });
                    let v = &mut self.vehicles[head.vid as usize];
                    v.route_idx += 1;
                    v.lane = Some(target);
                    self.log(end, EventKind::EnterLink, head.vid, Some(target));
                }
            }
        }
    }

    /// Link the EMV will take after the intersection ahead of it, if it is
    /// travelling and that intersection is not its destination.
    pub fn emv_upcoming_link(&self, nav: &dyn Navigator) -> Option<LinkId> {
        if !self.emv.is_active() {
            return None;
        }
        let link = self.emv.link?;
        let node = self.net.link(link).to;
        if node == self.emv.destination {
            return None;
        }
        self.emv_next_link(node, Some(link), nav)
    }

    /// Out-link the EMV takes at `node`: the navigator's choice when it is a
    /// valid non-reversing move, else the one closest to the destination.
    fn emv_next_link(&self, node: NodeId, came_from: Option<LinkId>, nav: &dyn Navigator) -> Option<LinkId> {
        let allowed = |out: LinkId| match came_from {
            Some(inc) => self.net.link_movement_exists(inc, out),
            None => true,
        };
        if let Some(hop) = nav.next_hop(node) {
            if let Some(out) = self.net.link_between(node, hop) {
                if allowed(out) {
                    return Some(out);
                }
            }
        }
        self.net
            .intersection(node)
            .outgoing_links
            .iter()
            .copied()
            .filter(|&o| allowed(o))
            .filter(|&o| self.emv_dist[self.net.link(o).to].is_finite())
            .min_by(|&a, &b| {
                let da = self.net.link(a).length_m + self.emv_dist[self.net.link(a).to];
                let db = self.net.link(b).length_m + self.emv_dist[self.net.link(b).to];
                da.total_cmp(&db).then(self.net.link(a).to.cmp(&self.net.link(b).to))
            })
    }

    fn emv_enter(&mut self, link: LinkId, t: f64) {
        self.emv.link = Some(link);
        self.emv.pos_m = 0.0;
        self.emv.legs.push(EmvLeg {
            link,
            enter_s: t,
            exit_s: None,
            fast_m: 0.0,
            slow_m: 0.0,
        });
        let lane = self.net.link(link).first_lane;
        self.log(t, EventKind::EmvEnterLink, EMV_ID, Some(lane));
    }

    fn move_emv(&mut self, now: f64, nav: &dyn Navigator) {
        if self.emv.status == EmvStatus::Pending {
            if self.emv.dispatch_s > now + SUBSTEP_S - EPS {
                return;
            }
            let t0 = self.emv.dispatch_s.max(now);
            self.log(t0, EventKind::EmvDispatch, EMV_ID, None);
            match self.emv_next_link(self.emv.origin, None, nav) {
                Some(first) => {
                    self.emv.status = EmvStatus::Active;
                    self.emv_enter(first, t0);
                }
                None => return,
            }
        }
        if self.emv.status != EmvStatus::Active {
            return;
        }
        let start = self.emv.dispatch_s.max(now);
        let mut budget = now + SUBSTEP_S - start;
        let mut hops = 0;
        while budget > EPS {
            let link = self.emv.link.expect("active EMV is on a link");
            let spec = self.net.link(link).clone();
            let remaining = spec.length_m - self.emv.pos_m;
            if remaining > EPS {
                let (speed, formed) = self.link_emv_speed(link);
                self.emv.speed = speed;
                if speed <= 0.0 {
                    break;
                }
                let d = remaining.min(speed * budget);
                self.emv.pos_m += d;
                budget -= d / speed;
                let leg = self.emv.legs.last_mut().unwrap();
                if formed {
                    leg.fast_m += d;
                } else {
                    leg.slow_m += d;
                }
                if self.emv.pos_m < spec.length_m - EPS {
                    break;
                }
                self.emv.pos_m = spec.length_m;
            }
            let t = now + SUBSTEP_S - budget.max(0.0);
            let node = spec.to;
            if node == self.emv.destination {
                self.emv.status = EmvStatus::Arrived;
                self.emv.arrival_s = Some(t);
                self.emv.legs.last_mut().unwrap().exit_s = Some(t);
                self.emv.link = None;
                self.emv.speed = 0.0;
                self.log(t, EventKind::EmvArrive, EMV_ID, None);
                break;
            }
            let Some(next) = self.emv_next_link(node, Some(link), nav) else {
                self.emv.speed = 0.0;
                break;
            };
            let permitted = spec
                .lanes()
                .any(|l| self.phase_permits(node, l, next));
            if !permitted {
                self.emv.speed = 0.0;
                break;
            }
            self.emv.legs.last_mut().unwrap().exit_s = Some(t);
            self.emv_enter(next, t);
            hops += 1;
            if hops > self.net.link_count() {
                break;
            }
        }
    }

    fn route(&mut self, o: NodeId, d: NodeId) -> Arc<[LinkId]> {
        if let Some(r) = self.routes.get(&(o, d)) {
            return r.clone();
        }
        let r: Arc<[LinkId]> = shortest_length_route(&self.net, o, d)
            .expect("scenario validation guarantees reachable flows")
            .into();
        self.routes.insert((o, d), r.clone());
        r
    }

    fn random_od(&mut self) -> Option<(NodeId, NodeId)> {
        if self.border.len() < 2 {
            return None;
        }
        for _ in 0..64 {
            let o = self.border[self.rng.gen_range(0..self.border.len())];
            let d = self.border[self.rng.gen_range(0..self.border.len())];
            if o != d && self.net.reachable(o, d) {
                return Some((o, d));
            }
        }
        None
    }

    fn spawn(&mut self, now: f64, end: f64) {
        for s in 0..self.sources.len() {
            let src = &self.sources[s];
            let active = now + EPS >= src.start_s && now + EPS < src.end_s;
            if active && src.rate > 0.0 {
                let arrivals = match self.cfg.arrivals {
                    ArrivalProcess::Deterministic => {
                        let src = &mut self.sources[s];
                        src.acc += src.rate * src.lanes as f64 * SUBSTEP_S;
                        let n = (src.acc + EPS).floor();
                        src.acc -= n;
                        n as u32
                    }
                    ArrivalProcess::Bernoulli => {
                        let p = (src.rate * SUBSTEP_S).min(1.0);
                        let lanes = src.lanes;
                        (0..lanes).filter(|_| self.rng.gen::<f64>() < p).count() as u32
                    }
                };
                for _ in 0..arrivals {
                    let od = match self.sources[s].od {
                        Some(od) => Some(od),
                        None => self.random_od(),
                    };
                    if let Some(od) = od {
                        self.sources[s].pending.push_back(od);
                    }
                }
            }
            while let Some(&(o, d)) = self.sources[s].pending.front() {
                let route = self.route(o, d);
                let Some(lane) = self.entry_lane(route[0], route.get(1).copied()) else { break };
                self.sources[s].pending.pop_front();
                let id = self.vehicles.len() as u32;
                let ready_at = end + self.net.link(route[0]).free_flow_time();
                self.vehicles.push(Vehicle {
                    id,
                    class: VehicleClass::Regular,
                    origin: o,
                    destination: d,
                    spawn_s: end,
                    completion_s: None,
                    lane: Some(lane),
                    route,
                    route_idx: 0,
                });
                self.lanes[lane].push_back(Queued { vid: id, ready_at });
                self.spawned += 1;
                self.log(end, EventKind::Spawn, id, Some(lane));
            }
        }
    }
}

/// Shortest path by length from `o` to `d` as a link list; ties prefer the
/// lower predecessor id.
pub fn shortest_length_route(net: &Network, o: NodeId, d: NodeId) -> Option<Vec<LinkId>> {
    let dist = shortest_lengths_to(net, d);
    if !dist[o].is_finite() {
        return None;
    }
    let mut route = Vec::new();
    let mut cur = o;
    let mut prev: Option<NodeId> = None;
    while cur != d {
        let best = net
            .out_neighbors(cur)
            .filter(|&(_, v)| Some(v) != prev && dist[v].is_finite())
            .min_by(|&(la, va), &(lb, vb)| {
                let a = net.link(la).length_m + dist[va];
                let b = net.link(lb).length_m + dist[vb];
                a.total_cmp(&b).then(va.cmp(&vb))
            })?;
        route.push(best.0);
        prev = Some(cur);
        cur = best.1;
        if route.len() > net.node_count() {
            return None;
        }
    }
    Some(route)
}

/// Dijkstra on reversed links: length of the shortest path from every node to `d`.
pub fn shortest_lengths_to(net: &Network, d: NodeId) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; net.node_count()];
    let mut rev: BTreeMap<NodeId, Vec<(NodeId, f64)>> = BTreeMap::new();
    for l in &net.links {
        rev.entry(l.to).or_default().push((l.from, l.length_m));
    }
    let mut heap = BinaryHeap::new();
    dist[d] = 0.0;
    heap.push(Reverse((OrdF64(0.0), d)));
    while let Some(Reverse((OrdF64(du), u))) = heap.pop() {
        if du > dist[u] {
            continue;
        }
        for &(v, w) in rev.get(&u).map(|x| x.as_slice()).unwrap_or(&[]) {
            let nd = du + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((OrdF64(nd), v)));
            }
        }
    }
    dist
}

/// Total order wrapper for non-NaN floats in heaps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_grid, EcMap, GridSpec};

    fn scenario(flows: &str, emv_dispatch: f64) -> Scenario {
        let text = format!(
            r#"
[network]
kind = "grid"
rows = 3
cols = 3
link_length_m = 120.0
lanes_per_link = 2
lane_capacity = 10

[sim]
horizon_s = 600
max_episode_s = 900

{flows}

[emv]
origin = 0
destination = 8
dispatch_s = {emv_dispatch}
"#
        );
        Scenario::parse(&text).unwrap()
    }

    #[test]
    fn emv_speed_threshold_examples() {
        assert_eq!(emv_speed(14, 20, 2, 4.0, 6.0, 12.0), (12.0, true));
        assert_eq!(emv_speed(15, 20, 2, 4.0, 6.0, 12.0), (6.0, false));
        assert_eq!(emv_speed(0, 20, 2, 0.0, 6.0, 12.0), (12.0, true));
        assert_eq!(emv_speed(0, 1, 1, 0.0, 6.0, 12.0), (12.0, true));
    }

    #[test]
    fn empty_network_only_advances_clock() {
        let s = scenario("", 500.0);
        let mut sim = Simulator::new(&s, 1);
        let actions = vec![0; 9];
        sim.step(&actions, &NoNavigator).unwrap();
        assert_eq!(sim.clock(), 5.0);
        assert_eq!(sim.in_network(), 0);
        assert_eq!(sim.spawned(), 0);
        assert!(sim.lane_counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn invalid_phase_rejected_without_mutation() {
        let s = scenario("", 500.0);
        let mut sim = Simulator::new(&s, 1);
        let mut actions = vec![1; 9];
        actions[4] = 99;
        let err = sim.step(&actions, &NoNavigator).unwrap_err();
        assert!(matches!(err, SimError::InvalidPhase { node: 4, .. }));
        assert_eq!(sim.clock(), 0.0);
        assert!(sim.phases().iter().all(|&p| p == 0));
        assert!(sim.step(&[0; 3], &NoNavigator).is_err());
    }

    #[test]
    fn deterministic_accumulator_full_rate() {
        // 3600 veh/lane/hr on a 2-lane entry link: two vehicles per second
        let s = scenario(
            "[[flows]]\nod = [[0, 2]]\nrate = 3600\nstart_s = 0\nend_s = 3",
            500.0,
        );
        let mut sim = Simulator::new(&s, 1);
        for _ in 0..3 {
            sim.substep(&NoNavigator);
        }
        assert_eq!(sim.spawned() + sim.deferred(), 6);
    }

    #[test]
    fn zero_rate_spawns_nothing() {
        let s = scenario(
            "[[flows]]\nod = [[0, 2]]\nrate = 0\nstart_s = 0\nend_s = 600",
            500.0,
        );
        let mut sim = Simulator::new(&s, 1);
        for _ in 0..100 {
            sim.substep(&NoNavigator);
        }
        assert_eq!(sim.spawned(), 0);
    }

    #[test]
    fn red_light_vehicle_waits_at_stop_line() {
        // two vehicles 0 -> 1 -> 2, node 1 held on a phase without that movement
        let s = scenario(
            "[[flows]]\nod = [[0, 2]]\nrate = 3600\nstart_s = 0\nend_s = 1",
            500.0,
        );
        let mut sim = Simulator::new(&s, 1);
        let net = sim.network_arc();
        let inc = net.link_between(0, 1).unwrap();
        let out = net.link_between(1, 2).unwrap();
        let red = (0..net.intersection(1).phase_count())
            .find(|&p| !net.intersection(1).phase_permits_link_movement(p, inc, out))
            .unwrap();
        let mut actions = vec![0; 9];
        actions[1] = red;
        for _ in 0..12 {
            sim.step(&actions, &NoNavigator).unwrap();
        }
        assert_eq!(sim.spawned(), 2);
        assert_eq!(sim.link_vehicle_count(inc), 2);
        assert_eq!(sim.completed(), 0);
        assert_eq!(sim.link_average_speed(inc), 0.0);
        // switch to green: both cross within a few seconds
        let green = net.intersection(1).phase_for_link_movement(inc, out).unwrap();
        actions[1] = green;
        for _ in 0..2 {
            sim.step(&actions, &NoNavigator).unwrap();
        }
        assert_eq!(sim.link_vehicle_count(inc), 0);
    }

    #[test]
    fn trip_time_at_least_free_flow() {
        let s = scenario(
            "[[flows]]\nod = [[0, 8], [2, 6]]\nrate = 400\nstart_s = 0\nend_s = 300",
            500.0,
        );
        let mut sim = Simulator::new(&s, 3);
        let mut t = 0;
        while !sim.is_done() {
            let actions: Vec<PhaseId> = (0..9)
                .map(|n| (t / 3 + n) % sim.network().intersection(n).phase_count())
                .collect();
            sim.step(&actions, &NoNavigator).unwrap();
            t += 1;
        }
        let net = sim.network_arc();
        let mut done = 0;
        for v in sim.vehicles() {
            if let Some(c) = v.completion_s {
                let ff: f64 = v.route().iter().map(|&l| net.link(l).free_flow_time()).sum();
                assert!(c - v.spawn_s + 1e-9 >= ff);
                done += 1;
            }
        }
        assert!(done > 0);
        let m = sim.metrics();
        assert_eq!(m.spawned, m.completed + m.in_network);
    }

    #[test]
    fn emv_on_empty_grid_with_all_green_runs_at_full_speed() {
        let s = scenario("", 10.0);
        let mut sim = Simulator::new(&s, 1);
        let net = sim.network_arc();
        // fixed route 0 -> 1 -> 2 -> 5 -> 8
        struct Route;
        impl Navigator for Route {
            fn next_hop(&self, node: NodeId) -> Option<NodeId> {
                match node {
                    0 => Some(1),
                    1 => Some(2),
                    2 => Some(5),
                    5 => Some(8),
                    _ => None,
                }
            }
        }
        let path = [0, 1, 2, 5, 8];
        while !sim.is_done() && sim.emv().status != EmvStatus::Arrived {
            let mut actions = vec![0; 9];
            for w in path.windows(3) {
                let inc = net.link_between(w[0], w[1]).unwrap();
                let out = net.link_between(w[1], w[2]).unwrap();
                actions[w[1]] = net.intersection(w[1]).phase_for_link_movement(inc, out).unwrap();
            }
            sim.step(&actions, &Route).unwrap();
        }
        let m = sim.metrics();
        assert!((m.t_emv.unwrap() - 4.0 * 120.0 / 12.0).abs() < 1e-9);
        assert_eq!(m.emergency_lanes, 4);
        assert_eq!(m.emv_links, 4);
    }

    #[test]
    fn emv_counts_in_lane_counts() {
        let s = scenario("", 0.0);
        let mut sim = Simulator::new(&s, 1);
        sim.substep(&NoNavigator);
        assert_eq!(sim.emv().status, EmvStatus::Active);
        assert_eq!(sim.lane_counts().iter().sum::<u32>(), 1);
        assert_eq!(sim.in_network(), 0);
    }

    #[test]
    fn shortest_route_on_grid_has_manhattan_length() {
        let net = build_grid(&GridSpec::new(4, 4, 100.0, 1), &EcMap::new()).unwrap();
        let r = shortest_length_route(&net, 0, 15).unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!(net.link(r[0]).from, 0);
        assert_eq!(net.link(*r.last().unwrap()).to, 15);
    }
}
