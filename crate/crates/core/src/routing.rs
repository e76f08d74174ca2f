//! EMV travel-time routing: Dijkstra pre-population, decentralized
//! relaxation of (ETA, Next) tables and A* for the benchmark routers.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{LinkId, Network, NodeId};
use crate::sim::{EmvStatus, Navigator, OrdF64, Simulator, STEP_S};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("intersection {0} is the destination and has no next hop")]
    AtDestination(NodeId),
    #[error("destination {destination} is unreachable from {from}")]
    Unreachable { from: NodeId, destination: NodeId },
}

/// Per-intersection time to the destination and the next hop that achieves it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaTable {
    pub destination: NodeId,
    pub eta: Vec<f64>,
    pub next: Vec<Option<NodeId>>,
}

impl EtaTable {
    /// Table that knows only the destination.
    pub fn cold(node_count: usize, destination: NodeId) -> EtaTable {
        let mut eta = vec![f64::INFINITY; node_count];
        eta[destination] = 0.0;
        EtaTable {
            destination,
            eta,
            next: vec![None; node_count],
        }
    }

    pub fn next_hop(&self, i: NodeId) -> Result<NodeId, RoutingError> {
        if i == self.destination {
            return Err(RoutingError::AtDestination(i));
        }
        self.next[i].ok_or(RoutingError::Unreachable {
            from: i,
            destination: self.destination,
        })
    }

    /// Follows Next pointers from `from`; `None` if they loop or dead-end.
    pub fn path(&self, from: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![from];
        let mut cur = from;
        while cur != self.destination {
            cur = self.next[cur]?;
            path.push(cur);
            if path.len() > self.eta.len() {
                return None;
            }
        }
        Some(path)
    }
}

/// Lowest `eta[j] + t[i->j]` over the out-links of `i`, ties to the lowest `j`.
fn best_out(net: &Network, t: &[f64], eta: &[f64], i: NodeId) -> (f64, Option<NodeId>) {
    let mut best = (f64::INFINITY, None);
    for (link, j) in net.out_neighbors(i) {
        let c = eta[j] + t[link];
        if c < best.0 || (c == best.0 && c.is_finite() && best.1.is_some_and(|b| j < b)) {
            best = (c, Some(j));
        }
    }
    if best.0.is_finite() {
        best
    } else {
        (f64::INFINITY, None)
    }
}

/// Exact shortest-time table under `t` by Dijkstra over reversed links.
pub fn prepopulate(net: &Network, t: &[f64], destination: NodeId) -> EtaTable {
    let n = net.node_count();
    let mut incoming: Vec<Vec<(LinkId, NodeId)>> = vec![Vec::new(); n];
    for l in &net.links {
        incoming[l.to].push((l.id, l.from));
    }
    let mut eta = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    eta[destination] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((OrdF64(0.0), destination)));
    while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &(link, v) in &incoming[u] {
            let nd = d + t[link];
            if nd < eta[v] {
                eta[v] = nd;
                heap.push(Reverse((OrdF64(nd), v)));
            }
        }
    }
    let mut table = EtaTable {
        destination,
        next: vec![None; n],
        eta,
    };
    for i in 0..n {
        if i != destination && table.eta[i].is_finite() {
            table.next[i] = best_out(net, t, &table.eta, i).1;
        }
    }
    table
}

/// One synchronous relaxation round. Every new entry reads only `prev`.
pub fn relax_step(net: &Network, t: &[f64], prev: &EtaTable) -> EtaTable {
    let n = net.node_count();
    let mut eta = vec![f64::INFINITY; n];
    let mut next = vec![None; n];
    for i in 0..n {
        if i == prev.destination {
            eta[i] = 0.0;
            continue;
        }
        let (e, j) = best_out(net, t, &prev.eta, i);
        eta[i] = e;
        next[i] = j;
    }
    EtaTable {
        destination: prev.destination,
        eta,
        next,
    }
}

/// Lower bound on remaining time: Manhattan hops times the fastest link on
/// grids, zero elsewhere.
fn heuristic(net: &Network, t: &[f64], destination: NodeId) -> Vec<f64> {
    if !net.is_grid() || t.is_empty() {
        return vec![0.0; net.node_count()];
    }
    let tmin = t.iter().copied().fold(f64::INFINITY, f64::min);
    let (dr, dc) = net.intersection(destination).grid_pos.unwrap();
    net.intersections
        .iter()
        .map(|i| {
            let (r, c) = i.grid_pos.unwrap();
            (r.abs_diff(dr) + c.abs_diff(dc)) as f64 * tmin
        })
        .collect()
}

/// Time-optimal route under frozen `t`, as an intersection sequence.
/// Among optimal routes the lexicographically smallest sequence is returned.
pub fn a_star_route(net: &Network, t: &[f64], origin: NodeId, destination: NodeId) -> Result<Vec<NodeId>, RoutingError> {
    a_star_route_avoiding(net, t, origin, destination, None)
}

/// As [`a_star_route`], but the first hop may not go to `avoid_first`
/// (used to keep replans from reversing the EMV).
pub fn a_star_route_avoiding(
    net: &Network,
    t: &[f64],
    origin: NodeId,
    destination: NodeId,
    avoid_first: Option<NodeId>,
) -> Result<Vec<NodeId>, RoutingError> {
    if origin == destination {
        return Ok(vec![origin]);
    }
    let n = net.node_count();
    let h = heuristic(net, t, destination);
    let mut g = vec![f64::INFINITY; n];
    let mut closed = vec![false; n];
    g[origin] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((OrdF64(h[origin]), origin)));
    let mut best = f64::INFINITY;
    while let Some(Reverse((OrdF64(f), u))) = heap.pop() {
        if f > best {
            break;
        }
        if closed[u] {
            continue;
        }
        closed[u] = true;
        if u == destination {
            best = g[u];
            continue;
        }
        for (link, v) in net.out_neighbors(u) {
            if u == origin && Some(v) == avoid_first {
                continue;
            }
            let nd = g[u] + t[link];
            if nd < g[v] {
                g[v] = nd;
                heap.push(Reverse((OrdF64(nd + h[v]), v)));
            }
        }
    }
    if !best.is_finite() {
        return Err(RoutingError::Unreachable {
            from: origin,
            destination,
        });
    }
    // nodes lying on some optimal path, found backwards through tight edges
    let tight = |u: NodeId, link: LinkId, v: NodeId| {
        closed[u] && g[u].is_finite() && g[u] + t[link] == g[v] && !(u == origin && Some(v) == avoid_first)
    };
    let mut on_opt = vec![false; n];
    on_opt[destination] = true;
    let mut order: Vec<NodeId> = (0..n).filter(|&i| closed[i] && g[i] <= best).collect();
    order.sort_by(|&a, &b| g[b].total_cmp(&g[a]));
    for &u in &order {
        if u == destination {
            continue;
        }
        on_opt[u] = net.out_neighbors(u).any(|(l, v)| on_opt[v] && tight(u, l, v));
    }
    let mut path = vec![origin];
    let mut cur = origin;
    while cur != destination {
        let step = net
            .out_neighbors(cur)
            .filter(|&(l, v)| on_opt[v] && tight(cur, l, v))
            .map(|(_, v)| v)
            .min()
            .expect("optimal DAG is connected");
        path.push(step);
        cur = step;
    }
    Ok(path)
}

/// Links along an intersection sequence.
pub fn route_links(net: &Network, nodes: &[NodeId]) -> Option<Vec<LinkId>> {
    nodes.windows(2).map(|w| net.link_between(w[0], w[1])).collect()
}

pub fn route_length_m(net: &Network, nodes: &[NodeId]) -> Option<f64> {
    route_links(net, nodes).map(|ls| ls.iter().map(|&l| net.link(l).length_m).sum())
}

pub fn route_time(t: &[f64], links: &[LinkId]) -> f64 {
    links.iter().map(|&l| t[l]).sum()
}

/// Routing as seen by the signal agents: a live table relaxed once per
/// decision step and a snapshot taken when the EMV passes the middle of each
/// link. The EMV and the observations only ever read the snapshot.
#[derive(Clone, Debug, Default)]
pub struct DecentralizedRouter {
    live: Option<EtaTable>,
    frozen: Option<EtaTable>,
    /// Number of EMV legs when the snapshot was taken.
    captured_leg: usize,
}

impl DecentralizedRouter {
    pub fn new() -> DecentralizedRouter {
        DecentralizedRouter::default()
    }

    /// Pre-populates the tables when the EMV is dispatched during the coming step.
    pub fn before_step(&mut self, sim: &Simulator) {
        let emv = sim.emv();
        if self.live.is_none() && emv.status == EmvStatus::Pending && emv.dispatch_s < sim.clock() + STEP_S {
            let table = prepopulate(sim.network(), &sim.travel_times(), emv.destination);
            self.frozen = Some(table.clone());
            self.live = Some(table);
            self.captured_leg = 0;
        }
    }

    /// One relaxation round, then the half-link snapshot check.
    pub fn after_step(&mut self, sim: &Simulator) {
        let emv = sim.emv();
        if !emv.is_active() {
            return;
        }
        let Some(live) = self.live.as_ref() else { return };
        let next = relax_step(sim.network(), &sim.travel_times(), live);
        self.live = Some(next);
        let link = emv.link.expect("active EMV is on a link");
        let half = sim.network().link(link).length_m / 2.0;
        if emv.legs.len() != self.captured_leg && emv.pos_m >= half {
            self.frozen = self.live.clone();
            self.captured_leg = emv.legs.len();
        }
    }

    pub fn live(&self) -> Option<&EtaTable> {
        self.live.as_ref()
    }

    /// The table agents observe and the EMV follows.
    pub fn frozen(&self) -> Option<&EtaTable> {
        self.frozen.as_ref()
    }
}

impl Navigator for DecentralizedRouter {
    fn next_hop(&self, node: NodeId) -> Option<NodeId> {
        self.frozen.as_ref().and_then(|t| t.next[node])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_grid, EcMap, GridSpec, Heading, LinkInput};

    /// Path A(0) -> B(1) -> C(2) along the top of a ring through 3 and 4.
    /// Link ids: 0: 0->1, 1: 1->2, 2: 2->1, 3: 1->0, 4: 0->3, 5: 3->0,
    /// 6: 3->4, 7: 4->3, 8: 4->2, 9: 2->4.
    fn line() -> Network {
        let mk = |from, to, heading| LinkInput {
            from,
            to,
            heading,
            length_m: 100.0,
            lanes: 1,
            lane_capacity: Some(10),
            ec_coefficient: 0.0,
            free_flow_speed: 6.0,
            emv_max_speed: 12.0,
        };
        let links = vec![
            mk(0, 1, Heading::E),
            mk(1, 2, Heading::E),
            mk(2, 1, Heading::W),
            mk(1, 0, Heading::W),
            mk(0, 3, Heading::S),
            mk(3, 0, Heading::N),
            mk(3, 4, Heading::E),
            mk(4, 3, Heading::W),
            mk(4, 2, Heading::N),
            mk(2, 4, Heading::S),
        ];
        Network::from_links(5, &links, None).unwrap_or_else(|e| panic!("{e}"))
    }

    #[test]
    fn three_node_path_prepopulate() {
        let net = line();
        let mut t = vec![100.0; net.link_count()];
        t[0] = 2.0;
        t[1] = 3.0;
        let eta = prepopulate(&net, &t, 2);
        assert_eq!(eta.eta[0], 5.0);
        assert_eq!(eta.eta[1], 3.0);
        assert_eq!(eta.eta[2], 0.0);
        assert_eq!(eta.next[0], Some(1));
        assert_eq!(eta.next[1], Some(2));
        assert_eq!(eta.next_hop(0), Ok(1));
        assert_eq!(eta.next_hop(2), Err(RoutingError::AtDestination(2)));
    }

    #[test]
    fn relax_uses_previous_iterate() {
        let net = line();
        let mut t = vec![100.0; net.link_count()];
        t[0] = 2.0;
        t[1] = 3.0;
        let eta = prepopulate(&net, &t, 2);
        t[0] = 10.0;
        let once = relax_step(&net, &t, &eta);
        assert_eq!(once.eta[0], 13.0);
        let mut cur = once;
        for _ in 0..net.node_count() {
            cur = relax_step(&net, &t, &cur);
        }
        assert_eq!(cur, prepopulate(&net, &t, 2));
    }

    #[test]
    fn static_fixed_point() {
        let net = build_grid(&GridSpec::new(4, 4, 200.0, 2), &EcMap::new()).unwrap();
        let t: Vec<f64> = (0..net.link_count()).map(|l| 10.0 + (l % 7) as f64).collect();
        let eta = prepopulate(&net, &t, 5);
        let mut cur = eta.clone();
        for _ in 0..20 {
            cur = relax_step(&net, &t, &cur);
            assert_eq!(cur, eta);
        }
    }

    #[test]
    fn relax_tie_goes_to_lowest_id() {
        let net = build_grid(&GridSpec::new(2, 2, 100.0, 1), &EcMap::new()).unwrap();
        let t = vec![1.0; net.link_count()];
        let eta = relax_step(&net, &t, &prepopulate(&net, &t, 3));
        // node 0 reaches 3 through 1 or 2 in equal time
        assert_eq!(eta.next[0], Some(1));
    }

    #[test]
    fn unreachable_nodes_are_infinite() {
        let net = line();
        let t = vec![1.0; net.link_count()];
        let mut eta = prepopulate(&net, &t, 2);
        // cut both links leaving node 3
        let mut t2 = t.clone();
        t2[5] = f64::INFINITY;
        t2[6] = f64::INFINITY;
        eta = relax_step(&net, &t2, &eta);
        for _ in 0..5 {
            eta = relax_step(&net, &t2, &eta);
        }
        assert!(eta.eta[3].is_infinite());
        assert_eq!(eta.next[3], None);
        assert!(eta.next_hop(3).is_err());
    }

    #[test]
    fn underestimating_table_can_need_more_than_v_rounds() {
        // raising both links into the destination leaves the old estimates
        // too low; they climb a few seconds per round (count to infinity)
        let net = line();
        let mut t = vec![1.0; net.link_count()];
        let stale = prepopulate(&net, &t, 2);
        t[1] = 100.0;
        t[8] = 100.0;
        let truth = prepopulate(&net, &t, 2);
        let mut cur = stale;
        let mut rounds = 0;
        while cur != truth {
            cur = relax_step(&net, &t, &cur);
            rounds += 1;
            assert!(rounds < 1000);
        }
        assert!(rounds > net.node_count(), "rounds {rounds}");
    }

    #[test]
    fn a_star_uniform_grid_prefers_smallest_sequence() {
        let net = build_grid(&GridSpec::new(3, 3, 100.0, 1), &EcMap::new()).unwrap();
        let t = vec![5.0; net.link_count()];
        assert_eq!(a_star_route(&net, &t, 0, 8).unwrap(), vec![0, 1, 2, 5, 8]);
        assert_eq!(a_star_route(&net, &t, 8, 0).unwrap(), vec![8, 5, 2, 1, 0]);
        assert_eq!(a_star_route(&net, &t, 4, 4).unwrap(), vec![4]);
        assert_eq!(
            a_star_route_avoiding(&net, &t, 0, 8, Some(1)).unwrap(),
            vec![0, 3, 4, 5, 8]
        );
    }

    #[test]
    fn a_star_avoids_slow_links() {
        let net = build_grid(&GridSpec::new(3, 3, 100.0, 1), &EcMap::new()).unwrap();
        let mut t = vec![5.0; net.link_count()];
        t[net.link_between(1, 2).unwrap()] = 50.0;
        let r = a_star_route(&net, &t, 0, 8).unwrap();
        assert_eq!(r, vec![0, 1, 4, 5, 8]);
        assert_eq!(route_length_m(&net, &r), Some(400.0));
    }
}
