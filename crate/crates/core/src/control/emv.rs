//! EMV routing strategies and green-wave pre-emption.

use crate::net::{NodeId, PhaseId};
use crate::routing::{a_star_route, a_star_route_avoiding, DecentralizedRouter, EtaTable};
use crate::sim::{EmvStatus, Navigator, Simulator, STEP_S};

use super::EmvRouter;

/// Default replanning period of the dynamic router.
pub const REPLAN_PERIOD_S: f64 = 50.0;

const EPS: f64 = 1e-9;

fn dispatching(sim: &Simulator) -> bool {
    let emv = sim.emv();
    emv.status == EmvStatus::Pending && emv.dispatch_s < sim.clock() + STEP_S
}

fn hop_after(route: &[NodeId], node: NodeId) -> Option<NodeId> {
    let k = route.iter().position(|&n| n == node)?;
    route.get(k + 1).copied()
}

/// A* on the travel times seen at dispatch; the route never changes.
#[derive(Clone, Debug, Default)]
pub struct StaticAStar {
    route: Option<Vec<NodeId>>,
}

impl StaticAStar {
    pub fn new() -> StaticAStar {
        StaticAStar::default()
    }
}

impl Navigator for StaticAStar {
    fn next_hop(&self, node: NodeId) -> Option<NodeId> {
        self.route.as_deref().and_then(|r| hop_after(r, node))
    }
}

impl EmvRouter for StaticAStar {
    fn name(&self) -> &'static str {
        "static_astar"
    }

    fn before_step(&mut self, sim: &Simulator) {
        if self.route.is_none() && dispatching(sim) {
            let emv = sim.emv();
            self.route = a_star_route(sim.network(), &sim.travel_times(), emv.origin, emv.destination).ok();
        }
    }

    fn after_step(&mut self, _sim: &Simulator) {}

    fn route(&self) -> Option<&[NodeId]> {
        self.route.as_deref()
    }
}

/// A* at dispatch, then again every period from the intersection ahead of
/// the EMV. Turning back onto the current link is not allowed.
#[derive(Clone, Debug)]
pub struct DynamicAStar {
    pub period_s: f64,
    route: Option<Vec<NodeId>>,
    next_plan_s: f64,
    replans: usize,
}

impl Default for DynamicAStar {
    fn default() -> Self {
        DynamicAStar::new(REPLAN_PERIOD_S)
    }
}

impl DynamicAStar {
    pub fn new(period_s: f64) -> DynamicAStar {
        DynamicAStar {
            period_s,
            route: None,
            next_plan_s: f64::INFINITY,
            replans: 0,
        }
    }
}

impl Navigator for DynamicAStar {
    fn next_hop(&self, node: NodeId) -> Option<NodeId> {
        self.route.as_deref().and_then(|r| hop_after(r, node))
    }
}

impl EmvRouter for DynamicAStar {
    fn name(&self) -> &'static str {
        "dynamic_astar"
    }

    fn before_step(&mut self, sim: &Simulator) {
        let emv = sim.emv();
        if self.route.is_none() && dispatching(sim) {
            self.route = a_star_route(sim.network(), &sim.travel_times(), emv.origin, emv.destination).ok();
            self.next_plan_s = emv.dispatch_s + self.period_s;
            return;
        }
        if !emv.is_active() || sim.clock() + EPS < self.next_plan_s {
            return;
        }
        while self.next_plan_s <= sim.clock() + EPS {
            self.next_plan_s += self.period_s;
        }
        let net = sim.network();
        let link = net.link(emv.link.expect("active EMV is on a link"));
        let anchor = link.to;
        if anchor == emv.destination {
            return;
        }
        let Ok(tail) = a_star_route_avoiding(net, &sim.travel_times(), anchor, emv.destination, Some(link.from)) else {
            return;
        };
        self.replans += 1;
        let mut route: Vec<NodeId> = self
            .route
            .as_deref()
            .and_then(|r| r.iter().position(|&n| n == anchor).map(|k| r[..k].to_vec()))
            .unwrap_or_else(|| vec![link.from]);
        route.extend(tail);
        self.route = Some(route);
    }

    fn after_step(&mut self, _sim: &Simulator) {}

    fn route(&self) -> Option<&[NodeId]> {
        self.route.as_deref()
    }

    fn replans(&self) -> usize {
        self.replans
    }
}

/// The agents' relaxed ETA table with its half-link snapshot.
#[derive(Clone, Debug, Default)]
pub struct Decentralized {
    inner: DecentralizedRouter,
}

impl Decentralized {
    pub fn new() -> Decentralized {
        Decentralized::default()
    }

    pub fn inner(&self) -> &DecentralizedRouter {
        &self.inner
    }
}

impl Navigator for Decentralized {
    fn next_hop(&self, node: NodeId) -> Option<NodeId> {
        self.inner.next_hop(node)
    }
}

impl EmvRouter for Decentralized {
    fn name(&self) -> &'static str {
        "decentralized"
    }

    fn before_step(&mut self, sim: &Simulator) {
        self.inner.before_step(sim);
    }

    fn after_step(&mut self, sim: &Simulator) {
        self.inner.after_step(sim);
    }

    fn route(&self) -> Option<&[NodeId]> {
        None
    }

    fn table(&self) -> Option<&EtaTable> {
        self.inner.frozen()
    }
}

/// Forces the intersection ahead of the EMV to the lowest phase that lets it
/// continue along its route. Returns the overridden intersection.
pub fn green_wave(sim: &Simulator, nav: &dyn Navigator, phases: &mut [PhaseId]) -> Option<NodeId> {
    let out = sim.emv_upcoming_link(nav)?;
    let link = sim.emv().link?;
    let node = sim.network().link(link).to;
    let phase = sim.network().intersection(node).phase_for_link_movement(link, out)?;
    phases[node] = phase;
    Some(node)
}
