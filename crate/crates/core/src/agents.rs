//! Signal agents: roles, observations, local and spatially discounted
//! rewards, and the environment wrapper used for training.

use serde::{Deserialize, Serialize};

use crate::net::{Heading, Network, NodeId, PhaseId};
use crate::pressure::{density, pressure, PressureKind};
use crate::routing::{DecentralizedRouter, EtaTable};
use crate::scenario::Scenario;
use crate::sim::{SimError, Simulator};

/// Observation value for fields that do not apply.
pub const ABSENT: f64 = -1.0;

/// Upper bound on the scaled ETA feature.
const ETA_FEATURE_CAP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentRole {
    Normal,
    Primary,
    Secondary,
}

/// Primary is the head of the EMV's link, Secondary the Primary's routed next
/// intersection. Everyone is Normal while no EMV is travelling.
pub fn classify_roles(sim: &Simulator, table: Option<&EtaTable>) -> Vec<AgentRole> {
    let net = sim.network();
    let mut roles = vec![AgentRole::Normal; net.node_count()];
    let emv = sim.emv();
    if !emv.is_active() {
        return roles;
    }
    let Some(link) = emv.link else { return roles };
    let primary = net.link(link).to;
    roles[primary] = AgentRole::Primary;
    if let Some(s) = table.and_then(|t| t.next[primary]) {
        if s != primary {
            roles[s] = AgentRole::Secondary;
        }
    }
    roles
}

/// Primary and secondary intersections, if any.
pub fn preemption_pair(roles: &[AgentRole]) -> (Option<NodeId>, Option<NodeId>) {
    let p = roles.iter().position(|&r| r == AgentRole::Primary);
    let s = roles.iter().position(|&r| r == AgentRole::Secondary);
    (p, s)
}

/// Reward switches used by the ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub pressure: PressureKind,
    /// Reward primary agents like normal ones.
    pub no_primary: bool,
    /// Reward secondary agents like normal ones.
    pub no_secondary: bool,
}

/// Reward of agent `i` for the current state.
pub fn local_reward(
    net: &Network,
    counts: &[u32],
    roles: &[AgentRole],
    i: NodeId,
    beta: f64,
    cfg: &RewardConfig,
) -> f64 {
    let p = || pressure(cfg.pressure, net, counts, i);
    match roles[i] {
        AgentRole::Primary if !cfg.no_primary => -1.0,
        AgentRole::Secondary if !cfg.no_secondary => {
            let (primary, _) = preemption_pair(roles);
            let occupancy = primary
                .and_then(|ip| net.link_between(ip, i))
                .map(|l| {
                    let spec = net.link(l);
                    spec.lanes().map(|ln| density(net, counts, ln)).sum::<f64>() / spec.lane_count as f64
                })
                .unwrap_or(0.0);
            -beta * p() - (1.0 - beta) * occupancy
        }
        _ => -p(),
    }
}

/// Secondary reward from its two ingredients.
pub fn secondary_reward(beta: f64, pressure: f64, mean_occupancy: f64) -> f64 {
    -beta * pressure - (1.0 - beta) * mean_occupancy
}

/// `alpha^d(i, j)` for every pair; unreachable pairs get 0.
pub fn spatial_weights(net: &Network, alpha: f64) -> Vec<Vec<f64>> {
    net.distance_matrix()
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|d| match d {
                    Some(0) => 1.0,
                    Some(d) => alpha.powi(d as i32),
                    None => 0.0,
                })
                .collect()
        })
        .collect()
}

/// `r~_i = sum_j alpha^d(i,j) r_j`.
pub fn adjusted_reward(rewards: &[f64], weights: &[Vec<f64>]) -> Vec<f64> {
    weights
        .iter()
        .map(|w| w.iter().zip(rewards).map(|(a, r)| a * r).sum())
        .collect()
}

/// Bootstrapped one-step return; `next_value` is ignored at terminal steps.
pub fn local_return(adjusted: f64, next_value: f64, gamma: f64, terminal: bool) -> f64 {
    if terminal {
        adjusted
    } else {
        adjusted + gamma * next_value
    }
}

/// Input sizes of one agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentLayout {
    pub node: NodeId,
    /// Own features, then each neighbor's in this order.
    pub neighbors: Vec<NodeId>,
    pub own_dim: usize,
    pub obs_dim: usize,
    /// Previous policies of the neighbors, concatenated.
    pub fp_dim: usize,
    pub n_actions: usize,
}

/// Length of a node's own feature block.
pub fn local_feature_dim(net: &Network, i: NodeId) -> usize {
    let spec = net.intersection(i);
    spec.incoming_lanes.len() + spec.outgoing_lanes.len() + spec.incoming_links.len() + 2
}

pub fn agent_layouts(net: &Network) -> Vec<AgentLayout> {
    (0..net.node_count())
        .map(|i| {
            let spec = net.intersection(i);
            let neighbors = spec.neighbors.clone();
            let obs_dim = local_feature_dim(net, i) + neighbors.iter().map(|&j| local_feature_dim(net, j)).sum::<usize>();
            let fp_dim = neighbors.iter().map(|&j| net.intersection(j).phase_count()).sum();
            AgentLayout {
                node: i,
                own_dim: local_feature_dim(net, i),
                obs_dim,
                fp_dim,
                n_actions: spec.phase_count(),
                neighbors,
            }
        })
        .collect()
}

/// Own features of node `i`: incoming and outgoing lane densities, the EMV's
/// remaining fraction per incoming link (Primary only), scaled ETA and the
/// encoded next hop.
pub fn local_features(
    sim: &Simulator,
    counts: &[u32],
    table: Option<&EtaTable>,
    roles: &[AgentRole],
    i: NodeId,
    eta_scale: f64,
    out: &mut Vec<f64>,
) {
    let net = sim.network();
    let spec = net.intersection(i);
    for &l in &spec.incoming_lanes {
        out.push(density(net, counts, l));
    }
    for &l in &spec.outgoing_lanes {
        out.push(density(net, counts, l));
    }
    let emv = sim.emv();
    for &link in &spec.incoming_links {
        let v = match (roles[i], emv.link) {
            (AgentRole::Primary, Some(el)) if el == link && emv.is_active() => {
                let len = net.link(link).length_m;
                (len - emv.pos_m).max(0.0) / len
            }
            _ => ABSENT,
        };
        out.push(v);
    }
    match table.filter(|_| emv.is_active()) {
        Some(t) => {
            let eta = t.eta[i];
            out.push(if eta.is_finite() {
                (eta / eta_scale).min(ETA_FEATURE_CAP)
            } else {
                ETA_FEATURE_CAP
            });
            out.push(match t.next[i].and_then(|j| net.link_between(i, j)) {
                Some(l) => encode_heading(net.link(l).heading),
                None => ABSENT,
            });
        }
        None => {
            out.push(ABSENT);
            out.push(ABSENT);
        }
    }
}

/// Joint observation of every agent: own block then neighbor blocks.
pub fn joint_observations(
    sim: &Simulator,
    table: Option<&EtaTable>,
    roles: &[AgentRole],
    layouts: &[AgentLayout],
    eta_scale: f64,
) -> Vec<Vec<f64>> {
    let counts = sim.lane_counts();
    let blocks: Vec<Vec<f64>> = (0..layouts.len())
        .map(|i| {
            let mut v = Vec::with_capacity(layouts[i].own_dim);
            local_features(sim, &counts, table, roles, i, eta_scale, &mut v);
            v
        })
        .collect();
    layouts
        .iter()
        .map(|lay| {
            let mut v = Vec::with_capacity(lay.obs_dim);
            v.extend_from_slice(&blocks[lay.node]);
            for &j in &lay.neighbors {
                v.extend_from_slice(&blocks[j]);
            }
            v
        })
        .collect()
}

/// Out-link port index scaled to [0, 1].
pub fn encode_heading(h: Heading) -> f64 {
    h.index() as f64 / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub beta: f64,
    pub eta_scale: f64,
    pub reward: RewardConfig,
}

impl EnvConfig {
    pub fn from_scenario(s: &Scenario, reward: RewardConfig) -> EnvConfig {
        EnvConfig {
            beta: s.train.beta,
            eta_scale: s.train.eta_scale,
            reward,
        }
    }
}

/// Result of one decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub rewards: Vec<f64>,
    pub roles: Vec<AgentRole>,
    pub done: bool,
}

/// Simulator plus decentralized routing, exposing per-agent observations
/// and rewards.
#[derive(Clone, Debug)]
pub struct TrafficEnv {
    sim: Simulator,
    router: DecentralizedRouter,
    layouts: Vec<AgentLayout>,
    cfg: EnvConfig,
    roles: Vec<AgentRole>,
}

impl TrafficEnv {
    pub fn new(scenario: &Scenario, seed: u64, cfg: EnvConfig) -> TrafficEnv {
        TrafficEnv::from_sim(Simulator::new(scenario, seed), cfg)
    }

    pub fn from_sim(sim: Simulator, cfg: EnvConfig) -> TrafficEnv {
        let layouts = agent_layouts(sim.network());
        let n = sim.network().node_count();
        TrafficEnv {
            sim,
            router: DecentralizedRouter::new(),
            layouts,
            cfg,
            roles: vec![AgentRole::Normal; n],
        }
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulator {
        &mut self.sim
    }

    pub fn router(&self) -> &DecentralizedRouter {
        &self.router
    }

    pub fn layouts(&self) -> &[AgentLayout] {
        &self.layouts
    }

    pub fn roles(&self) -> &[AgentRole] {
        &self.roles
    }

    pub fn is_done(&self) -> bool {
        self.sim.is_done()
    }

    /// Joint observation of every agent: own block then neighbor blocks.
    pub fn observe_all(&self) -> Vec<Vec<f64>> {
        joint_observations(&self.sim, self.router.frozen(), &self.roles, &self.layouts, self.cfg.eta_scale)
    }

    pub fn step(&mut self, actions: &[PhaseId]) -> Result<StepResult, SimError> {
        self.router.before_step(&self.sim);
        self.sim.step(actions, &self.router)?;
        self.router.after_step(&self.sim);
        self.roles = classify_roles(&self.sim, self.router.frozen());
        let counts = self.sim.lane_counts();
        let net = self.sim.network();
        let rewards = (0..net.node_count())
            .map(|i| local_reward(net, &counts, &self.roles, i, self.cfg.beta, &self.cfg.reward))
            .collect();
        Ok(StepResult {
            rewards,
            roles: self.roles.clone(),
            done: self.sim.is_done(),
        })
    }
}
