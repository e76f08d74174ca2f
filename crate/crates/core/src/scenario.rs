//! Scenario files: network, traffic flows, EMV dispatch and training settings.
//!
//! The on-disk format is TOML. See `scenarios/` for complete examples and the
//! README for the field reference.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::net::{build_grid, EcMap, GridSpec, Heading, LinkInput, Network, NetworkError, NodeId};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("invalid network: {0}")]
    Network(#[from] NetworkError),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Grid,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcEntry {
    pub from: NodeId,
    pub to: NodeId,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitLink {
    pub from: NodeId,
    pub to: NodeId,
    pub heading: Heading,
    pub length_m: f64,
    pub lanes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_capacity: Option<u32>,
    #[serde(default)]
    pub ec_coefficient: f64,
}

fn default_free_flow() -> f64 {
    6.0
}

fn default_emv_speed() -> f64 {
    12.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub kind: NetworkKind,
    #[serde(default = "default_free_flow")]
    pub free_flow_speed: f64,
    #[serde(default = "default_emv_speed")]
    pub emv_max_speed: f64,
    // grid
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_length_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lanes_per_link: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_capacity: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ec: Vec<EcEntry>,
    // explicit
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<ExplicitLink>,
}

impl NetworkSection {
    pub fn build(&self) -> Result<Network, ScenarioError> {
        match self.kind {
            NetworkKind::Grid => {
                let need = |v: Option<usize>, f: &str| v.ok_or_else(|| invalid(format!("network.{f}"), "required for grid networks"));
                let rows = need(self.rows, "rows")?;
                let cols = need(self.cols, "cols")?;
                let spec = GridSpec {
                    rows,
                    cols,
                    link_length_m: self
                        .link_length_m
                        .ok_or_else(|| invalid("network.link_length_m", "required for grid networks"))?,
                    lanes_per_link: self
                        .lanes_per_link
                        .ok_or_else(|| invalid("network.lanes_per_link", "required for grid networks"))?,
                    lane_capacity: self.lane_capacity,
                    free_flow_speed: self.free_flow_speed,
                    emv_max_speed: self.emv_max_speed,
                };
                if rows < 2 || cols < 2 {
                    return Err(invalid("network.rows", "grid dimensions must be at least 2x2"));
                }
                let mut ec = EcMap::new();
                for (i, e) in self.ec.iter().enumerate() {
                    let n = rows * cols;
                    if e.from >= n || e.to >= n {
                        return Err(invalid(format!("network.ec[{i}]"), "unknown intersection"));
                    }
                    if !(e.coefficient >= 0.0) {
                        return Err(invalid(format!("network.ec[{i}].coefficient"), "must be non-negative"));
                    }
                    ec.insert((e.from, e.to), e.coefficient);
                }
                let net = build_grid(&spec, &ec)?;
                for (i, e) in self.ec.iter().enumerate() {
                    if net.link_between(e.from, e.to).is_none() {
                        return Err(invalid(format!("network.ec[{i}]"), "no link between these intersections"));
                    }
                }
                Ok(net)
            }
            NetworkKind::Explicit => {
                let nodes = self
                    .nodes
                    .ok_or_else(|| invalid("network.nodes", "required for explicit networks"))?;
                if self.links.is_empty() {
                    return Err(invalid("network.links", "explicit networks need at least one link"));
                }
                let inputs: Vec<LinkInput> = self
                    .links
                    .iter()
                    .map(|l| LinkInput {
                        from: l.from,
                        to: l.to,
                        heading: l.heading,
                        length_m: l.length_m,
                        lanes: l.lanes,
                        lane_capacity: l.lane_capacity,
                        ec_coefficient: l.ec_coefficient,
                        free_flow_speed: self.free_flow_speed,
                        emv_max_speed: self.emv_max_speed,
                    })
                    .collect();
                Ok(Network::from_links(nodes, &inputs, None)?)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalProcess {
    /// Fractional accumulator, one vehicle every time it crosses an integer.
    Deterministic,
    /// Independent Bernoulli draw per entry lane and sub-step.
    Bernoulli,
}

fn default_saturation() -> f64 {
    0.5
}
fn default_max_link_time() -> f64 {
    600.0
}
fn default_arrivals() -> ArrivalProcess {
    ArrivalProcess::Deterministic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Length of the traffic demand window and nominal episode length.
    pub horizon_s: f64,
    /// Hard stop for an episode whose EMV is still travelling at the horizon.
    /// Defaults to `horizon_s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_episode_s: Option<f64>,
    /// Vehicles per second discharged from a lane whose movement is green.
    #[serde(default = "default_saturation")]
    pub saturation_rate: f64,
    #[serde(default = "default_arrivals")]
    pub arrivals: ArrivalProcess,
    /// Upper bound on the EMV travel time estimate of a single link.
    #[serde(default = "default_max_link_time")]
    pub max_link_time_s: f64,
}

impl SimConfig {
    pub fn episode_cap_s(&self) -> f64 {
        self.max_episode_s.unwrap_or(self.horizon_s).max(self.horizon_s)
    }
}

fn default_one() -> u32 {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    /// Origin/destination pairs sharing this rate and interval.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub od: Vec<(NodeId, NodeId)>,
    /// Draw origin and destination uniformly from the border intersections.
    #[serde(default, skip_serializing_if = "is_false")]
    pub random_od: bool,
    /// Vehicles per lane per hour.
    pub rate: f64,
    pub start_s: f64,
    pub end_s: f64,
    /// Entry lanes for random-OD flows. Fixed OD pairs use the lane count of
    /// their first link.
    #[serde(default = "default_one")]
    pub lanes: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmvDispatch {
    pub origin: NodeId,
    pub destination: NodeId,
    pub dispatch_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Spatial discount factor.
    pub alpha: f64,
    /// Entropy regularization weight.
    pub entropy: f64,
    /// Weight of pressure in the secondary agent reward.
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the end of the planned training run.
    pub lr_final: f64,
    pub grad_clip: f64,
    pub episodes: usize,
    pub obs_hidden: usize,
    pub fp_hidden: usize,
    pub lstm_hidden: usize,
    pub init_std: f64,
    /// Divisor applied to ETA values in observations.
    pub eta_scale: f64,
    /// Factor applied to every local reward before returns are formed.
    pub reward_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            alpha: 0.9,
            entropy: 0.01,
            beta: 0.5,
            batch_size: 128,
            lr: 1e-3,
            lr_final: 0.0,
            grad_clip: 40.0,
            episodes: 1000,
            obs_hidden: 128,
            fp_hidden: 64,
            lstm_hidden: 64,
            init_std: 0.1,
            eta_scale: 600.0,
            reward_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let unit = |v: f64, f: &str, hi_open: bool| {
            let ok = v >= 0.0 && if hi_open { v < 1.0 } else { v <= 1.0 };
            if ok {
                Ok(())
            } else {
                Err(invalid(format!("train.{f}"), "out of range"))
            }
        };
        unit(self.gamma, "gamma", true)?;
        unit(self.alpha, "alpha", false)?;
        unit(self.beta, "beta", false)?;
        if !(self.entropy >= 0.0) {
            return Err(invalid("train.entropy", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.lr_final >= 0.0) {
            return Err(invalid("train.lr", "learning rates must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(invalid("train.grad_clip", "must be positive"));
        }
        if self.obs_hidden == 0 || self.fp_hidden == 0 || self.lstm_hidden == 0 {
            return Err(invalid("train.lstm_hidden", "layer widths must be positive"));
        }
        if !(self.eta_scale > 0.0) {
            return Err(invalid("train.eta_scale", "must be positive"));
        }
        if !(self.reward_scale > 0.0) {
            return Err(invalid("train.reward_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Raw file contents, serializable for round trips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub network: NetworkSection,
    pub sim: SimConfig,
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
    pub emv: EmvDispatch,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<ScenarioFile, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        let network = self.network.build()?;
        let n = network.node_count();
        let sim = &self.sim;
        if !(sim.horizon_s > 0.0) {
            return Err(invalid("sim.horizon_s", "must be positive"));
        }
        if let Some(m) = sim.max_episode_s {
            if m < sim.horizon_s {
                return Err(invalid("sim.max_episode_s", "must not be shorter than the horizon"));
            }
        }
        if !(sim.saturation_rate > 0.0) {
            return Err(invalid("sim.saturation_rate", "must be positive"));
        }
        if !(sim.max_link_time_s > 0.0) {
            return Err(invalid("sim.max_link_time_s", "must be positive"));
        }
        for (i, f) in self.flows.iter().enumerate() {
            let field = |s: &str| format!("flows[{i}].{s}");
            if !(f.rate >= 0.0) {
                return Err(invalid(field("rate"), "must be non-negative"));
            }
            if sim.arrivals == ArrivalProcess::Bernoulli && f.rate > 3600.0 {
                return Err(invalid(field("rate"), "Bernoulli arrivals need at most 3600 veh/lane/hr"));
            }
            if !(f.start_s >= 0.0 && f.start_s <= f.end_s && f.end_s <= sim.horizon_s) {
                return Err(invalid(field("end_s"), "interval must lie within [0, horizon_s]"));
            }
            if f.random_od == !f.od.is_empty() {
                return Err(invalid(field("od"), "give either od pairs or random_od = true"));
            }
            if f.lanes == 0 {
                return Err(invalid(field("lanes"), "must be at least 1"));
            }
            for &(o, d) in &f.od {
                if o >= n || d >= n {
                    return Err(invalid(field("od"), format!("unknown intersection in ({o}, {d})")));
                }
                if o == d {
                    return Err(invalid(field("od"), format!("origin equals destination ({o})")));
                }
                if !network.reachable(o, d) {
                    return Err(invalid(field("od"), format!("destination unreachable from {o} to {d}")));
                }
            }
        }
        let emv = &self.emv;
        if emv.origin >= n {
            return Err(invalid("emv.origin", "unknown intersection"));
        }
        if emv.destination >= n {
            return Err(invalid("emv.destination", "unknown intersection"));
        }
        if emv.origin == emv.destination {
            return Err(invalid("emv.destination", "must differ from the origin"));
        }
        if !network.reachable(emv.origin, emv.destination) {
            return Err(invalid(
                "emv.destination",
                format!("destination unreachable from intersection {}", emv.origin),
            ));
        }
        if !(emv.dispatch_s >= 0.0 && emv.dispatch_s < sim.horizon_s) {
            return Err(invalid("emv.dispatch_s", "must lie within [0, horizon_s)"));
        }
        self.train.validate()?;
        Ok(Scenario {
            name: self.name.clone(),
            network,
            sim: self.sim.clone(),
            flows: self.flows.clone(),
            emv: self.emv.clone(),
            train: self.train.clone(),
            source: self.clone(),
        })
    }
}

/// A validated scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub network: Network,
    pub sim: SimConfig,
    pub flows: Vec<FlowSpec>,
    pub emv: EmvDispatch,
    pub train: TrainConfig,
    pub source: ScenarioFile,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        ScenarioFile::parse(text)?.build()
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.source.to_toml().as_bytes()))
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut s = Scenario::parse(&text)?;
    if s.name.is_empty() {
        s.name = path
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(s)
}
