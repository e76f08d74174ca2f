//! Signal controllers and EMV routers behind common traits, looked up by name.

pub mod emv;
pub mod rl;
pub mod signal;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::net::{NodeId, PhaseId};
use crate::routing::EtaTable;
use crate::sim::{Navigator, Simulator};

pub use emv::{green_wave, Decentralized, DynamicAStar, StaticAStar, REPLAN_PERIOD_S};
pub use rl::RlController;
pub use signal::{FixedTime, MaxPressure};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("unknown {kind} `{name}`; valid: {valid}")]
    Unknown { kind: &'static str, name: String, valid: String },
    #[error("green split: {0}")]
    Split(String),
    #[error("controller was built for a different network")]
    Network,
}

/// Chooses every intersection's phase once per decision step.
pub trait SignalController {
    fn name(&self) -> &'static str;

    /// Called once before an episode starts.
    fn reset(&mut self, sim: &Simulator, rng: &mut ChaCha8Rng) -> Result<(), ControlError>;

    fn decide(&mut self, sim: &Simulator) -> Vec<PhaseId>;

    /// Like [`decide`](Self::decide), for controllers that read the router.
    fn decide_routed(&mut self, sim: &Simulator, _router: &dyn EmvRouter) -> Vec<PhaseId> {
        self.decide(sim)
    }
}

/// Steers the EMV and keeps whatever routing state it needs.
pub trait EmvRouter: Navigator {
    fn name(&self) -> &'static str;

    fn before_step(&mut self, sim: &Simulator);

    fn after_step(&mut self, sim: &Simulator);

    /// Planned node sequence, for routers that keep one.
    fn route(&self) -> Option<&[NodeId]>;

    /// ETA table, for routers that keep one.
    fn table(&self) -> Option<&EtaTable> {
        None
    }

    fn replans(&self) -> usize {
        0
    }
}

type ControllerFactory = fn() -> Box<dyn SignalController>;
type RouterFactory = fn() -> Box<dyn EmvRouter>;

const CONTROLLERS: &[(&str, ControllerFactory)] = &[
    ("fixed_time", || Box::new(FixedTime::new())),
    ("max_pressure", || Box::new(MaxPressure)),
];

const ROUTERS: &[(&str, RouterFactory)] = &[
    ("static_astar", || Box::new(StaticAStar::new())),
    ("dynamic_astar", || Box::new(DynamicAStar::default())),
    ("decentralized", || Box::new(Decentralized::new())),
];

pub fn controller_names() -> Vec<&'static str> {
    CONTROLLERS.iter().map(|(n, _)| *n).collect()
}

pub fn router_names() -> Vec<&'static str> {
    ROUTERS.iter().map(|(n, _)| *n).collect()
}

pub fn make_controller(name: &str) -> Result<Box<dyn SignalController>, ControlError> {
    CONTROLLERS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| f())
        .ok_or_else(|| ControlError::Unknown {
            kind: "controller",
            name: name.into(),
            valid: controller_names().join(", "),
        })
}

pub fn make_router(name: &str) -> Result<Box<dyn EmvRouter>, ControlError> {
    ROUTERS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| f())
        .ok_or_else(|| ControlError::Unknown {
            kind: "router",
            name: name.into(),
            valid: router_names().join(", "),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;
    use rand::SeedableRng;

    fn scenario(flows: &str) -> Scenario {
        Scenario::parse(&format!(
            r#"
name = "t"
[network]
kind = "grid"
rows = 3
cols = 3
link_length_m = 100.0
lanes_per_link = 2
lane_capacity = 10
[sim]
horizon_s = 300.0
{flows}
[emv]
origin = 3
destination = 5
dispatch_s = 10.0
"#
        ))
        .unwrap()
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(make_controller("max_pressure").unwrap().name(), "max_pressure");
        assert_eq!(make_router("dynamic_astar").unwrap().name(), "dynamic_astar");
        let err = make_controller("colight").err().unwrap().to_string();
        assert!(err.contains("fixed_time") && err.contains("max_pressure"));
    }

    #[test]
    fn fixed_time_cycle_arithmetic() {
        let s = scenario("");
        let sim = Simulator::new(&s, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ft = FixedTime::new().with_offsets(vec![0; 9]);
        ft.reset(&sim, &mut rng).unwrap();
        assert_eq!(ft.phase_at(&sim, 4, 0), 0);
        assert_eq!(ft.phase_at(&sim, 4, 8), 0);
        assert_eq!(ft.phase_at(&sim, 4, 3), 3);
        let mut shifted = FixedTime::new().with_offsets(vec![5; 9]);
        shifted.reset(&sim, &mut rng).unwrap();
        assert_eq!(shifted.phase_at(&sim, 4, 0), 1);
    }

    #[test]
    fn fixed_time_offsets_shift_sequences() {
        let s = scenario("");
        let sim = Simulator::new(&s, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ft = FixedTime::new();
        ft.reset(&sim, &mut rng).unwrap();
        let net = sim.network();
        let n = net.node_count();
        let seq = |i: usize| (0..32).map(|k| ft.phase_at(&sim, i, k)).collect::<Vec<_>>();
        let mut compared = 0;
        for i in 0..n {
            for j in i + 1..n {
                let c = net.intersection(i).phase_count();
                if c != net.intersection(j).phase_count() {
                    continue;
                }
                let (a, b) = (seq(i), seq(j));
                assert!((0..c).any(|d| (0..16).all(|k| a[k] == b[k + d]) || (0..16).all(|k| b[k] == a[k + d])));
                compared += 1;
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn split_must_cover_every_phase() {
        let s = scenario("");
        let sim = Simulator::new(&s, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bad = FixedTime::with_split(vec![vec![1; 7]; 9]);
        assert!(matches!(bad.reset(&sim, &mut rng), Err(ControlError::Split(_))));
        let mut zero = FixedTime::with_split(vec![vec![1, 1, 0, 1, 1, 1, 1, 1]; 9]);
        assert!(zero.reset(&sim, &mut rng).is_err());
    }

    #[test]
    fn max_pressure_on_empty_grid_picks_phase_zero() {
        let s = scenario("");
        let sim = Simulator::new(&s, 1);
        assert!(MaxPressure.decide(&sim).iter().all(|&p| p == 0));
    }
}
