//! Trained agents as a signal controller.

use rand_chacha::ChaCha8Rng;

use super::{ControlError, EmvRouter, SignalController};
use crate::agents::{agent_layouts, classify_roles, joint_observations, AgentLayout};
use crate::ma2c::{GreedyPolicy, Trainer};
use crate::net::PhaseId;
use crate::sim::Simulator;

/// Greedy actions of trained agents, observing through the router's table.
#[derive(Clone, Debug)]
pub struct RlController {
    policy: GreedyPolicy,
    layouts: Vec<AgentLayout>,
    eta_scale: f64,
}

impl RlController {
    pub fn new(trainer: &Trainer) -> RlController {
        RlController {
            layouts: trainer.agents.iter().map(|a| a.layout.clone()).collect(),
            policy: GreedyPolicy::new(trainer.agents.clone()),
            eta_scale: trainer.cfg.eta_scale,
        }
    }
}

impl SignalController for RlController {
    fn name(&self) -> &'static str {
        "emvlight"
    }

    fn reset(&mut self, sim: &Simulator, _rng: &mut ChaCha8Rng) -> Result<(), ControlError> {
        if agent_layouts(sim.network()) != self.layouts {
            return Err(ControlError::Network);
        }
        self.policy.reset();
        Ok(())
    }

    fn decide_routed(&mut self, sim: &Simulator, router: &dyn EmvRouter) -> Vec<PhaseId> {
        let table = router.table();
        let roles = classify_roles(sim, table);
        let obs = joint_observations(sim, table, &roles, &self.layouts, self.eta_scale);
        self.policy.act(&obs).expect("layouts checked at reset")
    }

    fn decide(&mut self, sim: &Simulator) -> Vec<PhaseId> {
        self.decide_routed(sim, &super::emv::Decentralized::new())
    }
}
