//! Independent recurrent actor-critic agents with neighbor fingerprints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod trainer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::AgentLayout;
use crate::scenario::TrainConfig;
use adam::Adam;
use loss::{policy_loss, softmax, value_loss, LossError};
use nn::{LstmState, NetShape, NnError, RecurrentNet};

pub use trainer::{EpisodeRecord, GreedyPolicy, TrainError, TrainOptions, Trainer};

/// One signal agent: policy and value networks with their optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub layout: AgentLayout,
    pub fingerprint: bool,
    pub policy: RecurrentNet,
    pub value: RecurrentNet,
    pub opt_policy: Adam,
    pub opt_value: Adam,
}

impl Agent {
    pub fn new<R: Rng>(layout: AgentLayout, cfg: &TrainConfig, fingerprint: bool, rng: &mut R) -> Agent {
        let shape = |out_dim| NetShape {
            obs_dim: layout.obs_dim,
            fp_dim: if fingerprint { layout.fp_dim } else { 0 },
            obs_hidden: cfg.obs_hidden,
            fp_hidden: cfg.fp_hidden,
            lstm: cfg.lstm_hidden,
            out_dim,
        };
        let policy = RecurrentNet::new(shape(layout.n_actions), cfg.init_std, true, rng);
        let value = RecurrentNet::new(shape(1), cfg.init_std, false, rng);
        Agent {
            opt_policy: Adam::new(policy.param_count(), cfg.grad_clip),
            opt_value: Adam::new(value.param_count(), cfg.grad_clip),
            layout,
            fingerprint,
            policy,
            value,
        }
    }

    pub fn initial_state(&self) -> (LstmState, LstmState) {
        (self.policy.initial_state(), self.value.initial_state())
    }

    /// Policy simplex for one step, advancing the recurrent state.
    pub fn act(&self, obs: &[f64], fp: &[f64], state: &mut LstmState) -> Result<Vec<f64>, NnError> {
        let (logits, next, _) = self.policy.step(obs, fp, state)?;
        *state = next;
        Ok(softmax(&logits))
    }

    /// State value for one step, advancing the recurrent state.
    pub fn evaluate(&self, obs: &[f64], fp: &[f64], state: &mut LstmState) -> Result<f64, NnError> {
        let (v, next, _) = self.value.step(obs, fp, state)?;
        *state = next;
        Ok(v[0])
    }

    /// Fingerprint input for this agent from everyone's previous policies.
    pub fn fingerprint_input(&self, prev: &[Vec<f64>]) -> Vec<f64> {
        if !self.fingerprint {
            return Vec::new();
        }
        let mut v = Vec::with_capacity(self.layout.fp_dim);
        for &j in &self.layout.neighbors {
            v.extend_from_slice(&prev[j]);
        }
        v
    }
}

/// Time-contiguous inputs of one agent over a batch segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequence {
    pub obs: Vec<Vec<f64>>,
    pub fp: Vec<Vec<f64>>,
    /// Zero the recurrent state before this step (episode start).
    pub resets: Vec<bool>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f64>, fp: Vec<f64>, reset: bool) {
        self.obs.push(obs);
        self.fp.push(fp);
        self.resets.push(reset);
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.fp.clear();
        self.resets.clear();
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Critic loss over a sequence and its parameter gradient.
pub fn value_loss_grad(net: &RecurrentNet, seq: &Sequence, init: &LstmState, returns: &[f64]) -> Result<(f64, Vec<f64>), GradError> {
    let (outs, caches, _) = net.forward_seq(&seq.obs, &seq.fp, &seq.resets, init)?;
    let values: Vec<f64> = outs.iter().map(|o| o[0]).collect();
    let (loss, dv) = value_loss(&values, returns)?;
    let douts: Vec<Vec<f64>> = dv.into_iter().map(|d| vec![d]).collect();
    Ok((loss, net.backward_seq(&seq.obs, &seq.fp, &seq.resets, &caches, &douts)))
}

/// Critic loss for an arbitrary parameter vector.
pub fn value_loss_at(net: &RecurrentNet, params: &[f64], seq: &Sequence, init: &LstmState, returns: &[f64]) -> f64 {
    let outs = net.outputs_with(params, &seq.obs, &seq.fp, &seq.resets, init);
    let values: Vec<f64> = outs.iter().map(|o| o[0]).collect();
    value_loss(&values, returns).expect("non-empty batch").0
}

/// Actor loss over a sequence and its parameter gradient.
pub fn policy_loss_grad(
    net: &RecurrentNet,
    seq: &Sequence,
    init: &LstmState,
    actions: &[usize],
    advantages: &[f64],
    entropy: f64,
) -> Result<(f64, Vec<f64>), GradError> {
    let (logits, caches, _) = net.forward_seq(&seq.obs, &seq.fp, &seq.resets, init)?;
    let (loss, dz) = policy_loss(&logits, actions, advantages, entropy)?;
    Ok((loss, net.backward_seq(&seq.obs, &seq.fp, &seq.resets, &caches, &dz)))
}

/// Actor loss for an arbitrary parameter vector.
pub fn policy_loss_at(
    net: &RecurrentNet,
    params: &[f64],
    seq: &Sequence,
    init: &LstmState,
    actions: &[usize],
    advantages: &[f64],
    entropy: f64,
) -> f64 {
    let logits = net.outputs_with(params, &seq.obs, &seq.fp, &seq.resets, init);
    policy_loss(&logits, actions, advantages, entropy).expect("non-empty batch").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_grid, EcMap, GridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_policy_is_uniform_and_fingerprint_shrinks_input() {
        let net = build_grid(&GridSpec::new(3, 3, 100.0, 2), &EcMap::new()).unwrap();
        let layouts = crate::agents::agent_layouts(&net);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let with = Agent::new(layouts[4].clone(), &cfg, true, &mut rng);
        let without = Agent::new(layouts[4].clone(), &cfg, false, &mut rng);
        assert_eq!(with.policy.shape().fp_dim, layouts[4].fp_dim);
        assert_eq!(without.policy.shape().fp_dim, 0);
        assert_eq!(
            with.policy.param_count() - without.policy.param_count(),
            cfg.fp_hidden * layouts[4].fp_dim + cfg.fp_hidden + 4 * cfg.lstm_hidden * cfg.fp_hidden
        );
        let obs = vec![0.1; layouts[4].obs_dim];
        let prev: Vec<Vec<f64>> = (0..9).map(|j| vec![1.0 / net.intersection(j).phase_count() as f64; net.intersection(j).phase_count()]).collect();
        let fp = with.fingerprint_input(&prev);
        let mut st = with.policy.initial_state();
        let p = with.act(&obs, &fp, &mut st).unwrap();
        assert_eq!(p.len(), 8);
        assert!(p.iter().all(|&q| (q - 0.125).abs() < 1e-15));
    }
}
