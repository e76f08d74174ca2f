//! On-policy batch training of all signal agents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::linear_lr;
use super::loss::{greedy_action, sample_action};
use super::nn::LstmState;
use super::{policy_loss_grad, value_loss_grad, Agent, GradError, Sequence};
use crate::agents::{adjusted_reward, agent_layouts, local_return, spatial_weights, EnvConfig, RewardConfig, TrafficEnv};
use crate::scenario::{Scenario, TrainConfig};
use crate::sim::{Metrics, SimError, STEP_S};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {which} loss for agent {agent}")]
    Diverged { which: &'static str, agent: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("checkpoint was trained on a different network ({0})")]
    Mismatch(String),
}

/// Switches that change what is learned, on top of the scenario's `[train]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    pub fingerprint: bool,
    pub reward: RewardConfig,
}

impl TrainOptions {
    pub fn new(seed: u64) -> TrainOptions {
        TrainOptions {
            seed,
            fingerprint: true,
            reward: RewardConfig::default(),
        }
    }
}

/// One learning-curve row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub t_emv: Option<f64>,
    pub t_avg: Option<f64>,
    pub mean_reward: f64,
}

/// Per-step record of one agent inside the current batch.
#[derive(Default)]
struct Track {
    seq: Sequence,
    actions: Vec<usize>,
    values: Vec<f64>,
    init_p: Option<LstmState>,
    init_v: Option<LstmState>,
}

/// Simulation seed of a training episode.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (episode as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub scenario_hash: String,
    pub cfg: TrainConfig,
    pub opts: TrainOptions,
    pub agents: Vec<Agent>,
    pub rng: ChaCha8Rng,
    pub episodes_done: usize,
    pub updates_done: u64,
    /// Updates planned for the whole run; drives the learning-rate decay.
    pub planned_updates: u64,
}

impl Trainer {
    pub fn new(scenario: &Scenario, opts: TrainOptions) -> Trainer {
        let net = &scenario.network;
        let cfg = scenario.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let agents = agent_layouts(net)
            .into_iter()
            .map(|l| Agent::new(l, &cfg, opts.fingerprint, &mut rng))
            .collect();
        let steps = (scenario.sim.horizon_s / STEP_S).ceil() as u64;
        let per_episode = steps.div_ceil(cfg.batch_size.max(1) as u64).max(1);
        Trainer {
            scenario_hash: scenario.hash(),
            planned_updates: per_episode * cfg.episodes as u64,
            cfg,
            opts,
            agents,
            rng,
            episodes_done: 0,
            updates_done: 0,
        }
    }

    /// Sets the run length used by the learning-rate schedule.
    pub fn plan(&mut self, scenario: &Scenario, episodes: usize) {
        let steps = (scenario.sim.horizon_s / STEP_S).ceil() as u64;
        let per_episode = steps.div_ceil(self.cfg.batch_size.max(1) as u64).max(1);
        self.planned_updates = per_episode * episodes as u64;
    }

    fn env(&self, scenario: &Scenario, seed: u64) -> TrafficEnv {
        let cfg = EnvConfig {
            beta: self.cfg.beta,
            eta_scale: self.cfg.eta_scale,
            reward: self.opts.reward,
        };
        TrafficEnv::new(scenario, seed, cfg)
    }

    /// Flat copy of every parameter, for checksums and comparisons.
    pub fn parameters(&self) -> Vec<f64> {
        self.agents
            .iter()
            .flat_map(|a| a.policy.params.iter().chain(&a.value.params).copied())
            .collect()
    }

    pub fn check_network(&self, scenario: &Scenario) -> Result<(), TrainError> {
        let layouts = agent_layouts(&scenario.network);
        if layouts.len() != self.agents.len() || layouts.iter().zip(&self.agents).any(|(l, a)| *l != a.layout) {
            return Err(TrainError::Mismatch(scenario.name.clone()));
        }
        Ok(())
    }

    /// Runs `episodes` more training episodes, calling `on_episode` after each.
    pub fn train(
        &mut self,
        scenario: &Scenario,
        episodes: usize,
        mut on_episode: impl FnMut(&EpisodeRecord),
    ) -> Result<Vec<EpisodeRecord>, TrainError> {
        self.check_network(scenario)?;
        let mut out = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let rec = self.train_episode(scenario)?;
            on_episode(&rec);
            out.push(rec);
        }
        Ok(out)
    }

    fn uniform_fingerprints(&self) -> Vec<Vec<f64>> {
        self.agents
            .iter()
            .map(|a| vec![1.0 / a.layout.n_actions as f64; a.layout.n_actions])
            .collect()
    }

    fn train_episode(&mut self, scenario: &Scenario) -> Result<EpisodeRecord, TrainError> {
        let episode = self.episodes_done;
        let seed = episode_seed(self.opts.seed, episode);
        let mut env = self.env(scenario, seed);
        let weights = spatial_weights(&scenario.network, self.cfg.alpha);
        let n = self.agents.len();
        let mut states: Vec<(LstmState, LstmState)> = self.agents.iter().map(|a| a.initial_state()).collect();
        let mut prev_pi = self.uniform_fingerprints();
        let mut tracks: Vec<Track> = (0..n).map(|_| Track::default()).collect();
        let mut rewards: Vec<Vec<f64>> = Vec::new();
        let mut reward_sum = 0.0;
        let mut reward_count = 0usize;
        let mut first = true;
        loop {
            let obs = env.observe_all();
            let mut pis = Vec::with_capacity(n);
            let mut actions = Vec::with_capacity(n);
            for (i, agent) in self.agents.iter().enumerate() {
                let fp = agent.fingerprint_input(&prev_pi);
                let tr = &mut tracks[i];
                if tr.seq.is_empty() {
                    tr.init_p = Some(states[i].0.clone());
                    tr.init_v = Some(states[i].1.clone());
                }
                let pi = agent.act(&obs[i], &fp, &mut states[i].0).map_err(GradError::from)?;
                let v = agent.evaluate(&obs[i], &fp, &mut states[i].1).map_err(GradError::from)?;
                let a = sample_action(&pi, &mut self.rng);
                tr.seq.push(obs[i].clone(), fp, first);
                tr.actions.push(a);
                tr.values.push(v);
                actions.push(a);
                pis.push(pi);
            }
            first = false;
            let res = env.step(&actions)?;
            reward_sum += res.rewards.iter().sum::<f64>();
            reward_count += res.rewards.len();
            rewards.push(res.rewards);
            prev_pi = pis;
            if rewards.len() >= self.cfg.batch_size || res.done {
                let bootstrap = if res.done {
                    None
                } else {
                    let next_obs = env.observe_all();
                    let mut vs = Vec::with_capacity(n);
                    for (i, agent) in self.agents.iter().enumerate() {
                        let fp = agent.fingerprint_input(&prev_pi);
                        let mut st = states[i].1.clone();
                        vs.push(agent.evaluate(&next_obs[i], &fp, &mut st).map_err(GradError::from)?);
                    }
                    Some(vs)
                };
                self.update(&mut tracks, &rewards, &weights, bootstrap.as_deref())?;
                rewards.clear();
            }
            if res.done {
                break;
            }
        }
        self.episodes_done += 1;
        let m = env.sim().metrics();
        Ok(EpisodeRecord {
            episode,
            seed,
            t_emv: m.t_emv_or_censored(),
            t_avg: m.t_avg,
            mean_reward: if reward_count == 0 { 0.0 } else { reward_sum / reward_count as f64 },
        })
    }

    /// One gradient step for every agent on the collected segment. Returns and
    /// advantages use the values recorded during the rollout, so they depend
    /// only on the parameters that generated the data.
    fn update(
        &mut self,
        tracks: &mut [Track],
        rewards: &[Vec<f64>],
        weights: &[Vec<f64>],
        bootstrap: Option<&[f64]>,
    ) -> Result<(), TrainError> {
        let scale = self.cfg.reward_scale;
        let adjusted: Vec<Vec<f64>> = rewards
            .iter()
            .map(|r| adjusted_reward(r, weights).into_iter().map(|x| x * scale).collect())
            .collect();
        let lr = linear_lr(self.cfg.lr, self.cfg.lr_final, self.updates_done, self.planned_updates);
        let gamma = self.cfg.gamma;
        let entropy = self.cfg.entropy;
        for (i, (agent, tr)) in self.agents.iter_mut().zip(tracks.iter_mut()).enumerate() {
            let len = tr.values.len();
            let returns: Vec<f64> = (0..len)
                .map(|k| {
                    if k + 1 < len {
                        local_return(adjusted[k][i], tr.values[k + 1], gamma, false)
                    } else {
                        match bootstrap {
                            Some(b) => local_return(adjusted[k][i], b[i], gamma, false),
                            None => local_return(adjusted[k][i], 0.0, gamma, true),
                        }
                    }
                })
                .collect();
            let adv: Vec<f64> = returns.iter().zip(&tr.values).map(|(r, v)| r - v).collect();
            let init_v = tr.init_v.take().expect("segment start recorded");
            let init_p = tr.init_p.take().expect("segment start recorded");
            let (lv, mut gv) = value_loss_grad(&agent.value, &tr.seq, &init_v, &returns)?;
            if !lv.is_finite() || gv.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { which: "value", agent: i });
            }
            let (lp, mut gp) = policy_loss_grad(&agent.policy, &tr.seq, &init_p, &tr.actions, &adv, entropy)?;
            if !lp.is_finite() || gp.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { which: "policy", agent: i });
            }
            agent.opt_value.step(&mut agent.value.params, &mut gv, lr);
            agent.opt_policy.step(&mut agent.policy.params, &mut gp, lr);
            tr.seq.clear();
            tr.actions.clear();
            tr.values.clear();
        }
        self.updates_done += 1;
        Ok(())
    }

    /// Greedy rollout without learning.
    pub fn evaluate(&self, scenario: &Scenario, seed: u64) -> Result<Metrics, TrainError> {
        self.check_network(scenario)?;
        let mut policy = GreedyPolicy::new(self.agents.clone());
        let mut env = self.env(scenario, seed);
        while !env.is_done() {
            let obs = env.observe_all();
            let actions = policy.act(&obs)?;
            env.step(&actions)?;
        }
        Ok(env.sim().metrics())
    }
}

/// Stateful greedy controller built from trained agents.
#[derive(Clone, Debug)]
pub struct GreedyPolicy {
    agents: Vec<Agent>,
    states: Vec<LstmState>,
    prev_pi: Vec<Vec<f64>>,
}

impl GreedyPolicy {
    pub fn new(agents: Vec<Agent>) -> GreedyPolicy {
        let mut p = GreedyPolicy {
            agents,
            states: Vec::new(),
            prev_pi: Vec::new(),
        };
        p.reset();
        p
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    /// Policy simplices from the latest `act` call.
    pub fn policies(&self) -> &[Vec<f64>] {
        &self.prev_pi
    }

    /// Fresh recurrent state and uniform fingerprints.
    pub fn reset(&mut self) {
        self.states = self.agents.iter().map(|a| a.policy.initial_state()).collect();
        self.prev_pi = self
            .agents
            .iter()
            .map(|a| vec![1.0 / a.layout.n_actions as f64; a.layout.n_actions])
            .collect();
    }

    /// Phase ids for every intersection from the joint observations.
    pub fn act(&mut self, obs: &[Vec<f64>]) -> Result<Vec<usize>, TrainError> {
        let mut pis = Vec::with_capacity(self.agents.len());
        let mut actions = Vec::with_capacity(self.agents.len());
        for (i, agent) in self.agents.iter().enumerate() {
            let fp = agent.fingerprint_input(&self.prev_pi);
            let pi = agent.act(&obs[i], &fp, &mut self.states[i]).map_err(GradError::from)?;
            actions.push(greedy_action(&pi));
            pis.push(pi);
        }
        self.prev_pi = pis;
        Ok(actions)
    }
}
