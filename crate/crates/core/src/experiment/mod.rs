//! Evaluation runs, benchmark combos, ablations and their artifacts.

pub mod commands;
pub mod io;

use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{green_wave, make_controller, make_router, ControlError, Decentralized, EmvRouter, RlController, SignalController};
use crate::ma2c::{TrainError, Trainer};
use crate::net::{LinkId, NodeId};
use crate::scenario::Scenario;
use crate::sim::{Event, Metrics, SimError, Simulator};

/// Environment variable overriding the number of worker threads.
pub const WORKERS_ENV: &str = "GREENPATH_WORKERS";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown combo `{0}`; valid: {valid}", valid = COMBOS.join(", "))]
    UnknownCombo(String),
    #[error("unknown ablation `{0}`; valid: {valid}", valid = ABLATIONS.join(", "))]
    UnknownAblation(String),
    #[error("combo `emvlight` needs a trained checkpoint")]
    MissingCheckpoint,
    #[error("output directory {0} already exists; pass --force to overwrite")]
    OutputExists(String),
    #[error("checkpoint was trained on scenario {expected}, not {got}")]
    ScenarioMismatch { expected: String, got: String },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Checkpoint(#[from] crate::ma2c::checkpoint::CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// EMV position after one decision step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRow {
    pub time_s: f64,
    pub link: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub pos_m: f64,
    pub speed: f64,
    pub lane_formed: bool,
    /// Router's ETA from the intersection ahead, when it keeps a table.
    pub eta_s: Option<f64>,
    pub next: Option<NodeId>,
}

/// One evaluated episode.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub metrics: Metrics,
    pub route: Vec<RouteRow>,
    pub events: Vec<Event>,
    pub replans: usize,
}

/// A full traffic-management method: signals plus EMV routing.
pub trait Strategy: Send + Sync {
    fn name(&self) -> &str;

    /// Whether the EMV trip is part of the episode.
    fn has_emv(&self) -> bool {
        true
    }

    fn build(&self) -> Result<(Box<dyn SignalController>, Box<dyn EmvRouter>, bool), ExperimentError>;

    fn run(&self, scenario: &Scenario, seed: u64, record: bool) -> Result<RunOutcome, ExperimentError> {
        let (mut controller, mut router, preempt) = self.build()?;
        let mut sim = Simulator::new(scenario, seed);
        if !self.has_emv() {
            sim = sim.without_emv();
        }
        if record {
            sim.enable_events();
        }
        run_episode(&mut sim, controller.as_mut(), router.as_mut(), preempt, seed, record)
    }
}

/// Drives one episode to completion.
pub fn run_episode(
    sim: &mut Simulator,
    controller: &mut dyn SignalController,
    router: &mut dyn EmvRouter,
    preempt: bool,
    seed: u64,
    record: bool,
) -> Result<RunOutcome, ExperimentError> {
    // offsets and other controller randomness stay apart from traffic draws
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0FF5_E7C0_17A1);
    controller.reset(sim, &mut rng)?;
    let mut route = Vec::new();
    let mut events = Vec::new();
    while !sim.is_done() {
        router.before_step(sim);
        let mut phases = controller.decide_routed(sim, router);
        if preempt {
            green_wave(sim, router, &mut phases);
        }
        sim.step(&phases, router)?;
        router.after_step(sim);
        if record {
            events.extend(sim.take_events());
            let emv = sim.emv();
            if let (true, Some(link)) = (emv.is_active(), emv.link) {
                let spec = sim.network().link(link);
                route.push(RouteRow {
                    time_s: sim.clock(),
                    link,
                    from: spec.from,
                    to: spec.to,
                    pos_m: emv.pos_m,
                    speed: emv.speed,
                    lane_formed: sim.link_emv_speed(link).1,
                    eta_s: router.table().map(|t| t.eta[spec.to]),
                    next: router.next_hop(spec.to),
                });
            }
        }
    }
    Ok(RunOutcome {
        seed,
        metrics: sim.metrics(),
        route,
        events,
        replans: router.replans(),
    })
}

/// Benchmark combos in report order.
pub const COMBOS: &[&str] = &["ft_no_emv", "w_static_ft", "w_static_mp", "w_dynamic_ft", "w_dynamic_mp", "emvlight"];

/// Fixed controller and router pairing.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub name: &'static str,
    pub controller: &'static str,
    pub router: &'static str,
    pub preempt: bool,
    pub emv: bool,
}

impl Strategy for Baseline {
    fn name(&self) -> &str {
        self.name
    }

    fn has_emv(&self) -> bool {
        self.emv
    }

    fn build(&self) -> Result<(Box<dyn SignalController>, Box<dyn EmvRouter>, bool), ExperimentError> {
        Ok((make_controller(self.controller)?, make_router(self.router)?, self.preempt))
    }
}

/// Trained agents with decentralized routing and no pre-emption override.
#[derive(Clone, Debug)]
pub struct EmvLight {
    pub name: String,
    pub trainer: Trainer,
}

impl Strategy for EmvLight {
    fn name(&self) -> &str {
        &self.name
    }

    fn build(&self) -> Result<(Box<dyn SignalController>, Box<dyn EmvRouter>, bool), ExperimentError> {
        Ok((Box::new(RlController::new(&self.trainer)), Box::new(Decentralized::new()), false))
    }
}

/// Looks up a combo by name. `emvlight` needs trained agents.
pub fn make_strategy(name: &str, trainer: Option<&Trainer>) -> Result<Box<dyn Strategy>, ExperimentError> {
    let b = |name, controller, router, preempt, emv| -> Box<dyn Strategy> {
        Box::new(Baseline {
            name,
            controller,
            router,
            preempt,
            emv,
        })
    };
    Ok(match name {
        "ft_no_emv" => b("ft_no_emv", "fixed_time", "static_astar", false, false),
        "w_static_ft" => b("w_static_ft", "fixed_time", "static_astar", true, true),
        "w_static_mp" => b("w_static_mp", "max_pressure", "static_astar", true, true),
        "w_dynamic_ft" => b("w_dynamic_ft", "fixed_time", "dynamic_astar", true, true),
        "w_dynamic_mp" => b("w_dynamic_mp", "max_pressure", "dynamic_astar", true, true),
        "emvlight" => Box::new(EmvLight {
            name: "emvlight".into(),
            trainer: trainer.ok_or(ExperimentError::MissingCheckpoint)?.clone(),
        }),
        other => return Err(ExperimentError::UnknownCombo(other.into())),
    })
}

/// Ablation switches in report order.
pub const ABLATIONS: &[&str] = &["presslight_reward", "no_secondary", "no_primary", "no_fingerprint"];

/// Training options of an ablation, starting from the full method.
pub fn ablation_options(which: &str, seed: u64) -> Result<crate::ma2c::TrainOptions, ExperimentError> {
    let mut o = crate::ma2c::TrainOptions::new(seed);
    match which {
        "full" => {}
        "presslight_reward" => o.reward.pressure = crate::pressure::PressureKind::PressLight,
        "no_secondary" => o.reward.no_secondary = true,
        "no_primary" => o.reward.no_primary = true,
        "no_fingerprint" => o.fingerprint = false,
        other => return Err(ExperimentError::UnknownAblation(other.into())),
    }
    Ok(o)
}

/// Worker count from the environment, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Applies `f` to every item on up to `workers` threads; results keep item order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let f = &f;
    let mut results: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, x)| (i, f(x)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every item ran")).collect()
}

/// Runs every seed, returning results in seed order.
pub fn run_seeds(
    strategy: &dyn Strategy,
    scenario: &Scenario,
    seeds: &[u64],
    record: bool,
    workers: usize,
) -> Result<Vec<RunOutcome>, ExperimentError> {
    parallel_map(seeds, workers, |&s| strategy.run(scenario, s, record))
        .into_iter()
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

/// Population variance of the last quarter of a series.
pub fn tail_variance(xs: &[f64]) -> Option<f64> {
    let k = xs.len().div_ceil(4);
    if k == 0 {
        return None;
    }
    let tail = &xs[xs.len() - k..];
    let m = tail.iter().sum::<f64>() / k as f64;
    Some(tail.iter().map(|x| (x - m).powi(2)).sum::<f64>() / k as f64)
}

/// Mean and spread of one combo over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub combo: String,
    pub runs: usize,
    pub t_emv_mean: Option<f64>,
    pub t_emv_std: Option<f64>,
    pub t_avg_mean: Option<f64>,
    pub t_avg_std: Option<f64>,
    pub emergency_lanes_mean: Option<f64>,
    /// Runs whose EMV had not arrived when the episode stopped.
    pub censored: usize,
    pub reward_variance: Option<f64>,
}

impl SummaryRow {
    pub fn from_outcomes(combo: &str, has_emv: bool, outcomes: &[RunOutcome]) -> SummaryRow {
        let emv: Vec<f64> = if has_emv {
            outcomes.iter().filter_map(|o| o.metrics.t_emv_or_censored()).collect()
        } else {
            Vec::new()
        };
        let avg: Vec<f64> = outcomes.iter().filter_map(|o| o.metrics.t_avg).collect();
        let lanes: Vec<f64> = if has_emv {
            outcomes.iter().map(|o| o.metrics.emergency_lanes as f64).collect()
        } else {
            Vec::new()
        };
        let (t_emv_mean, t_emv_std) = mean_std(&emv);
        let (t_avg_mean, t_avg_std) = mean_std(&avg);
        SummaryRow {
            combo: combo.into(),
            runs: outcomes.len(),
            t_emv_mean,
            t_emv_std,
            t_avg_mean,
            t_avg_std,
            emergency_lanes_mean: mean_std(&lanes).0,
            censored: if has_emv {
                outcomes.iter().filter(|o| o.metrics.t_emv.is_none()).count()
            } else {
                0
            },
            reward_variance: None,
        }
    }
}
