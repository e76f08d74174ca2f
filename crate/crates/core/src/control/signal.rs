//! Non-learning signal controllers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ControlError, SignalController};
use crate::net::PhaseId;
use crate::pressure::phase_pressure;
use crate::sim::{Simulator, STEP_S};

/// Cyclic phases with a per-intersection random offset.
#[derive(Clone, Debug, Default)]
pub struct FixedTime {
    /// Decision steps each phase is held, per intersection. Empty means one
    /// step for every phase.
    split: Option<Vec<Vec<u32>>>,
    offsets: Vec<u64>,
}

impl FixedTime {
    pub fn new() -> FixedTime {
        FixedTime::default()
    }

    /// Uses `split[i][p]` steps of phase `p` at intersection `i`.
    pub fn with_split(split: Vec<Vec<u32>>) -> FixedTime {
        FixedTime {
            split: Some(split),
            offsets: Vec::new(),
        }
    }

    /// Fixes the offsets instead of drawing them.
    pub fn with_offsets(mut self, offsets_s: Vec<u64>) -> FixedTime {
        self.offsets = offsets_s.into_iter().map(|o| o / STEP_S as u64).collect();
        self
    }

    fn cycle(&self, sim: &Simulator, node: usize) -> Vec<u32> {
        match &self.split {
            Some(s) => s[node].clone(),
            None => vec![1; sim.network().intersection(node).phase_count()],
        }
    }

    /// Phase shown at `node` after `step` decision steps.
    pub fn phase_at(&self, sim: &Simulator, node: usize, step: u64) -> PhaseId {
        let cycle = self.cycle(sim, node);
        let total: u64 = cycle.iter().map(|&c| c as u64).sum();
        let mut k = (step + self.offsets[node]) % total;
        for (p, &len) in cycle.iter().enumerate() {
            if k < len as u64 {
                return p;
            }
            k -= len as u64;
        }
        unreachable!("cycle position inside the cycle")
    }
}

impl SignalController for FixedTime {
    fn name(&self) -> &'static str {
        "fixed_time"
    }

    fn reset(&mut self, sim: &Simulator, rng: &mut ChaCha8Rng) -> Result<(), ControlError> {
        let net = sim.network();
        if let Some(split) = &self.split {
            if split.len() != net.node_count() {
                return Err(ControlError::Split(format!("{} intersections, split has {}", net.node_count(), split.len())));
            }
            for (i, s) in split.iter().enumerate() {
                let n = net.intersection(i).phase_count();
                if s.len() != n || s.iter().any(|&x| x == 0) {
                    return Err(ControlError::Split(format!("intersection {i} needs {n} positive entries")));
                }
            }
        }
        if self.offsets.len() != net.node_count() {
            self.offsets = (0..net.node_count())
                .map(|i| {
                    let total: u32 = self.cycle(sim, i).iter().sum();
                    rng.gen_range(0..total as u64)
                })
                .collect();
        }
        Ok(())
    }

    fn decide(&mut self, sim: &Simulator) -> Vec<PhaseId> {
        let step = (sim.clock() / STEP_S).round() as u64;
        (0..sim.network().node_count()).map(|i| self.phase_at(sim, i, step)).collect()
    }
}

/// Phase with the largest movement pressure, ties to the lowest id.
#[derive(Clone, Debug, Default)]
pub struct MaxPressure;

impl MaxPressure {
    pub fn choose(sim: &Simulator, counts: &[u32], node: usize) -> PhaseId {
        let net = sim.network();
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for p in 0..net.intersection(node).phase_count() {
            let v = phase_pressure(net, counts, node, p);
            if v > best_p + 1e-12 {
                best = p;
                best_p = v;
            }
        }
        best
    }
}

impl SignalController for MaxPressure {
    fn name(&self) -> &'static str {
        "max_pressure"
    }

    fn reset(&mut self, _sim: &Simulator, _rng: &mut ChaCha8Rng) -> Result<(), ControlError> {
        Ok(())
    }

    fn decide(&mut self, sim: &Simulator) -> Vec<PhaseId> {
        let counts = sim.lane_counts();
        (0..sim.network().node_count()).map(|i| MaxPressure::choose(sim, &counts, i)).collect()
    }
}
