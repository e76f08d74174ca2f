//! Lane, intersection and phase pressure.
//!
//! All functions read vehicle counts from a lane-indexed slice, so they work
//! on live simulator state and on hand-built fixtures alike.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{LaneId, Network, NodeId, PhaseId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PressureError {
    #[error("lane {0} has no permissible movement")]
    NoMovement(LaneId),
}

/// Which intersection pressure the rewards use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureKind {
    /// Mean of per-lane pressures.
    #[default]
    Average,
    /// Absolute value of the summed movement pressures.
    PressLight,
}

pub fn density(net: &Network, counts: &[u32], lane: LaneId) -> f64 {
    counts[lane] as f64 / net.lane_link(lane).lane_capacity as f64
}

/// `w(l)`: incoming density minus the lane-count weighted outgoing densities,
/// in absolute value.
pub fn lane_pressure(net: &Network, counts: &[u32], lane: LaneId) -> Result<f64, PressureError> {
    let mut downstream = 0.0;
    let mut any = false;
    for mv in net.lane_movements(lane) {
        any = true;
        let h = net.lane_link(mv.to_lane).lane_count as f64;
        downstream += density(net, counts, mv.to_lane) / h;
    }
    if !any {
        return Err(PressureError::NoMovement(lane));
    }
    Ok((density(net, counts, lane) - downstream).abs())
}

/// `P_i`: average lane pressure over the incoming lanes of `node`.
pub fn intersection_pressure(net: &Network, counts: &[u32], node: NodeId) -> f64 {
    let lanes = &net.intersection(node).incoming_lanes;
    if lanes.is_empty() {
        return 0.0;
    }
    let sum: f64 = lanes
        .iter()
        .map(|&l| lane_pressure(net, counts, l).expect("validated network lanes have movements"))
        .sum();
    sum / lanes.len() as f64
}

/// Signed movement pressures `w*(l, m)` in movement order, and `P*_i`.
pub fn presslight_pressure(net: &Network, counts: &[u32], node: NodeId) -> (Vec<f64>, f64) {
    let per: Vec<f64> = net
        .intersection(node)
        .movements
        .iter()
        .map(|m| density(net, counts, m.from_lane) - density(net, counts, m.to_lane))
        .collect();
    let total = per.iter().sum::<f64>().abs();
    (per, total)
}

/// Sum of `w*` over the movements of `phase`.
pub fn phase_pressure(net: &Network, counts: &[u32], node: NodeId, phase: PhaseId) -> f64 {
    let spec = net.intersection(node);
    spec.phases[phase]
        .movements
        .iter()
        .map(|&mi| {
            let m = &spec.movements[mi];
            density(net, counts, m.from_lane) - density(net, counts, m.to_lane)
        })
        .sum()
}

pub fn pressure(kind: PressureKind, net: &Network, counts: &[u32], node: NodeId) -> f64 {
    match kind {
        PressureKind::Average => intersection_pressure(net, counts, node),
        PressureKind::PressLight => presslight_pressure(net, counts, node).1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_grid, EcMap, GridSpec};

    fn grid3(cap: u32) -> Network {
        let mut s = GridSpec::new(3, 3, 100.0, 2);
        s.lane_capacity = Some(cap);
        build_grid(&s, &EcMap::new()).unwrap()
    }

    #[test]
    fn empty_network_has_zero_pressure() {
        let net = grid3(5);
        let counts = vec![0; net.lane_count()];
        for n in 0..net.node_count() {
            assert_eq!(intersection_pressure(&net, &counts, n), 0.0);
            assert_eq!(presslight_pressure(&net, &counts, n).1, 0.0);
            for p in 0..net.intersection(n).phase_count() {
                assert_eq!(phase_pressure(&net, &counts, n, p), 0.0);
            }
        }
    }

    #[test]
    fn balanced_densities_give_zero_lane_pressure() {
        let net = grid3(10);
        let mut counts = vec![0; net.lane_count()];
        // outer lane of the south approach into the center feeds north and east links
        let inc = net.link_between(7, 4).unwrap();
        let lane = net.link(inc).first_lane + 1;
        counts[lane] = 5;
        let north = net.link_between(4, 1).unwrap();
        for l in net.link(north).lanes() {
            counts[l] = 5;
        }
        // the east link stays empty and carries no weight
        let w = lane_pressure(&net, &counts, lane).unwrap();
        assert!((w - 0.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_densities_zero_presslight() {
        let net = grid3(10);
        let counts = vec![4; net.lane_count()];
        for n in 0..net.node_count() {
            let (per, total) = presslight_pressure(&net, &counts, n);
            assert!(per.iter().all(|&w| w == 0.0));
            assert_eq!(total, 0.0);
        }
    }

    #[test]
    fn congested_north_south_queue_favours_ns_through() {
        let net = grid3(10);
        let mut counts = vec![0; net.lane_count()];
        // queue on the outer lane of the link arriving from the north
        let inc = net.link_between(1, 4).unwrap();
        counts[net.link(inc).first_lane + 1] = 9;
        let spec = net.intersection(4);
        let values: Vec<f64> = (0..spec.phase_count())
            .map(|p| phase_pressure(&net, &counts, 4, p))
            .collect();
        let best = values
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > values[b] { i } else { b });
        // phases 0 (NS through) and 4 (north approach) both serve it equally
        assert_eq!(best, 0);
        assert_eq!(values[0], values[4]);
        for (i, &v) in values.iter().enumerate() {
            if i != 0 && i != 4 {
                assert!(v < values[0]);
            }
        }
    }
}
