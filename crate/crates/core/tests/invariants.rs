use proptest::prelude::*;

use greenpath::agents::{adjusted_reward, spatial_weights};
use greenpath::control::{make_controller, make_router};
use greenpath::experiment::{mean_std, tail_variance};
use greenpath::net::{build_grid, EcMap, GridSpec};
use greenpath::pressure::{intersection_pressure, presslight_pressure};
use greenpath::routing::{prepopulate, relax_step, EtaTable};
use greenpath::scenario::Scenario;
use greenpath::sim::{emv_speed, Simulator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_scenario(rate: f64, lanes: u32) -> Scenario {
    Scenario::parse(&format!(
        r#"
[network]
kind = "grid"
rows = 3
cols = 3
link_length_m = 120.0
lanes_per_link = {lanes}
lane_capacity = 12

[sim]
horizon_s = 200.0
arrivals = "bernoulli"

[[flows]]
random_od = true
rate = {rate}
start_s = 0.0
end_s = 200.0

[emv]
origin = 0
destination = 8
dispatch_s = 30.0
"#
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn vehicles_are_conserved(seed in 0u64..1000, rate in 0.0f64..1800.0, lanes in 1u32..=2, ctrl in 0usize..2) {
        let s = grid_scenario(rate, lanes);
        let mut sim = Simulator::new(&s, seed);
        let mut c = make_controller(["fixed_time", "max_pressure"][ctrl]).unwrap();
        let mut r = make_router("decentralized").unwrap();
        c.reset(&sim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        while !sim.is_done() {
            r.before_step(&sim);
            let phases = c.decide_routed(&sim, r.as_ref());
            sim.set_phases(&phases).unwrap();
            for _ in 0..5 {
                sim.substep(r.as_ref());
                prop_assert_eq!(sim.spawned(), sim.completed() + sim.in_network());
            }
            r.after_step(&sim);
            for l in 0..sim.network().lane_count() {
                prop_assert!(sim.lane_counts()[l] <= sim.network().lane_link(l).lane_capacity);
            }
        }
    }

    #[test]
    fn pressure_depends_only_on_densities(counts in prop::collection::vec(0u32..=10, 48), m in 1u32..=5) {
        let mut a = GridSpec::new(3, 3, 100.0, 2);
        a.lane_capacity = Some(10);
        let mut b = a.clone();
        b.lane_capacity = Some(10 * m);
        let na = build_grid(&a, &EcMap::new()).unwrap();
        let nb = build_grid(&b, &EcMap::new()).unwrap();
        let ca: Vec<u32> = (0..na.lane_count()).map(|l| counts[l % counts.len()]).collect();
        let cb: Vec<u32> = ca.iter().map(|c| c * m).collect();
        for node in 0..na.node_count() {
            prop_assert!((intersection_pressure(&na, &ca, node) - intersection_pressure(&nb, &cb, node)).abs() < 1e-12);
            prop_assert!((presslight_pressure(&na, &ca, node).1 - presslight_pressure(&nb, &cb, node).1).abs() < 1e-12);
        }
    }

    #[test]
    fn adjusted_rewards_scale_linearly(r in prop::collection::vec(-5.0f64..0.0, 9), c in 0.01f64..100.0, alpha in 0.0f64..1.0) {
        let net = build_grid(&GridSpec::new(3, 3, 100.0, 1), &EcMap::new()).unwrap();
        let w = spatial_weights(&net, alpha);
        let base = adjusted_reward(&r, &w);
        let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
        let after = adjusted_reward(&scaled, &w);
        for (x, y) in base.iter().zip(&after) {
            prop_assert!((x * c - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        for i in 0..9 {
            for j in 0..9 {
                prop_assert_eq!(base[i] < base[j], after[i] < after[j]);
            }
        }
    }

    #[test]
    fn relaxation_never_raises_an_estimate(t in prop::collection::vec(1.0f64..50.0, 24), dest in 0usize..9) {
        let net = build_grid(&GridSpec::new(3, 3, 100.0, 1), &EcMap::new()).unwrap();
        let exact = prepopulate(&net, &t, dest);
        let mut cur = EtaTable::cold(9, dest);
        for _ in 0..9 {
            let next = relax_step(&net, &t, &cur);
            for i in 0..9 {
                prop_assert!(next.eta[i] <= cur.eta[i]);
                prop_assert!(next.eta[i] >= exact.eta[i]);
            }
            cur = next;
        }
        prop_assert_eq!(cur.eta, exact.eta);
    }

    #[test]
    fn more_emergency_capacity_never_removes_a_lane(n in 0u32..200, cap in 1u32..50, l in 1u32..4, c in 0.0f64..40.0, extra in 0.0f64..20.0) {
        let k = cap * l;
        if emv_speed(n, k, l, c, 2.0, 12.0).1 {
            prop_assert!(emv_speed(n, k, l, c + extra, 2.0, 12.0).1);
        }
    }

    #[test]
    fn tail_variance_matches_direct_formula(xs in prop::collection::vec(-10.0f64..10.0, 1..60)) {
        let k = xs.len().div_ceil(4);
        let tail = &xs[xs.len() - k..];
        let m = tail.iter().sum::<f64>() / k as f64;
        let v = tail.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k as f64;
        prop_assert!((tail_variance(&xs).unwrap() - v).abs() < 1e-9);
        let (mean, _) = mean_std(&xs);
        prop_assert!((mean.unwrap() - xs.iter().sum::<f64>() / xs.len() as f64).abs() < 1e-9);
    }
}
