//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 7 to 10 train several models on grid3x3 and share them through
//! a lazily built study, so the first of those tests to run pays for all.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use greenpath::control::{make_controller, make_router};
use greenpath::experiment::{
    ablation_options, make_strategy, parallel_map, run_seeds, tail_variance, worker_count, RunOutcome, SummaryRow,
};
use greenpath::ma2c::gradcheck::{run_fixtures, LossKind};
use greenpath::ma2c::{EpisodeRecord, Trainer};
use greenpath::net::{EcMap, GridSpec, Network};
use greenpath::pressure::{lane_pressure, presslight_pressure};
use greenpath::routing::{prepopulate, relax_step, EtaTable};
use greenpath::scenario::{load_scenario, Scenario};
use greenpath::sim::{emv_speed, Simulator};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TRAIN_SEED: u64 = 1;

// written past the harness capture so passing criteria show up too
fn report(n: usize, ok: bool, detail: String) {
    let line = format!("criterion {n}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    load_scenario(&path).unwrap()
}

// 1 -------------------------------------------------------------------------

/// Three-armed junction: a one-lane link arrives from the south and may go
/// straight or right onto two-lane links, so its single lane feeds four lanes.
fn worked_example_network() -> (Network, usize, [usize; 4]) {
    let mut spec = GridSpec::new(3, 3, 100.0, 2);
    spec.lane_capacity = Some(5);
    let mut inputs = spec.link_inputs(&EcMap::new());
    inputs.retain(|l| !(l.from == 4 && l.to == 3));
    for l in inputs.iter_mut() {
        if l.from == 7 && l.to == 4 {
            l.lanes = 1;
        }
    }
    let net = Network::from_links(9, &inputs, None).unwrap();
    let lane = net.link(net.link_between(7, 4).unwrap()).first_lane;
    let north = net.link(net.link_between(4, 1).unwrap()).first_lane;
    let east = net.link(net.link_between(4, 5).unwrap()).first_lane;
    (net, lane, [north, north + 1, east, east + 1])
}

#[test]
fn criterion_1_pressure_worked_example() {
    let (net, lane, out) = worked_example_network();
    let targets: Vec<usize> = net.lane_movements(lane).map(|m| m.to_lane).collect();
    let mut sorted = targets.clone();
    sorted.sort();
    assert_eq!(sorted, out.to_vec(), "the lane must feed exactly the four outgoing lanes");
    let mut counts = vec![0u32; net.lane_count()];
    counts[lane] = 1;
    for (l, c) in out.iter().zip([1, 2, 3, 0]) {
        counts[*l] = c;
    }
    let w = lane_pressure(&net, &counts, lane).unwrap();
    let (per, _) = presslight_pressure(&net, &counts, 4);
    let spec = net.intersection(4);
    let star = spec
        .movements
        .iter()
        .zip(&per)
        .find(|(m, _)| m.from_lane == lane && m.to_lane == out[1])
        .map(|(_, &v)| v)
        .unwrap();
    let ok = (w - 0.4).abs() <= 1e-12 && (star + 0.2).abs() <= 1e-12;
    report(1, ok, format!("w = {w}, w* = {star}"));
    assert!(ok);
}

// 2 -------------------------------------------------------------------------

/// Random grid of at most 49 intersections with some two-way streets removed.
fn random_network(rng: &mut ChaCha8Rng) -> Network {
    loop {
        let rows = rng.gen_range(2..=7);
        let cols = rng.gen_range(2..=7);
        let spec = GridSpec::new(rows, cols, 100.0, rng.gen_range(1..=2));
        let mut inputs = spec.link_inputs(&EcMap::new());
        let drop = rng.gen_range(0.0..0.25);
        let keep: Vec<bool> = inputs.iter().map(|l| l.from < l.to && rng.gen_bool(1.0 - drop)).collect();
        let pairs: Vec<(usize, usize)> = inputs
            .iter()
            .zip(&keep)
            .filter(|(l, &k)| l.from < l.to && !k)
            .map(|(l, _)| (l.from, l.to))
            .collect();
        inputs.retain(|l| !pairs.contains(&(l.from.min(l.to), l.from.max(l.to))));
        for l in inputs.iter_mut() {
            l.length_m = rng.gen_range(50.0..400.0);
        }
        if let Ok(net) = Network::from_links(rows * cols, &inputs, None) {
            return net;
        }
    }
}

fn bellman_ford(net: &Network, t: &[f64], dest: usize) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; net.node_count()];
    d[dest] = 0.0;
    for _ in 0..net.node_count() {
        let mut changed = false;
        for l in &net.links {
            let c = d[l.to] + t[l.id];
            if c < d[l.from] {
                d[l.from] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    d
}

#[test]
fn criterion_2_routing_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let graphs = 120;
    let mut worst_rounds = 0usize;
    let mut failures = Vec::new();
    for g in 0..graphs {
        let net = random_network(&mut rng);
        let n = net.node_count();
        let t: Vec<f64> = (0..net.link_count()).map(|_| rng.gen_range(1.0..100.0)).collect();
        let dest = rng.gen_range(0..n);
        let table = prepopulate(&net, &t, dest);
        let oracle = bellman_ford(&net, &t, dest);
        if table.eta != oracle {
            failures.push(format!("graph {g}: prepopulate differs from Bellman-Ford"));
            continue;
        }
        let mut cur = EtaTable::cold(n, dest);
        let mut rounds = 0;
        while cur.eta != table.eta || cur.next != table.next {
            cur = relax_step(&net, &t, &cur);
            rounds += 1;
            if rounds > n {
                break;
            }
        }
        worst_rounds = worst_rounds.max(rounds);
        if rounds > n {
            failures.push(format!("graph {g}: no fixed point within |V| = {n} rounds"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 30.0;
    report(2, ok, format!("{graphs} graphs, worst {worst_rounds} rounds, {secs:.2} s"));
    assert!(failures.is_empty(), "{failures:?}");
}

// 3 -------------------------------------------------------------------------

#[test]
fn criterion_3_emergency_lane_threshold() {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 4000,
        failure_persistence: None,
        ..Config::default()
    });
    let strat = (1u32..=4, 1u32..=60, 0u32..=40, 0u32..=400);
    let res = runner.run(&strat, |(l, cap, c, n)| {
        let k = l * cap;
        let (s, formed) = emv_speed(n, k, l, c as f64, 3.0, 12.0);
        // n <= k + C - k/l, multiplied through by l
        let expect = (n as i64) * (l as i64) <= (k as i64) * (l as i64) + (c as i64) * (l as i64) - k as i64;
        prop_assert_eq!(formed, expect);
        prop_assert_eq!(s, if expect { 12.0 } else { 3.0 });
        // breakpoint: exact equality forms the lane, one more vehicle does not
        let edge = k + c - cap;
        prop_assert!(emv_speed(edge, k, l, c as f64, 3.0, 12.0).1);
        prop_assert!(!emv_speed(edge + 1, k, l, c as f64, 3.0, 12.0).1);
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    let ok = res.is_ok() && secs < 5.0;
    report(3, ok, format!("4000 cases, {secs:.2} s"));
    res.unwrap();
}

// 4 -------------------------------------------------------------------------

struct Trace {
    vehicles: Vec<greenpath::sim::Vehicle>,
    counts: Vec<Vec<u32>>,
    metrics: Vec<(u64, u64, u64)>,
    violations: usize,
}

fn conservation_run(s: &Scenario, seed: u64, substeps: usize) -> Trace {
    let mut sim = Simulator::new(s, seed);
    let mut controller = make_controller("max_pressure").unwrap();
    let mut router = make_router("dynamic_astar").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    controller.reset(&sim, &mut rng).unwrap();
    let mut trace = Trace {
        vehicles: Vec::new(),
        counts: Vec::new(),
        metrics: Vec::new(),
        violations: 0,
    };
    for i in 0..substeps {
        if i % 5 == 0 {
            router.before_step(&sim);
            let phases = controller.decide_routed(&sim, router.as_ref());
            sim.set_phases(&phases).unwrap();
        }
        sim.substep(router.as_ref());
        if i % 5 == 4 {
            router.after_step(&sim);
        }
        if sim.spawned() != sim.completed() + sim.in_network() {
            trace.violations += 1;
        }
        trace.counts.push(sim.lane_counts());
        trace.metrics.push((sim.spawned(), sim.completed(), sim.deferred()));
    }
    trace.vehicles = sim.vehicles().to_vec();
    trace
}

#[test]
fn criterion_4_conservation_and_determinism() {
    let start = Instant::now();
    let s = scenario("grid5x5_config1");
    let a = conservation_run(&s, 7, 1000);
    let b = conservation_run(&s, 7, 1000);
    let identical = a.vehicles == b.vehicles && a.counts == b.counts && a.metrics == b.metrics;
    let secs = start.elapsed().as_secs_f64();
    let spawned = a.metrics.last().unwrap().0;
    let ok = a.violations == 0 && identical && secs < 60.0 && spawned > 0;
    report(
        4,
        ok,
        format!("{spawned} spawned, {} violations, identical reruns: {identical}, {secs:.2} s", a.violations),
    );
    assert_eq!(a.violations, 0);
    assert!(identical);
}

// 5 -------------------------------------------------------------------------

#[test]
fn criterion_5_gradient_check() {
    let start = Instant::now();
    let checks = run_fixtures(12, 5);
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let policy = checks.iter().filter(|c| c.kind == LossKind::Policy).count();
    let value = checks.len() - policy;
    let min_steps = checks.iter().map(|c| c.steps).min().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = checks.len() >= 20 && worst <= 1e-4 && min_steps >= 3 && secs < 60.0;
    report(
        5,
        ok,
        format!("{value} value + {policy} policy fixtures, worst rel {worst:.2e}, min steps {min_steps}, {secs:.2} s"),
    );
    assert!(ok);
}

// 6 -------------------------------------------------------------------------

#[test]
fn criterion_6_free_flow_green_wave() {
    let start = Instant::now();
    let mut s = scenario("grid5x5_config1");
    s.flows.clear();
    let strategy = make_strategy("w_static_ft", None).unwrap();
    let out = strategy.run(&s, 1, true).unwrap();
    let t = out.metrics.t_emv.expect("EMV arrives");
    let mut length = 0.0;
    let mut last = None;
    for r in &out.route {
        if last != Some(r.link) {
            length += s.network.link(r.link).length_m;
            last = Some(r.link);
        }
    }
    let s_f = s.network.links[0].emv_max_speed;
    let bound = length / s_f;
    let secs = start.elapsed().as_secs_f64();
    let ok = (t - bound).abs() <= 5.0 && secs < 10.0;
    report(6, ok, format!("T_EMV {t:.2} s, route {length} m / {s_f} m/s = {bound:.2} s"));
    assert!(ok);
}

// 7 to 10 -------------------------------------------------------------------

struct Variant {
    curve: Vec<EpisodeRecord>,
    eval: SummaryRow,
}

struct Study {
    full: Variant,
    full_ec: Variant,
    no_primary: Variant,
    no_secondary: Variant,
    presslight: Variant,
    no_fingerprint: Variant,
    dynamic_mp: SummaryRow,
    static_ft: SummaryRow,
    dynamic_mp_ec: SummaryRow,
    train_secs: f64,
}

fn baseline(name: &str, s: &Scenario) -> SummaryRow {
    let strategy = make_strategy(name, None).unwrap();
    let runs: Vec<RunOutcome> = run_seeds(strategy.as_ref(), s, &SEEDS, false, worker_count()).unwrap();
    SummaryRow::from_outcomes(name, true, &runs)
}

fn train_variant(s: &Scenario, which: &str) -> Variant {
    let opts = ablation_options(which, TRAIN_SEED).unwrap();
    let mut trainer = Trainer::new(s, opts);
    let episodes = s.train.episodes;
    trainer.plan(s, episodes);
    let curve = trainer.train(s, episodes, |_| {}).unwrap();
    let strategy = make_strategy("emvlight", Some(&trainer)).unwrap();
    let runs = run_seeds(strategy.as_ref(), s, &SEEDS, false, 1).unwrap();
    Variant {
        curve,
        eval: SummaryRow::from_outcomes(which, true, &runs),
    }
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let start = Instant::now();
        let plain = scenario("grid3x3");
        let ec = scenario("grid3x3_ec");
        let jobs: Vec<(&Scenario, &str)> = vec![
            (&plain, "full"),
            (&ec, "full"),
            (&plain, "no_primary"),
            (&plain, "no_secondary"),
            (&plain, "presslight_reward"),
            (&plain, "no_fingerprint"),
        ];
        let mut trained = parallel_map(&jobs, worker_count(), |(s, w)| train_variant(s, w)).into_iter();
        let mut next = || trained.next().unwrap();
        Study {
            full: next(),
            full_ec: next(),
            no_primary: next(),
            no_secondary: next(),
            presslight: next(),
            no_fingerprint: next(),
            dynamic_mp: baseline("w_dynamic_mp", &plain),
            static_ft: baseline("w_static_ft", &plain),
            dynamic_mp_ec: baseline("w_dynamic_mp", &ec),
            train_secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn emv(r: &SummaryRow) -> f64 {
    r.t_emv_mean.unwrap_or(f64::INFINITY)
}

fn avg(r: &SummaryRow) -> f64 {
    r.t_avg_mean.unwrap_or(f64::INFINITY)
}

#[test]
fn criterion_7_benchmark_ordering() {
    let st = study();
    let (rl, dmp, sft) = (emv(&st.full.eval), emv(&st.dynamic_mp), emv(&st.static_ft));
    let ok = rl < dmp && dmp < sft;
    report(
        7,
        ok,
        format!(
            "T_EMV emvlight {rl:.2} ({} censored), w_dynamic_mp {dmp:.2}, w_static_ft {sft:.2}; study built in {:.0} s",
            st.full.eval.censored, st.train_secs
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_emergency_capacity() {
    let st = study();
    let (rl, rl_ec) = (emv(&st.full.eval), emv(&st.full_ec.eval));
    let (dmp, dmp_ec) = (emv(&st.dynamic_mp), emv(&st.dynamic_mp_ec));
    let lanes_rl = st.full_ec.eval.emergency_lanes_mean.unwrap_or(0.0);
    let lanes_dmp = st.dynamic_mp_ec.emergency_lanes_mean.unwrap_or(0.0);
    let ok = rl_ec < rl && dmp_ec < dmp && lanes_rl >= lanes_dmp;
    report(
        8,
        ok,
        format!(
            "emvlight {rl:.2} -> {rl_ec:.2}, w_dynamic_mp {dmp:.2} -> {dmp_ec:.2}, lanes with EC {lanes_rl:.1} vs {lanes_dmp:.1}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_9_ablation_directions() {
    let st = study();
    let full = &st.full.eval;
    let a = emv(&st.no_primary.eval) > emv(full);
    let b = emv(&st.no_secondary.eval) > emv(full);
    let c = avg(&st.presslight.eval) > avg(full);
    report(
        9,
        a && b && c,
        format!(
            "T_EMV full {:.2}, no_primary {:.2}, no_secondary {:.2}; T_avg full {:.2}, presslight_reward {:.2}",
            emv(full),
            emv(&st.no_primary.eval),
            emv(&st.no_secondary.eval),
            avg(full),
            avg(&st.presslight.eval)
        ),
    );
    assert!(a && b && c);
}

#[test]
fn criterion_10_fingerprint_variance() {
    let st = study();
    let var = |v: &Variant| tail_variance(&v.curve.iter().map(|r| r.mean_reward).collect::<Vec<_>>()).unwrap();
    let (with, without) = (var(&st.full), var(&st.no_fingerprint));
    let ok = with < without;
    report(10, ok, format!("tail reward variance {with:.3e} with fingerprints, {without:.3e} without"));
    assert!(ok);
}
