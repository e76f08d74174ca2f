//! Finite-difference verification of the hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::nn::{LstmState, NetShape, RecurrentNet};
use super::{policy_loss_at, policy_loss_grad, value_loss_at, value_loss_grad, Sequence};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Value,
    Policy,
}

/// Outcome of one (parameters, batch) fixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub kind: LossKind,
    pub params: usize,
    pub steps: usize,
    /// `|g - g_fd| / max(|g|, |g_fd|)` over the whole parameter vector.
    pub rel_error: f64,
    /// Largest per-coordinate absolute difference.
    pub max_abs_diff: f64,
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` around `params`.
pub fn numeric_gradient(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let x = p[k];
            p[k] = x + h;
            let up = f(&p);
            p[k] = x - h;
            let down = f(&p);
            p[k] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_fixture(rng: &mut ChaCha8Rng, out_dim: usize) -> (RecurrentNet, Sequence, LstmState) {
    let fp_dim = if rng.gen_bool(0.5) { 2 * out_dim } else { 0 };
    let shape = NetShape {
        obs_dim: rng.gen_range(2..6),
        fp_dim,
        obs_hidden: rng.gen_range(2..5),
        fp_hidden: if fp_dim > 0 { rng.gen_range(2..4) } else { 0 },
        lstm: rng.gen_range(2..5),
        out_dim,
    };
    let mut net = RecurrentNet::new(shape, 0.5, false, rng);
    // biases start at zero; perturb them so their gradients are exercised
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for p in net.params.iter_mut() {
        if *p == 0.0 {
            *p = noise.sample(rng);
        }
    }
    let steps = rng.gen_range(3..7);
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let mut seq = Sequence::default();
    for t in 0..steps {
        let obs = (0..shape.obs_dim).map(|_| unit.sample(rng)).collect();
        let fp = (0..fp_dim).map(|_| rng.gen::<f64>()).collect();
        // an occasional mid-sequence reset checks the state-zeroing path
        seq.push(obs, fp, t == 2 && rng.gen_bool(0.3));
    }
    let init = LstmState {
        h: (0..shape.lstm).map(|_| 0.5 * unit.sample(rng)).collect(),
        c: (0..shape.lstm).map(|_| 0.5 * unit.sample(rng)).collect(),
    };
    (net, seq, init)
}

/// Runs `count` random fixtures of each loss and reports their errors.
pub fn run_fixtures(count: usize, seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let (net, seq, init) = random_fixture(&mut rng, 1);
        let returns: Vec<f64> = (0..seq.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, analytic) = value_loss_grad(&net, &seq, &init, &returns).expect("consistent fixture");
        let numeric = numeric_gradient(&net.params, FD_STEP, |p| value_loss_at(&net, p, &seq, &init, &returns));
        out.push(summary(LossKind::Value, &analytic, &numeric, seq.len()));

        let n_act = rng.gen_range(2..6);
        let (net, seq, init) = random_fixture(&mut rng, n_act);
        let actions: Vec<usize> = (0..seq.len()).map(|_| rng.gen_range(0..n_act)).collect();
        let adv: Vec<f64> = (0..seq.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let entropy = rng.gen_range(0.01..0.5);
        let (_, analytic) = policy_loss_grad(&net, &seq, &init, &actions, &adv, entropy).expect("consistent fixture");
        let numeric = numeric_gradient(&net.params, FD_STEP, |p| {
            policy_loss_at(&net, p, &seq, &init, &actions, &adv, entropy)
        });
        out.push(summary(LossKind::Policy, &analytic, &numeric, seq.len()));
    }
    out
}

fn summary(kind: LossKind, analytic: &[f64], numeric: &[f64], steps: usize) -> GradCheck {
    GradCheck {
        kind,
        params: analytic.len(),
        steps,
        rel_error: relative_error(analytic, numeric),
        max_abs_diff: analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
    }
}
