//! Two-branch recurrent network with manual backpropagation through time.
//!
//! obs -> FC + ReLU ┐
//!                  ├─ concat -> LSTM -> linear head
//! fp  -> FC + ReLU ┘
//!
//! All parameters live in one flat vector so the optimizer and the gradient
//! checks can treat them uniformly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{input} width mismatch: expected {expected}, got {got}")]
    Width {
        input: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub obs_dim: usize,
    /// Zero removes the fingerprint branch.
    pub fp_dim: usize,
    pub obs_hidden: usize,
    pub fp_hidden: usize,
    pub lstm: usize,
    pub out_dim: usize,
}

impl NetShape {
    pub fn uses_fingerprint(&self) -> bool {
        self.fp_dim > 0
    }

    fn fp_width(&self) -> usize {
        if self.uses_fingerprint() {
            self.fp_hidden
        } else {
            0
        }
    }

    pub fn lstm_input(&self) -> usize {
        self.obs_hidden + self.fp_width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wx: usize,
    wh: usize,
    bl: usize,
    wo: usize,
    bo: usize,
    len: usize,
}

impl Offsets {
    fn new(s: &NetShape) -> Offsets {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let g = 4 * s.lstm;
        let w1 = take(s.obs_hidden * s.obs_dim);
        let b1 = take(s.obs_hidden);
        let w2 = take(s.fp_width() * s.fp_dim);
        let b2 = take(s.fp_width());
        let wx = take(g * s.lstm_input());
        let wh = take(g * s.lstm);
        let bl = take(g);
        let wo = take(s.out_dim * s.lstm);
        let bo = take(s.out_dim);
        Offsets {
            w1,
            b1,
            w2,
            b2,
            wx,
            wh,
            bl,
            wo,
            bo,
            len: at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(n: usize) -> LstmState {
        LstmState {
            h: vec![0.0; n],
            c: vec![0.0; n],
        }
    }
}

/// Intermediate values of one forward step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    a1: Vec<f64>,
    a2: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations in order input, forget, candidate, output.
    gates: Vec<f64>,
    tc: Vec<f64>,
    h: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y += W x` for row-major `W` of shape `y.len() x x.len()`.
fn gemv_acc(w: &[f64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        let mut s = 0.0;
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        *yr += s;
    }
}

/// `x += W^T y`.
fn gemv_t_acc(w: &[f64], y: &[f64], x: &mut [f64]) {
    let n = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * n..(r + 1) * n];
        for (xi, a) in x.iter_mut().zip(row) {
            *xi += a * yr;
        }
    }
}

/// `G += y x^T`.
fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let n = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &mut g[r * n..(r + 1) * n];
        for (gi, xi) in row.iter_mut().zip(x) {
            *gi += yr * xi;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentNet {
    shape: NetShape,
    off: Offsets,
    pub params: Vec<f64>,
}

impl RecurrentNet {
    /// Weights drawn from N(0, init_std); biases zero. With `zero_head` the
    /// output layer starts at zero (uniform softmax for policies).
    pub fn new<R: Rng>(shape: NetShape, init_std: f64, zero_head: bool, rng: &mut R) -> RecurrentNet {
        let off = Offsets::new(&shape);
        let mut params = vec![0.0; off.len];
        let normal = Normal::new(0.0, init_std).expect("finite std");
        let mut fill = |range: std::ops::Range<usize>, params: &mut Vec<f64>| {
            for p in &mut params[range] {
                *p = normal.sample(rng);
            }
        };
        fill(off.w1..off.b1, &mut params);
        fill(off.w2..off.b2, &mut params);
        fill(off.wx..off.wh, &mut params);
        fill(off.wh..off.bl, &mut params);
        if !zero_head {
            fill(off.wo..off.bo, &mut params);
        }
        RecurrentNet { shape, off, params }
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn param_count(&self) -> usize {
        self.off.len
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState::zeros(self.shape.lstm)
    }

    fn check(&self, obs: &[f64], fp: &[f64]) -> Result<(), NnError> {
        if obs.len() != self.shape.obs_dim {
            return Err(NnError::Width {
                input: "observation",
                expected: self.shape.obs_dim,
                got: obs.len(),
            });
        }
        if fp.len() != self.shape.fp_dim {
            return Err(NnError::Width {
                input: "fingerprint",
                expected: self.shape.fp_dim,
                got: fp.len(),
            });
        }
        Ok(())
    }

    /// One recurrent step.
    pub fn step(&self, obs: &[f64], fp: &[f64], state: &LstmState) -> Result<(Vec<f64>, LstmState, StepCache), NnError> {
        self.check(obs, fp)?;
        Ok(self.step_unchecked(&self.params, obs, fp, state))
    }

    fn step_unchecked(&self, p: &[f64], obs: &[f64], fp: &[f64], state: &LstmState) -> (Vec<f64>, LstmState, StepCache) {
        let s = &self.shape;
        let o = &self.off;
        let hsz = s.lstm;

        let mut a1 = p[o.b1..o.b1 + s.obs_hidden].to_vec();
        gemv_acc(&p[o.w1..o.b1], obs, &mut a1);
        a1.iter_mut().for_each(|v| *v = v.max(0.0));

        let fw = s.fp_width();
        let mut a2 = p[o.b2..o.b2 + fw].to_vec();
        if fw > 0 {
            gemv_acc(&p[o.w2..o.b2], fp, &mut a2);
            a2.iter_mut().for_each(|v| *v = v.max(0.0));
        }

        let mut u = Vec::with_capacity(s.lstm_input());
        u.extend_from_slice(&a1);
        u.extend_from_slice(&a2);

        let mut z = p[o.bl..o.bl + 4 * hsz].to_vec();
        gemv_acc(&p[o.wx..o.wh], &u, &mut z);
        gemv_acc(&p[o.wh..o.bl], &state.h, &mut z);

        let mut gates = z;
        for k in 0..hsz {
            gates[k] = sigmoid(gates[k]);
            gates[hsz + k] = sigmoid(gates[hsz + k]);
            gates[2 * hsz + k] = gates[2 * hsz + k].tanh();
            gates[3 * hsz + k] = sigmoid(gates[3 * hsz + k]);
        }
        let mut c = vec![0.0; hsz];
        let mut tc = vec![0.0; hsz];
        let mut h = vec![0.0; hsz];
        for k in 0..hsz {
            c[k] = gates[hsz + k] * state.c[k] + gates[k] * gates[2 * hsz + k];
            tc[k] = c[k].tanh();
            h[k] = gates[3 * hsz + k] * tc[k];
        }

        let mut out = p[o.bo..o.bo + s.out_dim].to_vec();
        gemv_acc(&p[o.wo..o.bo], &h, &mut out);

        let cache = StepCache {
            a1,
            a2,
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            gates,
            tc,
            h: h.clone(),
        };
        (out, LstmState { h, c }, cache)
    }

    /// Runs a sequence from `init`. Where `resets[t]` is set the state is
    /// zeroed before step `t`.
    pub fn forward_seq(
        &self,
        obs: &[Vec<f64>],
        fp: &[Vec<f64>],
        resets: &[bool],
        init: &LstmState,
    ) -> Result<(Vec<Vec<f64>>, Vec<StepCache>, LstmState), NnError> {
        self.forward_seq_with(&self.params, obs, fp, resets, init)
    }

    fn forward_seq_with(
        &self,
        p: &[f64],
        obs: &[Vec<f64>],
        fp: &[Vec<f64>],
        resets: &[bool],
        init: &LstmState,
    ) -> Result<(Vec<Vec<f64>>, Vec<StepCache>, LstmState), NnError> {
        let mut state = init.clone();
        let mut outs = Vec::with_capacity(obs.len());
        let mut caches = Vec::with_capacity(obs.len());
        for t in 0..obs.len() {
            self.check(&obs[t], &fp[t])?;
            if resets[t] {
                state = self.initial_state();
            }
            let (out, next, cache) = self.step_unchecked(p, &obs[t], &fp[t], &state);
            outs.push(out);
            caches.push(cache);
            state = next;
        }
        Ok((outs, caches, state))
    }

    /// Outputs of a sequence under an explicit parameter vector (for
    /// finite-difference checks).
    pub fn outputs_with(&self, params: &[f64], obs: &[Vec<f64>], fp: &[Vec<f64>], resets: &[bool], init: &LstmState) -> Vec<Vec<f64>> {
        self.forward_seq_with(params, obs, fp, resets, init)
            .expect("widths checked by caller")
            .0
    }

    /// Gradient of a loss with respect to the parameters, given the loss
    /// gradient for every step's output. The initial state is treated as a
    /// constant.
    pub fn backward_seq(&self, obs: &[Vec<f64>], fp: &[Vec<f64>], resets: &[bool], caches: &[StepCache], douts: &[Vec<f64>]) -> Vec<f64> {
        let s = &self.shape;
        let o = &self.off;
        let p = &self.params;
        let hsz = s.lstm;
        let fw = s.fp_width();
        let mut g = vec![0.0; o.len];
        let mut dh_next = vec![0.0; hsz];
        let mut dc_next = vec![0.0; hsz];
        let mut u = vec![0.0; s.lstm_input()];
        let mut dz = vec![0.0; 4 * hsz];
        for t in (0..caches.len()).rev() {
            let cache = &caches[t];
            let dout = &douts[t];
            // head
            outer_acc(&mut g[o.wo..o.bo], dout, &cache.h);
            for (gb, d) in g[o.bo..o.bo + s.out_dim].iter_mut().zip(dout) {
                *gb += d;
            }
            let mut dh = dh_next.clone();
            gemv_t_acc(&p[o.wo..o.bo], dout, &mut dh);
            // cell
            let gates = &cache.gates;
            let mut dc_prev = vec![0.0; hsz];
            for k in 0..hsz {
                let (ig, fg, cg, og) = (gates[k], gates[hsz + k], gates[2 * hsz + k], gates[3 * hsz + k]);
                let tc = cache.tc[k];
                let d_o = dh[k] * tc;
                let dc = dh[k] * og * (1.0 - tc * tc) + dc_next[k];
                let d_i = dc * cg;
                let d_g = dc * ig;
                let d_f = dc * cache.c_prev[k];
                dc_prev[k] = dc * fg;
                dz[k] = d_i * ig * (1.0 - ig);
                dz[hsz + k] = d_f * fg * (1.0 - fg);
                dz[2 * hsz + k] = d_g * (1.0 - cg * cg);
                dz[3 * hsz + k] = d_o * og * (1.0 - og);
            }
            u[..s.obs_hidden].copy_from_slice(&cache.a1);
            u[s.obs_hidden..].copy_from_slice(&cache.a2);
            outer_acc(&mut g[o.wx..o.wh], &dz, &u);
            outer_acc(&mut g[o.wh..o.bl], &dz, &cache.h_prev);
            for (gb, d) in g[o.bl..o.bl + 4 * hsz].iter_mut().zip(&dz) {
                *gb += d;
            }
            let mut du = vec![0.0; s.lstm_input()];
            gemv_t_acc(&p[o.wx..o.wh], &dz, &mut du);
            let mut dh_prev = vec![0.0; hsz];
            gemv_t_acc(&p[o.wh..o.bl], &dz, &mut dh_prev);
            // branches
            let mut dz1: Vec<f64> = du[..s.obs_hidden].to_vec();
            for (d, a) in dz1.iter_mut().zip(&cache.a1) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            outer_acc(&mut g[o.w1..o.b1], &dz1, &obs[t]);
            for (gb, d) in g[o.b1..o.b1 + s.obs_hidden].iter_mut().zip(&dz1) {
                *gb += d;
            }
            if fw > 0 {
                let mut dz2: Vec<f64> = du[s.obs_hidden..].to_vec();
                for (d, a) in dz2.iter_mut().zip(&cache.a2) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
                outer_acc(&mut g[o.w2..o.b2], &dz2, &fp[t]);
                for (gb, d) in g[o.b2..o.b2 + fw].iter_mut().zip(&dz2) {
                    *gb += d;
                }
            }
            if resets[t] {
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                dc_next.iter_mut().for_each(|v| *v = 0.0);
            } else {
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(fp: usize) -> NetShape {
        NetShape {
            obs_dim: 5,
            fp_dim: fp,
            obs_hidden: 6,
            fp_hidden: 3,
            lstm: 4,
            out_dim: 3,
        }
    }

    #[test]
    fn parameter_count() {
        let net = RecurrentNet::new(shape(4), 0.1, false, &mut ChaCha8Rng::seed_from_u64(0));
        let expect = 6 * 5 + 6 + 3 * 4 + 3 + 16 * 9 + 16 * 4 + 16 + 3 * 4 + 3;
        assert_eq!(net.param_count(), expect);
        let nofp = RecurrentNet::new(shape(0), 0.1, false, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(nofp.param_count(), 6 * 5 + 6 + 16 * 6 + 16 * 4 + 16 + 3 * 4 + 3);
    }

    #[test]
    fn zero_head_outputs_zero() {
        let net = RecurrentNet::new(shape(4), 0.1, true, &mut ChaCha8Rng::seed_from_u64(3));
        let (out, _, _) = net.step(&[0.3; 5], &[0.25; 4], &net.initial_state()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_rejected() {
        let net = RecurrentNet::new(shape(4), 0.1, false, &mut ChaCha8Rng::seed_from_u64(3));
        let err = net.step(&[0.0; 4], &[0.0; 4], &net.initial_state()).unwrap_err();
        assert!(matches!(err, NnError::Width { input: "observation", .. }));
        let err = net.step(&[0.0; 5], &[0.0; 3], &net.initial_state()).unwrap_err();
        assert!(matches!(err, NnError::Width { input: "fingerprint", .. }));
    }

    #[test]
    fn reset_flag_matches_fresh_state() {
        let net = RecurrentNet::new(shape(4), 0.5, false, &mut ChaCha8Rng::seed_from_u64(9));
        let obs = vec![vec![0.1, -0.2, 0.3, 0.4, 0.5], vec![0.5, 0.1, -0.3, 0.0, 0.2]];
        let fp = vec![vec![0.25; 4]; 2];
        let (a, _, _) = net.forward_seq(&obs, &fp, &[false, true], &net.initial_state()).unwrap();
        let (b, _, _) = net.forward_seq(&obs[1..], &fp[1..], &[false], &net.initial_state()).unwrap();
        assert_eq!(a[1], b[0]);
    }
}
