//! Softmax policies, the actor and critic losses and their gradients.

use rand::Rng;
use thiserror::Error;

/// Smallest probability fed to `ln`.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch fields have different lengths")]
    Ragged,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn floored_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Draws an action from a probability simplex.
pub fn sample_action<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Most likely action, ties to the lowest index.
pub fn greedy_action(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// `(1 / 2|B|) sum (R - V)^2` and its gradient with respect to each `V`.
pub fn value_loss(values: &[f64], returns: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    if values.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if values.len() != returns.len() {
        return Err(LossError::Ragged);
    }
    let b = values.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(values.len());
    for (v, r) in values.iter().zip(returns) {
        let d = v - r;
        loss += d * d;
        grad.push(d / b);
    }
    Ok((loss / (2.0 * b), grad))
}

/// `-(1/|B|) sum (ln pi(a) A - lambda sum pi ln pi)` over a batch of logits,
/// with its gradient with respect to the logits.
pub fn policy_loss(
    logits: &[Vec<f64>],
    actions: &[usize],
    advantages: &[f64],
    entropy: f64,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if logits.len() != actions.len() || logits.len() != advantages.len() {
        return Err(LossError::Ragged);
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for ((z, &a), &adv) in logits.iter().zip(actions).zip(advantages) {
        let p = softmax(z);
        let neg_h: f64 = p.iter().map(|&q| q * floored_ln(q)).sum();
        loss += -(floored_ln(p[a]) * adv - entropy * neg_h);
        // d(ln p_a)/dz_k = delta_ak - p_k, zero once p_a is below the floor
        let la_live = p[a] >= LOG_FLOOR;
        // d(sum p ln p)/dp_j
        let dneg: Vec<f64> = p
            .iter()
            .map(|&q| if q >= LOG_FLOOR { q.ln() + 1.0 } else { LOG_FLOOR.ln() })
            .collect();
        let mean: f64 = p.iter().zip(&dneg).map(|(q, d)| q * d).sum();
        let g: Vec<f64> = (0..p.len())
            .map(|k| {
                let dla = if la_live { (k == a) as u8 as f64 - p[k] } else { 0.0 };
                let dent = p[k] * (dneg[k] - mean);
                (-adv * dla + entropy * dent) / b
            })
            .collect();
        grads.push(g);
    }
    Ok((loss / b, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0; 8]);
        assert!(p.iter().all(|&q| (q - 0.125).abs() < 1e-15));
    }

    #[test]
    fn value_loss_examples() {
        assert_eq!(value_loss(&[2.0], &[2.0]).unwrap().0, 0.0);
        assert_eq!(value_loss(&[0.0], &[1.0]).unwrap().0, 0.5);
        assert_eq!(value_loss(&[], &[]), Err(LossError::EmptyBatch));
    }

    #[test]
    fn policy_loss_examples() {
        let (l, _) = policy_loss(&[vec![0.3, -0.1, 2.0]], &[1], &[0.0], 0.0).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = policy_loss(&[vec![0.0; 8]], &[3], &[0.0], 1.0).unwrap();
        assert!((l + 8f64.ln()).abs() < 1e-12);
        assert!((l + 2.0794).abs() < 1e-4);
    }

    #[test]
    fn greedy_ties_to_lowest() {
        let mut p = vec![0.4, 0.4, 0.2];
        p.extend([0.0; 5]);
        assert_eq!(greedy_action(&p), 0);
    }

    #[test]
    fn one_hot_always_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = [0.0, 0.0, 1.0, 0.0];
        for _ in 0..1000 {
            assert_eq!(sample_action(&p, &mut rng), 2);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = [0.125; 8];
        let mut counts = [0usize; 8];
        let n = 1_000_000;
        for _ in 0..n {
            counts[sample_action(&p, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.125).abs() < 0.005);
        }
    }

    #[test]
    fn collapsed_policy_loss_is_finite() {
        let (l, g) = policy_loss(&[vec![0.0, 800.0]], &[0], &[1.0], 0.01).unwrap();
        assert!(l.is_finite());
        assert!(g[0].iter().all(|v| v.is_finite()));
    }
}
