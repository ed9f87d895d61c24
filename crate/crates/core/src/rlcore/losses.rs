use std::rc::Rc;

use rand::Rng as _;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Squared error of the chosen action's estimate.
pub fn dqn_mse_loss(q: &[f64], action: usize, target: f64) -> Result<f64> {
    let qa = q
        .get(action)
        .ok_or_else(|| Error::invalid(format!("action {action} out of range for {} values", q.len())))?;
    Ok((qa - target).powi(2))
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Uniform action with probability `eps`, greedy otherwise.
pub fn epsilon_greedy(q: &[f64], eps: f64, rng: &mut Rng) -> Result<usize> {
    if !(0.0..=1.0).contains(&eps) || q.is_empty() {
        return Err(Error::invalid(format!("epsilon_greedy needs eps in [0, 1] and actions, got {eps}")));
    }
    if eps > 0.0 && rng.gen::<f64>() < eps {
        Ok(rng.gen_range(0..q.len()))
    } else {
        Ok(argmax(q))
    }
}

/// Linear decay from 1 to `final_eps` over `decay_steps` after `warmup` steps.
pub fn linear_epsilon(step: u64, warmup: u64, decay_steps: u64, final_eps: f64) -> f64 {
    if decay_steps == 0 {
        return if step < warmup { 1.0 } else { final_eps };
    }
    let left = (decay_steps + warmup) as f64 - step as f64;
    let bonus = ((1.0 - final_eps) * left / decay_steps as f64).clamp(0.0, 1.0 - final_eps);
    final_eps + bonus
}

/// Evenly spaced support from `v_min` to `v_max`.
pub fn support(atoms: usize, v_min: f64, v_max: f64) -> Vec<f64> {
    let dz = (v_max - v_min) / (atoms - 1) as f64;
    (0..atoms).map(|j| v_min + j as f64 * dz).collect()
}

/// Categorical projection of `r + γ·Z` onto the fixed support.
pub fn c51_project(target: &[f64], reward: f64, gamma: f64, z: &[f64]) -> Result<Vec<f64>> {
    let atoms = z.len();
    if atoms < 2 || target.len() != atoms {
        return Err(Error::invalid("c51_project needs matching distributions with at least 2 atoms"));
    }
    let (v_min, v_max) = (z[0], z[atoms - 1]);
    let dz = (v_max - v_min) / (atoms - 1) as f64;
    let mut out = vec![0.0; atoms];
    for (&p, &zj) in target.iter().zip(z) {
        let tz = (reward + gamma * zj).clamp(v_min, v_max);
        let b = ((tz - v_min) / dz).clamp(0.0, (atoms - 1) as f64);
        let (l, u) = (b.floor() as usize, b.ceil() as usize);
        if l == u {
            out[l] += p;
        } else {
            out[l] += p * (u as f64 - b);
            out[u] += p * (b - l as f64);
        }
    }
    Ok(out)
}

/// Cross-entropy of `target` under `softmax(logits)`.
pub fn c51_loss(logits: &[f64], target: &[f64]) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    -target.iter().zip(logits).map(|(t, l)| t * (l - lse)).sum::<f64>()
}

/// Rows `b·A + a_b` of an output viewed as `[B·A, k]`.
fn chosen_rows(tape: &mut Tape, out: Var, actions: &[usize]) -> Result<Var> {
    let s = tape.shape(out).to_vec();
    let (b, a) = (s[0], s[1]);
    if actions.len() != b || actions.iter().any(|&x| x >= a) {
        return Err(Error::invalid("one valid action per batch row required"));
    }
    let k: usize = s[2..].iter().product();
    let flat = tape.reshape(out, &[b * a, k])?;
    tape.gather_rows(flat, Rc::new(actions.iter().enumerate().map(|(i, &x)| i * a + x).collect()))
}

/// Per-sample squared TD errors `[B]` for Q-values `[B, A]`.
pub fn dqn_mse_var(tape: &mut Tape, q: Var, actions: &[usize], targets: &[f64]) -> Result<Var> {
    let b = actions.len();
    let qa = chosen_rows(tape, q, actions)?;
    let qa = tape.reshape(qa, &[b])?;
    let y = tape.constant(Tensor::new(vec![b], targets.to_vec())?);
    let d = tape.sub(qa, y)?;
    Ok(tape.square(d))
}

/// Per-sample cross-entropies `[B]` for logits `[B, A, atoms]` against
/// projected targets `[B, atoms]`.
pub fn c51_loss_var(tape: &mut Tape, logits: Var, actions: &[usize], targets: &Tensor) -> Result<Var> {
    let rows = chosen_rows(tape, logits, actions)?;
    if tape.shape(rows) != targets.shape() {
        return Err(Error::Shape {
            op: "c51_loss",
            lhs: tape.shape(rows).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let logp = tape.log_softmax(rows, 1)?;
    let t = tape.constant(targets.clone());
    let prod = tape.mul(logp, t)?;
    let s = tape.sum_axis(prod, 1)?;
    Ok(tape.scale(s, -1.0))
}

/// `mean(w ⊙ per_sample)`.
pub fn weighted_mean(tape: &mut Tape, per_sample: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(Tensor::new(vec![weights.len()], weights.to_vec())?);
    let p = tape.mul(per_sample, w)?;
    Ok(tape.mean_all(p))
}
