use std::collections::VecDeque;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Added to |TD| so that no stored transition becomes unsampleable.
pub const PRIORITY_EPS: f64 = 1e-6;

/// Binary tree of partial sums over `capacity` non-negative leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    base: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let base = capacity.max(1).next_power_of_two();
        Self {
            capacity,
            base,
            nodes: vec![0.0; 2 * base],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.base + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        assert!(i < self.capacity && value >= 0.0 && value.is_finite(), "sum tree leaf {i} <- {value}");
        let mut node = self.base + i;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf `i` such that the prefix sum before `i` is `<= mass` and the
    /// prefix sum through `i` exceeds it. Zero-weight leaves are never returned
    /// while the total is positive.
    pub fn find(&self, mass: f64) -> usize {
        let mut node = 1;
        let mut mass = mass.clamp(0.0, self.total());
        while node < self.base {
            let left = self.nodes[2 * node];
            if mass < left || self.nodes[2 * node + 1] <= 0.0 {
                node *= 2;
            } else {
                mass -= left;
                node = 2 * node + 1;
            }
        }
        node - self.base
    }
}

/// One stored n-step transition; observations are packed binary frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<u8>,
    pub action: usize,
    /// Discounted reward sum over the window.
    pub reward: f64,
    /// `γ^k` for the bootstrap term, zero when the episode terminated in the window.
    pub discount: f64,
    pub next_obs: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplayMode {
    Uniform,
    Prioritized { alpha: f64, beta: f64 },
}

/// A sampled minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub transitions: Vec<Transition>,
    /// Importance weights, all 1 under uniform replay.
    pub weights: Vec<f64>,
}

/// Ring buffer with optional proportional prioritization.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    mode: ReplayMode,
    tree: Option<SumTree>,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, mode: ReplayMode) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay capacity must be positive"));
        }
        if let ReplayMode::Prioritized { alpha, beta } = mode {
            if !(alpha >= 0.0 && (0.0..=1.0).contains(&beta)) {
                return Err(Error::invalid(format!("invalid PER exponents alpha={alpha} beta={beta}")));
            }
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            next: 0,
            mode,
            tree: matches!(mode, ReplayMode::Prioritized { .. }).then(|| SumTree::new(capacity)),
            max_priority: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn tree(&self) -> Option<&SumTree> {
        self.tree.as_ref()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Stores `t`, overwriting the oldest entry when full. New entries get
    /// the largest priority seen so far.
    pub fn push(&mut self, t: Transition) -> usize {
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        if let ReplayMode::Prioritized { alpha, .. } = self.mode {
            let p = self.max_priority.powf(alpha);
            self.tree.as_mut().expect("prioritized").set(slot, p);
        }
        slot
    }

    /// Sets raw priorities to `|td| + PRIORITY_EPS`.
    pub fn update_priorities(&mut self, indices: &[usize], td: &[f64]) -> Result<()> {
        let ReplayMode::Prioritized { alpha, .. } = self.mode else {
            return Ok(());
        };
        if indices.len() != td.len() {
            return Err(Error::invalid("priority update needs one error per index"));
        }
        for (&i, &e) in indices.iter().zip(td) {
            if i >= self.items.len() || !e.is_finite() {
                return Err(Error::invalid(format!("bad priority update ({i}, {e})")));
            }
            let p = e.abs() + PRIORITY_EPS;
            self.max_priority = self.max_priority.max(p);
            self.tree.as_mut().expect("prioritized").set(i, p.powf(alpha));
        }
        Ok(())
    }

    /// Probability of drawing entry `i`.
    pub fn probability(&self, i: usize) -> f64 {
        match &self.tree {
            Some(t) => t.get(i) / t.total(),
            None => 1.0 / self.items.len() as f64,
        }
    }

    /// Draws `batch` entries with replacement.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<Batch> {
        if batch == 0 || self.items.len() < batch {
            return Err(Error::invalid(format!(
                "cannot sample {batch} transitions from a buffer holding {}",
                self.items.len()
            )));
        }
        let n = self.items.len();
        let (indices, weights) = match (&self.tree, self.mode) {
            (Some(tree), ReplayMode::Prioritized { beta, .. }) => {
                let total = tree.total();
                let idx: Vec<usize> = (0..batch).map(|_| tree.find(rng.gen::<f64>() * total)).collect();
                let raw: Vec<f64> = idx.iter().map(|&i| (n as f64 * tree.get(i) / total).powf(-beta)).collect();
                let max = raw.iter().cloned().fold(0.0, f64::max);
                (idx, raw.iter().map(|w| w / max).collect())
            }
            _ => ((0..batch).map(|_| rng.gen_range(0..n)).collect(), vec![1.0; batch]),
        };
        Ok(Batch {
            transitions: indices.iter().map(|&i| self.items[i].clone()).collect(),
            indices,
            weights,
        })
    }
}

/// Turns single-step experience into n-step transitions.
#[derive(Debug, Clone)]
pub struct NStepAccumulator {
    n: usize,
    gamma: f64,
    window: VecDeque<(Vec<u8>, usize, f64)>,
}

impl NStepAccumulator {
    pub fn new(n: usize, gamma: f64) -> Result<Self> {
        if n == 0 || !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("n-step needs n >= 1 and gamma in [0, 1), got n={n} gamma={gamma}")));
        }
        Ok(Self {
            n,
            gamma,
            window: VecDeque::new(),
        })
    }

    fn emit(&mut self, next_obs: &[u8], terminal: bool) -> Transition {
        let k = self.window.len();
        let rewards: Vec<f64> = self.window.iter().map(|w| w.2).collect();
        let (obs, action, _) = self.window.pop_front().expect("non-empty window");
        Transition {
            obs,
            action,
            reward: discounted_sum(&rewards, self.gamma),
            discount: if terminal { 0.0 } else { self.gamma.powi(k as i32) },
            next_obs: next_obs.to_vec(),
        }
    }

    /// Records one environment step and returns the transitions it completes.
    /// A truncated episode flushes its window with bootstrapping intact.
    pub fn push(&mut self, obs: Vec<u8>, action: usize, reward: f64, next_obs: &[u8], terminal: bool, truncated: bool) -> Vec<Transition> {
        self.window.push_back((obs, action, reward));
        let mut out = Vec::new();
        if terminal || truncated {
            while !self.window.is_empty() {
                out.push(self.emit(next_obs, terminal));
            }
        } else if self.window.len() == self.n {
            out.push(self.emit(next_obs, false));
        }
        out
    }
}

fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// `Σ γ^i r_i + γ^n · bootstrap`, dropping the bootstrap after termination.
pub fn n_step_return(rewards: &[f64], gamma: f64, bootstrap: f64, terminated: bool) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::invalid("n_step_return needs at least one reward"));
    }
    let tail = if terminated { 0.0 } else { gamma.powi(rewards.len() as i32) * bootstrap };
    Ok(discounted_sum(rewards, gamma) + tail)
}
