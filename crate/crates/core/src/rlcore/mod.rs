//! Replay, losses, agents and the training loop.

mod losses;
mod metrics;
mod replay;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub use losses::{
    argmax, c51_loss, c51_loss_var, c51_project, dqn_mse_loss, dqn_mse_var, epsilon_greedy, linear_epsilon, support,
    weighted_mean,
};
pub use metrics::{metrics_csv_string, parse_metrics_csv, write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use replay::{n_step_return, Batch, NStepAccumulator, ReplayBuffer, ReplayMode, SumTree, Transition, PRIORITY_EPS};

use crate::diffcore::{checkpoint, Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::envs::{env_reset, Action, EnvState, Game, GRID};
use crate::error::{Error, Result};
use crate::netzoo::{build_network, ArchSpec, Head, QNetwork};
use crate::plasticity::{self, Event, InterventionSchedule};
use crate::rng::{self, derive_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    DqnMse,
    RainbowLite,
    DerLite,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::DqnMse => "dqn_mse",
            AgentKind::RainbowLite => "rainbow_lite",
            AgentKind::DerLite => "der_lite",
        })
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn_mse" => Ok(AgentKind::DqnMse),
            "rainbow_lite" => Ok(AgentKind::RainbowLite),
            "der_lite" => Ok(AgentKind::DerLite),
            other => Err(Error::invalid(format!("unknown agent `{other}` (expected dqn_mse, rainbow_lite or der_lite)"))),
        }
    }
}

/// Learning hyperparameters. Step counts are environment steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub gamma: f64,
    pub n_step: usize,
    pub adam: AdamConfig,
    pub eps_final: f64,
    pub eps_decay_steps: u64,
    pub min_replay: u64,
    pub target_update: u64,
    pub update_period: u64,
    pub batch: usize,
    pub replay_capacity: usize,
    pub replay: ReplayMode,
    /// Categorical value head `(atoms, v_min, v_max)`; `None` regresses Q directly.
    pub distributional: Option<(usize, f64, f64)>,
}

impl AgentConfig {
    pub fn preset(kind: AgentKind) -> Self {
        let dqn = AgentConfig {
            kind,
            gamma: 0.99,
            n_step: 1,
            adam: AdamConfig::RAINBOW,
            eps_final: 0.01,
            eps_decay_steps: 5_000,
            min_replay: 1_000,
            target_update: 1_000,
            update_period: 1,
            batch: 32,
            replay_capacity: 30_000,
            replay: ReplayMode::Uniform,
            distributional: None,
        };
        let rainbow = AgentConfig {
            n_step: 3,
            replay: ReplayMode::Prioritized { alpha: 0.5, beta: 0.5 },
            distributional: Some((21, -2.0, 2.0)),
            ..dqn
        };
        match kind {
            AgentKind::DqnMse => dqn,
            AgentKind::RainbowLite => rainbow,
            AgentKind::DerLite => AgentConfig {
                n_step: 10,
                update_period: 1,
                min_replay: 1_600,
                adam: AdamConfig::DER,
                eps_decay_steps: 2_000,
                target_update: 2_000,
                ..rainbow
            },
        }
    }

    pub fn head(&self) -> Head {
        match self.distributional {
            None => Head::QValues,
            Some((atoms, v_min, v_max)) => Head::C51 { atoms, v_min, v_max },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.eps_final) {
            return Err(Error::invalid("eps_final must lie in [0, 1]"));
        }
        if self.n_step == 0 || self.batch == 0 || self.update_period == 0 || self.target_update == 0 {
            return Err(Error::invalid("n_step, batch, update_period and target_update must be positive"));
        }
        if self.replay_capacity < self.batch {
            return Err(Error::invalid("replay capacity must hold at least one batch"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Converts packed frames into a `[B, GRID, GRID, 1]` batch.
pub fn frames_to_tensor(frames: &[&[u8]]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * GRID * GRID);
    for f in frames {
        if f.len() != GRID * GRID {
            return Err(Error::invalid(format!("frame of {} bytes, expected {}", f.len(), GRID * GRID)));
        }
        data.extend(f.iter().map(|&b| b as f64));
    }
    Tensor::new(vec![frames.len(), GRID, GRID, 1], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub mean_abs_td: f64,
}

/// Online network, target parameters, optimizer and replay.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub net: QNetwork,
    pub target: ParamStore,
    pub adam: Adam,
    pub replay: ReplayBuffer,
    sample_rng: Rng,
    pub updates: u64,
}

impl Agent {
    pub fn new(arch: &ArchSpec, config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = ArchSpec {
            head: config.head(),
            input: [GRID, GRID, 1],
            actions: crate::envs::NUM_ACTIONS,
            ..arch.clone()
        };
        let net = build_network(&arch, derive_seed(seed, "network"))?;
        Ok(Self {
            config,
            target: net.store.clone(),
            adam: Adam::new(config.adam, &net.store),
            replay: ReplayBuffer::new(config.replay_capacity, config.replay)?,
            net,
            sample_rng: rng::stream(seed, "replay-sample"),
            updates: 0,
        })
    }

    pub fn q_values(&self, frame: &[u8]) -> Result<Vec<f64>> {
        Ok(self.net.q_batch(&frames_to_tensor(&[frame])?)?.into_data())
    }

    pub fn sync_target(&mut self) {
        self.target.copy_values_from(&self.net.store);
    }

    /// Bootstrapped targets for a batch: scalar values for MSE, projected
    /// distributions `[B, atoms]` for the categorical head.
    fn targets(&self, batch: &Batch) -> Result<Tensor> {
        let next: Vec<&[u8]> = batch.transitions.iter().map(|t| t.next_obs.as_slice()).collect();
        let next = frames_to_tensor(&next)?;
        let mut tape = Tape::inference();
        let x = tape.constant(next);
        let out = self.net.forward_with(&mut tape, &self.target, x)?.out;
        let b = batch.transitions.len();
        match self.net.spec.head {
            Head::QValues => {
                let q = tape.value(out);
                let a = q.shape()[1];
                let y = batch
                    .transitions
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let best = q.data()[i * a..(i + 1) * a].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        t.reward + t.discount * best
                    })
                    .collect();
                Tensor::new(vec![b], y)
            }
            Head::C51 { atoms, v_min, v_max } => {
                let z = support(atoms, v_min, v_max);
                let p = tape.softmax(out, 2)?;
                let p = tape.value(p);
                let a = p.shape()[1];
                let mut data = Vec::with_capacity(b * atoms);
                for (i, t) in batch.transitions.iter().enumerate() {
                    let rows = &p.data()[i * a * atoms..(i + 1) * a * atoms];
                    let q: Vec<f64> = rows
                        .chunks(atoms)
                        .map(|r| r.iter().zip(&z).map(|(pi, zi)| pi * zi).sum())
                        .collect();
                    let best = argmax(&q);
                    data.extend(c51_project(&rows[best * atoms..(best + 1) * atoms], t.reward, t.discount, &z)?);
                }
                Tensor::new(vec![b, atoms], data)
            }
        }
    }

    /// Loss of the current parameters on `batch`, with per-sample losses.
    pub fn batch_loss(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::inference();
        let (loss, per) = self.loss_graph(&mut tape, batch)?;
        Ok((tape.value(loss).data()[0], tape.value(per).data().to_vec()))
    }

    fn loss_graph(&self, tape: &mut Tape, batch: &Batch) -> Result<(crate::diffcore::Var, crate::diffcore::Var)> {
        let targets = self.targets(batch)?;
        let obs: Vec<&[u8]> = batch.transitions.iter().map(|t| t.obs.as_slice()).collect();
        let actions: Vec<usize> = batch.transitions.iter().map(|t| t.action).collect();
        let x = tape.constant(frames_to_tensor(&obs)?);
        let out = self.net.forward(tape, x)?.out;
        let per = match self.net.spec.head {
            Head::QValues => dqn_mse_var(tape, out, &actions, targets.data())?,
            Head::C51 { .. } => c51_loss_var(tape, out, &actions, &targets)?,
        };
        let loss = weighted_mean(tape, per, &batch.weights)?;
        Ok((loss, per))
    }

    /// One gradient update on a sampled batch; the loss is measured before
    /// the update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.replay.sample(self.config.batch, &mut self.sample_rng)?;
        let mut tape = Tape::new();
        let (loss, per) = self.loss_graph(&mut tape, &batch)?;
        let grads = tape.backward(loss)?;
        self.net.store.zero_grads();
        tape.accumulate_into(&grads, &mut self.net.store);
        self.adam.step(&mut self.net.store);
        self.updates += 1;
        let per_sample = tape.value(per).data().to_vec();
        // squared TD errors are turned back into |TD|; cross-entropies are used as is
        let td: Vec<f64> = match self.net.spec.head {
            Head::QValues => per_sample.iter().map(|v| v.sqrt()).collect(),
            Head::C51 { .. } => per_sample,
        };
        self.replay.update_priorities(&batch.indices, &td)?;
        Ok(StepMetrics {
            loss: tape.value(loss).data()[0],
            mean_abs_td: td.iter().sum::<f64>() / td.len() as f64,
        })
    }
}

/// Mean undiscounted return over `episodes` evaluation episodes.
pub fn evaluate(
    game: Game,
    episode_seeds: impl IntoIterator<Item = u64>,
    eps: f64,
    rng: &mut Rng,
    mut q: impl FnMut(&EnvState) -> Result<Vec<f64>>,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for seed in episode_seeds {
        let mut env = env_reset(game, seed);
        while !env.is_done() {
            let a = epsilon_greedy(&q(&env)?, eps, rng)?;
            total += env.step(Action::from_index(a)?)?.reward;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    Ok(total / count as f64)
}

/// Everything that determines one training run.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub run_id: String,
    pub game: Game,
    pub seed: u64,
    pub arch_name: String,
    pub arch: ArchSpec,
    pub agent: AgentConfig,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: u64,
    pub eval_eps: f64,
    pub intervention: InterventionSchedule,
    pub out_dir: Option<PathBuf>,
}

impl TrainSpec {
    pub fn new(game: Game, seed: u64, arch_name: &str, arch: ArchSpec, agent: AgentConfig, total_steps: u64) -> Self {
        Self {
            run_id: format!("{arch_name}-{game}-s{seed}"),
            game,
            seed,
            arch_name: arch_name.to_string(),
            arch,
            agent,
            total_steps,
            eval_every: 2_000,
            eval_episodes: 10,
            eval_eps: 0.001,
            intervention: InterventionSchedule::default(),
            out_dir: None,
        }
    }

    /// Env steps at which evaluation rows are written.
    pub fn eval_points(&self) -> Vec<u64> {
        let mut v: Vec<u64> = (1..=self.total_steps / self.eval_every.max(1)).map(|k| k * self.eval_every).collect();
        if v.last() != Some(&self.total_steps) && self.total_steps > 0 {
            v.push(self.total_steps);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rows: Vec<MetricsRow>,
    pub events: Vec<Event>,
    pub final_score: f64,
    pub updates: u64,
}

/// Number of trailing evaluation rows averaged into the final score.
pub const FINAL_EVALS: usize = 3;

/// Mean return of the last [`FINAL_EVALS`] evaluation rows.
pub fn final_score(rows: &[MetricsRow]) -> Option<f64> {
    let tail = &rows[rows.len().saturating_sub(FINAL_EVALS)..];
    (!tail.is_empty()).then(|| tail.iter().map(|r| r.episode_return).sum::<f64>() / tail.len() as f64)
}

/// Trains one agent, evaluating periodically; writes `metrics.csv`,
/// `events.csv` and `checkpoint.bin` when an output directory is set.
pub fn run_training(spec: &TrainSpec) -> Result<RunRecord> {
    if spec.total_steps == 0 || spec.eval_every == 0 || spec.eval_episodes == 0 {
        return Err(Error::invalid("total_steps, eval_every and eval_episodes must be positive"));
    }
    let mut agent = Agent::new(&spec.arch, spec.agent, spec.seed)?;
    spec.intervention.validate(agent.net.moe().map(|l| l.experts().len())).or_else(|e| {
        if spec.intervention.kind == plasticity::InterventionKind::None {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    let cfg = spec.agent;
    let mut act_rng = rng::stream(spec.seed, "act");
    let mut eval_rng = rng::stream(spec.seed, "eval-policy");
    let mut probe_rng = rng::stream(spec.seed, "probe");
    let train_seed = derive_seed(spec.seed, "train-episode");
    let eval_seed = derive_seed(spec.seed, "eval-episode");
    let mut nstep = NStepAccumulator::new(cfg.n_step, cfg.gamma)?;
    let mut episode = 0u64;
    let mut env = env_reset(spec.game, train_seed);
    let mut obs = env.observation_bytes();
    let mut rows = Vec::new();
    let mut events = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    let eval_points = spec.eval_points();
    let mut next_eval = 0;
    let probe_size = 64;

    for step in 1..=spec.total_steps {
        let eps = linear_epsilon(step, cfg.min_replay, cfg.eps_decay_steps, cfg.eps_final);
        let q = agent.q_values(&obs)?;
        let a = epsilon_greedy(&q, eps, &mut act_rng)?;
        let out = env.step(Action::from_index(a)?)?;
        let next = env.observation_bytes();
        for t in nstep.push(obs, a, out.reward, &next, out.terminal, out.truncated) {
            agent.replay.push(t);
        }
        if out.done() {
            episode += 1;
            env = env_reset(spec.game, train_seed ^ episode);
            obs = env.observation_bytes();
        } else {
            obs = next;
        }

        let learning = step > cfg.min_replay && agent.replay.len() >= cfg.batch;
        if learning && step % cfg.update_period == 0 {
            let m = agent.train_step()?;
            loss_sum += m.loss;
            loss_n += 1;
        }
        if learning && step % cfg.target_update == 0 {
            agent.sync_target();
        }

        if spec.intervention.kind != plasticity::InterventionKind::None {
            let probe = if agent.replay.len() >= probe_size {
                let b = agent.replay.sample(probe_size, &mut probe_rng)?;
                let frames: Vec<&[u8]> = b.transitions.iter().map(|t| t.obs.as_slice()).collect();
                Some(frames_to_tensor(&frames)?)
            } else {
                None
            };
            if let Some(e) = plasticity::apply_schedule(
                &mut agent.net,
                &mut agent.adam,
                &spec.intervention,
                step,
                probe.as_ref(),
                spec.seed,
            )? {
                events.push(e);
            }
        }

        if next_eval < eval_points.len() && step == eval_points[next_eval] {
            next_eval += 1;
            let ret = evaluate(spec.game, (0..spec.eval_episodes).map(|k| eval_seed ^ k), spec.eval_eps, &mut eval_rng, |e| {
                agent.q_values(&e.observation_bytes())
            })?;
            let dormant = if agent.replay.len() >= probe_size {
                let b = agent.replay.sample(probe_size, &mut probe_rng)?;
                let frames: Vec<&[u8]> = b.transitions.iter().map(|t| t.obs.as_slice()).collect();
                Some(plasticity::network_dormant_fraction(&agent.net, &frames_to_tensor(&frames)?, spec.intervention.tau)?)
            } else {
                None
            };
            rows.push(MetricsRow {
                run_id: spec.run_id.clone(),
                game: spec.game,
                seed: spec.seed,
                arch: spec.arch_name.clone(),
                env_step: step,
                episode_return: ret,
                loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
                dormant_fraction: dormant,
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }

    if let Some(dir) = &spec.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        plasticity::write_events_csv(&dir.join("events.csv"), &events)?;
        checkpoint::save(&agent.net.store, &dir.join("checkpoint.bin"))?;
    }
    Ok(RunRecord {
        final_score: final_score(&rows).expect("at least one evaluation"),
        rows,
        events,
        updates: agent.updates,
    })
}
