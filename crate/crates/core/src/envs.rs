//! Deterministic 10×10 single-channel pixel games with three actions.
//!
//! * `pixel_catch`: a ball drops from the top row in a fixed column; the
//!   paddle on the bottom row scores +1 if it is under the ball when it lands
//!   and −1 otherwise. Episodes last exactly 9 steps.
//! * `pixel_dodge`: a new object spawns on the top row every 3 steps and
//!   falls one row per step. Each object that lands away from the agent is
//!   worth +1; a landing on the agent is −1 and ends the episode.
//! * `pixel_chase`: a target walks randomly sideways on even steps and
//!   descends on odd steps. Catching it on the bottom row is +1 and ends the
//!   episode; a miss respawns it at the top.
//!
//! Within a step the agent always moves first. Episodes that reach
//! [`MAX_STEPS`] are truncated.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const GRID: usize = 10;
pub const NUM_ACTIONS: usize = 3;
pub const MAX_STEPS: usize = 200;
const BOTTOM: usize = GRID - 1;
const DODGE_SPAWN_PERIOD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Game {
    PixelCatch,
    PixelDodge,
    PixelChase,
}

impl Game {
    pub const ALL: [Game; 3] = [Game::PixelCatch, Game::PixelDodge, Game::PixelChase];

    pub fn name(&self) -> &'static str {
        match self {
            Game::PixelCatch => "pixel_catch",
            Game::PixelDodge => "pixel_dodge",
            Game::PixelChase => "pixel_chase",
        }
    }
}

impl fmt::Display for Game {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Game {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Game::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown game `{s}` (expected pixel_catch, pixel_dodge or pixel_chase)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Left = 0,
    Stay = 1,
    Right = 2,
}

impl Action {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Action::Left),
            1 => Ok(Action::Stay),
            2 => Ok(Action::Right),
            _ => Err(Error::invalid(format!("action {i} out of range 0..{NUM_ACTIONS}"))),
        }
    }

    fn apply(self, col: usize) -> usize {
        match self {
            Action::Left => col.saturating_sub(1),
            Action::Stay => col,
            Action::Right => (col + 1).min(BOTTOM),
        }
    }

    fn toward(from: usize, to: usize) -> Self {
        match from.cmp(&to) {
            std::cmp::Ordering::Less => Action::Right,
            std::cmp::Ordering::Equal => Action::Stay,
            std::cmp::Ordering::Greater => Action::Left,
        }
    }
}

/// Falling objects as `(row, col)`.
#[derive(Debug, Clone, PartialEq, Eq)]
enum World {
    Catch { ball: (usize, usize) },
    Dodge { objects: Vec<(usize, usize)> },
    Chase { target: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// The game reached a terminal state.
    pub terminal: bool,
    /// The step cap was hit without a terminal state.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

#[derive(Debug, Clone)]
pub struct EnvState {
    game: Game,
    agent: usize,
    world: World,
    step_count: usize,
    done: bool,
    rng: Rng,
}

/// Starts an episode; identical seeds give identical episodes.
pub fn env_reset(game: Game, seed: u64) -> EnvState {
    let mut rng = rng::stream(seed, game.name());
    let agent = rng.gen_range(0..GRID);
    let world = match game {
        Game::PixelCatch => World::Catch {
            ball: (0, rng.gen_range(0..GRID)),
        },
        Game::PixelDodge => World::Dodge {
            objects: vec![(0, rng.gen_range(0..GRID))],
        },
        Game::PixelChase => World::Chase {
            target: (0, rng.gen_range(0..GRID)),
        },
    };
    EnvState {
        game,
        agent,
        world,
        step_count: 0,
        done: false,
        rng,
    }
}

impl EnvState {
    pub fn game(&self) -> Game {
        self.game
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn agent_col(&self) -> usize {
        self.agent
    }

    /// Lit cells as `(row, col)`, agent last.
    fn lit(&self) -> Vec<(usize, usize)> {
        let mut v = match &self.world {
            World::Catch { ball } => vec![*ball],
            World::Dodge { objects } => objects.clone(),
            World::Chase { target } => vec![*target],
        };
        v.push((BOTTOM, self.agent));
        v
    }

    /// Binary `[GRID, GRID, 1]` frame.
    pub fn observation(&self) -> Tensor {
        let mut t = Tensor::zeros(&[GRID, GRID, 1]);
        for (r, c) in self.lit() {
            t.data_mut()[r * GRID + c] = 1.0;
        }
        t
    }

    /// Same frame as bytes (0 or 1), row-major.
    pub fn observation_bytes(&self) -> Vec<u8> {
        let mut v = vec![0u8; GRID * GRID];
        for (r, c) in self.lit() {
            v[r * GRID + c] = 1;
        }
        v
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::invalid("step called on a finished episode"));
        }
        self.step_count += 1;
        self.agent = action.apply(self.agent);
        let agent = self.agent;
        let t = self.step_count;
        let (reward, terminal) = match &mut self.world {
            World::Catch { ball } => {
                ball.0 += 1;
                if ball.0 == BOTTOM {
                    (if ball.1 == agent { 1.0 } else { -1.0 }, true)
                } else {
                    (0.0, false)
                }
            }
            World::Dodge { objects } => {
                objects.iter_mut().for_each(|o| o.0 += 1);
                let mut reward = 0.0;
                let mut terminal = false;
                // at most one object lands per step
                if let Some(pos) = objects.iter().position(|o| o.0 == BOTTOM) {
                    let (_, col) = objects.remove(pos);
                    if col == agent {
                        reward = -1.0;
                        terminal = true;
                    } else {
                        reward = 1.0;
                    }
                }
                if !terminal && t % DODGE_SPAWN_PERIOD == 0 {
                    objects.push((0, self.rng.gen_range(0..GRID)));
                }
                (reward, terminal)
            }
            World::Chase { target } => {
                if t % 2 == 0 {
                    let step: i64 = self.rng.gen_range(-1..=1);
                    target.1 = (target.1 as i64 + step).clamp(0, BOTTOM as i64) as usize;
                } else {
                    target.0 += 1;
                }
                if target.0 == BOTTOM {
                    if target.1 == agent {
                        (1.0, true)
                    } else {
                        *target = (0, self.rng.gen_range(0..GRID));
                        (0.0, false)
                    }
                } else {
                    (0.0, false)
                }
            }
        };
        let truncated = !terminal && self.step_count >= MAX_STEPS;
        self.done = terminal || truncated;
        Ok(StepOutcome {
            reward,
            terminal,
            truncated,
        })
    }

    /// Scripted policy that attains the reference score.
    pub fn reference_action(&self) -> Action {
        match &self.world {
            World::Catch { ball } => Action::toward(self.agent, ball.1),
            World::Chase { target } => Action::toward(self.agent, target.1),
            World::Dodge { objects } => {
                // the lowest object lands next; step aside only if it is overhead
                match objects.iter().max_by_key(|o| o.0) {
                    Some(&(_, col)) if col == self.agent => {
                        if self.agent == 0 {
                            Action::Right
                        } else {
                            Action::Left
                        }
                    }
                    _ => Action::Stay,
                }
            }
        }
    }
}

/// Undiscounted return of one episode under `policy`.
pub fn play_episode(game: Game, seed: u64, mut policy: impl FnMut(&EnvState) -> Action) -> Result<f64> {
    let mut env = env_reset(game, seed);
    let mut total = 0.0;
    while !env.is_done() {
        let a = policy(&env);
        total += env.step(a)?.reward;
    }
    Ok(total)
}

pub const BASELINE_EPISODES: u64 = 10_000;
pub const BASELINE_SEED: u64 = 20_240_601;

/// Monte Carlo mean return of the uniform-random policy.
pub fn random_score(game: Game, episodes: u64, seed: u64) -> Result<f64> {
    let mut policy_rng = rng::stream(seed, "random-policy");
    let mut total = 0.0;
    for i in 0..episodes {
        let env_seed = rng::derive_seed(seed, "random-episode") ^ i;
        total += play_episode(game, env_seed, |_| {
            Action::from_index(policy_rng.gen_range(0..NUM_ACTIONS)).expect("in range")
        })?;
    }
    Ok(total / episodes as f64)
}

/// Return of the scripted reference policy, which is the same for every seed.
pub fn reference_score(game: Game) -> f64 {
    match game {
        Game::PixelCatch | Game::PixelChase => 1.0,
        // every object spawned at t ≡ 0 (mod 3) with t + 9 ≤ MAX_STEPS lands safely
        Game::PixelDodge => ((MAX_STEPS - 9) / DODGE_SPAWN_PERIOD + 1) as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub game: Game,
    pub random_score: f64,
    pub reference_score: f64,
}

/// Pinned baseline table shipped with the crate.
pub const BASELINES_TSV: &str = include_str!("../data/baselines.tsv");

/// Parses a `game<TAB>random_score<TAB>reference_score` table with header.
pub fn parse_baselines(text: &str) -> Result<Vec<Baseline>> {
    let fmt_err = |msg: String| Error::Format {
        path: "baselines.tsv".into(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["game", "random_score", "reference_score"] {
        return Err(fmt_err(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out: Vec<Baseline> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fmt_err(format!("row {}: bad number `{}`", i + 1, &rec[j])))
        };
        let game: Game = rec[0].parse().map_err(|e: Error| fmt_err(format!("row {}: {e}", i + 1)))?;
        if out.iter().any(|b| b.game == game) {
            return Err(fmt_err(format!("row {}: duplicate game {game}", i + 1)));
        }
        let b = Baseline {
            game,
            random_score: num(1)?,
            reference_score: num(2)?,
        };
        if b.reference_score == b.random_score {
            return Err(fmt_err(format!("row {}: degenerate baselines for {game}", i + 1)));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn baselines() -> Vec<Baseline> {
    parse_baselines(BASELINES_TSV).expect("shipped baseline table is valid")
}

pub fn baseline(game: Game) -> Baseline {
    baselines()
        .into_iter()
        .find(|b| b.game == game)
        .expect("shipped baseline table covers every game")
}

/// Renders a table in the format read by [`parse_baselines`].
pub fn format_baselines(rows: &[Baseline]) -> String {
    let mut s = String::from("game\trandom_score\treference_score\n");
    for b in rows {
        s.push_str(&format!("{}\t{}\t{}\n", b.game, b.random_score, b.reference_score));
    }
    s
}
