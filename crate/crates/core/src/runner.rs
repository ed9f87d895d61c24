//! Experiment orchestration: run configs, ablation grids, parallel
//! execution, aggregation and plotting.
//!
//! A run config is flat `key = value` text. Top-level keys come first;
//! `[arch]`, `[agent]`, `[intervention]` and `[eval]` sections override
//! the chosen presets. Blank lines and lines starting with `#` are ignored.
//!
//! | key | default |
//! |---|---|
//! | `game` | required |
//! | `arch` | required, one of [`crate::netzoo::PRESETS`] |
//! | `agent` | required: `dqn_mse`, `rainbow_lite` or `der_lite` |
//! | `seed` | 0 |
//! | `total_env_steps` | 30000 |
//! | `label` | the arch name; written to the `arch` metrics column |
//! | `out` | unset |
//! | `arch.encoder` | `mini_cnn` or `mini_resnet` |
//! | `arch.tokenizer` | `flatten`, `per_conv`, `per_feat`, `per_patch`, `shuffled`, `pooled_sum`, `pooled_mean` |
//! | `arch.patch_size` | 2, with `per_patch` |
//! | `arch.shuffle_seed`, `arch.shuffle_granularity` | 0, `scalar`, with `shuffled` |
//! | `arch.moe` | `none`, `softmoe`, `expert_choice`, `token_choice` |
//! | `arch.experts`, `arch.slots_per_expert`, `arch.slot_fraction` | 4, `auto`, 1 |
//! | `arch.expert_scale`, `arch.expansion`, `arch.top_k` | 1, 4, 1 |
//! | `arch.penultimate` | `dense`, `scaled` or `extra_layer` |
//! | `arch.width`, `arch.width_scale`, `arch.pool_before_dense` | 64, 4, false |
//! | `agent.gamma`, `agent.n_step`, `agent.lr`, `agent.adam_eps` | preset |
//! | `agent.eps_final`, `agent.eps_decay_steps`, `agent.min_replay` | preset |
//! | `agent.target_update`, `agent.update_period`, `agent.batch` | preset |
//! | `agent.replay_capacity`, `agent.replay`, `agent.per_alpha`, `agent.per_beta` | preset |
//! | `agent.head`, `agent.atoms`, `agent.v_min`, `agent.v_max` | preset (`q` or `c51`) |
//! | `intervention.kind` | `none` |
//! | `intervention.period`, `intervention.include_router`, `intervention.subset` | 10000, false, half |
//! | `intervention.snp_alpha`, `intervention.snp_beta`, `intervention.tau` | 0.8, 0.2, 0.025 |
//! | `eval.every`, `eval.episodes`, `eval.eps` | 2000, 10, 0.001 |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::envs::Game;
use crate::error::{Error, Result};
use crate::evalstats::{self, Curve, ReportRow};
use crate::moe::{Activation, MoeKind, MoeSpec, SlotPolicy};
use crate::netzoo::{ArchSpec, Encoder, Penultimate};
use crate::plasticity::{InterventionKind, InterventionSchedule};
use crate::rlcore::{self, AgentConfig, AgentKind, MetricsRow, ReplayMode, RunRecord, TrainSpec};
use crate::tokenize::{ShuffleGranularity, TokenScheme};

pub const DEFAULT_STEPS: u64 = 30_000;
pub const DEFAULT_SEEDS: u64 = 5;
pub const DEFAULT_OUT: &str = "runs";
pub const OUT_ENV: &str = "TOKENMOE_OUT";
pub const ABLATION_PRESETS: [&str; 6] = ["expert_sweep", "components", "tokenizers", "slots", "plasticity", "tokenized_baseline"];

/// Output root: `$TOKENMOE_OUT` if set, else `runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub error: Error,
}

impl CmdError {
    pub fn usage(error: Error) -> Self {
        Self { code: 2, error }
    }

    pub fn runtime(error: Error) -> Self {
        Self { code: 1, error }
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

pub type CmdResult<T> = std::result::Result<T, CmdError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub game: Game,
    pub arch_name: String,
    pub label: String,
    pub arch: ArchSpec,
    pub agent: AgentConfig,
    pub seed: u64,
    pub total_env_steps: u64,
    pub intervention: InterventionSchedule,
    pub eval_every: u64,
    pub eval_episodes: u64,
    pub eval_eps: f64,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(game: Game, arch_name: &str, agent: AgentKind) -> Result<Self> {
        Ok(Self {
            game,
            arch_name: arch_name.to_string(),
            label: arch_name.to_string(),
            arch: ArchSpec::preset(arch_name)?,
            agent: AgentConfig::preset(agent),
            seed: 0,
            total_env_steps: DEFAULT_STEPS,
            intervention: InterventionSchedule::default(),
            eval_every: 2_000,
            eval_episodes: 10,
            eval_eps: 0.001,
            out: None,
        })
    }

    /// Checks everything a run would reject, without training.
    pub fn validate(&self) -> Result<()> {
        let label_ok = !self.label.is_empty()
            && !self.label.starts_with('.')
            && self.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !label_ok {
            return Err(Error::invalid(format!(
                "label `{}` must use only letters, digits, `-`, `_` and `.`, and not start with `.`",
                self.label
            )));
        }
        if self.total_env_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::invalid("total_env_steps, eval.every and eval.episodes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval_eps) {
            return Err(Error::invalid("eval.eps must lie in [0, 1]"));
        }
        self.agent.validate()?;
        let net = rlcore::Agent::new(&self.arch, self.agent, self.seed)?;
        self.intervention.validate(net.net.moe().map(|l| l.experts().len()))
    }

    pub fn train_spec(&self, out_dir: Option<PathBuf>) -> TrainSpec {
        let mut t = TrainSpec::new(self.game, self.seed, &self.label, self.arch.clone(), self.agent, self.total_env_steps);
        t.eval_every = self.eval_every;
        t.eval_episodes = self.eval_episodes;
        t.eval_eps = self.eval_eps;
        t.intervention = self.intervention.clone();
        t.out_dir = out_dir;
        t
    }

    /// Parses and validates a config.
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Reader::new(text)?;
        let game: Game = r.required("game")?;
        let arch_name: String = r.required("arch")?;
        let agent_kind: AgentKind = r.required("agent")?;
        let line = r.line("arch");
        let mut cfg = RunConfig::new(game, &arch_name, agent_kind).map_err(|e| Error::Config { line, msg: e.to_string() })?;
        if let Some(v) = r.get("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = r.get("total_env_steps")? {
            cfg.total_env_steps = v;
        }
        if let Some(v) = r.get::<String>("label")? {
            cfg.label = v;
        }
        cfg.out = r.get::<String>("out")?.map(PathBuf::from);
        read_arch(&mut r, &mut cfg.arch)?;
        read_agent(&mut r, &mut cfg.agent)?;
        read_intervention(&mut r, &mut cfg.intervention)?;
        if let Some(v) = r.get("eval.every")? {
            cfg.eval_every = v;
        }
        if let Some(v) = r.get("eval.episodes")? {
            cfg.eval_episodes = v;
        }
        if let Some(v) = r.get("eval.eps")? {
            cfg.eval_eps = v;
        }
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully explicit config text; [`RunConfig::parse`] reads it back to an
    /// equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "game = {}", self.game);
        let _ = writeln!(s, "arch = {}", self.arch_name);
        let _ = writeln!(s, "agent = {}", self.agent.kind);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "total_env_steps = {}", self.total_env_steps);
        let _ = writeln!(s, "label = {}", self.label);
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out = {}", out.display());
        }
        let a = &self.arch;
        let _ = writeln!(s, "\n[arch]\nencoder = {}\ntokenizer = {}", a.encoder, a.tokenizer);
        match a.tokenizer {
            TokenScheme::PerPatch { rho } => {
                let _ = writeln!(s, "patch_size = {rho}");
            }
            TokenScheme::Shuffled { seed, granularity } => {
                let g = match granularity {
                    ShuffleGranularity::Scalar => "scalar",
                    ShuffleGranularity::Spatial => "spatial",
                };
                let _ = writeln!(s, "shuffle_seed = {seed}\nshuffle_granularity = {g}");
            }
            _ => {}
        }
        match &a.moe {
            None => {
                let _ = writeln!(s, "moe = none");
            }
            Some(m) => {
                let slots = match m.slots {
                    SlotPolicy::Auto => "auto".to_string(),
                    SlotPolicy::Tokens => "tokens".to_string(),
                    SlotPolicy::Fixed(p) => p.to_string(),
                };
                let _ = writeln!(
                    s,
                    "moe = {}\nexperts = {}\nslots_per_expert = {slots}\nslot_fraction = {}\nexpert_scale = {}\nexpansion = {}\ntop_k = {}",
                    m.kind, m.experts, m.slot_fraction, m.expert_scale, m.expansion, m.top_k
                );
            }
        }
        let pen = match a.penultimate {
            Penultimate::Dense => "dense",
            Penultimate::Scaled => "scaled",
            Penultimate::ExtraLayer => "extra_layer",
        };
        let _ = writeln!(
            s,
            "penultimate = {pen}\nwidth = {}\nwidth_scale = {}\npool_before_dense = {}",
            a.width, a.width_scale, a.pool_before_dense
        );
        let g = &self.agent;
        let _ = writeln!(
            s,
            "\n[agent]\ngamma = {}\nn_step = {}\nlr = {}\nadam_eps = {}\neps_final = {}\neps_decay_steps = {}\nmin_replay = {}\ntarget_update = {}\nupdate_period = {}\nbatch = {}\nreplay_capacity = {}",
            g.gamma,
            g.n_step,
            g.adam.lr,
            g.adam.eps,
            g.eps_final,
            g.eps_decay_steps,
            g.min_replay,
            g.target_update,
            g.update_period,
            g.batch,
            g.replay_capacity
        );
        match g.replay {
            ReplayMode::Uniform => {
                let _ = writeln!(s, "replay = uniform");
            }
            ReplayMode::Prioritized { alpha, beta } => {
                let _ = writeln!(s, "replay = prioritized\nper_alpha = {alpha}\nper_beta = {beta}");
            }
        }
        match g.distributional {
            None => {
                let _ = writeln!(s, "head = q");
            }
            Some((atoms, lo, hi)) => {
                let _ = writeln!(s, "head = c51\natoms = {atoms}\nv_min = {lo}\nv_max = {hi}");
            }
        }
        let i = &self.intervention;
        let _ = writeln!(
            s,
            "\n[intervention]\nkind = {}\nperiod = {}\ninclude_router = {}",
            i.kind, i.period, i.include_router
        );
        if let Some(n) = i.subset {
            let _ = writeln!(s, "subset = {n}");
        }
        let _ = writeln!(s, "snp_alpha = {}\nsnp_beta = {}\ntau = {}", i.snp_alpha, i.snp_beta, i.tau);
        let _ = writeln!(
            s,
            "\n[eval]\nevery = {}\nepisodes = {}\neps = {}",
            self.eval_every, self.eval_episodes, self.eval_eps
        );
        s
    }
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// Key/value store over the config text with line-tagged diagnostics.
struct Reader {
    entries: BTreeMap<String, Entry>,
}

const SECTIONS: [&str; 4] = ["arch", "agent", "intervention", "eval"];

impl Reader {
    fn new(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if let Some(name) = t.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config { line, msg: format!("unterminated section header `{t}`") })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown section `[{name}]` (expected one of {})", SECTIONS.join(", ")),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, got `{t}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
                return Err(Error::Config { line, msg: format!("invalid key `{k}`") });
            }
            if v.is_empty() {
                return Err(Error::Config { line, msg: format!("`{k}` has an empty value") });
            }
            if v.parse::<f64>().is_ok_and(|x| !x.is_finite()) {
                return Err(Error::Config { line, msg: format!("`{k}` must be finite, got `{v}`") });
            }
            let key = match &section {
                Some(s) => format!("{s}.{k}"),
                None => k.to_string(),
            };
            if let Some(prev) = entries.get(&key) {
                let prev: &Entry = prev;
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}` (first set on line {})", prev.line),
                });
            }
            entries.insert(
                key,
                Entry {
                    value: v.to_string(),
                    line,
                    used: false,
                },
            );
        }
        Ok(Self { entries })
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.entries.get_mut(key) else {
            return Ok(None);
        };
        e.used = true;
        e.value.parse::<T>().map(Some).map_err(|err| Error::Config {
            line: e.line,
            msg: format!("`{key}`: {err}"),
        })
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().filter(|(_, e)| !e.used).min_by_key(|(_, e)| e.line) {
            Some((k, e)) => Err(Error::Config {
                line: e.line,
                msg: format!("unknown key `{k}`"),
            }),
            None => Ok(()),
        }
    }

    fn fail(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::Config {
            line: self.line(key),
            msg: format!("`{key}`: {}", msg.into()),
        }
    }
}

/// Word wrapper so that parse errors carry a readable message.
struct Word<T>(T);

macro_rules! word {
    ($t:ty, $($name:literal => $val:expr),+ $(,)?) => {
        impl FromStr for Word<$t> {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok(Word($val)),)+
                    other => Err(format!("unknown value `{other}` (expected {})", [$($name),+].join(", "))),
                }
            }
        }
    };
}

word!(Penultimate, "dense" => Penultimate::Dense, "scaled" => Penultimate::Scaled, "extra_layer" => Penultimate::ExtraLayer);
word!(Option<MoeKind>, "none" => None, "softmoe" => Some(MoeKind::SoftMoe), "expert_choice" => Some(MoeKind::ExpertChoice), "token_choice" => Some(MoeKind::TokenChoice));
word!(bool, "true" => true, "false" => false);
word!(words::Kind, "uniform" => words::Kind::Uniform, "prioritized" => words::Kind::Prioritized);
word!(words::HeadKind, "q" => words::HeadKind::Q, "c51" => words::HeadKind::C51);

mod words {
    pub enum Kind {
        Uniform,
        Prioritized,
    }
    pub enum HeadKind {
        Q,
        C51,
    }
}

fn read_arch(r: &mut Reader, a: &mut ArchSpec) -> Result<()> {
    if let Some(v) = r.get::<String>("arch.encoder")? {
        a.encoder = Encoder::from_str(&v).map_err(|e| r.fail("arch.encoder", e.to_string()))?;
    }
    if let Some(v) = r.get::<String>("arch.tokenizer")? {
        a.tokenizer = TokenScheme::from_str(&v).map_err(|e| r.fail("arch.tokenizer", e.to_string()))?;
    }
    match &mut a.tokenizer {
        TokenScheme::PerPatch { rho } => {
            if let Some(v) = r.get("arch.patch_size")? {
                *rho = v;
            }
        }
        TokenScheme::Shuffled { seed, granularity } => {
            if let Some(v) = r.get("arch.shuffle_seed")? {
                *seed = v;
            }
            if let Some(v) = r.get::<String>("arch.shuffle_granularity")? {
                *granularity = ShuffleGranularity::from_str(&v).map_err(|e| r.fail("arch.shuffle_granularity", e.to_string()))?;
            }
        }
        _ => {
            for k in ["arch.patch_size", "arch.shuffle_seed", "arch.shuffle_granularity"] {
                if r.has(k) {
                    return Err(r.fail(k, "only applies to the per_patch or shuffled tokenizers"));
                }
            }
        }
    }
    if let Some(Word(kind)) = r.get::<Word<Option<MoeKind>>>("arch.moe")? {
        a.moe = kind.map(|kind| MoeSpec {
            kind,
            ..a.moe.unwrap_or_default()
        });
    }
    let moe_keys = ["arch.experts", "arch.slots_per_expert", "arch.slot_fraction", "arch.expert_scale", "arch.expansion", "arch.top_k"];
    match &mut a.moe {
        None => {
            if let Some(k) = moe_keys.iter().find(|k| r.has(k)) {
                return Err(r.fail(k, "requires an MoE block (set arch.moe)"));
            }
        }
        Some(m) => {
            if let Some(v) = r.get("arch.experts")? {
                m.experts = v;
            }
            if let Some(v) = r.get::<String>("arch.slots_per_expert")? {
                m.slots = SlotPolicy::from_str(&v).map_err(|e| r.fail("arch.slots_per_expert", e.to_string()))?;
            }
            if let Some(v) = r.get("arch.slot_fraction")? {
                m.slot_fraction = v;
            }
            if let Some(v) = r.get("arch.expert_scale")? {
                m.expert_scale = v;
            }
            if let Some(v) = r.get("arch.expansion")? {
                m.expansion = v;
            }
            if let Some(v) = r.get("arch.top_k")? {
                m.top_k = v;
            }
            m.activation = Activation::Relu;
        }
    }
    if let Some(Word(p)) = r.get::<Word<Penultimate>>("arch.penultimate")? {
        a.penultimate = p;
    }
    if let Some(v) = r.get("arch.width")? {
        a.width = v;
    }
    if let Some(v) = r.get("arch.width_scale")? {
        a.width_scale = v;
    }
    if let Some(Word(v)) = r.get::<Word<bool>>("arch.pool_before_dense")? {
        a.pool_before_dense = v;
    }
    Ok(())
}

fn read_agent(r: &mut Reader, g: &mut AgentConfig) -> Result<()> {
    macro_rules! set {
        ($key:literal, $field:expr) => {
            if let Some(v) = r.get($key)? {
                $field = v;
            }
        };
    }
    set!("agent.gamma", g.gamma);
    set!("agent.n_step", g.n_step);
    set!("agent.lr", g.adam.lr);
    set!("agent.adam_eps", g.adam.eps);
    set!("agent.eps_final", g.eps_final);
    set!("agent.eps_decay_steps", g.eps_decay_steps);
    set!("agent.min_replay", g.min_replay);
    set!("agent.target_update", g.target_update);
    set!("agent.update_period", g.update_period);
    set!("agent.batch", g.batch);
    set!("agent.replay_capacity", g.replay_capacity);
    if let Some(Word(kind)) = r.get::<Word<words::Kind>>("agent.replay")? {
        g.replay = match kind {
            words::Kind::Uniform => ReplayMode::Uniform,
            words::Kind::Prioritized => match g.replay {
                ReplayMode::Prioritized { .. } => g.replay,
                ReplayMode::Uniform => ReplayMode::Prioritized { alpha: 0.5, beta: 0.5 },
            },
        };
    }
    match &mut g.replay {
        ReplayMode::Uniform => {
            for k in ["agent.per_alpha", "agent.per_beta"] {
                if r.has(k) {
                    return Err(r.fail(k, "requires agent.replay = prioritized"));
                }
            }
        }
        ReplayMode::Prioritized { alpha, beta } => {
            set!("agent.per_alpha", *alpha);
            set!("agent.per_beta", *beta);
        }
    }
    if let Some(Word(head)) = r.get::<Word<words::HeadKind>>("agent.head")? {
        g.distributional = match head {
            words::HeadKind::Q => None,
            words::HeadKind::C51 => Some(g.distributional.unwrap_or((21, -2.0, 2.0))),
        };
    }
    match &mut g.distributional {
        None => {
            for k in ["agent.atoms", "agent.v_min", "agent.v_max"] {
                if r.has(k) {
                    return Err(r.fail(k, "requires agent.head = c51"));
                }
            }
        }
        Some((atoms, lo, hi)) => {
            set!("agent.atoms", *atoms);
            set!("agent.v_min", *lo);
            set!("agent.v_max", *hi);
            if *atoms < 2 || !(*lo < *hi) {
                return Err(r.fail("agent.atoms", "c51 needs atoms >= 2 and v_min < v_max"));
            }
        }
    }
    Ok(())
}

fn read_intervention(r: &mut Reader, i: &mut InterventionSchedule) -> Result<()> {
    if let Some(v) = r.get::<String>("intervention.kind")? {
        i.kind = InterventionKind::from_str(&v).map_err(|e| r.fail("intervention.kind", e.to_string()))?;
    }
    if let Some(v) = r.get("intervention.period")? {
        i.period = v;
    }
    if let Some(Word(v)) = r.get::<Word<bool>>("intervention.include_router")? {
        i.include_router = v;
    }
    if let Some(v) = r.get("intervention.subset")? {
        i.subset = Some(v);
    }
    if let Some(v) = r.get("intervention.snp_alpha")? {
        i.snp_alpha = v;
    }
    if let Some(v) = r.get("intervention.snp_beta")? {
        i.snp_beta = v;
    }
    if let Some(v) = r.get("intervention.tau")? {
        i.tau = v;
    }
    Ok(())
}

/// One arm of an ablation preset: everything but game and seed.
#[derive(Debug, Clone)]
pub struct Arm {
    pub label: String,
    pub arch_name: &'static str,
    pub arch: ArchSpec,
    pub agent: AgentKind,
    pub intervention: InterventionSchedule,
}

impl Arm {
    fn new(label: impl Into<String>, arch_name: &'static str, arch: ArchSpec) -> Self {
        Self {
            label: label.into(),
            arch_name,
            arch,
            agent: AgentKind::RainbowLite,
            intervention: InterventionSchedule::default(),
        }
    }
}

fn moe_arch(kind: MoeKind, experts: usize, expert_scale: f64) -> ArchSpec {
    ArchSpec {
        tokenizer: TokenScheme::PerConv,
        moe: Some(MoeSpec {
            kind,
            experts,
            expert_scale,
            ..MoeSpec::default()
        }),
        ..ArchSpec::default()
    }
}

fn with_slots(mut a: ArchSpec, slots: SlotPolicy, fraction: f64) -> ArchSpec {
    if let Some(m) = &mut a.moe {
        m.slots = slots;
        m.slot_fraction = fraction;
    }
    a
}

fn arch_name(kind: MoeKind) -> &'static str {
    match kind {
        MoeKind::SoftMoe => "softmoe",
        MoeKind::ExpertChoice => "expert_choice",
        MoeKind::TokenChoice => "token_choice",
    }
}

/// Arms of an ablation preset, in report order.
pub fn preset_arms(preset: &str, steps: u64) -> Result<Vec<Arm>> {
    let preset_arch = |name: &'static str| -> Result<Arm> { Ok(Arm::new(name, name, ArchSpec::preset(name)?)) };
    let soft = |n: usize, scale: f64| moe_arch(MoeKind::SoftMoe, n, scale);
    let arms = match preset {
        "expert_sweep" => {
            let mut v = vec![preset_arch("baseline")?, preset_arch("baseline_scaled")?];
            for n in [1, 2, 4, 8] {
                v.push(Arm::new(format!("softmoe-{n}"), "softmoe", soft(n, 1.0)));
            }
            v.push(Arm::new("softmoe-1-scaled", "softmoe", soft(1, 4.0)));
            v
        }
        "components" => {
            let mut v = vec![preset_arch("baseline")?];
            for kind in [MoeKind::SoftMoe, MoeKind::ExpertChoice] {
                let name = arch_name(kind);
                v.push(Arm::new(format!("{name}-4"), name, moe_arch(kind, 4, 1.0)));
                v.push(Arm::new(
                    format!("{name}-4-all_slots"),
                    name,
                    with_slots(moe_arch(kind, 4, 1.0), SlotPolicy::Tokens, 1.0),
                ));
            }
            v.push(preset_arch("baseline_scaled")?);
            v.push(Arm::new("softmoe-4-scaled", "softmoe", soft(4, 4.0)));
            v.push(preset_arch("baseline_extra_layer")?);
            v
        }
        "tokenizers" => {
            let schemes = [
                TokenScheme::PerConv,
                TokenScheme::PerFeat,
                TokenScheme::PerPatch { rho: 2 },
                TokenScheme::Shuffled {
                    seed: 0,
                    granularity: ShuffleGranularity::Scalar,
                },
            ];
            let mut v = Vec::new();
            for (suffix, scale) in [("", 1.0), ("-scaled", 4.0)] {
                for scheme in schemes {
                    v.push(Arm::new(
                        format!("softmoe-1{suffix}-{scheme}"),
                        "softmoe",
                        ArchSpec {
                            tokenizer: scheme,
                            ..soft(1, scale)
                        },
                    ));
                }
            }
            v
        }
        "slots" => {
            let mut v = Vec::new();
            for kind in [MoeKind::SoftMoe, MoeKind::ExpertChoice] {
                let name = arch_name(kind);
                let base = moe_arch(kind, 1, 4.0);
                v.push(Arm::new(format!("{name}-1-scaled"), name, base.clone()));
                v.push(Arm::new(format!("{name}-1-scaled-10pct"), name, with_slots(base.clone(), SlotPolicy::Auto, 0.1)));
                v.push(Arm::new(format!("{name}-1-scaled-1slot"), name, with_slots(base, SlotPolicy::Fixed(1), 1.0)));
            }
            v
        }
        "plasticity" => {
            let period = (steps / 3).max(1);
            let mut v = Vec::new();
            let kinds: [(&str, InterventionKind, bool); 6] = [
                ("none", InterventionKind::None, false),
                ("reset_all", InterventionKind::ResetAll, false),
                ("reset_all_router", InterventionKind::ResetAll, true),
                ("reset_subset", InterventionKind::ResetSubset, false),
                ("snp_all", InterventionKind::SnpAll, false),
                ("snp_subset", InterventionKind::SnpSubset, false),
            ];
            for agent in [AgentKind::RainbowLite, AgentKind::DerLite] {
                for (label, kind, router) in kinds {
                    let mut arm = Arm::new(format!("{agent}-softmoe-4-{label}"), "softmoe", soft(4, 1.0));
                    arm.agent = agent;
                    arm.intervention = InterventionSchedule {
                        kind,
                        period,
                        include_router: router,
                        ..InterventionSchedule::default()
                    };
                    v.push(arm);
                }
            }
            for (label, kind) in [("prune_once", InterventionKind::PruneOnce), ("prune_gradual", InterventionKind::PruneGradual)] {
                let mut arm = Arm::new(format!("rainbow_lite-softmoe-4-{label}"), "softmoe", soft(4, 1.0));
                arm.intervention = InterventionSchedule {
                    kind,
                    period: (steps / 2).max(1),
                    ..InterventionSchedule::default()
                };
                v.push(arm);
            }
            v
        }
        "tokenized_baseline" => {
            let mut v = Vec::new();
            for encoder in [Encoder::MiniCnn, Encoder::MiniResnet] {
                for name in ["baseline", "tokenized_sum", "tokenized_mean"] {
                    for (suffix, pen) in [("", Penultimate::Dense), ("-scaled", Penultimate::Scaled)] {
                        v.push(Arm::new(
                            format!("{encoder}-{name}{suffix}"),
                            name,
                            ArchSpec {
                                encoder,
                                penultimate: pen,
                                ..ArchSpec::preset(name)?
                            },
                        ));
                    }
                }
            }
            v
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown ablation preset `{other}` (expected one of {})",
                ABLATION_PRESETS.join(", ")
            )))
        }
    };
    Ok(arms)
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub steps: u64,
    pub seeds: u64,
    pub games: Vec<Game>,
    /// Replaces the encoder of every arm that does not fix one itself.
    pub encoder: Option<Encoder>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            seeds: DEFAULT_SEEDS,
            games: Game::ALL.to_vec(),
            encoder: None,
        }
    }
}

/// Every run of a preset, ordered by arm, then game, then seed.
pub fn ablation_grid(preset: &str, opts: &GridOptions) -> Result<Vec<RunConfig>> {
    if opts.steps == 0 || opts.seeds == 0 || opts.games.is_empty() {
        return Err(Error::invalid("steps, seeds and games must be non-empty"));
    }
    let mut out = Vec::new();
    for arm in preset_arms(preset, opts.steps)? {
        let mut arch = arm.arch.clone();
        if let (Some(e), false) = (opts.encoder, preset == "tokenized_baseline") {
            arch.encoder = e;
        }
        for &game in &opts.games {
            for seed in 0..opts.seeds {
                let mut cfg = RunConfig::new(game, arm.arch_name, arm.agent)?;
                cfg.label = arm.label.clone();
                cfg.arch = arch.clone();
                cfg.seed = seed;
                cfg.total_env_steps = opts.steps;
                cfg.eval_every = cfg.eval_every.min(opts.steps);
                cfg.intervention = arm.intervention.clone();
                out.push(cfg);
            }
        }
    }
    Ok(out)
}

/// The configs of a grid as text, separated by `---` lines.
pub fn dry_run_listing(configs: &[RunConfig]) -> String {
    configs.iter().map(|c| c.to_text()).collect::<Vec<_>>().join("---\n")
}

/// `root/label/game/seedN`.
pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(&cfg.label).join(cfg.game.name()).join(format!("seed{}", cfg.seed))
}

/// Trains one config into `dir`, also writing `config.txt`.
pub fn execute_run(cfg: &RunConfig, dir: &Path) -> Result<RunRecord> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    rlcore::run_training(&cfg.train_spec(Some(dir.to_path_buf())))
}

/// Runs every `(config, dir)` pair on up to `jobs` threads. Results come
/// back in input order.
pub fn execute_all(runs: &[(RunConfig, PathBuf)], jobs: usize) -> Vec<Result<RunRecord>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, runs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, dir)) = runs.get(i) else {
                    break;
                };
                let r = execute_run(cfg, dir);
                results.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect()
}

/// `metrics.csv` files under `path` (itself, or found recursively), sorted.
fn metrics_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let direct = path.join("metrics.csv");
    if direct.is_file() {
        out.push(direct);
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for p in entries {
        metrics_files(&p, out)?;
    }
    Ok(())
}

/// Reads the metrics of every run under `paths`, listing every bad file.
pub fn collect_metrics(paths: &[PathBuf]) -> Result<Vec<MetricsRow>> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")));
        }
        metrics_files(p, &mut files)?;
    }
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for f in &files {
        match std::fs::read_to_string(f).map_err(|e| Error::io(f, e)).and_then(|t| rlcore::parse_metrics_csv(&t)) {
            Ok(r) if r.is_empty() => problems.push(format!("{}: no evaluation rows", f.display())),
            Ok(r) => rows.extend(r),
            Err(e) => problems.push(format!("{}: {e}", f.display())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Format {
            path: format!("{} metrics file(s)", problems.len()),
            msg: problems.join("; "),
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("no metrics.csv files found"));
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct AggregateOptions {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            resamples: evalstats::DEFAULT_RESAMPLES,
            level: evalstats::DEFAULT_LEVEL,
            seed: 0,
        }
    }
}

/// Report rows and learning curves for a set of evaluation rows.
pub fn aggregate_rows(rows: &[MetricsRow], opts: &AggregateOptions) -> Result<(Vec<ReportRow>, Vec<Curve>)> {
    let tables = evalstats::score_tables(rows)?;
    let report = evalstats::aggregate_report(&tables, opts.resamples, opts.level, opts.seed)?;
    Ok((report, evalstats::learning_curves(rows)?))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv` and `report.svg` into `out`.
pub fn write_report(out: &Path, report: &[ReportRow], curves: &[Curve]) -> Result<()> {
    write_file(&out.join("report.csv"), &evalstats::report_csv_string(report))?;
    write_file(&out.join("report.svg"), &evalstats::report_svg(report, curves)?)
}

/// `tokenmoe train`: returns the run directory.
pub fn cmd_train(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> CmdResult<PathBuf> {
    let text = std::fs::read_to_string(config_path).map_err(|e| CmdError::usage(Error::io(config_path, e)))?;
    let mut cfg = RunConfig::parse(&text).map_err(CmdError::usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = match (out, &cfg.out) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => run_dir(&default_out_root(), &cfg),
    };
    execute_run(&cfg, &dir).map_err(CmdError::runtime)?;
    Ok(dir)
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub configs: Vec<RunConfig>,
    pub failures: Vec<(String, Error)>,
    pub report_dir: PathBuf,
}

/// `tokenmoe ablate`: runs the grid under `out/preset`, then aggregates
/// completed runs into `report.csv` and `report.svg` there.
pub fn cmd_ablate(preset: &str, opts: &GridOptions, jobs: usize, out: &Path, agg: &AggregateOptions) -> CmdResult<AblateOutcome> {
    let configs = ablation_grid(preset, opts).map_err(CmdError::usage)?;
    for c in &configs {
        c.validate().map_err(CmdError::usage)?;
    }
    let root = out.join(preset);
    let runs: Vec<(RunConfig, PathBuf)> = configs.iter().map(|c| (c.clone(), run_dir(&root, c))).collect();
    let results = execute_all(&runs, jobs);
    let mut failures = Vec::new();
    let mut done = Vec::new();
    for ((cfg, dir), r) in runs.iter().zip(results) {
        match r {
            Ok(_) => done.push(dir.clone()),
            Err(e) => failures.push((format!("{}-{}-s{}", cfg.label, cfg.game, cfg.seed), e)),
        }
    }
    if done.is_empty() {
        return Err(CmdError::runtime(Error::invalid("every run failed")));
    }
    let rows = collect_metrics(&done).map_err(CmdError::runtime)?;
    let (report, curves) = aggregate_rows(&rows, agg).map_err(CmdError::runtime)?;
    write_report(&root, &report, &curves).map_err(CmdError::runtime)?;
    Ok(AblateOutcome {
        configs,
        failures,
        report_dir: root,
    })
}

/// `tokenmoe aggregate`: returns the report rows written to `out`.
pub fn cmd_aggregate(paths: &[PathBuf], out: &Path, agg: &AggregateOptions) -> CmdResult<Vec<ReportRow>> {
    if paths.is_empty() {
        return Err(CmdError::usage(Error::invalid("no run directories given")));
    }
    let rows = collect_metrics(paths).map_err(CmdError::usage)?;
    let (report, curves) = aggregate_rows(&rows, agg).map_err(CmdError::usage)?;
    write_report(out, &report, &curves).map_err(CmdError::runtime)?;
    Ok(report)
}

/// `tokenmoe plot`: renders `report_csv`, plus learning curves from any
/// run directories given, to `out_svg`.
pub fn cmd_plot(report_csv: &Path, out_svg: &Path, runs: &[PathBuf]) -> CmdResult<()> {
    let text = std::fs::read_to_string(report_csv).map_err(|e| CmdError::usage(Error::io(report_csv, e)))?;
    let report = evalstats::parse_report_csv(&text).map_err(CmdError::usage)?;
    if report.is_empty() {
        return Err(CmdError::usage(Error::invalid(format!("{}: empty report", report_csv.display()))));
    }
    let curves = if runs.is_empty() {
        Vec::new()
    } else {
        let rows = collect_metrics(runs).map_err(CmdError::usage)?;
        evalstats::learning_curves(&rows).map_err(CmdError::usage)?
    };
    let svg = evalstats::report_svg(&report, &curves).map_err(CmdError::usage)?;
    write_file(out_svg, &svg).map_err(CmdError::runtime)
}
