//! Mixture-of-experts layers mapping `[B, m, d_tok]` tokens to the same shape.
//!
//! * [`SoftMoeLayer`]: every slot is a softmax-weighted mix of all tokens,
//!   every output token a softmax-weighted mix of all slot outputs.
//! * [`ExpertChoiceLayer`]: each expert picks its top-`p` tokens.
//! * [`TokenChoiceLayer`]: each token picks its top-`k` experts, experts
//!   accept at most `p` tokens.

mod expert;
mod routing;
mod softmoe;

use std::fmt;
use std::str::FromStr;

pub use expert::{Activation, Expert};
pub use routing::{
    expert_choice_assign, token_choice_assign, ExpertChoiceLayer, TokenChoiceLayer,
};
pub use softmoe::{softmoe_combine, softmoe_dispatch, softmoe_forward, PruneState, SoftMoeLayer, PRUNE_LOGIT_OFFSET};

use crate::diffcore::{ParamId, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeKind {
    SoftMoe,
    ExpertChoice,
    TokenChoice,
}

impl fmt::Display for MoeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MoeKind::SoftMoe => "softmoe",
            MoeKind::ExpertChoice => "expert_choice",
            MoeKind::TokenChoice => "token_choice",
        })
    }
}

impl FromStr for MoeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmoe" => Ok(MoeKind::SoftMoe),
            "expert_choice" => Ok(MoeKind::ExpertChoice),
            "token_choice" => Ok(MoeKind::TokenChoice),
            other => Err(Error::invalid(format!("unknown moe kind `{other}`"))),
        }
    }
}

/// How many slots each expert gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotPolicy {
    /// `max(1, m / n)`.
    Auto,
    /// One slot per token for every expert.
    Tokens,
    Fixed(usize),
}

impl FromStr for SlotPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SlotPolicy::Auto),
            "tokens" => Ok(SlotPolicy::Tokens),
            n => n
                .parse::<usize>()
                .ok()
                .filter(|&p| p > 0)
                .map(SlotPolicy::Fixed)
                .ok_or_else(|| Error::invalid(format!("slots_per_expert must be auto, tokens or a positive integer, got `{n}`"))),
        }
    }
}

/// Default slots per expert: the tokens divided evenly among experts.
pub fn default_slot_count(m: usize, n: usize) -> usize {
    (m / n.max(1)).max(1)
}

/// Resolves the slot count, then scales it by `fraction` (floor, at least 1).
pub fn resolve_slots(policy: SlotPolicy, fraction: f64, m: usize, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("slot_fraction must lie in (0, 1], got {fraction}")));
    }
    let base = match policy {
        SlotPolicy::Auto => default_slot_count(m, n),
        SlotPolicy::Tokens => m,
        SlotPolicy::Fixed(p) => p,
    };
    // the epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    Ok(((base as f64 * fraction + 1e-9).floor() as usize).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeSpec {
    pub kind: MoeKind,
    pub experts: usize,
    pub slots: SlotPolicy,
    pub slot_fraction: f64,
    /// Multiplies the expert hidden width.
    pub expert_scale: f64,
    /// Hidden width per unit of token width before scaling.
    pub expansion: f64,
    /// Experts per token (token choice only).
    pub top_k: usize,
    pub activation: Activation,
}

impl Default for MoeSpec {
    fn default() -> Self {
        Self {
            kind: MoeKind::SoftMoe,
            experts: 4,
            slots: SlotPolicy::Auto,
            slot_fraction: 1.0,
            expert_scale: 1.0,
            expansion: 4.0,
            top_k: 1,
            activation: Activation::Relu,
        }
    }
}

impl MoeSpec {
    pub fn hidden_width(&self, d_tok: usize) -> usize {
        ((d_tok as f64 * self.expansion * self.expert_scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::invalid("experts must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::invalid(format!(
                "top_k must lie in 1..={}, got {}",
                self.experts, self.top_k
            )));
        }
        if !(self.expert_scale > 0.0 && self.expansion > 0.0) {
            return Err(Error::invalid("expert_scale and expansion must be positive"));
        }
        Ok(())
    }
}

/// Output of one MoE forward pass.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// `[B, m, d_tok]`.
    pub out: Var,
    /// Post-activation hidden units per expert (`[rows, d_hidden]`), `None`
    /// for experts that processed nothing.
    pub hidden: Vec<Option<Var>>,
}

/// A routing layer of any kind.
#[derive(Debug, Clone)]
pub enum MoeLayer {
    Soft(SoftMoeLayer),
    ExpertChoice(ExpertChoiceLayer),
    TokenChoice(TokenChoiceLayer),
}

impl MoeLayer {
    pub fn forward(
        &self,
        tape: &mut crate::diffcore::Tape,
        store: &crate::diffcore::ParamStore,
        x: Var,
    ) -> Result<MoeOutput> {
        match self {
            MoeLayer::Soft(l) => l.forward(tape, store, x),
            MoeLayer::ExpertChoice(l) => l.forward(tape, store, x),
            MoeLayer::TokenChoice(l) => l.forward(tape, store, x),
        }
    }

    pub fn experts(&self) -> &[Expert] {
        match self {
            MoeLayer::Soft(l) => &l.experts,
            MoeLayer::ExpertChoice(l) => &l.experts,
            MoeLayer::TokenChoice(l) => &l.experts,
        }
    }

    /// The routing table (Φ for SoftMoE, the gate otherwise).
    pub fn router(&self) -> ParamId {
        match self {
            MoeLayer::Soft(l) => l.phi,
            MoeLayer::ExpertChoice(l) => l.gate,
            MoeLayer::TokenChoice(l) => l.gate,
        }
    }

    pub fn slots_per_expert(&self) -> usize {
        match self {
            MoeLayer::Soft(l) => l.p,
            MoeLayer::ExpertChoice(l) => l.p,
            MoeLayer::TokenChoice(l) => l.p,
        }
    }

    pub fn as_soft_mut(&mut self) -> Option<&mut SoftMoeLayer> {
        match self {
            MoeLayer::Soft(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_soft(&self) -> Option<&SoftMoeLayer> {
        match self {
            MoeLayer::Soft(l) => Some(l),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_counts() {
        assert_eq!(default_slot_count(36, 4), 9);
        assert_eq!(default_slot_count(3, 8), 1);
        assert_eq!(resolve_slots(SlotPolicy::Tokens, 1.0, 36, 4).unwrap(), 36);
        assert_eq!(resolve_slots(SlotPolicy::Auto, 0.1, 36, 1).unwrap(), 3);
        assert_eq!(resolve_slots(SlotPolicy::Auto, 0.01, 36, 1).unwrap(), 1);
        assert_eq!(resolve_slots(SlotPolicy::Fixed(100), 0.29, 36, 1).unwrap(), 29);
        assert!(resolve_slots(SlotPolicy::Auto, 0.0, 36, 1).is_err());
    }

    #[test]
    fn parse_policies() {
        assert_eq!("auto".parse::<SlotPolicy>().unwrap(), SlotPolicy::Auto);
        assert_eq!("tokens".parse::<SlotPolicy>().unwrap(), SlotPolicy::Tokens);
        assert_eq!("7".parse::<SlotPolicy>().unwrap(), SlotPolicy::Fixed(7));
        assert!("0".parse::<SlotPolicy>().is_err());
        assert!("bogus".parse::<MoeKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        let bad = MoeSpec { top_k: 5, ..MoeSpec::default() };
        assert!(bad.validate().is_err());
        assert_eq!(MoeSpec { expert_scale: 4.0, ..MoeSpec::default() }.hidden_width(16), 256);
    }
}
