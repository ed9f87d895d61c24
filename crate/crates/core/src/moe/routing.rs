use std::rc::Rc;

use super::{resolve_slots, Expert, MoeOutput, MoeSpec};
use crate::diffcore::{top_k, InitSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

fn check_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::invalid(format!("gate matrix must be [m, n], got {:?}", t.shape()))),
    }
}

/// Tokens chosen by each expert: the top-`p` entries of its logit column,
/// ties to the lower token index.
pub fn expert_choice_assign(logits: &Tensor, p: usize) -> Result<Vec<Vec<usize>>> {
    let (m, n) = check_matrix(logits)?;
    if p == 0 || p > m {
        return Err(Error::invalid(format!("expert choice needs 1 <= p <= m = {m}, got p = {p}")));
    }
    (0..n)
        .map(|e| {
            let column: Vec<f64> = (0..m).map(|i| logits.data()[i * n + e]).collect();
            top_k(&column, p)
        })
        .collect()
}

/// Tokens accepted by each expert under token-choice routing.
///
/// Every token proposes to its top-`k` experts by gate weight (ties to the
/// lower expert index); each expert keeps at most `p` proposals in
/// descending gate weight, ties to the lower token index. Accepted lists are
/// in acceptance order.
pub fn token_choice_assign(gates: &Tensor, k: usize, p: usize) -> Result<Vec<Vec<usize>>> {
    let (m, n) = check_matrix(gates)?;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("token choice needs 1 <= k <= n = {n}, got k = {k}")));
    }
    if p == 0 {
        return Err(Error::invalid("token choice needs p >= 1"));
    }
    let mut proposals: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..m {
        for e in top_k(gates.row(i), k)? {
            proposals[e].push(i);
        }
    }
    Ok(proposals
        .into_iter()
        .enumerate()
        .map(|(e, mut tokens)| {
            tokens.sort_by(|&a, &b| {
                gates.data()[b * n + e]
                    .partial_cmp(&gates.data()[a * n + e])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            tokens.truncate(p);
            tokens
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    ExpertChoice,
    TokenChoice { k: usize },
}

fn build(store: &mut ParamStore, prefix: &str, d_tok: usize, spec: &MoeSpec, seed: u64) -> Result<(ParamId, Vec<Expert>)> {
    spec.validate()?;
    let name = format!("{prefix}.gate");
    let gate = store.add(&name, InitSpec::fan_in(d_tok, derive_seed(seed, &name)), &[d_tok, spec.experts])?;
    let d_hidden = spec.hidden_width(d_tok);
    let experts = (0..spec.experts)
        .map(|e| Expert::new(store, &format!("{prefix}.expert{e}"), d_tok, d_hidden, spec.activation, seed))
        .collect::<Result<_>>()?;
    Ok((gate, experts))
}

#[allow(clippy::too_many_arguments)]
fn routed_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    gate: ParamId,
    experts: &[Expert],
    d_tok: usize,
    p: usize,
    rule: Rule,
) -> Result<MoeOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != d_tok {
        return Err(Error::Shape {
            op: "routed moe",
            lhs: s,
            rhs: vec![d_tok, experts.len()],
        });
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    let n = experts.len();
    let flat = tape.reshape(x, &[b * m, d])?;
    let g = tape.param(store, gate);
    let logits = tape.matmul(flat, g)?;
    let weights = tape.softmax(logits, 1)?;

    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    for bi in 0..b {
        let block = |t: &Tensor| Tensor::new(vec![m, n], t.data()[bi * m * n..(bi + 1) * m * n].to_vec());
        let chosen = match rule {
            Rule::ExpertChoice => expert_choice_assign(&block(tape.value(logits))?, p)?,
            Rule::TokenChoice { k } => token_choice_assign(&block(tape.value(weights))?, k, p)?,
        };
        for (e, tokens) in chosen.into_iter().enumerate() {
            rows[e].extend(tokens.into_iter().map(|i| bi * m + i));
        }
    }

    let mut hidden = vec![None; n];
    let mut total: Option<Var> = None;
    for (e, expert) in experts.iter().enumerate() {
        if rows[e].is_empty() {
            continue;
        }
        let idx = Rc::new(rows[e].clone());
        let xe = tape.gather_rows(flat, idx.clone())?;
        let (ye, h) = expert.forward(tape, store, xe)?;
        hidden[e] = Some(h);
        let ge = tape.gather_flat(weights, Rc::new(rows[e].iter().map(|r| r * n + e).collect()))?;
        let weighted = tape.scale_rows(ye, ge)?;
        let placed = tape.scatter_rows(weighted, idx, b * m)?;
        total = Some(match total {
            Some(t) => tape.add(t, placed)?,
            None => placed,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::zeros(&[b * m, d])),
    };
    let out = tape.reshape(total, &[b, m, d])?;
    Ok(MoeOutput { out, hidden })
}

/// Each expert processes its top-`p` tokens; output rows are gate-weighted
/// sums of the experts that picked them, zero for unpicked tokens.
#[derive(Debug, Clone)]
pub struct ExpertChoiceLayer {
    pub gate: ParamId,
    pub experts: Vec<Expert>,
    pub p: usize,
    pub d_tok: usize,
}

impl ExpertChoiceLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d_tok: usize, m: usize, spec: &MoeSpec, seed: u64) -> Result<Self> {
        let p = resolve_slots(spec.slots, spec.slot_fraction, m, spec.experts)?;
        if p > m {
            return Err(Error::invalid(format!("expert choice needs p <= m, got p = {p}, m = {m}")));
        }
        let (gate, experts) = build(store, prefix, d_tok, spec, seed)?;
        Ok(Self { gate, experts, p, d_tok })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<MoeOutput> {
        routed_forward(tape, store, x, self.gate, &self.experts, self.d_tok, self.p, Rule::ExpertChoice)
    }
}

/// Each token picks its top-`k` experts; experts accept at most `p` tokens.
#[derive(Debug, Clone)]
pub struct TokenChoiceLayer {
    pub gate: ParamId,
    pub experts: Vec<Expert>,
    pub p: usize,
    pub k: usize,
    pub d_tok: usize,
}

impl TokenChoiceLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d_tok: usize, m: usize, spec: &MoeSpec, seed: u64) -> Result<Self> {
        let p = resolve_slots(spec.slots, spec.slot_fraction, m, spec.experts)?;
        let (gate, experts) = build(store, prefix, d_tok, spec, seed)?;
        Ok(Self {
            gate,
            experts,
            p,
            k: spec.top_k,
            d_tok,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<MoeOutput> {
        routed_forward(tape, store, x, self.gate, &self.experts, self.d_tok, self.p, Rule::TokenChoice { k: self.k })
    }
}
