use super::{resolve_slots, Expert, MoeOutput, MoeSpec};
use crate::diffcore::{InitSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tokenize::TokenMatrix;

/// Combine-logit offset applied to pruned slots at full pruning progress.
/// `exp(-1e4)` underflows to exactly zero in `f64`.
pub const PRUNE_LOGIT_OFFSET: f64 = 1e4;

/// Experts being pruned and how far along the schedule is (`1.0` = removed).
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    pub experts: Vec<usize>,
    pub progress: f64,
}

impl PruneState {
    pub fn is_complete(&self) -> bool {
        self.progress >= 1.0
    }
}

/// SoftMoE with one shared logit table Φ: dispatch weights are a softmax of
/// `x·Φ` over tokens (per slot), combine weights a softmax over slots (per token).
#[derive(Debug, Clone)]
pub struct SoftMoeLayer {
    pub phi: ParamId,
    pub experts: Vec<Expert>,
    pub n: usize,
    pub p: usize,
    pub d_tok: usize,
    pub prune: Option<PruneState>,
}

impl SoftMoeLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d_tok: usize, m: usize, spec: &MoeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let n = spec.experts;
        let p = resolve_slots(spec.slots, spec.slot_fraction, m, n)?;
        let phi_name = format!("{prefix}.phi");
        let phi = store.add(&phi_name, InitSpec::fan_in(d_tok, derive_seed(seed, &phi_name)), &[d_tok, n * p])?;
        let d_hidden = spec.hidden_width(d_tok);
        let experts = (0..n)
            .map(|e| Expert::new(store, &format!("{prefix}.expert{e}"), d_tok, d_hidden, spec.activation, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            phi,
            experts,
            n,
            p,
            d_tok,
            prune: None,
        })
    }

    pub fn slots(&self) -> usize {
        self.n * self.p
    }

    /// Starts (or advances) pruning of `experts`; they must be a proper subset.
    pub fn set_prune(&mut self, experts: Vec<usize>, progress: f64) -> Result<()> {
        if experts.is_empty() || experts.len() >= self.n || experts.iter().any(|&e| e >= self.n) {
            return Err(Error::invalid(format!(
                "pruning needs a non-empty proper subset of the {} experts, got {experts:?}",
                self.n
            )));
        }
        self.prune = Some(PruneState {
            experts,
            progress: progress.clamp(0.0, 1.0),
        });
        Ok(())
    }

    fn is_removed(&self, e: usize) -> bool {
        self.prune
            .as_ref()
            .is_some_and(|s| s.is_complete() && s.experts.contains(&e))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<MoeOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_tok {
            return Err(Error::Shape {
                op: "softmoe",
                lhs: s,
                rhs: vec![self.d_tok, self.slots()],
            });
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let flat = tape.reshape(x, &[b * m, d])?;
        let phi = tape.param(store, self.phi);
        let logits = tape.matmul(flat, phi)?;
        let mut logits = tape.reshape(logits, &[b, m, self.slots()])?;

        let active: Vec<usize> = (0..self.n).filter(|&e| !self.is_removed(e)).collect();
        if active.len() < self.n {
            let cols: Vec<usize> = active.iter().flat_map(|&e| e * self.p..(e + 1) * self.p).collect();
            logits = tape.gather_last(logits, cols.into())?;
        }
        let width = active.len() * self.p;

        // dispatch: per slot, softmax over tokens
        let dispatch = tape.softmax(logits, 1)?;
        let dispatch_t = tape.transpose12(dispatch)?;
        let slots = tape.bmm(dispatch_t, x)?;

        let mut hidden = vec![None; self.n];
        let mut outs = Vec::with_capacity(active.len());
        for (j, &e) in active.iter().enumerate() {
            let part = tape.slice_axis1(slots, j * self.p, self.p)?;
            let part = tape.reshape(part, &[b * self.p, d])?;
            let (y, h) = self.experts[e].forward(tape, store, part)?;
            hidden[e] = Some(h);
            outs.push(tape.reshape(y, &[b, self.p, d])?);
        }
        let slot_out = tape.concat_axis1(&outs)?;

        // combine: per token, softmax over slots
        let combine_logits = match &self.prune {
            Some(state) if !state.is_complete() && state.progress > 0.0 => {
                let mut mask = vec![0.0; width];
                for &e in &state.experts {
                    mask[e * self.p..(e + 1) * self.p]
                        .iter_mut()
                        .for_each(|v| *v = -state.progress * PRUNE_LOGIT_OFFSET);
                }
                let mask: Vec<f64> = std::iter::repeat_n(mask, b * m).flatten().collect();
                let mask = tape.constant(Tensor::new(vec![b, m, width], mask)?);
                tape.add(logits, mask)?
            }
            _ => logits,
        };
        let combine = tape.softmax(combine_logits, 2)?;
        let out = tape.bmm(combine, slot_out)?;
        Ok(MoeOutput { out, hidden })
    }
}

fn single(tape: &mut Tape, t: &Tensor) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(tape.constant(t.reshape(&shape)?))
}

fn unbatch(t: &Tensor) -> Result<Tensor> {
    t.reshape(&t.shape()[1..])
}

/// Dispatch weights `D` (`[m, n·p]`, columns sum to 1) and slot inputs `Dᵀ·x`.
pub fn softmoe_dispatch(x: &TokenMatrix, phi: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::inference();
    let xv = single(&mut tape, &x.tokens)?;
    let flat = tape.constant(x.tokens.clone());
    let pv = tape.constant(phi.clone());
    let logits = tape.matmul(flat, pv)?;
    let logits_value = tape.value(logits).clone();
    let logits = single(&mut tape, &logits_value)?;
    let d = tape.softmax(logits, 1)?;
    let dt = tape.transpose12(d)?;
    let slots = tape.bmm(dt, xv)?;
    Ok((unbatch(tape.value(d))?, unbatch(tape.value(slots))?))
}

/// Combines slot outputs with per-token softmax weights over the logits' slot axis.
pub fn softmoe_combine(logits: &Tensor, slot_outputs: &Tensor) -> Result<TokenMatrix> {
    if logits.rank() != 2 || slot_outputs.rank() != 2 || logits.shape()[1] != slot_outputs.shape()[0] {
        return Err(Error::Shape {
            op: "softmoe_combine",
            lhs: logits.shape().to_vec(),
            rhs: slot_outputs.shape().to_vec(),
        });
    }
    let mut tape = Tape::inference();
    let l = single(&mut tape, logits)?;
    let y = single(&mut tape, slot_outputs)?;
    let c = tape.softmax(l, 2)?;
    let out = tape.bmm(c, y)?;
    TokenMatrix::new(unbatch(tape.value(out))?, crate::tokenize::TokenScheme::PerConv)
}

/// Runs one token matrix through `layer`.
pub fn softmoe_forward(x: &TokenMatrix, layer: &SoftMoeLayer, store: &ParamStore) -> Result<TokenMatrix> {
    let mut tape = Tape::inference();
    let xv = single(&mut tape, &x.tokens)?;
    let out = layer.forward(&mut tape, store, xv)?;
    TokenMatrix::new(unbatch(tape.value(out.out))?, x.scheme)
}
