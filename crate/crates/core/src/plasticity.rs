//! Dormant-unit measurement and expert-level interventions: resets,
//! Shrink-and-Perturb and pruning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::diffcore::{Adam, ParamId, ParamStore, Parameter, Tape, Tensor};
use crate::error::{Error, Result};
use crate::moe::MoeLayer;
use crate::netzoo::QNetwork;
use crate::rng::derive_seed;

pub const DEFAULT_TAU: f64 = 0.025;

/// Per-unit activity `mean_x |a_u(x)|` divided by its layer-wide average.
/// `None` when the whole layer is silent.
pub fn unit_scores(acts: &Tensor) -> Result<Option<Vec<f64>>> {
    let [batch, units] = *acts.shape() else {
        return Err(Error::invalid(format!("activations must be [batch, units], got {:?}", acts.shape())));
    };
    if batch == 0 || units == 0 {
        return Err(Error::invalid("dormant scores need at least one sample and one unit"));
    }
    let mut means = vec![0.0; units];
    for row in acts.data().chunks(units) {
        for (m, a) in means.iter_mut().zip(row) {
            *m += a.abs();
        }
    }
    means.iter_mut().for_each(|m| *m /= batch as f64);
    let layer = means.iter().sum::<f64>() / units as f64;
    Ok((layer > 0.0).then(|| means.iter().map(|m| m / layer).collect()))
}

/// Fraction of units whose score is at most `tau`; a silent layer counts as
/// fully dormant.
pub fn dormant_fraction(acts: &Tensor, tau: f64) -> Result<f64> {
    Ok(match unit_scores(acts)? {
        None => 1.0,
        Some(s) => s.iter().filter(|&&v| v <= tau).count() as f64 / s.len() as f64,
    })
}

/// The `count` largest fractions, ties to the lowest index.
pub fn select_experts_to_reset(fractions: &[f64], count: usize) -> Result<Vec<usize>> {
    if count > fractions.len() {
        return Err(Error::invalid(format!("cannot select {count} of {} experts", fractions.len())));
    }
    let mut idx: Vec<usize> = (0..fractions.len()).collect();
    idx.sort_by(|&a, &b| fractions[b].partial_cmp(&fractions[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(count);
    Ok(idx)
}

/// Dormant fraction of every expert's hidden layer on a batch of observations.
pub fn expert_dormant_fractions(net: &QNetwork, probe: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let x = tape.constant(probe.clone());
    let trace = net.forward(&mut tape, x)?;
    let moe = trace.moe.ok_or_else(|| Error::invalid("network has no experts"))?;
    moe.hidden
        .iter()
        .map(|h| match h {
            Some(v) => dormant_fraction(tape.value(*v), tau),
            None => Ok(1.0),
        })
        .collect()
}

/// Dormant fraction of the network's hidden units on `probe`: expert hidden
/// layers for MoE networks, penultimate dense layers otherwise. Each layer
/// is scored against its own mean and the fractions are unit-weighted.
pub fn network_dormant_fraction(net: &QNetwork, probe: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let x = tape.constant(probe.clone());
    let trace = net.forward(&mut tape, x)?;
    let layers: Vec<_> = match &trace.moe {
        Some(m) => m.hidden.iter().flatten().copied().collect(),
        None => trace.dense_hidden.clone(),
    };
    let (mut dormant, mut units) = (0.0, 0usize);
    for v in layers {
        let t = tape.value(v);
        let u = t.shape()[1];
        dormant += dormant_fraction(t, tau)? * u as f64;
        units += u;
    }
    if units == 0 {
        return Err(Error::invalid("network exposes no hidden units"));
    }
    Ok(dormant / units as f64)
}

/// Fresh draw from `param`'s initializer under a seed derived from its name.
pub fn fresh_init(param: &Parameter, seed: u64) -> Tensor {
    param.init_spec.with_seed(derive_seed(seed, &param.name)).sample(param.shape())
}

/// Redraws `ids` from their initializers and zeroes their optimizer moments.
pub fn reset_params(store: &mut ParamStore, ids: &[ParamId], seed: u64, adam: Option<&mut Adam>) -> Result<()> {
    for &id in ids {
        let fresh = fresh_init(store.get(id), seed);
        store.set_value(id, fresh)?;
    }
    if let Some(a) = adam {
        a.reset_moments(ids);
    }
    Ok(())
}

/// `θ ← α·θ + β·φ` with `φ` a fresh initializer draw.
pub fn shrink_perturb(store: &mut ParamStore, ids: &[ParamId], alpha: f64, beta: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("shrink-perturb needs alpha, beta in [0, 1], got {alpha}, {beta}")));
    }
    for &id in ids {
        let fresh = fresh_init(store.get(id), seed);
        let p = store.get_mut(id);
        for (v, f) in p.value.data_mut().iter_mut().zip(fresh.data()) {
            *v = alpha * *v + beta * f;
        }
    }
    Ok(())
}

/// Parameters of the chosen experts, plus the router when requested.
pub fn expert_param_ids(layer: &MoeLayer, experts: &[usize], include_router: bool) -> Result<Vec<ParamId>> {
    let all = layer.experts();
    let mut ids = Vec::new();
    for &e in experts {
        let ex = all
            .get(e)
            .ok_or_else(|| Error::invalid(format!("expert {e} out of range for {} experts", all.len())))?;
        ids.extend(ex.param_ids());
    }
    if include_router {
        ids.push(layer.router());
    }
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    Once,
    Gradual,
}

/// Masks `experts` out of a SoftMoE layer; `progress` 1 removes them.
pub fn prune_experts(layer: &mut MoeLayer, experts: &[usize], progress: f64) -> Result<()> {
    let soft = layer
        .as_soft_mut()
        .ok_or_else(|| Error::invalid("pruning is defined for SoftMoE layers"))?;
    soft.set_prune(experts.to_vec(), progress)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionKind {
    None,
    ResetAll,
    ResetSubset,
    SnpAll,
    SnpSubset,
    PruneOnce,
    PruneGradual,
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterventionKind::None => "none",
            InterventionKind::ResetAll => "reset_all",
            InterventionKind::ResetSubset => "reset_subset",
            InterventionKind::SnpAll => "snp_all",
            InterventionKind::SnpSubset => "snp_subset",
            InterventionKind::PruneOnce => "prune_once",
            InterventionKind::PruneGradual => "prune_gradual",
        })
    }
}

impl FromStr for InterventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => InterventionKind::None,
            "reset_all" => InterventionKind::ResetAll,
            "reset_subset" => InterventionKind::ResetSubset,
            "snp_all" => InterventionKind::SnpAll,
            "snp_subset" => InterventionKind::SnpSubset,
            "prune_once" => InterventionKind::PruneOnce,
            "prune_gradual" => InterventionKind::PruneGradual,
            other => return Err(Error::invalid(format!("unknown intervention `{other}`"))),
        })
    }
}

/// What to do, how often, and to which experts.
///
/// Resets and Shrink-and-Perturb fire at every multiple of `period`.
/// Pruning completes at step `period`: at once, or ramped linearly from step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSchedule {
    pub kind: InterventionKind,
    pub period: u64,
    pub include_router: bool,
    /// Experts touched by subset interventions; `None` means half of them.
    pub subset: Option<usize>,
    pub snp_alpha: f64,
    pub snp_beta: f64,
    pub tau: f64,
}

impl Default for InterventionSchedule {
    fn default() -> Self {
        Self {
            kind: InterventionKind::None,
            period: 10_000,
            include_router: false,
            subset: None,
            snp_alpha: 0.8,
            snp_beta: 0.2,
            tau: DEFAULT_TAU,
        }
    }
}

impl InterventionSchedule {
    pub fn validate(&self, experts: Option<usize>) -> Result<()> {
        if self.kind == InterventionKind::None {
            return Ok(());
        }
        if self.period == 0 {
            return Err(Error::invalid("intervention_period must be positive"));
        }
        let n = experts.ok_or_else(|| Error::invalid(format!("intervention `{}` needs an MoE network", self.kind)))?;
        if self.subset_size(n) > n {
            return Err(Error::invalid(format!("subset of {} exceeds {n} experts", self.subset_size(n))));
        }
        if matches!(self.kind, InterventionKind::PruneOnce | InterventionKind::PruneGradual) && self.subset_size(n) >= n {
            return Err(Error::invalid("pruning must leave at least one expert"));
        }
        Ok(())
    }

    pub fn subset_size(&self, n: usize) -> usize {
        self.subset.unwrap_or((n / 2).max(1))
    }

    /// Pruned experts: the highest-indexed subset.
    pub fn prune_set(&self, n: usize) -> Vec<usize> {
        (n - self.subset_size(n).min(n)..n).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub step: u64,
    pub kind: InterventionKind,
    pub experts: Vec<usize>,
}

/// Applies whatever `schedule` prescribes at env step `step`.
///
/// `probe` is a batch of observations used to rank experts for subset
/// interventions.
pub fn apply_schedule(
    net: &mut QNetwork,
    adam: &mut Adam,
    schedule: &InterventionSchedule,
    step: u64,
    probe: Option<&Tensor>,
    seed: u64,
) -> Result<Option<Event>> {
    use InterventionKind::*;
    if schedule.kind == None || step == 0 {
        return Ok(Option::None);
    }
    let n = net.moe().map(|l| l.experts().len());
    schedule.validate(n)?;
    let n = n.expect("validated");
    let k = schedule.subset_size(n);
    let event_seed = derive_seed(seed, &format!("intervention-{step}"));
    let chosen = |net: &QNetwork| -> Result<Vec<usize>> {
        let probe = probe.ok_or_else(|| Error::invalid("subset interventions need a probe batch"))?;
        select_experts_to_reset(&expert_dormant_fractions(net, probe, schedule.tau)?, k)
    };
    let experts = match schedule.kind {
        ResetAll | SnpAll | ResetSubset | SnpSubset if step % schedule.period != 0 => return Ok(Option::None),
        ResetAll | SnpAll => (0..n).collect(),
        ResetSubset | SnpSubset => chosen(net)?,
        PruneOnce => {
            if step != schedule.period {
                return Ok(Option::None);
            }
            let set = schedule.prune_set(n);
            prune_experts(net.moe_mut().expect("validated"), &set, 1.0)?;
            return Ok(Some(Event { step, kind: schedule.kind, experts: set }));
        }
        PruneGradual => {
            if step > schedule.period {
                return Ok(Option::None);
            }
            let set = schedule.prune_set(n);
            let progress = step as f64 / schedule.period as f64;
            prune_experts(net.moe_mut().expect("validated"), &set, progress)?;
            return Ok((step == schedule.period).then_some(Event { step, kind: schedule.kind, experts: set }));
        }
        None => unreachable!(),
    };
    let ids = expert_param_ids(net.moe().expect("validated"), &experts, schedule.include_router)?;
    match schedule.kind {
        ResetAll | ResetSubset => reset_params(&mut net.store, &ids, event_seed, Some(adam))?,
        _ => shrink_perturb(&mut net.store, &ids, schedule.snp_alpha, schedule.snp_beta, event_seed)?,
    }
    Ok(Some(Event {
        step,
        kind: schedule.kind,
        experts,
    }))
}

pub fn write_events_csv(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let io = |e: csv::Error| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    w.write_record(["step", "intervention", "experts"]).map_err(io)?;
    for e in events {
        let experts: Vec<String> = e.experts.iter().map(|x| x.to_string()).collect();
        w.write_record([e.step.to_string(), e.kind.to_string(), experts.join(";")]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
