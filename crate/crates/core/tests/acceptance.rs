//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeSet;
use std::error::Error as StdError;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng as _;
use tokenmoe::diffcore::{GradCheck, InitSpec, ParamStore, Tape, Tensor, Var};
use tokenmoe::envs::{self, Game};
use tokenmoe::evalstats::{self, ScoreTable, Statistic};
use tokenmoe::moe::{
    expert_choice_assign, softmoe_combine, softmoe_dispatch, softmoe_forward, token_choice_assign, Activation,
    ExpertChoiceLayer, MoeKind, MoeLayer, MoeSpec, SlotPolicy, SoftMoeLayer, TokenChoiceLayer,
};
use tokenmoe::netzoo::{self, ArchSpec};
use tokenmoe::plasticity;
use tokenmoe::rlcore::{self, AgentConfig, AgentKind, NStepAccumulator, SumTree, TrainSpec};
use tokenmoe::rng::{self, Rng};
use tokenmoe::runner::{self, AggregateOptions, GridOptions};
use tokenmoe::tokenize::{pool_tokens, ShuffleGranularity, TokenMatrix, TokenScheme, Tokenizer};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, Box<dyn StdError>>;

fn fail(msg: String) -> Outcome {
    Err(msg.into())
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn simplex(r: &mut Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -r.gen_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn soft_spec(experts: usize, p: usize, activation: Activation, expansion: f64) -> MoeSpec {
    MoeSpec {
        kind: MoeKind::SoftMoe,
        experts,
        slots: SlotPolicy::Fixed(p),
        expansion,
        activation,
        ..MoeSpec::default()
    }
}

fn routing_normalization() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(1, "acc-c1");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (m, d, s) = (r.gen_range(1..=16), r.gen_range(1..=8), r.gen_range(1..=12));
        let x = TokenMatrix::new(uniform(&mut r, &[m, d], -3.0, 3.0), TokenScheme::PerConv)?;
        let phi = uniform(&mut r, &[d, s], -3.0, 3.0);
        let (dispatch, _) = softmoe_dispatch(&x, &phi)?;
        for j in 0..s {
            let col: f64 = (0..m).map(|i| dispatch.at(&[i, j])).sum();
            worst = worst.max((col - 1.0).abs());
        }
        let logits = tokenmoe::diffcore::matmul(&x.tokens, &phi)?;
        let combine = softmoe_combine(&logits, &Tensor::identity(s))?;
        for i in 0..m {
            let row: f64 = combine.token(i).iter().sum();
            worst = worst.max((row - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    if worst > 1e-6 || elapsed >= Duration::from_secs(5) {
        return fail(format!("max |sum - 1| = {worst:.3e}, runtime {elapsed:.2?}"));
    }
    Ok(format!("max |sum - 1| = {worst:.3e} over 1000 instances in {elapsed:.2?}"))
}

fn convexity() -> Outcome {
    let mut r = rng::stream(2, "acc-c2");
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let (m, d, n, p) = (r.gen_range(1..=10), r.gen_range(1..=5), r.gen_range(1..=4), r.gen_range(1..=3));
        let mut store = ParamStore::new();
        let layer = SoftMoeLayer::new(&mut store, "moe", d, m, &soft_spec(n, p, Activation::Identity, 1.0), case)?;
        for e in &layer.experts {
            e.make_identity(&mut store)?;
        }
        store.set_value(layer.phi, uniform(&mut r, &[d, n * p], -3.0, 3.0))?;
        let x = TokenMatrix::new(uniform(&mut r, &[m, d], -5.0, 5.0), TokenScheme::PerConv)?;
        let y = softmoe_forward(&x, &layer, &store)?;
        for c in 0..d {
            let col: Vec<f64> = (0..m).map(|i| x.tokens.at(&[i, c])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..m {
                let v = y.tokens.at(&[i, c]);
                worst = worst.max(lo - v).max(v - hi);
            }
        }
    }
    if worst > 1e-12 {
        return fail(format!("output escapes the token hull by {worst:.3e}"));
    }
    Ok(format!("1000 instances inside the hull (max excursion {:.3e})", worst.max(0.0)))
}

fn expert_ref(store: &ParamStore, e: &tokenmoe::moe::Expert, x: &[f64]) -> Vec<f64> {
    let (w1, b1, w2, b2) = (store.value(e.w1), store.value(e.b1), store.value(e.w2), store.value(e.b2));
    let h: Vec<f64> = (0..e.d_hidden)
        .map(|j| {
            let v = b1.data()[j] + (0..e.d_tok).map(|i| x[i] * w1.at(&[i, j])).sum::<f64>();
            match e.activation {
                Activation::Relu => v.max(0.0),
                Activation::Identity => v,
            }
        })
        .collect();
    (0..e.d_tok)
        .map(|k| b2.data()[k] + (0..e.d_hidden).map(|j| h[j] * w2.at(&[j, k])).sum::<f64>())
        .collect()
}

fn zero_phi() -> Outcome {
    let mut r = rng::stream(3, "acc-c3");
    let (mut slot_err, mut expert_err) = (0.0f64, 0.0f64);
    for case in 0..200u64 {
        let (m, d, s) = (r.gen_range(1..=12), r.gen_range(1..=6), r.gen_range(1..=8));
        let x = TokenMatrix::new(uniform(&mut r, &[m, d], -2.0, 2.0), TokenScheme::PerConv)?;
        let (dispatch, slots) = softmoe_dispatch(&x, &Tensor::zeros(&[d, s]))?;
        if dispatch.data().iter().any(|&w| w != 1.0 / m as f64) {
            return fail(format!("zero logits gave non-uniform dispatch weights (m = {m})"));
        }
        let mean: Vec<f64> = (0..d).map(|c| (0..m).map(|i| x.tokens.at(&[i, c])).sum::<f64>() / m as f64).collect();
        for j in 0..s {
            for c in 0..d {
                slot_err = slot_err.max((slots.at(&[j, c]) - mean[c]).abs());
            }
        }

        let mut store = ParamStore::new();
        let layer = SoftMoeLayer::new(&mut store, "moe", d, m, &soft_spec(1, 1, Activation::Relu, 4.0), case)?;
        store.set_value(layer.phi, Tensor::zeros(&[d, 1]))?;
        for id in [layer.experts[0].b1, layer.experts[0].b2] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, uniform(&mut r, &shape, -0.5, 0.5))?;
        }
        let want = expert_ref(&store, &layer.experts[0], &mean);
        let y = softmoe_forward(&x, &layer, &store)?;
        for i in 0..m {
            for c in 0..d {
                expert_err = expert_err.max((y.tokens.at(&[i, c]) - want[c]).abs());
            }
        }
    }
    if slot_err > 1e-12 || expert_err > 1e-12 {
        return fail(format!("slot deviation {slot_err:.3e}, expert-image deviation {expert_err:.3e}"));
    }
    Ok(format!("uniform weights exact; slot dev {slot_err:.1e}, expert-image dev {expert_err:.1e}"))
}

fn brute_top_p(col: &[f64], p: usize) -> BTreeSet<usize> {
    let m = col.len();
    let mut best = (f64::NEG_INFINITY, 0u32);
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != p {
            continue;
        }
        let s: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| col[i]).sum();
        if s > best.0 {
            best = (s, mask);
        }
    }
    (0..m).filter(|i| best.1 >> i & 1 == 1).collect()
}

/// Proposals arrive one at a time in descending gate order; an expert admits
/// while it has room.
fn capacity_sim(gates: &Tensor, k: usize, p: usize) -> Vec<BTreeSet<usize>> {
    let (m, n) = (gates.shape()[0], gates.shape()[1]);
    let mut proposals = Vec::new();
    for i in 0..m {
        for e in 0..n {
            let better = (0..n).filter(|&f| gates.at(&[i, f]) > gates.at(&[i, e])).count();
            if better < k {
                proposals.push((gates.at(&[i, e]), i, e));
            }
        }
    }
    proposals.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut accepted = vec![BTreeSet::new(); n];
    for (_, i, e) in proposals {
        if accepted[e].len() < p {
            accepted[e].insert(i);
        }
    }
    accepted
}

fn hard_routing() -> Outcome {
    let mut r = rng::stream(4, "acc-c4");
    for case in 0..1000 {
        let (m, n) = (r.gen_range(1..=12), r.gen_range(1..=4));
        let logits = uniform(&mut r, &[m, n], -3.0, 3.0);
        let p = r.gen_range(1..=m);
        let got = expert_choice_assign(&logits, p)?;
        for (e, tokens) in got.iter().enumerate() {
            let col: Vec<f64> = (0..m).map(|i| logits.at(&[i, e])).collect();
            let got: BTreeSet<usize> = tokens.iter().copied().collect();
            if tokens.len() != p || got != brute_top_p(&col, p) {
                return fail(format!("expert choice case {case}: expert {e} picked {tokens:?}"));
            }
        }
    }
    let mut dropped_total = 0;
    for case in 0..1000 {
        let (m, n) = (r.gen_range(1..=12), r.gen_range(1..=4));
        let gates = tokenmoe::diffcore::softmax(&uniform(&mut r, &[m, n], -3.0, 3.0), 1)?;
        let (k, p) = (r.gen_range(1..=n), r.gen_range(1..=m));
        let got: Vec<BTreeSet<usize>> = token_choice_assign(&gates, k, p)?
            .into_iter()
            .map(|v| v.into_iter().collect())
            .collect();
        let want = capacity_sim(&gates, k, p);
        let drops = |a: &[BTreeSet<usize>]| -> BTreeSet<usize> { (0..m).filter(|i| a.iter().all(|s| !s.contains(i))).collect() };
        if got != want || drops(&got) != drops(&want) {
            return fail(format!("token choice case {case}: got {got:?}, simulator {want:?}"));
        }
        dropped_total += drops(&got).len();
    }
    Ok(format!("1000 + 1000 gate matrices match ({dropped_total} fully dropped tokens)"))
}

fn randomize(store: &mut ParamStore, r: &mut Rng) -> Result<(), Box<dyn StdError>> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, uniform(r, &shape, -0.8, 0.8))?;
    }
    Ok(())
}

fn layer_check<F>(name: &str, report: &mut Vec<String>, build: impl Fn(&mut ParamStore, u64) -> Result<(Vec<usize>, F), Box<dyn StdError>>) -> Result<f64, Box<dyn StdError>>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> tokenmoe::Result<Var>,
{
    let mut worst = 0.0f64;
    for point in 0..20u64 {
        let mut r = rng::indexed_stream(5, name, point);
        let mut store = ParamStore::new();
        let (shape, f) = build(&mut store, point)?;
        randomize(&mut store, &mut r)?;
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        worst = worst.max(GradCheck::default().run(&mut store, &[x], f)?);
    }
    report.push(format!("{name} {worst:.1e}"));
    Ok(worst)
}

fn gradient_checks() -> Outcome {
    let mut report = Vec::new();
    let mut worst = 0.0f64;

    worst = worst.max(layer_check("conv", &mut report, |s, seed| {
        let k = s.add("k", InitSpec::fan_in(18, seed), &[3, 3, 2, 3])?;
        let b = s.add("b", InitSpec::zeros(), &[3])?;
        Ok((vec![2, 5, 5, 2], move |t: &mut Tape, s: &ParamStore, v: &[Var]| {
            let (kv, bv) = (t.param(s, k), t.param(s, b));
            let y = t.conv2d(v[0], kv, 1, 1)?;
            let y = t.add_bias(y, bv)?;
            Ok(t.relu(y))
        }))
    })?);

    worst = worst.max(layer_check("dense", &mut report, |s, seed| {
        let w = s.add("w", InitSpec::fan_in(6, seed), &[6, 4])?;
        let b = s.add("b", InitSpec::zeros(), &[4])?;
        Ok((vec![3, 6], move |t: &mut Tape, s: &ParamStore, v: &[Var]| {
            let (wv, bv) = (t.param(s, w), t.param(s, b));
            let y = t.matmul(v[0], wv)?;
            let y = t.add_bias(y, bv)?;
            Ok(t.relu(y))
        }))
    })?);

    let schemes = [
        ("flatten", TokenScheme::Flatten),
        ("per_conv", TokenScheme::PerConv),
        ("per_feat", TokenScheme::PerFeat),
        ("per_patch", TokenScheme::PerPatch { rho: 2 }),
        ("shuffled", TokenScheme::Shuffled { seed: 9, granularity: ShuffleGranularity::Scalar }),
        ("shuffled_spatial", TokenScheme::Shuffled { seed: 9, granularity: ShuffleGranularity::Spatial }),
        ("pooled_sum", TokenScheme::PooledSum),
        ("pooled_mean", TokenScheme::PooledMean),
    ];
    for (name, scheme) in schemes {
        worst = worst.max(layer_check(name, &mut report, |_, _| {
            let tok = Tokenizer::new(scheme, 4, 4, 3)?;
            Ok((vec![2, 4, 4, 3], move |t: &mut Tape, _: &ParamStore, v: &[Var]| {
                let y = tok.apply(t, v[0])?;
                match scheme.pool_mode() {
                    Some(mode) => pool_tokens(t, y, mode),
                    None => Ok(y),
                }
            }))
        })?);
    }

    for kind in [MoeKind::SoftMoe, MoeKind::ExpertChoice, MoeKind::TokenChoice] {
        worst = worst.max(layer_check(&kind.to_string(), &mut report, |s, seed| {
            let spec = MoeSpec {
                kind,
                experts: 3,
                slots: SlotPolicy::Fixed(2),
                top_k: 2,
                expansion: 2.0,
                ..MoeSpec::default()
            };
            let layer = match kind {
                MoeKind::SoftMoe => MoeLayer::Soft(SoftMoeLayer::new(s, "moe", 3, 5, &spec, seed)?),
                MoeKind::ExpertChoice => MoeLayer::ExpertChoice(ExpertChoiceLayer::new(s, "moe", 3, 5, &spec, seed)?),
                MoeKind::TokenChoice => MoeLayer::TokenChoice(TokenChoiceLayer::new(s, "moe", 3, 5, &spec, seed)?),
            };
            Ok((vec![2, 5, 3], move |t: &mut Tape, s: &ParamStore, v: &[Var]| Ok(layer.forward(t, s, v[0])?.out)))
        })?);
    }

    worst = worst.max(layer_check("c51_head", &mut report, |s, seed| {
        let (actions, atoms, batch) = (3, 5, 4);
        let w = s.add("head.w", InitSpec::fan_in(6, seed), &[6, actions * atoms])?;
        let b = s.add("head.b", InitSpec::zeros(), &[actions * atoms])?;
        let mut r = rng::indexed_stream(5, "c51-targets", seed);
        let chosen: Vec<usize> = (0..batch).map(|_| r.gen_range(0..actions)).collect();
        let targets = Tensor::new(vec![batch, atoms], (0..batch).flat_map(|_| simplex(&mut r, atoms)).collect())?;
        Ok((vec![batch, 6], move |t: &mut Tape, s: &ParamStore, v: &[Var]| {
            let (wv, bv) = (t.param(s, w), t.param(s, b));
            let y = t.matmul(v[0], wv)?;
            let y = t.add_bias(y, bv)?;
            let logits = t.reshape(y, &[batch, actions, atoms])?;
            rlcore::c51_loss_var(t, logits, &chosen, &targets)
        }))
    })?);

    let detail = format!("worst relative error {worst:.2e} ({})", report.join(", "));
    if worst > 1e-4 {
        return fail(detail);
    }
    Ok(detail)
}

fn c51_oracle(p: &[f64], reward: f64, gamma: f64, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let dz = (z[n - 1] - z[0]) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let tz = (reward + gamma * z[j]).clamp(z[0], z[n - 1]);
                    p[j] * (1.0 - (tz - z[i]).abs() / dz).max(0.0)
                })
                .sum()
        })
        .collect()
}

fn c51_and_nstep() -> Outcome {
    let mut r = rng::stream(6, "acc-c6");
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let atoms = r.gen_range(2..=51);
        let v_min = r.gen_range(-20.0..0.0);
        let v_max = v_min + r.gen_range(0.1..30.0);
        let z = rlcore::support(atoms, v_min, v_max);
        let p = simplex(&mut r, atoms);
        let reward = r.gen_range(-30.0..30.0);
        let gamma = r.gen_range(0.0..1.0);
        let got = rlcore::c51_project(&p, reward, gamma, &z)?;
        let want = c51_oracle(&p, reward, gamma, &z);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        let total: f64 = got.iter().sum();
        if got.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-9 {
            return fail(format!("projection is not a probability vector (sum {total})"));
        }
    }
    if worst > 1e-9 {
        return fail(format!("projection differs from the direct oracle by {worst:.3e}"));
    }

    // dyadic discounts and integer rewards keep every partial sum exact
    let mut transitions = 0;
    for case in 0..500u64 {
        let gamma = [0.5, 0.75, 0.875, 0.9375][r.gen_range(0..4)];
        let n = r.gen_range(1..=10);
        let len = r.gen_range(1..=60);
        let terminal = r.gen_bool(0.5);
        let rewards: Vec<f64> = (0..len).map(|_| r.gen_range(-1i32..=1) as f64).collect();
        let mut acc = NStepAccumulator::new(n, gamma)?;
        let mut emitted = Vec::new();
        for t in 0..len {
            let last = t + 1 == len;
            emitted.extend(acc.push(vec![t as u8], 0, rewards[t], &[(t + 1) as u8], last && terminal, last && !terminal));
        }
        if emitted.len() != len {
            return fail(format!("case {case}: {} transitions for {len} steps", emitted.len()));
        }
        for (t, tr) in emitted.iter().enumerate() {
            let end = (t + n).min(len);
            let mut ret = 0.0;
            let mut g = 1.0;
            for &rew in &rewards[t..end] {
                ret += g * rew;
                g *= gamma;
            }
            let discount = if end == len && terminal { 0.0 } else { g };
            let boot = 3.0;
            let unrolled = ret + discount * boot;
            let via_fn = rlcore::n_step_return(&rewards[t..end], gamma, boot, end == len && terminal)?;
            if tr.obs != [t as u8] || tr.reward != ret || tr.discount != discount || tr.next_obs != [end as u8] || via_fn != unrolled {
                return fail(format!("case {case} step {t}: got ({}, {}), unrolled ({ret}, {discount})", tr.reward, tr.discount));
            }
            transitions += 1;
        }
    }
    Ok(format!("projection max dev {worst:.2e} over 10000 cases; {transitions} n-step transitions exact"))
}

fn per_sum_tree() -> Outcome {
    let mut r = rng::stream(7, "acc-c7");
    let cap = 24;
    let mut tree = SumTree::new(cap);
    let mut leaves = vec![0.0; cap];
    for (i, leaf) in leaves.iter_mut().enumerate() {
        *leaf = if i % 7 == 3 { 0.0 } else { r.gen_range(0.05..3.0) };
        tree.set(i, *leaf);
    }
    let draws = 100_000;
    let mut counts = vec![0usize; cap];
    for _ in 0..draws {
        counts[tree.find(r.gen::<f64>() * tree.total())] += 1;
    }
    let total: f64 = leaves.iter().sum();
    let mut worst_sigma = 0.0f64;
    for i in 0..cap {
        let p = leaves[i] / total;
        let expect = draws as f64 * p;
        if p == 0.0 {
            if counts[i] > 0 {
                return fail(format!("zero-priority leaf {i} drawn {} times", counts[i]));
            }
            continue;
        }
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        worst_sigma = worst_sigma.max((counts[i] as f64 - expect).abs() / sigma);
    }
    if worst_sigma > 3.0 {
        return fail(format!("leaf frequency {worst_sigma:.2} sigma from its expectation"));
    }

    let cap = 37;
    let mut tree = SumTree::new(cap);
    let mut leaves = vec![0.0; cap];
    let mut root_err = 0.0f64;
    for op in 0..10_000 {
        let i = r.gen_range(0..cap);
        leaves[i] = if r.gen_bool(0.1) { 0.0 } else { r.gen_range(0.0..10.0) };
        tree.set(i, leaves[i]);
        let sum: f64 = leaves.iter().sum();
        root_err = root_err.max((tree.total() - sum).abs() / sum.max(1.0));
        if sum > 0.0 {
            let mass = r.gen::<f64>() * tree.total();
            let got = tree.find(mass);
            let before: f64 = leaves[..got].iter().sum();
            let through = before + leaves[got];
            let slack = 1e-9 * sum.max(1.0);
            if leaves[got] == 0.0 || before > mass + slack || through < mass - slack {
                return fail(format!("op {op}: mass {mass} landed on leaf {got}, prefix [{before}, {through})"));
            }
        }
    }
    if root_err > 1e-12 {
        return fail(format!("root differs from the leaf sum by {root_err:.3e}"));
    }
    Ok(format!("worst leaf {worst_sigma:.2} sigma over 1e5 draws; root error {root_err:.1e} after 1e4 updates"))
}

fn stats_oracles() -> Outcome {
    let checks = [
        ("iqm([1,2,3,4])", evalstats::iqm(&[1.0, 2.0, 3.0, 4.0])?, 2.5),
        ("iqm([0,1,2,3,100])", evalstats::iqm(&[0.0, 1.0, 2.0, 3.0, 100.0])?, 2.0),
        ("optimality_gap([0.5,1.5])", evalstats::optimality_gap(&[0.5, 1.5])?, 0.25),
    ];
    for (name, got, want) in checks {
        if (got - want).abs() > 1e-12 {
            return fail(format!("{name} = {got}, expected {want}"));
        }
    }
    let games = |n: usize| (0..n).map(|g| format!("g{g}")).collect::<Vec<_>>();
    let constant = ScoreTable::new(games(3), vec![vec![0.7; 5]; 3])?;
    for stat in Statistic::ALL {
        let (lo, hi) = evalstats::stratified_bootstrap_ci(&constant, stat, 500, 0.95, 11)?;
        if lo != hi {
            return fail(format!("{stat} interval on a constant table is [{lo}, {hi}]"));
        }
    }
    let mut r = rng::stream(8, "acc-c8");
    let mut checked = 0;
    for t in 0..100u64 {
        let (g, n) = (r.gen_range(1..=5), r.gen_range(2..=8));
        let scores: Vec<Vec<f64>> = (0..g).map(|_| (0..n).map(|_| r.gen_range(-0.5..2.0)).collect()).collect();
        let table = ScoreTable::new(games(g), scores)?;
        for stat in Statistic::ALL {
            let a = evalstats::stratified_bootstrap_ci(&table, stat, 500, 0.95, t)?;
            let b = evalstats::stratified_bootstrap_ci(&table, stat, 500, 0.95, t)?;
            if a.0.to_bits() != b.0.to_bits() || a.1.to_bits() != b.1.to_bits() {
                return fail(format!("table {t}: {stat} interval not deterministic"));
            }
            let point = stat.compute(&table)?;
            if !(a.0 <= point && point <= a.1) {
                return fail(format!("table {t}: {stat} = {point} outside [{}, {}]", a.0, a.1));
            }
            checked += 1;
        }
    }
    Ok(format!("hand cases exact; constant tables zero-width; {checked} intervals deterministic and covering"))
}

fn plasticity_algebra() -> Outcome {
    let mut store = ParamStore::new();
    let ids = vec![
        store.add("a.w", InitSpec::fan_in(5, 1), &[5, 4])?,
        store.add("a.b", InitSpec::fan_in(3, 2), &[4])?,
        store.add("c.k", InitSpec::fan_in(9, 3), &[3, 3, 1, 2])?,
    ];
    let mut r = rng::stream(9, "acc-c9");
    for round in 0..10u64 {
        let (alpha, beta) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
        let before: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
        let fresh: Vec<Tensor> = ids.iter().map(|&id| plasticity::fresh_init(store.get(id), round)).collect();
        plasticity::shrink_perturb(&mut store, &ids, alpha, beta, round)?;
        for (k, &id) in ids.iter().enumerate() {
            let want = before[k].data().iter().zip(fresh[k].data()).map(|(t, f)| alpha * t + beta * f);
            if !store.value(id).data().iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()) {
                return fail(format!("round {round}: shrink-perturb of {} is not bit-exact", store.get(id).name));
            }
        }
    }

    let mut net = netzoo::build_network(&netzoo::softmoe_spec(4, 1.0), 5)?;
    let chosen = plasticity::expert_param_ids(net.moe().ok_or("no moe block")?, &[1, 3], false)?;
    let before = net.store.clone();
    plasticity::reset_params(&mut net.store, &chosen, 77, None)?;
    let mut touched = 0;
    for (id, p) in net.store.iter() {
        let old = before.value(id).data();
        if chosen.contains(&id) {
            if p.value.data() != plasticity::fresh_init(p, 77).data() {
                return fail(format!("{} was not redrawn from its initializer", p.name));
            }
            touched += 1;
        } else if !p.value.data().iter().zip(old).all(|(a, b)| a.to_bits() == b.to_bits()) {
            return fail(format!("reset changed unselected parameter {}", p.name));
        }
    }

    let cases = [
        (vec![vec![0.0, 2.0, 1.0], vec![0.0, 0.0, 1.0]], 0.1, 1.0 / 3.0),
        (vec![vec![0.0, -1.0, 1.0], vec![0.0, 1.0, -1.0]], 0.1, 1.0 / 3.0),
        (vec![vec![0.0, 0.0, 0.0]], 0.1, 1.0),
    ];
    for (rows, tau, want) in cases {
        let got = plasticity::dormant_fraction(&Tensor::from_rows(&rows)?, tau)?;
        if (got - want).abs() > 1e-15 {
            return fail(format!("dormant_fraction({rows:?}, {tau}) = {got}, expected {want}"));
        }
    }

    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let (m, d, p) = (r.gen_range(2..=8), r.gen_range(1..=5), r.gen_range(1..=3));
        let mut store = ParamStore::new();
        let soft = SoftMoeLayer::new(&mut store, "moe", d, m, &soft_spec(2, p, Activation::Relu, 4.0), case)?;
        soft.experts[0].copy_params_to(&soft.experts[1], &mut store)?;
        let mut phi = uniform(&mut r, &[d, 2 * p], -2.0, 2.0);
        for row in 0..d {
            for j in 0..p {
                phi.data_mut()[row * 2 * p + p + j] = phi.data()[row * 2 * p + j];
            }
        }
        store.set_value(soft.phi, phi)?;
        let mut layer = MoeLayer::Soft(soft);
        let x = TokenMatrix::new(uniform(&mut r, &[m, d], -2.0, 2.0), TokenScheme::PerConv)?;
        let before = softmoe_forward(&x, layer.as_soft().ok_or("soft")?, &store)?;
        plasticity::prune_experts(&mut layer, &[1], 1.0)?;
        let after = softmoe_forward(&x, layer.as_soft().ok_or("soft")?, &store)?;
        worst = worst.max(before.tokens.max_abs_diff(&after.tokens));
    }
    if worst >= 1e-6 {
        return fail(format!("pruning a duplicate expert moved the output by {worst:.3e}"));
    }
    Ok(format!("shrink-perturb bit-exact; {touched} reset tensors, rest untouched; pruning dev {worst:.1e}"))
}

struct SmokeRun {
    arch: &'static str,
    seed: u64,
    normalized: f64,
    elapsed: Duration,
}

fn smoke_training() -> Outcome {
    let archs: [(&'static str, ArchSpec); 2] = [("baseline", ArchSpec::preset("baseline")?), ("softmoe-1-scaled", netzoo::softmoe_spec(1, 4.0))];
    let jobs: Vec<(&'static str, ArchSpec, u64)> =
        archs.iter().flat_map(|(name, arch)| (0..5).map(move |s| (*name, arch.clone(), s))).collect();
    let base = envs::baseline(Game::PixelCatch);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<SmokeRun, String>>> = Mutex::new(Vec::new());
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some((name, arch, seed)) = jobs.get(k).cloned() else { break };
                let spec = TrainSpec::new(Game::PixelCatch, seed, name, arch, AgentConfig::preset(AgentKind::DqnMse), 30_000);
                let start = Instant::now();
                let out = rlcore::run_training(&spec)
                    .and_then(|rec| evalstats::normalize_score(rec.final_score, base.random_score, base.reference_score))
                    .map(|normalized| SmokeRun {
                        arch: name,
                        seed,
                        normalized,
                        elapsed: start.elapsed(),
                    })
                    .map_err(|e| format!("{name} seed {seed}: {e}"));
                results.lock().unwrap().push(out);
            });
        }
    });
    let runs = results.into_inner().unwrap().into_iter().collect::<Result<Vec<_>, _>>()?;
    let limit = Duration::from_secs(15 * 60);
    let mut lines = Vec::new();
    let mut any_arch = false;
    let mut too_slow = false;
    for (name, _) in &archs {
        let mut mine: Vec<&SmokeRun> = runs.iter().filter(|r| r.arch == *name).collect();
        mine.sort_by_key(|r| r.seed);
        let hits = mine.iter().filter(|r| r.normalized >= 0.8).count();
        any_arch |= hits >= 4;
        too_slow |= mine.iter().any(|r| r.elapsed >= limit);
        let scores: Vec<String> = mine.iter().map(|r| format!("{:.2}", r.normalized)).collect();
        let slowest = mine.iter().map(|r| r.elapsed).max().unwrap_or_default();
        lines.push(format!("{name} {hits}/5 >= 0.8 [{}] slowest {:.0}s", scores.join(" "), slowest.as_secs_f64()));
    }
    let detail = format!("{} ({workers} workers)", lines.join("; "));
    if !any_arch || too_slow {
        return fail(detail);
    }
    Ok(detail)
}

fn read(path: &Path) -> Result<Vec<u8>, Box<dyn StdError>> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn ablation_pipeline() -> Outcome {
    let arms = ["baseline", "baseline_scaled", "softmoe-1", "softmoe-2", "softmoe-4", "softmoe-8", "softmoe-1-scaled"];
    let opts = GridOptions {
        steps: 2000,
        seeds: 2,
        ..GridOptions::default()
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut outputs = Vec::new();
    for dir in &dirs {
        let outcome = runner::cmd_ablate("expert_sweep", &opts, jobs, dir.path(), &AggregateOptions::default()).map_err(|e| e.to_string())?;
        if !outcome.failures.is_empty() {
            return fail(format!("{} runs failed, first: {:?}", outcome.failures.len(), outcome.failures[0]));
        }
        let csv = read(&outcome.report_dir.join("report.csv"))?;
        let svg = read(&outcome.report_dir.join("report.svg"))?;
        outputs.push((csv, svg));
    }
    let (csv, svg) = &outputs[0];
    if outputs[0] != outputs[1] {
        return fail("report.csv or report.svg differs between identical invocations".into());
    }
    let rows = evalstats::parse_report_csv(std::str::from_utf8(csv)?)?;
    let mut order: Vec<&str> = Vec::new();
    for row in &rows {
        if !order.contains(&row.arch.as_str()) {
            order.push(&row.arch);
        }
    }
    if order != arms {
        return fail(format!("report arms {order:?}, expected {arms:?}"));
    }
    let svg = std::str::from_utf8(svg)?;
    for arm in arms {
        for stat in Statistic::ALL {
            let row = rows.iter().find(|r| r.arch == arm && r.metric == stat).ok_or(format!("{arm} lacks {stat}"))?;
            if !(row.ci_low <= row.ci_high) {
                return fail(format!("{arm} {stat}: interval [{}, {}]", row.ci_low, row.ci_high));
            }
        }
        let bars = svg.matches(&format!(r#"<rect class="bar" data-arch="{arm}""#)).count();
        let whiskers = svg.matches(&format!(r#"<g class="whisker" data-arch="{arm}""#)).count();
        if bars != Statistic::ALL.len() || whiskers != Statistic::ALL.len() {
            return fail(format!("{arm}: {bars} bars and {whiskers} whiskers across {} panels", Statistic::ALL.len()));
        }
    }
    Ok(format!("{} arms x {} metrics, bar and interval each; byte-identical on repeat", arms.len(), Statistic::ALL.len()))
}

fn tree_files(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, Box<dyn StdError>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root)?.to_path_buf(), read(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let config = "game = pixel_dodge\narch = softmoe\nagent = rainbow_lite\ntotal_env_steps = 2500\n\
                  [arch]\nexperts = 2\n[agent]\nmin_replay = 500\n\
                  [intervention]\nkind = snp_subset\nperiod = 1000\n[eval]\nevery = 500\nepisodes = 3\n";
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, config)?;
        let run = dir.path().join("run");
        runner::cmd_train(&cfg, Some(3), Some(&run)).map_err(|e| e.to_string())?;
        let agg = dir.path().join("agg");
        runner::cmd_aggregate(std::slice::from_ref(&run), &agg, &AggregateOptions::default()).map_err(|e| e.to_string())?;
        runner::cmd_plot(&agg.join("report.csv"), &dir.path().join("plot.svg"), std::slice::from_ref(&run)).map_err(|e| e.to_string())?;
        trees.push((tree_files(dir.path())?, dir));
    }
    let (a, b) = (&trees[0].0, &trees[1].0);
    let names: Vec<String> = a.iter().map(|(p, _)| p.display().to_string()).collect();
    for want in ["run/metrics.csv", "run/checkpoint.bin", "agg/report.csv", "agg/report.svg", "plot.svg"] {
        if !names.iter().any(|n| n == want) {
            return fail(format!("pipeline did not produce {want} (have {names:?})"));
        }
    }
    if a != b {
        let differing: Vec<String> = a
            .iter()
            .zip(b)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.display().to_string())
            .collect();
        return fail(format!("outputs differ: {differing:?}"));
    }
    Ok(format!("{} files byte-identical across two pipelines", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("routing normalization", routing_normalization),
        ("convexity", convexity),
        ("zero routing logits", zero_phi),
        ("hard-routing oracles", hard_routing),
        ("gradient checks", gradient_checks),
        ("c51 projection and n-step returns", c51_and_nstep),
        ("prioritized replay sum tree", per_sum_tree),
        ("statistics oracles", stats_oracles),
        ("plasticity algebra", plasticity_algebra),
        ("smoke training", smoke_training),
        ("ablation pipeline", ablation_pipeline),
        ("determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("SKIP {n:>2} {name}: not selected");
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}").into())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {e} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
