//! Q-networks: convolutional encoder, tokenizer, optional MoE block,
//! penultimate stage and a Q-value or categorical head.

use std::fmt;
use std::str::FromStr;

use crate::diffcore::{InitSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{ExpertChoiceLayer, MoeKind, MoeLayer, MoeOutput, MoeSpec, SlotPolicy, SoftMoeLayer, TokenChoiceLayer};
use crate::rng::derive_seed;
use crate::tokenize::{pool_tokens, TokenScheme, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    /// Two valid 3×3 convolutions with 8 then 16 filters.
    MiniCnn,
    /// Two valid 3×3 convolutions with 16 filters, then two residual pairs
    /// of same-padded 3×3 convolutions.
    MiniResnet,
}

impl fmt::Display for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoder::MiniCnn => "mini_cnn",
            Encoder::MiniResnet => "mini_resnet",
        })
    }
}

impl FromStr for Encoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini_cnn" => Ok(Encoder::MiniCnn),
            "mini_resnet" => Ok(Encoder::MiniResnet),
            other => Err(Error::invalid(format!("unknown encoder `{other}`"))),
        }
    }
}

impl Encoder {
    /// Output shape for an `[h, w, c]` observation.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [h, w, _] = input;
        if h < 5 || w < 5 {
            return Err(Error::invalid(format!("{self} needs at least 5×5 inputs, got {h}×{w}")));
        }
        Ok([h - 4, w - 4, 16])
    }

    /// `(c_in, c_out, pad)` per convolution, in application order.
    fn convs(&self, c: usize) -> Vec<(usize, usize, usize)> {
        match self {
            Encoder::MiniCnn => vec![(c, 8, 0), (8, 16, 0)],
            Encoder::MiniResnet => {
                let mut v = vec![(c, 16, 0), (16, 16, 0)];
                v.extend(std::iter::repeat_n((16, 16, 1), 4));
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penultimate {
    Dense,
    /// Width multiplied by [`ArchSpec::width_scale`].
    Scaled,
    /// A second dense layer of the same width.
    ExtraLayer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    QValues,
    C51 { atoms: usize, v_min: f64, v_max: f64 },
}

impl Head {
    pub fn c51_default() -> Self {
        Head::C51 {
            atoms: 21,
            v_min: -2.0,
            v_max: 2.0,
        }
    }

    pub fn atoms(&self) -> usize {
        match self {
            Head::QValues => 1,
            Head::C51 { atoms, .. } => *atoms,
        }
    }

    /// Atom locations, evenly spaced from `v_min` to `v_max`.
    pub fn support(&self) -> Option<Vec<f64>> {
        match *self {
            Head::QValues => None,
            Head::C51 { atoms, v_min, v_max } => {
                let dz = (v_max - v_min) / (atoms - 1) as f64;
                Some((0..atoms).map(|j| v_min + j as f64 * dz).collect())
            }
        }
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub encoder: Encoder,
    pub tokenizer: TokenScheme,
    pub moe: Option<MoeSpec>,
    pub penultimate: Penultimate,
    pub width: usize,
    pub width_scale: f64,
    pub head: Head,
    /// Tokenized baselines: pool tokens first, then apply the dense layer.
    pub pool_before_dense: bool,
    pub input: [usize; 3],
    pub actions: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            encoder: Encoder::MiniCnn,
            tokenizer: TokenScheme::Flatten,
            moe: None,
            penultimate: Penultimate::Dense,
            width: 64,
            width_scale: 4.0,
            head: Head::QValues,
            pool_before_dense: false,
            input: [10, 10, 1],
            actions: 3,
        }
    }
}

pub const PRESETS: [&str; 8] = [
    "baseline",
    "baseline_scaled",
    "baseline_extra_layer",
    "tokenized_sum",
    "tokenized_mean",
    "softmoe",
    "expert_choice",
    "token_choice",
];

impl ArchSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let base = ArchSpec::default();
        let moe = |kind| ArchSpec {
            tokenizer: TokenScheme::PerConv,
            moe: Some(MoeSpec {
                kind,
                ..MoeSpec::default()
            }),
            ..base.clone()
        };
        Ok(match name {
            "baseline" => base,
            "baseline_scaled" => ArchSpec {
                penultimate: Penultimate::Scaled,
                ..base
            },
            "baseline_extra_layer" => ArchSpec {
                penultimate: Penultimate::ExtraLayer,
                ..base
            },
            "tokenized_sum" => ArchSpec {
                tokenizer: TokenScheme::PooledSum,
                ..base
            },
            "tokenized_mean" => ArchSpec {
                tokenizer: TokenScheme::PooledMean,
                ..base
            },
            "softmoe" => moe(MoeKind::SoftMoe),
            "expert_choice" => moe(MoeKind::ExpertChoice),
            "token_choice" => moe(MoeKind::TokenChoice),
            other => {
                return Err(Error::invalid(format!(
                    "unknown arch preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn penultimate_width(&self) -> usize {
        match self.penultimate {
            Penultimate::Scaled => ((self.width as f64 * self.width_scale).round() as usize).max(1),
            _ => self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions == 0 || self.width == 0 {
            return Err(Error::invalid("actions and width must be positive"));
        }
        if let Head::C51 { atoms, v_min, v_max } = self.head {
            if atoms < 2 || !(v_min < v_max) {
                return Err(Error::invalid("c51 head needs atoms >= 2 and v_min < v_max"));
            }
        }
        let [h, w, d] = self.encoder.output_shape(self.input)?;
        let (m, _) = self.tokenizer.token_shape(h, w, d)?;
        match (&self.moe, self.tokenizer) {
            (Some(_), TokenScheme::Flatten) => Err(Error::invalid("an MoE block needs a tokenizer; flatten yields no tokens")),
            (Some(_), TokenScheme::PooledSum | TokenScheme::PooledMean) => {
                Err(Error::invalid("pooled tokenizers belong to tokenized baselines, not MoE networks"))
            }
            (Some(spec), _) => {
                spec.validate()?;
                if spec.kind == MoeKind::ExpertChoice
                    && crate::moe::resolve_slots(spec.slots, spec.slot_fraction, m, spec.experts)? > m
                {
                    return Err(Error::invalid("expert choice needs slots_per_expert <= tokens"));
                }
                if self.penultimate != Penultimate::Dense {
                    return Err(Error::invalid("MoE networks replace the penultimate layer; scaled/extra penultimate does not apply"));
                }
                Ok(())
            }
            (None, scheme) if scheme.is_tokenized() && scheme.pool_mode().is_none() => Err(Error::invalid(format!(
                "tokenizer `{scheme}` without an MoE block needs pooling (pooled_sum or pooled_mean)"
            ))),
            (None, _) => Ok(()),
        }
    }
}

/// `[B, n] -> [B, out]` affine map.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, seed: u64) -> Result<Self> {
        let wn = format!("{name}.w");
        let w = store.add(&wn, InitSpec::fan_in(fan_in, derive_seed(seed, &wn)), &[fan_in, out])?;
        let b = store.add(&format!("{name}.b"), InitSpec::zeros(), &[out])?;
        Ok(Self { w, b })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    k: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.k);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, k, 1, self.pad)?;
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
enum Body {
    /// Flatten or pooled tokens, then one or two dense layers.
    Dense { layers: Vec<Dense> },
    Moe(MoeLayer),
}

/// Values recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Q-values `[B, A]` or categorical logits `[B, A, atoms]`.
    pub out: Var,
    /// Post-ReLU activations of the penultimate dense layer(s).
    pub dense_hidden: Vec<Var>,
    pub moe: Option<MoeOutput>,
}

#[derive(Debug, Clone)]
pub struct QNetwork {
    pub spec: ArchSpec,
    pub store: ParamStore,
    convs: Vec<Conv>,
    tokenizer: Tokenizer,
    body: Body,
    head: Dense,
}

pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<QNetwork> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut convs = Vec::new();
    for (i, (c_in, c_out, pad)) in spec.encoder.convs(spec.input[2]).into_iter().enumerate() {
        let kn = format!("enc.conv{i}.k");
        let k = store.add(&kn, InitSpec::fan_in(9 * c_in, derive_seed(seed, &kn)), &[3, 3, c_in, c_out])?;
        let b = store.add(&format!("enc.conv{i}.b"), InitSpec::zeros(), &[c_out])?;
        convs.push(Conv { k, b, pad });
    }
    let [h, w, d] = spec.encoder.output_shape(spec.input)?;
    let tokenizer = Tokenizer::new(spec.tokenizer, h, w, d)?;
    let (m, d_tok) = tokenizer.token_shape();
    let out_units = spec.actions * spec.head.atoms();
    let (body, head_in) = match &spec.moe {
        Some(moe) => {
            let layer = match moe.kind {
                MoeKind::SoftMoe => MoeLayer::Soft(SoftMoeLayer::new(&mut store, "moe", d_tok, m, moe, seed)?),
                MoeKind::ExpertChoice => {
                    MoeLayer::ExpertChoice(ExpertChoiceLayer::new(&mut store, "moe", d_tok, m, moe, seed)?)
                }
                MoeKind::TokenChoice => {
                    MoeLayer::TokenChoice(TokenChoiceLayer::new(&mut store, "moe", d_tok, m, moe, seed)?)
                }
            };
            (Body::Moe(layer), m * d_tok)
        }
        None => {
            let width = spec.penultimate_width();
            let fan_in = if spec.tokenizer.is_tokenized() { d_tok } else { h * w * d };
            let mut layers = vec![Dense::new(&mut store, "dense0", fan_in, width, seed)?];
            if spec.penultimate == Penultimate::ExtraLayer {
                layers.push(Dense::new(&mut store, "dense1", width, width, seed)?);
            }
            (Body::Dense { layers }, width)
        }
    };
    let head = Dense::new(&mut store, "head", head_in, out_units, seed)?;
    Ok(QNetwork {
        spec: spec.clone(),
        store,
        convs,
        tokenizer,
        body,
        head,
    })
}

impl QNetwork {
    /// Runs `[B, h, w, c]` observations through the network.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Trace> {
        self.forward_with(tape, &self.store, x)
    }

    /// Like [`QNetwork::forward`] but reading parameters from `store`, which
    /// must share this network's layout (e.g. a target copy).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Trace> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::Shape {
                op: "q_network",
                lhs: s,
                rhs: self.spec.input.to_vec(),
            });
        }
        let b = s[0];
        let mut h = x;
        match self.spec.encoder {
            Encoder::MiniCnn => {
                for c in &self.convs {
                    let y = c.forward(tape, store, h)?;
                    h = tape.relu(y);
                }
            }
            Encoder::MiniResnet => {
                for c in &self.convs[..2] {
                    let y = c.forward(tape, store, h)?;
                    h = tape.relu(y);
                }
                for pair in self.convs[2..].chunks(2) {
                    let y = pair[0].forward(tape, store, h)?;
                    let y = tape.relu(y);
                    let y = pair[1].forward(tape, store, y)?;
                    let y = tape.add(h, y)?;
                    h = tape.relu(y);
                }
            }
        }
        let tokens = self.tokenizer.apply(tape, h)?;
        let mut dense_hidden = Vec::new();
        let mut moe = None;
        let features = match &self.body {
            Body::Moe(layer) => {
                let o = layer.forward(tape, store, tokens)?;
                let (m, d) = self.tokenizer.token_shape();
                let f = tape.reshape(o.out, &[b, m * d])?;
                moe = Some(o);
                f
            }
            Body::Dense { layers } => {
                let pool = self.spec.tokenizer.pool_mode();
                let mut f = match pool {
                    Some(mode) if self.spec.pool_before_dense => pool_tokens(tape, tokens, mode)?,
                    Some(_) => {
                        let (m, d) = self.tokenizer.token_shape();
                        tape.reshape(tokens, &[b * m, d])?
                    }
                    None => tokens,
                };
                for layer in layers {
                    let y = layer.forward(tape, store, f)?;
                    f = tape.relu(y);
                    dense_hidden.push(f);
                }
                match pool {
                    Some(mode) if !self.spec.pool_before_dense => {
                        let (m, _) = self.tokenizer.token_shape();
                        let width = tape.shape(f)[1];
                        let per_token = tape.reshape(f, &[b, m, width])?;
                        pool_tokens(tape, per_token, mode)?
                    }
                    _ => f,
                }
            }
        };
        let out = self.head.forward(tape, store, features)?;
        let out = match self.spec.head {
            Head::QValues => out,
            Head::C51 { atoms, .. } => tape.reshape(out, &[b, self.spec.actions, atoms])?,
        };
        Ok(Trace { out, dense_hidden, moe })
    }

    pub fn moe(&self) -> Option<&MoeLayer> {
        match &self.body {
            Body::Moe(l) => Some(l),
            Body::Dense { .. } => None,
        }
    }

    pub fn moe_mut(&mut self) -> Option<&mut MoeLayer> {
        match &mut self.body {
            Body::Moe(l) => Some(l),
            Body::Dense { .. } => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Q-values `[B, A]` for a batch of observations; the categorical head
    /// reports expected values over its support.
    pub fn q_batch(&self, obs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(obs.clone());
        let trace = self.forward(&mut tape, x)?;
        match self.spec.head.support() {
            None => Ok(tape.value(trace.out).clone()),
            Some(z) => {
                let p = tape.softmax(trace.out, 2)?;
                let p = tape.value(p);
                let atoms = z.len();
                let q = p
                    .data()
                    .chunks(atoms)
                    .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::new(p.shape()[..2].to_vec(), q)
            }
        }
    }

    /// Atom probabilities `[B, A, atoms]`.
    pub fn dist_batch(&self, obs: &Tensor) -> Result<Tensor> {
        if self.spec.head == Head::QValues {
            return Err(Error::invalid("dist_forward needs a c51 head"));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(obs.clone());
        let trace = self.forward(&mut tape, x)?;
        let p = tape.softmax(trace.out, 2)?;
        Ok(tape.value(p).clone())
    }
}

fn single(net: &QNetwork, obs: &Tensor) -> Result<Tensor> {
    if obs.shape() != net.spec.input {
        return Err(Error::Shape {
            op: "q_forward",
            lhs: obs.shape().to_vec(),
            rhs: net.spec.input.to_vec(),
        });
    }
    let mut shape = vec![1];
    shape.extend_from_slice(obs.shape());
    obs.reshape(&shape)
}

/// Q-values for one `[h, w, c]` observation.
pub fn q_forward(net: &QNetwork, obs: &Tensor) -> Result<Vec<f64>> {
    Ok(net.q_batch(&single(net, obs)?)?.into_data())
}

/// Atom probabilities `[A, atoms]` for one observation.
pub fn dist_forward(net: &QNetwork, obs: &Tensor) -> Result<Tensor> {
    let p = net.dist_batch(&single(net, obs)?)?;
    p.reshape(&p.shape()[1..])
}

/// Parameter count of `spec`, computed from the layer formulas alone.
pub fn param_count(spec: &ArchSpec) -> Result<usize> {
    spec.validate()?;
    let conv: usize = spec
        .encoder
        .convs(spec.input[2])
        .iter()
        .map(|&(ci, co, _)| 9 * ci * co + co)
        .sum();
    let [h, w, d] = spec.encoder.output_shape(spec.input)?;
    let (m, d_tok) = spec.tokenizer.token_shape(h, w, d)?;
    let out = spec.actions * spec.head.atoms();
    let dense = |i: usize, o: usize| i * o + o;
    let rest = match &spec.moe {
        Some(moe) => {
            let p = crate::moe::resolve_slots(moe.slots, moe.slot_fraction, m, moe.experts)?;
            let router = match moe.kind {
                MoeKind::SoftMoe => d_tok * moe.experts * p,
                _ => d_tok * moe.experts,
            };
            let hid = moe.hidden_width(d_tok);
            router + moe.experts * (dense(d_tok, hid) + dense(hid, d_tok)) + dense(m * d_tok, out)
        }
        None => {
            let width = spec.penultimate_width();
            let fan_in = if spec.tokenizer.is_tokenized() { d_tok } else { h * w * d };
            let extra = if spec.penultimate == Penultimate::ExtraLayer { dense(width, width) } else { 0 };
            dense(fan_in, width) + extra + dense(width, out)
        }
    };
    Ok(conv + rest)
}

/// Total hidden units summed over all experts (zero without an MoE block).
pub fn expert_hidden_units(spec: &ArchSpec) -> Result<usize> {
    let [h, w, d] = spec.encoder.output_shape(spec.input)?;
    let (_, d_tok) = spec.tokenizer.token_shape(h, w, d)?;
    Ok(spec.moe.map_or(0, |m| m.experts * m.hidden_width(d_tok)))
}

/// Convenience for `softmoe` presets with `n` experts and an expert scale.
pub fn softmoe_spec(experts: usize, expert_scale: f64) -> ArchSpec {
    ArchSpec {
        tokenizer: TokenScheme::PerConv,
        moe: Some(MoeSpec {
            kind: MoeKind::SoftMoe,
            experts,
            slots: SlotPolicy::Auto,
            expert_scale,
            ..MoeSpec::default()
        }),
        ..ArchSpec::default()
    }
}
