//! Tokenizers turning an encoder output `[h, w, d]` into a token matrix.
//!
//! Row-major layout throughout: the per-conv token `i` is the channel vector
//! at spatial position `(i / w, i % w)`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// What the shuffled tokenizer permutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShuffleGranularity {
    /// Every scalar of the `[h, w, d]` tensor.
    #[default]
    Scalar,
    /// Spatial positions, keeping each channel vector intact.
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenScheme {
    Flatten,
    PerConv,
    PerFeat,
    PerPatch { rho: usize },
    Shuffled { seed: u64, granularity: ShuffleGranularity },
    PooledSum,
    PooledMean,
}

impl TokenScheme {
    pub fn is_tokenized(&self) -> bool {
        !matches!(self, TokenScheme::Flatten)
    }

    pub fn pool_mode(&self) -> Option<PoolMode> {
        match self {
            TokenScheme::PooledSum => Some(PoolMode::Sum),
            TokenScheme::PooledMean => Some(PoolMode::Mean),
            _ => None,
        }
    }

    /// `(m, d_tok)` for an encoder output of shape `[h, w, d]`.
    pub fn token_shape(&self, h: usize, w: usize, d: usize) -> Result<(usize, usize)> {
        match *self {
            TokenScheme::Flatten => Ok((1, h * w * d)),
            TokenScheme::PerConv
            | TokenScheme::Shuffled { .. }
            | TokenScheme::PooledSum
            | TokenScheme::PooledMean => Ok((h * w, d)),
            TokenScheme::PerFeat => Ok((d, h * w)),
            TokenScheme::PerPatch { rho } => {
                check_rho(h, w, rho)?;
                Ok(((h / rho) * (w / rho), d))
            }
        }
    }
}

impl fmt::Display for TokenScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenScheme::Flatten => "flatten",
            TokenScheme::PerConv => "per_conv",
            TokenScheme::PerFeat => "per_feat",
            TokenScheme::PerPatch { .. } => "per_patch",
            TokenScheme::Shuffled { .. } => "shuffled",
            TokenScheme::PooledSum => "pooled_sum",
            TokenScheme::PooledMean => "pooled_mean",
        })
    }
}

/// Parses the scheme name; sub-parameters take their defaults.
impl FromStr for TokenScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "flatten" => TokenScheme::Flatten,
            "per_conv" => TokenScheme::PerConv,
            "per_feat" => TokenScheme::PerFeat,
            "per_patch" => TokenScheme::PerPatch { rho: 2 },
            "shuffled" => TokenScheme::Shuffled {
                seed: 0,
                granularity: ShuffleGranularity::Scalar,
            },
            "pooled_sum" => TokenScheme::PooledSum,
            "pooled_mean" => TokenScheme::PooledMean,
            other => return Err(Error::invalid(format!("unknown tokenizer `{other}`"))),
        })
    }
}

impl FromStr for ShuffleGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(ShuffleGranularity::Scalar),
            "spatial" => Ok(ShuffleGranularity::Spatial),
            other => Err(Error::invalid(format!("unknown shuffle granularity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Sum,
    Mean,
}

/// `m` tokens of dimension `d_tok`, tagged with the scheme that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor,
    pub scheme: TokenScheme,
}

impl TokenMatrix {
    pub fn new(tokens: Tensor, scheme: TokenScheme) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::invalid(format!("token matrix must be rank 2, got {:?}", tokens.shape())));
        }
        Ok(Self { tokens, scheme })
    }

    pub fn m(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn d_tok(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.tokens.row(i)
    }
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::invalid(format!(
            "tokenizers need a rank-3 [h, w, d] tensor, got {:?}",
            x.shape()
        ))),
    }
}

fn check_rho(h: usize, w: usize, rho: usize) -> Result<()> {
    if rho == 0 || h % rho != 0 || w % rho != 0 {
        return Err(Error::invalid(format!("patch extent {rho} does not divide {h}x{w}")));
    }
    Ok(())
}

/// Row-major flatten to a vector of length `h·w·d`.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let (h, w, d) = dims3(x)?;
    x.reshape(&[h * w * d])
}

/// `h·w` tokens of dimension `d`.
pub fn per_conv(x: &Tensor) -> Result<TokenMatrix> {
    let (h, w, d) = dims3(x)?;
    TokenMatrix::new(x.reshape(&[h * w, d])?, TokenScheme::PerConv)
}

/// `d` tokens of dimension `h·w`; token `j` is channel `j` flattened.
pub fn per_feat(x: &Tensor) -> Result<TokenMatrix> {
    let (h, w, d) = dims3(x)?;
    let hw = h * w;
    let mut out = vec![0.0; hw * d];
    for p in 0..hw {
        for j in 0..d {
            out[j * hw + p] = x.data()[p * d + j];
        }
    }
    TokenMatrix::new(Tensor::new(vec![d, hw], out)?, TokenScheme::PerFeat)
}

/// Mean-pools non-overlapping `rho × rho` patches, then tokenizes per position.
pub fn per_patch(x: &Tensor, rho: usize) -> Result<TokenMatrix> {
    let (h, w, d) = dims3(x)?;
    check_rho(h, w, rho)?;
    let (ph, pw) = (h / rho, w / rho);
    let mut out = vec![0.0; ph * pw * d];
    let norm = 1.0 / (rho * rho) as f64;
    for y in 0..h {
        for xx in 0..w {
            for c in 0..d {
                out[((y / rho) * pw + xx / rho) * d + c] += x.data()[(y * w + xx) * d + c] * norm;
            }
        }
    }
    TokenMatrix::new(Tensor::new(vec![ph * pw, d], out)?, TokenScheme::PerPatch { rho })
}

/// The scalar-position permutation used by the shuffled tokenizer.
///
/// Output scalar `j` (row-major over `[h, w, d]`) reads input scalar `perm[j]`.
pub fn shuffle_permutation(h: usize, w: usize, d: usize, seed: u64, granularity: ShuffleGranularity) -> Vec<usize> {
    let mut r = rng::stream(seed, "shuffle-tokenizer");
    match granularity {
        ShuffleGranularity::Scalar => {
            let mut p: Vec<usize> = (0..h * w * d).collect();
            p.shuffle(&mut r);
            p
        }
        ShuffleGranularity::Spatial => {
            let mut pos: Vec<usize> = (0..h * w).collect();
            pos.shuffle(&mut r);
            pos.iter().flat_map(|&q| (0..d).map(move |c| q * d + c)).collect()
        }
    }
}

/// Applies a fixed scalar permutation, then tokenizes per position.
pub fn shuffled_with(x: &Tensor, perm: &[usize]) -> Result<TokenMatrix> {
    let (h, w, d) = dims3(x)?;
    if perm.len() != x.len() {
        return Err(Error::invalid("permutation length does not match the tensor"));
    }
    let data = perm.iter().map(|&i| x.data()[i]).collect();
    let seedless = TokenScheme::Shuffled {
        seed: 0,
        granularity: ShuffleGranularity::Scalar,
    };
    TokenMatrix::new(Tensor::new(vec![h * w, d], data)?, seedless)
}

pub fn shuffled(x: &Tensor, perm_seed: u64) -> Result<TokenMatrix> {
    let (h, w, d) = dims3(x)?;
    let perm = shuffle_permutation(h, w, d, perm_seed, ShuffleGranularity::Scalar);
    let mut t = shuffled_with(x, &perm)?;
    t.scheme = TokenScheme::Shuffled {
        seed: perm_seed,
        granularity: ShuffleGranularity::Scalar,
    };
    Ok(t)
}

/// Elementwise sum or mean over tokens.
pub fn token_pool(t: &TokenMatrix, mode: PoolMode) -> Tensor {
    let (m, d) = (t.m(), t.d_tok());
    let mut out = vec![0.0; d];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(t.token(i)) {
            *o += v;
        }
    }
    if mode == PoolMode::Mean {
        out.iter_mut().for_each(|v| *v /= m as f64);
    }
    Tensor::from_parts(vec![d], out)
}

/// Batched, differentiable tokenizer fixed at network construction.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    scheme: TokenScheme,
    input: [usize; 3],
    perm: Option<Rc<Vec<usize>>>,
}

impl Tokenizer {
    pub fn new(scheme: TokenScheme, h: usize, w: usize, d: usize) -> Result<Self> {
        scheme.token_shape(h, w, d)?;
        let perm = match scheme {
            TokenScheme::Shuffled { seed, granularity } => {
                Some(Rc::new(shuffle_permutation(h, w, d, seed, granularity)))
            }
            _ => None,
        };
        Ok(Self {
            scheme,
            input: [h, w, d],
            perm,
        })
    }

    pub fn scheme(&self) -> TokenScheme {
        self.scheme
    }

    /// `(m, d_tok)`; for flatten this is `(1, h·w·d)`.
    pub fn token_shape(&self) -> (usize, usize) {
        let [h, w, d] = self.input;
        self.scheme.token_shape(h, w, d).expect("validated in new")
    }

    /// Maps `[B, h, w, d]` to `[B, m, d_tok]` (`[B, h·w·d]` for flatten).
    /// Pooled schemes return the per-conv tokens; pooling happens downstream.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let [h, w, d] = self.input;
        if s.len() != 4 || s[1..] != self.input {
            return Err(Error::Shape {
                op: "tokenize",
                lhs: s,
                rhs: self.input.to_vec(),
            });
        }
        let b = s[0];
        match self.scheme {
            TokenScheme::Flatten => tape.reshape(x, &[b, h * w * d]),
            TokenScheme::PerConv | TokenScheme::PooledSum | TokenScheme::PooledMean => {
                tape.reshape(x, &[b, h * w, d])
            }
            TokenScheme::PerFeat => {
                let t = tape.reshape(x, &[b, h * w, d])?;
                tape.transpose12(t)
            }
            TokenScheme::PerPatch { rho } => {
                let p = tape.avg_pool(x, rho)?;
                tape.reshape(p, &[b, (h / rho) * (w / rho), d])
            }
            TokenScheme::Shuffled { .. } => {
                let flat = tape.reshape(x, &[b, h * w * d])?;
                let perm = self.perm.clone().expect("built in new");
                let g = tape.gather_last(flat, perm)?;
                tape.reshape(g, &[b, h * w, d])
            }
        }
    }
}

/// Reduces `[B, m, d]` tokens over `m`.
pub fn pool_tokens(tape: &mut Tape, tokens: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Sum => tape.sum_axis(tokens, 1),
        PoolMode::Mean => tape.mean_axis(tokens, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "tok-test");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn sorted(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn flatten_layout() {
        let x = Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let f = flatten(&x).unwrap();
        assert_eq!(f.shape(), &[12]);
        assert_eq!(f.data()[0], x.at(&[0, 0, 0]));
        assert_eq!(f.data()[2], x.at(&[0, 0, 2]));
        assert_eq!(f.reshape(&[2, 2, 3]).unwrap(), x);
        assert!(flatten(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn per_conv_and_per_feat() {
        let x = random(&[2, 2, 3], 1);
        let t = per_conv(&x).unwrap();
        assert_eq!((t.m(), t.d_tok()), (4, 3));
        assert_eq!(t.token(0), &x.data()[0..3]);
        let f = per_feat(&x).unwrap();
        assert_eq!((f.m(), f.d_tok()), (3, 4));
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(f.tokens.at(&[j, i]), t.tokens.at(&[i, j]));
            }
        }
        let c = per_conv(&Tensor::full(&[3, 3, 2], 0.5)).unwrap();
        assert!((1..9).all(|i| c.token(i) == c.token(0)));
        assert!(per_conv(&Tensor::zeros(&[4])).is_err());
        assert!(per_feat(&Tensor::zeros(&[1, 2, 3, 4])).is_err());
    }

    #[test]
    fn per_patch_cases() {
        let ones = per_patch(&Tensor::full(&[4, 4, 8], 1.0), 2).unwrap();
        assert_eq!((ones.m(), ones.d_tok()), (4, 8));
        assert!(ones.tokens.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let x = random(&[4, 6, 3], 2);
        assert_eq!(per_patch(&x, 1).unwrap().tokens, per_conv(&x).unwrap().tokens);
        assert!(per_patch(&x, 4).is_err());

        let x = random(&[4, 4, 2], 3);
        let got = per_patch(&x, 2).unwrap();
        for py in 0..2 {
            for px in 0..2 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += x.at(&[2 * py + dy, 2 * px + dx, c]);
                        }
                    }
                    assert!((got.tokens.at(&[py * 2 + px, c]) - s / 4.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn shuffled_cases() {
        let x = random(&[3, 3, 2], 4);
        let identity: Vec<usize> = (0..18).collect();
        assert_eq!(shuffled_with(&x, &identity).unwrap().tokens, per_conv(&x).unwrap().tokens);
        let a = shuffled(&x, 9).unwrap();
        assert_eq!(a, shuffled(&x, 9).unwrap());
        assert_ne!(a.tokens, per_conv(&x).unwrap().tokens);
        assert_eq!(sorted(a.tokens.data()), sorted(x.data()));
        let sp = shuffle_permutation(3, 3, 2, 9, ShuffleGranularity::Spatial);
        for pair in sp.chunks(2) {
            assert_eq!(pair[1], pair[0] + 1);
            assert_eq!(pair[0] % 2, 0);
        }
    }

    #[test]
    fn pooling_cases() {
        let t = TokenMatrix::new(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), TokenScheme::PerConv).unwrap();
        assert_eq!(token_pool(&t, PoolMode::Sum).data(), &[4.0, 6.0]);
        assert_eq!(token_pool(&t, PoolMode::Mean).data(), &[2.0, 3.0]);
        let one = TokenMatrix::new(Tensor::from_rows(&[vec![5.0, -1.0]]).unwrap(), TokenScheme::PerConv).unwrap();
        assert_eq!(token_pool(&one, PoolMode::Sum).data(), one.token(0));
        assert_eq!(token_pool(&one, PoolMode::Mean).data(), one.token(0));
    }

    #[test]
    fn batched_tokenizer_matches_pure_functions() {
        let (h, w, d) = (4, 4, 3);
        let x = random(&[h, w, d], 5);
        let cases: Vec<(TokenScheme, Tensor)> = vec![
            (TokenScheme::PerConv, per_conv(&x).unwrap().tokens),
            (TokenScheme::PerFeat, per_feat(&x).unwrap().tokens),
            (TokenScheme::PerPatch { rho: 2 }, per_patch(&x, 2).unwrap().tokens),
            (
                TokenScheme::Shuffled { seed: 3, granularity: ShuffleGranularity::Scalar },
                shuffled(&x, 3).unwrap().tokens,
            ),
        ];
        for (scheme, want) in cases {
            let tok = Tokenizer::new(scheme, h, w, d).unwrap();
            let mut tape = Tape::inference();
            let v = tape.constant(x.reshape(&[1, h, w, d]).unwrap());
            let out = tok.apply(&mut tape, v).unwrap();
            assert_eq!(tape.value(out).data(), want.data(), "{scheme}");
            let (m, dt) = tok.token_shape();
            assert_eq!(tape.shape(out), &[1, m, dt]);
        }
    }

    #[test]
    fn tokenizers_pass_grad_check() {
        let x = random(&[2, 4, 4, 3], 6);
        for scheme in [
            TokenScheme::Flatten,
            TokenScheme::PerConv,
            TokenScheme::PerFeat,
            TokenScheme::PerPatch { rho: 2 },
            TokenScheme::Shuffled { seed: 1, granularity: ShuffleGranularity::Scalar },
        ] {
            let tok = Tokenizer::new(scheme, 4, 4, 3).unwrap();
            let err = grad_check(|t, v| tok.apply(t, v[0]), std::slice::from_ref(&x), 1e-6).unwrap();
            assert!(err <= 1e-4, "{scheme}: {err}");
        }
        let err = grad_check(
            |t, v| pool_tokens(t, v[0], PoolMode::Mean),
            &[random(&[2, 5, 3], 7)],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4);
    }

    proptest! {
        #[test]
        fn shape_contracts_and_losslessness(h in 1usize..5, w in 1usize..5, d in 1usize..4, rho in 1usize..3, seed in 0u64..100) {
            let x = random(&[h * rho, w * rho, d], seed);
            let (hh, ww) = (h * rho, w * rho);
            let c = per_conv(&x).unwrap();
            prop_assert_eq!((c.m(), c.d_tok()), (hh * ww, d));
            let f = per_feat(&x).unwrap();
            prop_assert_eq!((f.m(), f.d_tok()), (d, hh * ww));
            let p = per_patch(&x, rho).unwrap();
            prop_assert_eq!((p.m(), p.d_tok()), (h * w, d));
            let s = shuffled(&x, seed).unwrap();
            let src = sorted(x.data());
            prop_assert_eq!(sorted(c.tokens.data()), src.clone());
            prop_assert_eq!(sorted(f.tokens.data()), src.clone());
            prop_assert_eq!(sorted(s.tokens.data()), src);
            let sum = token_pool(&c, PoolMode::Sum);
            let mean = token_pool(&c, PoolMode::Mean);
            for (a, b) in sum.data().iter().zip(mean.data()) {
                prop_assert!((a / c.m() as f64 - b).abs() <= 1e-12);
            }
        }
    }
}
