use crate::diffcore::{InitSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Linear experts, used to make convexity properties exact in tests.
    Identity,
}

/// Two-layer MLP whose second layer projects back to the token width.
#[derive(Debug, Clone)]
pub struct Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_tok: usize,
    pub d_hidden: usize,
    pub activation: Activation,
}

impl Expert {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_tok: usize,
        d_hidden: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let name = |s: &str| format!("{prefix}.{s}");
        let w1 = store.add(&name("w1"), InitSpec::fan_in(d_tok, derive_seed(seed, &name("w1"))), &[d_tok, d_hidden])?;
        let b1 = store.add(&name("b1"), InitSpec::zeros(), &[d_hidden])?;
        let w2 = store.add(&name("w2"), InitSpec::fan_in(d_hidden, derive_seed(seed, &name("w2"))), &[d_hidden, d_tok])?;
        let b2 = store.add(&name("b2"), InitSpec::zeros(), &[d_tok])?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            d_tok,
            d_hidden,
            activation,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Maps `[rows, d_tok]` to `[rows, d_tok]`; also returns the hidden activations.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.d_tok {
            return Err(Error::Shape {
                op: "expert",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.d_tok, self.d_hidden],
            });
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Identity => h,
        };
        let y = tape.matmul(h, w2)?;
        Ok((tape.add_bias(y, b2)?, h))
    }

    /// Overwrites the parameters so the expert computes the identity map.
    /// Requires `d_hidden == d_tok` and a linear activation.
    pub fn make_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.d_hidden != self.d_tok || self.activation != Activation::Identity {
            return Err(Error::invalid("identity expert needs d_hidden == d_tok and a linear activation"));
        }
        store.set_value(self.w1, Tensor::identity(self.d_tok))?;
        store.set_value(self.w2, Tensor::identity(self.d_tok))?;
        store.set_value(self.b1, Tensor::zeros(&[self.d_hidden]))?;
        store.set_value(self.b2, Tensor::zeros(&[self.d_tok]))
    }

    /// Copies this expert's parameter values onto `other`'s.
    pub fn copy_params_to(&self, other: &Expert, store: &mut ParamStore) -> Result<()> {
        for (src, dst) in self.param_ids().into_iter().zip(other.param_ids()) {
            let v = store.value(src).clone();
            store.set_value(dst, v)?;
        }
        Ok(())
    }
}
