//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng as _;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Denominator floor for the relative error, so that gradients that are
/// zero on both routes compare as exact.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled with a fixed seed).
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_per_tensor: None,
        }
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between the tape gradient and central differences of
/// `sum(w ⊙ f(inputs))` for a fixed random projection `w`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    GradCheck {
        eps,
        max_per_tensor: None,
    }
    .run(&mut store, inputs, |t, _, v| f(t, v))
}

impl GradCheck {
    /// Like [`grad_check`] but also checks every parameter in `store`.
    pub fn run<F>(&self, store: &mut ParamStore, inputs: &[Tensor], f: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
    {
        if !(1e-7..=1e-3).contains(&self.eps) {
            return Err(Error::invalid(format!("grad_check eps {} outside [1e-7, 1e-3]", self.eps)));
        }
        let projection = {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = f(&mut tape, store, &vars)?;
            let mut r = rng::stream(0, "gradcheck-projection");
            let n = tape.value(out).len();
            Tensor::from_parts(
                tape.shape(out).to_vec(),
                (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
        };
        let loss_of = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = f(&mut tape, store, &vars)?;
            Ok(tape
                .value(out)
                .data()
                .iter()
                .zip(projection.data())
                .map(|(a, b)| a * b)
                .sum())
        };

        // analytic route
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        let w = tape.constant(projection.clone());
        let weighted = tape.mul(out, w)?;
        let loss = tape.sum_all(weighted);
        let grads = tape.backward(loss)?;
        let mut param_grads: Vec<Option<Tensor>> = vec![None; store.len()];
        for (id, g) in tape.param_grads(&grads) {
            match &mut param_grads[id.0] {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }

        let mut worst = 0.0f64;
        let pick = |len: usize, salt: u64| -> Vec<usize> {
            match self.max_per_tensor {
                Some(k) if k < len => {
                    let mut r = rng::indexed_stream(0, "gradcheck-coords", salt);
                    let mut v = sample(&mut r, len, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..len).collect(),
            }
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, var) in vars.iter().enumerate() {
            let zeros = Tensor::zeros(inputs[ti].shape());
            let analytic = grads.get(*var).unwrap_or(&zeros).clone();
            for j in pick(inputs[ti].len(), ti as u64) {
                let orig = work[ti].data()[j];
                work[ti].data_mut()[j] = orig + self.eps;
                let up = loss_of(store, &work)?;
                work[ti].data_mut()[j] = orig - self.eps;
                let down = loss_of(store, &work)?;
                work[ti].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                worst = worst.max(rel_error(analytic.data()[j], numeric));
            }
        }

        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let zeros = Tensor::zeros(store.value(id).shape());
            let analytic = param_grads[id.0].clone().unwrap_or(zeros);
            for j in pick(analytic.len(), 1000 + id.0 as u64) {
                let orig = store.value(id).data()[j];
                store.get_mut(id).value.data_mut()[j] = orig + self.eps;
                let up = loss_of(store, inputs)?;
                store.get_mut(id).value.data_mut()[j] = orig - self.eps;
                let down = loss_of(store, inputs)?;
                store.get_mut(id).value.data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                worst = worst.max(rel_error(analytic.data()[j], numeric));
            }
        }
        Ok(worst)
    }
}
