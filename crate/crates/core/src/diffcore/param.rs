use rand::Rng as _;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Distribution a parameter is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitFamily {
    /// Uniform on `[-sqrt(3/fan_in), +sqrt(3/fan_in)]`.
    FanInUniform { fan_in: usize },
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub family: InitFamily,
    pub seed: u64,
}

impl InitSpec {
    pub fn fan_in(fan_in: usize, seed: u64) -> Self {
        Self {
            family: InitFamily::FanInUniform { fan_in },
            seed,
        }
    }

    pub fn zeros() -> Self {
        Self {
            family: InitFamily::Zeros,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Draws a tensor of `shape` from this distribution.
    pub fn sample(&self, shape: &[usize]) -> Tensor {
        match self.family {
            InitFamily::Zeros => Tensor::zeros(shape),
            InitFamily::FanInUniform { fan_in } => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                let mut r = rng::stream(self.seed, "init");
                let n = shape.iter().product();
                let data = (0..n).map(|_| r.gen_range(-bound..=bound)).collect();
                Tensor::from_parts(shape.to_vec(), data)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    init_snapshot: Tensor,
    pub init_spec: InitSpec,
}

impl Parameter {
    pub fn init_snapshot(&self) -> &Tensor {
        &self.init_snapshot
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Draws a fresh parameter; `init_snapshot` records the drawn value.
pub fn init_params(name: &str, spec: InitSpec, shape: &[usize]) -> Result<Parameter> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!("parameter `{name}` needs a positive shape")));
    }
    let value = spec.sample(shape);
    Ok(Parameter {
        name: name.to_string(),
        grad: Tensor::zeros(shape),
        init_snapshot: value.clone(),
        value,
        init_spec: spec,
    })
}

/// Owns every parameter of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, spec: InitSpec, shape: &[usize]) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(init_params(name, spec, shape)?);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            debug_assert_eq!(dst.name, src.name);
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a = init_params("w", InitSpec::fan_in(10, 3), &[10, 4]).unwrap();
        let b = init_params("w", InitSpec::fan_in(10, 3), &[10, 4]).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.value, *a.init_snapshot());
        let c = init_params("w", InitSpec::fan_in(10, 4), &[10, 4]).unwrap();
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn zero_init_is_zero() {
        let b = init_params("b", InitSpec::zeros(), &[7]).unwrap();
        assert!(b.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_in_uniform_variance_monte_carlo() {
        let fan_in = 48;
        let p = init_params("w", InitSpec::fan_in(fan_in, 11), &[100_000]).unwrap();
        let n = p.value.len() as f64;
        let mean = p.value.data().iter().sum::<f64>() / n;
        let var = p.value.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // U[-a, a] has variance a^2 / 3 = 1 / fan_in
        let bound = (3.0 / fan_in as f64).sqrt();
        let expected = bound * bound / 3.0;
        assert!((var - expected).abs() / expected < 0.1, "var {var} vs {expected}");
        assert!(p.value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn rejects_bad_shapes_and_duplicates() {
        assert!(init_params("w", InitSpec::zeros(), &[0, 3]).is_err());
        let mut s = ParamStore::new();
        s.add("w", InitSpec::zeros(), &[2]).unwrap();
        assert!(s.add("w", InitSpec::zeros(), &[2]).is_err());
    }
}
