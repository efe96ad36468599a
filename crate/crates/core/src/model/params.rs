use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::tensor::Tensor;

/// Initialization rule for a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))` for a `[fan_in, fan_out]` weight.
    XavierUniform,
    Zeros,
    Ones,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers `name`, drawing its values from a stream keyed by the name.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, key: RngKey) {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::TruncNormal(std) => {
                let mut rng = key.stream(name).rng();
                (0..numel).map(|_| std * truncated_normal(&mut rng)).collect()
            }
            Init::XavierUniform => {
                let [fan_in, fan_out] = shape[..] else {
                    panic!("xavier init needs a matrix, got {shape:?}")
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = key.stream(name).rng();
                (0..numel).map(|_| rng.gen_range(-a..a)).collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Whether weight decay applies: biases and normalization parameters are
    /// exempt.
    pub fn decays(name: &str) -> bool {
        !(name.ends_with(".bias") || name.contains("norm"))
    }

    /// Adds every parameter to `g` as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Wraps vars that hold this store's parameters, in storage order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.len() {
            return Err(Error::InconsistentDims(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.len()
            )));
        }
        Ok(BoundParams {
            vars,
            index: self.index.clone(),
        })
    }

    /// Replaces the values of parameters by name; shapes must agree.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Checkpoint(format!(
                "parameter set differs ({} stored, {} expected)",
                other.len(),
                self.len()
            )));
        }
        for (dst, (src, name)) in self.tensors.iter_mut().zip(other.tensors.iter().zip(&self.names)) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Standard normal truncated to `[-2, 2]` by rejection.
fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds() {
        let mut ps = ParamStore::new();
        ps.register("w", &[10, 14], Init::XavierUniform, RngKey::new(3));
        let bound = 0.5;
        let w = ps.get("w").unwrap().data();
        assert!(w.iter().all(|v| v.abs() < bound));
        assert!(w.iter().any(|v| v.abs() > 0.8 * bound));
    }

    #[test]
    fn init_rules() {
        let mut ps = ParamStore::new();
        let key = RngKey::new(0);
        ps.register("w", &[50, 40], Init::TruncNormal(0.02), key);
        ps.register("norm.scale", &[4], Init::Ones, key);
        ps.register("w.bias", &[4], Init::Zeros, key);
        let w = ps.get("w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        let mean = w.data().iter().sum::<f64>() / 2000.0;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2000.0).sqrt();
        assert!(mean.abs() < 0.002 && (0.014..0.02).contains(&std), "{mean} {std}");
        assert_eq!(ps.get("norm.scale").unwrap().data(), &[1.0; 4]);
        assert_eq!(ps.get("w.bias").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn decay_exemptions() {
        assert!(ParamStore::decays("encoder.blocks.0.attn.q.weight"));
        assert!(!ParamStore::decays("encoder.blocks.0.attn.q.bias"));
        assert!(!ParamStore::decays("encoder.norm.scale"));
        assert!(!ParamStore::decays("encoder.blocks.1.norm2.shift"));
    }
}
