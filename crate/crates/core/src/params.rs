//! Named weight tensors shared by the network modules.

use std::collections::HashMap;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameters. Insertion order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "parameter {name} registered twice");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Replaces every value from `(name, tensor)` pairs; names and shapes must
    /// match this store exactly.
    pub fn load_from<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in entries {
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.to_f64();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Uses caller-provided vars (one per parameter, in store order) as the
    /// parameters, e.g. to differentiate with respect to them in a check.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.values.len()
            )));
        }
        for ((v, t), name) in vars.iter().zip(&self.values).zip(&self.names) {
            if tape.shape(*v) != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: var {:?} vs {:?}",
                    tape.shape(*v),
                    t.shape()
                )));
            }
        }
        Ok(Bound { vars: vars.to_vec() })
    }

    /// Pulls per-parameter gradients out of a finished backward pass.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Vec<f64>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

/// Parameters registered on one tape, indexable by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = n.sample(&mut self.rng);
            if v.abs() <= 2.0 {
                break v * std;
            }
        })
    }

    /// Fan-in scaled truncated normal for convolution kernels `[k,k,cin,cout]`.
    pub fn conv(&mut self, k: usize, cin: usize, cout: usize) -> Tensor {
        let std = 1.0 / ((k * k * cin) as f64).sqrt();
        self.trunc_normal(&[k, k, cin, cout], std)
    }
}
