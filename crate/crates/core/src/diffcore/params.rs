use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{MadiError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    frozen: bool,
}

/// Named trainable tensors. Values are kept on the `f32` grid so a
/// single-precision checkpoint reproduces them exactly.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(MadiError::contract(format!("duplicate parameter name {name}")));
        }
        value.round_to_f32();
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    /// Glorot-uniform initialised parameter of shape `[fan_in, fan_out]`
    /// (or a vector treated as `[1, n]`).
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<ParamId> {
        let (fan_in, fan_out) = match shape {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(MadiError::contract("xavier init expects rank 1 or 2")),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Direct mutable access. Bypasses `f32` rounding; used by gradient
    /// checks and tests that pin specific weights.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replaces a value (shape-checked) and rounds it to the `f32` grid.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(MadiError::Shape {
                context: format!("set parameter {}", entry.name),
                expected: entry.value.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        value.round_to_f32();
        entry.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes (or unfreezes) every parameter whose name starts with one of
    /// the prefixes. Returns how many parameters matched.
    pub fn set_frozen_by_prefix(&mut self, prefixes: &[&str], frozen: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if prefixes.iter().any(|p| e.name.starts_with(p)) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn unfreeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = false;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }
}
