//! Named parameter store and deterministic initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

/// Ordered map of named parameter tensors. Iteration order is insertion
/// order, which fixes the optimizer and checkpoint layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<F>) {
        let name = name.into();
        tensor.requires_grad = true;
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        let mut out = Params::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), t.cast::<G>());
        }
        out
    }
}

/// Lazily registers parameters on a tape, one leaf per name per forward
/// pass. Parameters never touched by a forward stay off the tape, so
/// their gradients are absent rather than zero-filled.
pub struct Bound<'p, F> {
    params: &'p Params<F>,
    ids: BTreeMap<String, TensorId>,
}

impl<'p, F: Scalar> Bound<'p, F> {
    pub fn new(params: &'p Params<F>) -> Self {
        Bound {
            params,
            ids: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape<F>, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let tensor = self
            .params
            .try_get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        let id = tape.leaf(tensor);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bound_ids(&self) -> &BTreeMap<String, TensorId> {
        &self.ids
    }

    /// Pull gradients off the tape into the parameter tensors. Parameters
    /// never bound or off the loss path get `None`.
    pub fn collect_grads(self, tape: &Tape<F>, params: &mut Params<F>) {
        for (name, t) in params.iter_mut() {
            t.grad = self
                .ids
                .get(name)
                .and_then(|&id| tape.grad(id))
                .map(|g| g.to_vec());
        }
    }
}

/// Sample from N(0, std²) truncated to ±2·std.
pub fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> F {
    loop {
        let v: f64 = rng.sample::<f64, _>(StandardNormal) * std;
        if v.abs() <= 2.0 * std {
            return F::real(v);
        }
    }
}

pub fn trunc_normal_tensor<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    std: f64,
) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| trunc_normal(rng, std)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}
