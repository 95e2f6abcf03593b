//! Named parameter storage shared by the inference kernels, the training
//! graph and the checkpoint format.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Ordered name → tensor map. Insertion order is the canonical order used by
/// the optimizer and the checkpoint manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::contract(format!("missing parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalar count over tensors whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), g.param(n, t.clone())))
            .collect();
        Bound { vars }
    }

    /// Registers every tensor as a constant of `g` (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not bound")))
    }
}

/// How a tensor was initialised; recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    /// Uniform in ±sqrt(1/fan_in).
    Uniform { fan_in: usize },
    Constant { value: f64 },
}

/// Builds a [`ParamStore`] while recording the initialiser of each entry.
pub struct ParamBuilder<'r, T> {
    store: ParamStore<T>,
    inits: Vec<(String, Init)>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r, T: Scalar> ParamBuilder<'r, T> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            store: ParamStore::new(),
            inits: Vec::new(),
            rng,
        }
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::cast(rng.gen_range(-bound..bound)));
        self.inits.push((name.clone(), Init::Uniform { fan_in }));
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) {
        self.inits.push((name.clone(), Init::Constant { value }));
        self.store.insert(name, Tensor::full(shape, T::cast(value)));
    }

    pub fn finish(self) -> (ParamStore<T>, Vec<(String, Init)>) {
        (self.store, self.inits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insert_preserves_order_and_replaces() {
        let mut s = ParamStore::<f64>::new();
        s.insert("b", Tensor::zeros(&[2]));
        s.insert("a", Tensor::zeros(&[3]));
        s.insert("b", Tensor::zeros(&[4]));
        let names: Vec<_> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(s.numel(), 7);
    }

    #[test]
    fn uniform_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::<f64>::new(&mut rng);
        b.uniform("w".into(), &[64, 16], 16);
        let (s, inits) = b.finish();
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(inits[0].1, Init::Uniform { fan_in: 16 });
    }
}
