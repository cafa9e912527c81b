//! Named parameter storage and seeded initialisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::TensorError;

/// Named tensors, kept in lexical order so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Moves every tensor of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// The tensors whose names start with `prefix`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Records every tensor on `graph`, as trainable leaves when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Binding<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.param(v.clone())
                } else {
                    graph.input(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Binding { vars }
    }
}

/// A [`ParamStore`] recorded on a graph.
#[derive(Clone, Debug)]
pub struct Binding<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Binding<'g> {
    /// Looks up a bound parameter, panicking on unknown names.
    ///
    /// Model constructors create every name they later read, so a miss is a
    /// programming error rather than a data error; checkpoints are validated
    /// against the expected layout before binding.
    pub fn var(&self, name: &str) -> Var<'g> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    /// A view whose lookups are prefixed with `prefix`.
    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a, 'g> {
        Scope {
            binding: self,
            prefix: prefix.to_string(),
        }
    }

    /// Collects per-name gradients, using zeros for parameters the loss did
    /// not reach.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Prefixed lookups into a [`Binding`].
#[derive(Clone, Debug)]
pub struct Scope<'a, 'g> {
    binding: &'a Binding<'g>,
    prefix: String,
}

impl<'a, 'g> Scope<'a, 'g> {
    pub fn var(&self, name: &str) -> Var<'g> {
        self.binding.var(&format!("{}{}", self.prefix, name))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'g>> {
        self.binding.try_var(&format!("{}{}", self.prefix, name))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'a, 'g> {
        Scope {
            binding: self.binding,
            prefix: format!("{}{}", self.prefix, prefix),
        }
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`, the usual convolution default.
    pub fn fan_in_uniform(&mut self, shape: impl Into<Vec<usize>>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(shape, -bound, bound)
    }

    pub fn uniform(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
        let shape = shape.into();
        Tensor::from_fn(shape, |_| self.rng.gen_range(lo..hi))
    }

    /// Convolution weight `Cout×Cin×k×k` and bias `Cout`.
    pub fn conv(&mut self, cout: usize, cin: usize, k: usize) -> (Tensor, Tensor) {
        let fan_in = cin * k * k;
        let w = self.fan_in_uniform([cout, cin, k, k], fan_in);
        let b = self.fan_in_uniform([cout], fan_in);
        (w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let a = Init::new(3).conv(4, 2, 3);
        let b = Init::new(3).conv(4, 2, 3);
        let c = Init::new(4).conv(4, 2, 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.0.max_abs() <= 1.0 / 18f64.sqrt());
    }

    #[test]
    fn sub_store_strips_prefix() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros([1]));
        s.insert("b.w", Tensor::ones([1]));
        let sub = s.sub_store("b.");
        assert_eq!(sub.len(), 1);
        assert_eq!(sub.get("w").unwrap().item(), 1.0);
    }
}
