//! Named parameter collections and their binding into a graph.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered map of parameter name to tensor. Insertion order is the
/// serialization and optimizer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(
            name.into(),
            Param {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every parameter in `g`: trainable ones as leaves, frozen ones
    /// as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|p| {
                if p.trainable {
                    g.leaf(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect();
        Bound {
            names: self.entries.keys().map(|k| (k.clone(), ())).collect(),
            vars,
        }
    }
}

impl<T: Float> ParamStore<T> {
    /// Registers every parameter as a constant, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            names: self.entries.keys().map(|k| (k.clone(), ())).collect(),
            vars: self.entries.values().map(|p| g.constant(p.tensor.clone())).collect(),
        }
    }

    /// Binding over leaves that were created elsewhere, one per parameter in
    /// store order. Used by gradient checks, which own the leaves.
    pub fn bound_from(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.len(), "one var per parameter");
        Bound {
            names: self.entries.keys().map(|k| (k.clone(), ())).collect(),
            vars: vars.to_vec(),
        }
    }

    /// Parameter tensors in store order.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.values().map(|p| p.tensor.clone()).collect()
    }
}

/// Graph handles for one [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    names: IndexMap<String, ()>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .get_index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; frozen or unused parameters yield zeros.
    pub fn gradients<T: Float>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(|x| x.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); g.value(v).len()])
            })
            .collect()
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<T: Float, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Appends a fully-connected layer `name.w: (out, inp)`, `name.b: (out,)`.
pub fn add_fc<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, out: usize, inp: usize) {
    store.insert(format!("{name}.w"), uniform_init(rng, &[out, inp], inp));
    store.insert(format!("{name}.b"), Tensor::zeros(vec![out]));
}
