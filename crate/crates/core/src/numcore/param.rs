//! Named learnable parameters and their binding onto tapes.
//!
//! Parameters persist across training steps; each step binds them onto a
//! fresh tape as leaves, runs forward/backward, then harvests the leaf
//! gradients back into the store for the optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng;

use super::tensor::{numel, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Insertion-ordered set of named parameters. Iteration order is the
/// registration order, which keeps every downstream consumer (optimizer,
/// checkpoints) deterministic.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        if data.len() != numel(shape) {
            return Err(Error::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Gaussian init drawn from a stream keyed by (seed, name), so the
    /// initial value of a parameter never depends on registration order.
    pub fn add_gaussian(
        &mut self,
        name: &str,
        shape: &[usize],
        seed: u64,
        sigma: f64,
    ) -> Result<ParamId> {
        let mut rng = rng::seeded_rng(seed, &format!("param/{name}"));
        let data = rng::gaussian(&mut rng, numel(shape), sigma);
        self.add(name, shape, data)
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], fill: f64) -> Result<ParamId> {
        self.add(name, shape, vec![fill; numel(shape)])
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Binds parameters onto one tape, caching the leaf so that a parameter used
/// in several places shares a single node and its gradients accumulate.
pub struct GradSession<'t> {
    tape: &'t Tape,
    trainable: bool,
    bound: HashMap<usize, Tensor>,
}

impl<'t> GradSession<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self {
            tape,
            trainable: true,
            bound: HashMap::new(),
        }
    }

    /// Inference-mode session: leaves are constants, nothing is tracked.
    pub fn frozen(tape: &'t Tape) -> Self {
        Self {
            tape,
            trainable: false,
            bound: HashMap::new(),
        }
    }

    pub fn leaf(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        if let Some(t) = self.bound.get(&id.0) {
            return t.clone();
        }
        let p = store.get(id);
        let t = if self.trainable {
            self.tape.variable(p.data.clone(), &p.shape)
        } else {
            self.tape.constant(p.data.clone(), &p.shape)
        }
        .expect("store shapes are validated at registration");
        self.bound.insert(id.0, t.clone());
        t
    }

    /// Copy gradients from bound leaves back into the store, adding onto any
    /// gradient already present.
    pub fn harvest(&self, store: &mut ParamStore) {
        let mut ids: Vec<usize> = self.bound.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let Some(g) = self.bound[&id].grad() else {
                continue;
            };
            let slot = &mut store.params[id].grad;
            match slot {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => *slot = Some(g),
            }
        }
    }
}
