//! Parameters, linear layers, initialization and SGD on top of [`crate::tensor`].

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named parameters of one model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    grads_populated: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.len()];
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Adds the gradients recorded on `tape` into the parameter grads.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (i, var) in tape.bound.iter().enumerate() {
            if let Some(g) = var.and_then(|v| grads.wrt(v)) {
                for (acc, d) in self.params[i].grad.iter_mut().zip(g) {
                    *acc += d;
                }
            }
        }
        self.grads_populated = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_populated = false;
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// A [`Graph`] plus the lazily created leaves for model parameters.
pub struct Tape {
    pub graph: Graph,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl Tape {
    /// Parameters enter as differentiable leaves.
    pub fn training(store: &ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters enter as constants; nothing is differentiable.
    pub fn inference(store: &ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::training(store)
        }
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = store.get(id).value.clone();
        let v = if self.trainable {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }
}

/// Fully connected layer `y = x · Wᵀ + b` with `W: [out, in]`, `b: [out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{name}.weight` and `{name}.bias`, initialized from a stream
    /// keyed by `seed` and the layer name.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        let layer = Self {
            weight,
            bias,
            in_dim,
            out_dim,
        };
        init_params(store, &layer, rng::derive_seed(seed, name, 0));
        layer
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = tape.graph.shape(x).get(1).copied();
        if tape.graph.shape(x).len() != 2 || cols != Some(self.in_dim) {
            return Err(Error::invalid(format!(
                "linear layer expects [B, {}] input, got {:?}",
                self.in_dim,
                tape.graph.shape(x)
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(tape.graph.linear(x, w, Some(b))?)
    }
}

/// Weights ~ Uniform(-sqrt(1/in), +sqrt(1/in)), bias 0.
pub fn init_params(store: &mut ParamStore, layer: &Linear, seed: u64) {
    let mut rng = rng::indexed_stream(seed, "linear-init", 0);
    let bound = (1.0 / layer.in_dim as f64).sqrt();
    for w in store.get_mut(layer.weight).value.data_mut() {
        *w = rng.random_range(-bound..bound);
    }
    store
        .get_mut(layer.bias)
        .value
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = 0.0);
}

/// SGD with heavy-ball momentum: `v ← m·v + g; θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        })
    }

    /// Applies one update and zeroes the gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.grads_populated() {
            return Err(Error::invalid("sgd step without populated gradients"));
        }
        if self.velocity.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match parameter store"));
        }
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            for ((theta, g), vel) in p.value.data_mut().iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + g;
                *theta -= self.lr * *vel;
            }
        }
        store.zero_grad();
        Ok(())
    }
}
