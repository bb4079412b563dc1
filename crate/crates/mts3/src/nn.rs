//! Parameter storage, MLP encoders/decoders, Adam and gradient clipping.
//!
//! Parameters live in a [`ParamStore`] (plain `f64` buffers plus Adam
//! moments). Every forward pass binds the store to a fresh [`Tape`] via
//! [`ParamStore::bind`], which creates one leaf per parameter; after
//! `backward` the leaf gradients are gathered back by id.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{MtsError, Result};
use crate::tensor::{Gradients, Tape, Tensor};

pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam hyperparameters and step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
    pub adam: AdamState,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) -> ParamId {
        assert_eq!(value.len(), rows * cols, "param {name}: bad init length");
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            m: vec![0.0; value.len()],
            v: vec![0.0; value.len()],
            value,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Leaf every parameter onto `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        let leaves = self
            .params
            .iter()
            .map(|p| tape.leaf(p.rows, p.cols, p.value.clone()))
            .collect();
        Binding { leaves }
    }

    /// Collect per-parameter gradients from a finished backward pass.
    pub fn gather_grads(&self, binding: &Binding<'_>, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, _)| grads.get_or_zero(binding.leaves[i]))
            .collect()
    }

    /// Global-norm clipping; returns the applied scale.
    pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
        assert!(max_norm > 0.0, "clip_gradients: max_norm must be positive");
        let sq: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum();
        let norm = sq.sqrt();
        if norm <= max_norm || norm == 0.0 {
            return 1.0;
        }
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
        scale
    }

    /// One Adam update with bias correction over all parameters.
    pub fn adam_step(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        assert_eq!(grads.len(), self.params.len(), "adam_step: grads mismatch");
        for (p, g) in self.params.iter().zip(grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(MtsError::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
        self.adam.step += 1;
        let t = self.adam.step as f64;
        let (b1, b2) = (self.adam.beta1, self.adam.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = self.adam.lr;
        let eps = self.adam.eps;
        for (p, g) in self.params.iter_mut().zip(grads) {
            for i in 0..p.value.len() {
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g[i];
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Tape leaves for every parameter of a store, in store order.
pub struct Binding<'t> {
    leaves: Vec<Tensor<'t>>,
}

impl<'t> Binding<'t> {
    pub fn get(&self, id: ParamId) -> Tensor<'t> {
        self.leaves[id.0]
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    fn apply<'t>(self, x: Tensor<'t>) -> Tensor<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Elu => x.elu(),
        }
    }
}

fn glorot(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect()
}

/// One hidden layer + linear output head.
#[derive(Clone)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
    ) -> Self {
        let w1 = store.add(&format!("{name}.w1"), d_in, hidden, glorot(rng, d_in, hidden));
        let b1 = store.add(&format!("{name}.b1"), 1, hidden, vec![0.0; hidden]);
        let w2 = store.add(
            &format!("{name}.w2"),
            hidden,
            d_out,
            glorot(rng, hidden, d_out),
        );
        let b2 = store.add(&format!("{name}.b2"), 1, d_out, vec![0.0; d_out]);
        Self { w1, b1, w2, b2, act }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t>, x: Tensor<'t>) -> Tensor<'t> {
        let h = self
            .act
            .apply(x.matmul(bind.get(self.w1)) + bind.get(self.b1));
        h.matmul(bind.get(self.w2)) + bind.get(self.b2)
    }
}

/// Shared hidden layer with a mean head and a positive variance head
/// (softplus plus floor).
#[derive(Clone)]
pub struct GaussHeadNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w_mean: ParamId,
    pub b_mean: ParamId,
    pub w_var: ParamId,
    pub b_var: ParamId,
    pub act: Activation,
}

impl GaussHeadNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
    ) -> Self {
        let w1 = store.add(&format!("{name}.w1"), d_in, hidden, glorot(rng, d_in, hidden));
        let b1 = store.add(&format!("{name}.b1"), 1, hidden, vec![0.0; hidden]);
        let w_mean = store.add(
            &format!("{name}.w_mean"),
            hidden,
            d_out,
            glorot(rng, hidden, d_out),
        );
        let b_mean = store.add(&format!("{name}.b_mean"), 1, d_out, vec![0.0; d_out]);
        let w_var = store.add(
            &format!("{name}.w_var"),
            hidden,
            d_out,
            glorot(rng, hidden, d_out),
        );
        let b_var = store.add(&format!("{name}.b_var"), 1, d_out, vec![0.0; d_out]);
        Self {
            w1,
            b1,
            w_mean,
            b_mean,
            w_var,
            b_var,
            act,
        }
    }

    /// Returns `(mean, variance)`; variance is strictly positive.
    pub fn forward<'t>(&self, bind: &Binding<'t>, x: Tensor<'t>) -> (Tensor<'t>, Tensor<'t>) {
        let h = self
            .act
            .apply(x.matmul(bind.get(self.w1)) + bind.get(self.b1));
        let mean = h.matmul(bind.get(self.w_mean)) + bind.get(self.b_mean);
        let var = (h.matmul(bind.get(self.w_var)) + bind.get(self.b_var))
            .softplus()
            .add_scalar(VAR_FLOOR);
        (mean, var)
    }
}
