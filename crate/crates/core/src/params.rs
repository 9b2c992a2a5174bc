//! Named, ordered parameter storage and the per-step graph wrapper.
//!
//! Parameters live in insertion order so optimizer state, checkpoints and
//! gradient traversal are all deterministic. A [`Graph`] stages parameters
//! onto a fresh [`Tape`] once per forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::TensorBase;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, TensorBase<S>)>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: &str, value: TensorBase<S>) -> Result<ParamId> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.entries.push((name.to_string(), value));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &TensorBase<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut TensorBase<S> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorBase<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

// ── Seeded initializers ─────────────────────────────────────────────────

/// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
pub fn init_linear<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TensorBase<S> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.gen_range(-s..s)))
        .collect();
    TensorBase::new(vec![rows, cols], data).expect("positive dims")
}

/// Zero bias row, 1 x c.
pub fn init_bias<S: Scalar>(cols: usize) -> TensorBase<S> {
    TensorBase::zeros(&[1, cols])
}

/// Identity matrix, used for learnable metric initialization.
pub fn init_identity<S: Scalar>(n: usize) -> TensorBase<S> {
    let mut t = TensorBase::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = S::one();
    }
    t
}

/// Convolution kernel [kh, kw, cin, cout], uniform with fan-based scale.
pub fn init_conv<S: Scalar>(
    rng: &mut ChaCha8Rng,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> TensorBase<S> {
    let fan_in = kh * kw * cin;
    let fan_out = kh * kw * cout;
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..kh * kw * cin * cout)
        .map(|_| S::from_f64(rng.gen_range(-s..s)))
        .collect();
    TensorBase::new(vec![kh, kw, cin, cout], data).expect("positive dims")
}

// ── Graph ───────────────────────────────────────────────────────────────

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are staged lazily as differentiable leaves; each is staged at
/// most once so gradients accumulate across reuses.
pub struct Graph<'a, S: Scalar> {
    pub tape: Tape<S>,
    store: &'a ParamStore<S>,
    staged: Vec<Option<Var>>,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self {
            tape: Tape::new(),
            staged: vec![None; store.len()],
            store,
        }
    }

    /// Stages parameter `id` as a differentiable leaf (cached).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.staged[id.0] {
            return v;
        }
        let v = self.tape.leaf_grad(self.store.get(id).clone());
        self.staged[id.0] = Some(v);
        v
    }

    /// Stages a non-differentiable input.
    pub fn constant(&mut self, value: TensorBase<S>) -> Var {
        self.tape.leaf(value)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Per-parameter gradients after [`Graph::backward`], indexed by
    /// [`ParamId`]; `None` for parameters the loss never touched.
    pub fn grads(&self) -> Vec<Option<TensorBase<S>>> {
        self.staged
            .iter()
            .map(|slot| slot.and_then(|v| self.tape.grad(v).cloned()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("w", TensorBase::zeros(&[2, 2])).unwrap();
        assert!(store.add("w", TensorBase::zeros(&[1, 1])).is_err());
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: TensorBase<f64> = init_linear(&mut ChaCha8Rng::seed_from_u64(7), 4, 3);
        let b: TensorBase<f64> = init_linear(&mut ChaCha8Rng::seed_from_u64(7), 4, 3);
        assert_eq!(a.data(), b.data());
        let s = (6.0 / 7.0_f64).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < s));
    }

    #[test]
    fn graph_accumulates_over_param_reuse() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store
            .add("w", TensorBase::new(vec![1, 2], vec![3.0, -1.0]).unwrap())
            .unwrap();
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b); // staged once
        let prod = g.tape.mul(a, b).unwrap(); // w * w elementwise
        let loss = g.tape.sum(prod);
        g.backward(loss).unwrap();
        let grads = g.grads();
        assert_eq!(grads[w.index()].as_ref().unwrap().data(), &[6.0, -2.0]);
    }
}
