//! Named parameter storage, seeded initialization, and binding onto a tape.

use std::collections::HashMap;

use numcore::{Gradients, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Mutable access by name; panics on an unknown name.
    pub fn by_name_mut(&mut self, name: &str) -> &mut Tensor {
        let id = self.id(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        self.get_mut(id)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Names and values in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Sum of element counts over parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                value.data_mut().fill(0.0);
            }
        }
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }
}

/// Registers parameters with initial values drawn from a generator keyed by
/// `(seed, name)`, so a parameter's initial value does not depend on which
/// other parameters exist.
pub struct ParamBuilder {
    store: ParamStore,
    seed: u64,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            seed,
        }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let mut rng = self.rng_for(name);
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut rng));
        self.store.push(name.to_string(), t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let mut rng = self.rng_for(name);
        let t = Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
        self.store.push(name.to_string(), t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.push(name.to_string(), Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.push(name.to_string(), Tensor::ones(shape))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.push(name.to_string(), value)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Parameters bound to one tape.
pub struct Ctx<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
}

impl<'t> Ctx<'t> {
    /// Binds every parameter as a trainable leaf.
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        let params = store.values().iter().map(|v| tape.leaf(v.clone())).collect();
        Self { tape, params }
    }

    /// Binds every parameter as a constant; no gradients are tracked.
    pub fn frozen(tape: &'t Tape, store: &ParamStore) -> Self {
        let params = store.values().iter().map(|v| tape.constant(v.clone())).collect();
        Self { tape, params }
    }

    /// Uses existing handles, in store order.
    pub fn from_vars(tape: &'t Tape, params: Vec<Var<'t>>) -> Self {
        Self { tape, params }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradient for every bound parameter, zeros where none flowed.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamBuilder::new(3);
        a.normal("x", &[4], 1.0);
        let wa = a.normal("w", &[2, 3], 1.0);
        let mut b = ParamBuilder::new(3);
        let wb = b.normal("w", &[2, 3], 1.0);
        let (sa, sb) = (a.finish(), b.finish());
        assert_eq!(sa.get(wa), sb.get(wb));
        let mut c = ParamBuilder::new(4);
        let wc = c.normal("w", &[2, 3], 1.0);
        assert_ne!(c.finish().get(wc), sb.get(wb));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut b = ParamBuilder::new(0);
        b.tensor("p", Tensor::from_vec(vec![1.0, -1.0]));
        let mut store = b.finish();
        let mut opt = AdamW::new(&store, 0.1, 0.9, 0.999, 1e-8, 0.0);
        opt.update(&mut store, &[Tensor::from_vec(vec![2.0, -3.0])]);
        let d = store.values()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut b = ParamBuilder::new(0);
        b.tensor("p", Tensor::from_vec(vec![2.0]));
        let mut store = b.finish();
        let mut opt = AdamW::new(&store, 0.1, 0.9, 0.999, 1e-8, 0.5);
        opt.update(&mut store, &[Tensor::from_vec(vec![0.0])]);
        assert!((store.values()[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
