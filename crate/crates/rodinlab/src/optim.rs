//! Name-keyed parameter storage, graph binding, and AdamW. Sorted-name
//! iteration everywhere keeps update order (and therefore training) fully
//! deterministic.

use crate::numerics::{Graph, Gradients, NodeId, NumericsError, Real, Tensor};
use std::collections::BTreeMap;

/// Canonical storage for a model's weights.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a fresh parameter; duplicate names are a programming error.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sorted by name.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    /// Total element count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Per-graph association between store names and graph nodes. Bind once per
/// forward pass; trainable bindings become `param` leaves, frozen ones plain
/// inputs.
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    /// Wrap an explicit name -> node map (for callers that created the leaf
    /// nodes themselves).
    pub fn from_ids(ids: BTreeMap<String, NodeId>) -> Binding {
        Binding { ids }
    }

    pub fn bind_all(
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
    ) -> Result<Binding, NumericsError> {
        let mut ids = BTreeMap::new();
        for (name, t) in store.iter() {
            let id = if trainable {
                g.param(t.clone())?
            } else {
                g.input(t.clone())?
            };
            ids.insert(name.clone(), id);
        }
        Ok(Binding { ids })
    }

    /// Bind only names with the given prefix.
    pub fn bind_prefix(
        g: &mut Graph,
        store: &ParamStore,
        prefix: &str,
        trainable: bool,
    ) -> Result<Binding, NumericsError> {
        let mut ids = BTreeMap::new();
        for (name, t) in store.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            let id = if trainable {
                g.param(t.clone())?
            } else {
                g.input(t.clone())?
            };
            ids.insert(name.clone(), id);
        }
        Ok(Binding { ids })
    }

    pub fn merge(&mut self, other: Binding) {
        for (k, v) in other.ids {
            let prev = self.ids.insert(k.clone(), v);
            assert!(prev.is_none(), "binding collision on {k}");
        }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Pull every bound parameter's gradient out of a backward result.
    /// Parameters untouched by the loss get zero gradients.
    pub fn grads(&self, g: &Graph, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            let t = grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()));
            out.insert(name.clone(), t);
        }
        out
    }
}

/// AdamW with decoupled weight decay. Moments are lazily created per
/// parameter name, so one instance can own any subset of a store.
pub struct AdamW {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: Real) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update using the given gradients; only named entries move.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as Real;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, g) in grads {
            let p = store.get_mut(name);
            assert_eq!(p.shape(), g.shape(), "grad shape mismatch for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, eps, lr, wd) =
                (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pi = p.data()[i];
                p.data_mut()[i] = pi - lr * (mhat / (vhat.sqrt() + eps) + wd * pi);
            }
        }
    }

    /// (moment name, first moment, second moment) triples, sorted by name.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor, &Tensor)> {
        self.m
            .iter()
            .map(move |(k, m)| (k, m, self.v.get(k).expect("paired moment")))
    }

    /// Restore optimizer state (used by checkpoint loading).
    pub fn restore(&mut self, step: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    #[test]
    fn adamw_minimizes_quadratic() {
        // f(p) = mean((p - target)^2)
        let target = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut store = ParamStore::new();
        store.insert("p", Tensor::zeros(&[3]));
        let mut opt = AdamW::new(0.05);
        for _ in 0..800 {
            let mut g = Graph::checked();
            let bind = Binding::bind_all(&mut g, &store, true).unwrap();
            let p = bind.id("p");
            let t = g.input(target.clone()).unwrap();
            let loss = g.mse(p, t).unwrap();
            let mut grads = g.backward(loss).unwrap();
            let gm = bind.grads(&g, &mut grads);
            opt.step(&mut store, &gm);
        }
        assert!(store.get("p").max_abs_diff(&target) < 1e-3);
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            store.insert("a", Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
            store.insert("b", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
            let mut opt = AdamW::new(0.01);
            for _ in 0..50 {
                let mut g = Graph::checked();
                let bind = Binding::bind_all(&mut g, &store, true).unwrap();
                let s = g.add(bind.id("a"), bind.id("b")).unwrap();
                let sq = g.square(s).unwrap();
                let loss = g.mean_all(sq).unwrap();
                let mut grads = g.backward(loss).unwrap();
                let gm = bind.grads(&g, &mut grads);
                opt.step(&mut store, &gm);
            }
            (store.get("a").data().to_vec(), store.get("b").data().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn disjoint_optimizers_update_their_groups_only() {
        let mut store = ParamStore::new();
        store.insert("dec.w", Tensor::scalar(1.0));
        store.insert("plane.p", Tensor::scalar(1.0));
        let mut opt_dec = AdamW::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("dec.w".to_string(), Tensor::scalar(1.0));
        opt_dec.step(&mut store, &grads);
        assert!(store.get("dec.w").item() < 1.0);
        assert_eq!(store.get("plane.p").item(), 1.0);
    }

    #[test]
    fn frozen_binding_gets_no_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0));
        let mut g = Graph::checked();
        let bind = Binding::bind_all(&mut g, &store, false).unwrap();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(bind.id("w"), x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let mut grads = g.backward(loss).unwrap();
        // frozen weight contributes to x's grad but receives none itself
        assert!((grads.get(x).unwrap().item() - 2.0).abs() < 1e-12);
        let gm = bind.grads(&g, &mut grads);
        assert_eq!(gm.get("w").unwrap().item(), 0.0);
    }
}
