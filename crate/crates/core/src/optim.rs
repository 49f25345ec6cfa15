//! Named parameter store and the Adam optimizer.

use crate::array::Array;
use crate::rng::Rng;
use crate::tape::{Gradients, NodeId, Tape};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Array,
    pub first_moment: Array,
    pub second_moment: Array,
    pub step: u64,
}

impl Parameter {
    pub fn new(value: Array) -> Parameter {
        let shape = value.shape.clone();
        Parameter {
            value,
            first_moment: Array::zeros(&shape),
            second_moment: Array::zeros(&shape),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine learning-rate decay from `base` toward a 5% floor over `total`
/// steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    let scale = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    base * (0.05 + 0.95 * scale)
}

/// One Adam update with bias correction. Returns false (and leaves the
/// parameter untouched) when the gradient is non-finite.
pub fn adam_step(p: &mut Parameter, grad: &Array, cfg: &AdamConfig) -> bool {
    assert!(cfg.lr > 0.0, "adam: lr must be positive");
    assert!((0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2));
    assert_eq!(p.value.shape, grad.shape, "adam: grad shape mismatch");
    if !grad.data.iter().all(|v| v.is_finite()) {
        return false;
    }
    p.step += 1;
    let t = p.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grad.data.len() {
        let g = grad.data[i];
        let m = cfg.beta1 * p.first_moment.data[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * p.second_moment.data[i] + (1.0 - cfg.beta2) * g * g;
        p.first_moment.data[i] = m;
        p.second_moment.data[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        p.value.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    true
}

/// Parameters keyed by dotted names ("enc.conv0.w", "codebook", ...).
/// BTreeMap keeps iteration (and hence update and checkpoint order)
/// deterministic.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

/// Name -> tape node bindings for one forward/backward pass.
#[derive(Debug, Default)]
pub struct BoundParams {
    bindings: Vec<(String, NodeId)>,
}

impl BoundParams {
    pub fn iter(&self) -> impl Iterator<Item = &(String, NodeId)> {
        self.bindings.iter()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        self.params.insert(name.to_string(), Parameter::new(value));
    }

    /// Uniform +-1/sqrt(fan_in) init, the convention used everywhere.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Array::uniform(shape, -bound, bound, rng));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Array::zeros(shape));
    }

    pub fn get(&self, name: &str) -> &Parameter {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    /// Put a parameter on the tape as a differentiable leaf and remember it.
    pub fn bind(&self, tape: &mut Tape, bound: &mut BoundParams, name: &str) -> NodeId {
        let id = tape.leaf(self.get(name).value.clone());
        bound.bindings.push((name.to_string(), id));
        id
    }

    /// Put a parameter on the tape as a frozen constant.
    pub fn bind_frozen(&self, tape: &mut Tape, name: &str) -> NodeId {
        tape.constant(self.get(name).value.clone())
    }

    /// Apply Adam to every bound parameter that received a gradient.
    /// Returns the number of parameters skipped due to non-finite gradients.
    pub fn apply_gradients(
        &mut self,
        bound: &BoundParams,
        grads: &mut Gradients,
        cfg: &AdamConfig,
    ) -> usize {
        let mut skipped = 0;
        // Accumulate per name first: the same parameter may be bound more
        // than once in a graph (e.g. weight tying), and binding order must
        // not affect the result.
        let mut by_name: BTreeMap<&str, Array> = BTreeMap::new();
        for (name, id) in &bound.bindings {
            if let Some(g) = grads.take(*id) {
                match by_name.get_mut(name.as_str()) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        by_name.insert(name, g);
                    }
                }
            }
        }
        for (name, grad) in by_name {
            let p = self.get_mut(name);
            if !adam_step(p, &grad, cfg) {
                skipped += 1;
            }
        }
        skipped
    }

    /// Merge another store under a name prefix (used to assemble pipelines).
    pub fn absorb(&mut self, other: ParamStore) {
        for (k, v) in other.params {
            self.params.insert(k, v);
        }
    }

    /// Sub-store of parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}
