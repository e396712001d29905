//! Named parameter store shared by training, checkpointing, and the graph
//! builders.
//!
//! Parameters live in insertion order, which fixes RNG consumption during
//! initialization, checkpoint layout, and SGD update order; every consumer
//! iterates the same sequence, so a (config, seed) pair pins all bytes
//! downstream. Names are dotted paths such as `pool_a.v` or
//! `fusion.gate.w`; stage filters select by prefix.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Graph, Grads, Var};
use crate::error::{Error, Result};

/// Ordered name → array store for all trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; duplicate names are programmer errors.
    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.entries[i].1
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Replaces the value of an existing parameter, shape-checked.
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| {
            Error::contract(format!("unknown parameter '{name}' in checkpoint"))
        })?;
        if self.entries[i].1.shape() != value.shape() {
            return Err(Error::contract(format!(
                "parameter '{name}': shape {:?} does not match expected {:?}",
                value.shape(),
                self.entries[i].1.shape()
            )));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    /// Inserts every parameter as a graph leaf, returning the name → node map.
    pub fn leaves(&self, g: &mut Graph) -> ParamVars {
        let mut map = HashMap::new();
        for (name, value) in &self.entries {
            map.insert(name.clone(), g.leaf(value.clone()));
        }
        ParamVars { map }
    }

    /// One SGD step over parameters selected by `filter`:
    /// `p -= lr * (grad + weight_decay * p)`. Parameters without a gradient
    /// entry are left untouched.
    pub fn sgd_step<F>(&mut self, grads: &GradMap, lr: f64, weight_decay: f64, filter: F)
    where
        F: Fn(&str) -> bool,
    {
        for (name, value) in &mut self.entries {
            if !filter(name) {
                continue;
            }
            let Some(grad) = grads.map.get(name.as_str()) else {
                continue;
            };
            let scale = 1.0 / grads.count.max(1) as f64;
            azip_update(value, grad, lr, weight_decay, scale);
        }
    }
}

fn azip_update(p: &mut ArrayD<f64>, g: &ArrayD<f64>, lr: f64, wd: f64, scale: f64) {
    for (pv, gv) in p.iter_mut().zip(g.iter()) {
        *pv -= lr * (gv * scale + wd * *pv);
    }
}

/// Graph leaf handles for every parameter, by name.
pub struct ParamVars {
    map: HashMap<String, Var>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("no graph leaf for parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// Summed per-parameter gradients over a batch, with the sample count for
/// mean normalization at update time.
#[derive(Default)]
pub struct GradMap {
    map: HashMap<String, ArrayD<f64>>,
    count: usize,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates one sample's gradients from a completed backward pass.
    pub fn accumulate(&mut self, grads: &Grads, vars: &ParamVars) {
        for (name, var) in vars.iter() {
            if let Some(g) = grads.get(var) {
                match self.map.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        self.map.insert(name.to_string(), g.clone());
                    }
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }
}

/// Uniform Glorot draw for a weight of the given shape.
pub fn xavier<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamSet::new();
        p.insert("b.x", zeros(&[2]));
        p.insert("a.y", zeros(&[3]));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b.x", "a.y"]);
    }

    #[test]
    fn set_rejects_shape_mismatch_and_unknown_name() {
        let mut p = ParamSet::new();
        p.insert("w", zeros(&[2, 2]));
        assert!(p.set("w", zeros(&[2, 3])).is_err());
        assert!(p.set("missing", zeros(&[1])).is_err());
        assert!(p.set("w", full(&[2, 2], 1.0)).is_ok());
        assert_eq!(p.get("w")[[0, 0]], 1.0);
    }

    #[test]
    fn sgd_step_averages_and_filters() {
        let mut p = ParamSet::new();
        p.insert("a.w", arr1(&[1.0, 2.0]).into_dyn());
        p.insert("b.w", arr1(&[1.0, 1.0]).into_dyn());

        let mut g = Graph::new();
        let vars = p.leaves(&mut g);
        let aw = vars.var("a.w");
        let s = g.sum_all(aw);
        let grads = g.backward(s);

        let mut gm = GradMap::new();
        gm.accumulate(&grads, &vars);
        gm.accumulate(&grads, &vars);
        assert_eq!(gm.count(), 2);

        p.sgd_step(&gm, 0.5, 0.0, |n| n.starts_with("a."));
        // grad mean is 1.0 per element after dividing the summed 2.0 by count
        assert_eq!(p.get("a.w"), &arr1(&[0.5, 1.5]).into_dyn());
        assert_eq!(p.get("b.w"), &arr1(&[1.0, 1.0]).into_dyn());
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = ParamSet::new();
        p.insert("w", arr1(&[2.0]).into_dyn());
        let mut gm = GradMap::new();
        // no gradient recorded: parameter must stay untouched even with decay
        p.sgd_step(&gm, 0.1, 0.5, |_| true);
        assert_eq!(p.get("w")[[0]], 2.0);

        let mut g = Graph::new();
        let vars = p.leaves(&mut g);
        let w = vars.var("w");
        let zero = g.scale(w, 0.0);
        let s = g.sum_all(zero);
        let grads = g.backward(s);
        gm.accumulate(&grads, &vars);
        p.sgd_step(&gm, 0.1, 0.5, |_| true);
        assert!((p.get("w")[[0]] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn xavier_draws_are_bounded_and_seeded() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = xavier(&mut r1, &[4, 4], 4, 4);
        let b = xavier(&mut r2, &[4, 4], 4, 4);
        assert_eq!(a, b);
        let bound = (6.0 / 8.0f64).sqrt();
        assert!(a.iter().all(|&x| x.abs() <= bound));
    }
}
