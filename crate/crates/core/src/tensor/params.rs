use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Named model parameters, iterated in lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Uniform Glorot initialization for a weight with the given fan-in/fan-out.
    pub fn init_glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    /// Names present in `self` but not `other`, or with differing shapes.
    pub fn layout_mismatch(&self, other: &ParamStore) -> Option<String> {
        for (k, t) in &self.tensors {
            match other.get(k) {
                None => return Some(format!("missing parameter {k}")),
                Some(o) if o.shape() != t.shape() => {
                    return Some(format!("parameter {k}: shape {:?} vs {:?}", t.shape(), o.shape()))
                }
                _ => {}
            }
        }
        other
            .tensors
            .keys()
            .find(|k| !self.tensors.contains_key(*k))
            .map(|k| format!("unexpected parameter {k}"))
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-parameter gradients keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    tensors: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn insert(&mut self, name: String, g: Tensor) {
        self.tensors.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds `other` element-wise; parameters missing on one side are taken as zero.
    pub fn accumulate(&mut self, other: &Grads) -> Result<()> {
        for (k, g) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::shape("grads", format!("{k}: {:?} vs {:?}", acc.shape(), g.shape())));
                    }
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                None => {
                    self.tensors.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.tensors.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}
