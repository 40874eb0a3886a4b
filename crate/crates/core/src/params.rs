//! Named parameter arrays and their per-step graph bindings.

use std::collections::BTreeMap;

use ndarray::Array2;
use paragen_autodiff::Tensor;
use rand::Rng as _;

use crate::rng::Rng;

/// Every trainable array of the model, keyed by a dotted name whose first
/// segment identifies the owner (`enc`, `trs`, `dec`, `emb`, `critic`).
///
/// Values are kept representable in single precision so checkpoints
/// round-trip exactly; arithmetic is double precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Array2<f64>) {
        round_to_f32(&mut value);
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Names belonging to any of the given owner groups.
    pub fn group_names(&self, groups: &[&str]) -> Vec<String> {
        self.arrays
            .keys()
            .filter(|n| groups.contains(&group_of(n)))
            .cloned()
            .collect()
    }

    /// Graph leaves for one forward pass; arrays selected by `track` become
    /// differentiable variables, the rest constants.
    pub fn bind(&self, track: impl Fn(&str) -> bool) -> Vars {
        Vars {
            tensors: self
                .arrays
                .iter()
                .map(|(n, v)| {
                    let t = if track(n) {
                        Tensor::var(v.clone())
                    } else {
                        Tensor::constant(v.clone())
                    };
                    (n.clone(), t)
                })
                .collect(),
        }
    }

    /// Order-sensitive digest of the selected groups, for mutation checks.
    pub fn checksum(&self, groups: &[&str]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for name in self.group_names(groups) {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            for &x in self.arrays[&name].iter() {
                h = (h ^ x.to_bits()).wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn round_to_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x as f32 as f64);
}

/// The tensors bound from a [`ParamStore`] for one forward/backward pass.
pub struct Vars {
    tensors: BTreeMap<String, Tensor>,
}

impl Vars {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not initialised"))
    }

    pub fn tensors(&self, names: &[String]) -> Vec<Tensor> {
        names.iter().map(|n| self.get(n).clone()).collect()
    }
}

/// Uniform Glorot initialisation.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}
