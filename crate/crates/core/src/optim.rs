//! Adaptive-moment optimizer over named parameter arrays.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::{round_to_f32, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected step on `names`. Parameters and moments are kept
    /// single-precision representable.
    pub fn update(&mut self, store: &mut ParamStore, names: &[String], grads: &[Array2<f64>]) -> Result<()> {
        if names.len() != grads.len() {
            return Err(Error::Shape(format!("{} names for {} gradients", names.len(), grads.len())));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in names.iter().zip(grads) {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!("gradient of {name} has shape {:?}", g.dim())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut *m).and(&mut *v).and(&mut *p).and(g).for_each(|m, v, p, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
            round_to_f32(m);
            round_to_f32(v);
            round_to_f32(p);
        }
        Ok(())
    }
}

/// Scale gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("enc.w", array![[1.0, -1.0]]);
        let mut opt = Adam::new(0.25, 0.5, 0.9);
        opt.update(&mut store, &["enc.w".into()], &[array![[3.0, -0.5]]]).unwrap();
        let p = store.get("enc.w").unwrap();
        // Bias-corrected first step is lr · sign(g).
        assert!((p[[0, 0]] - 0.75).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.75).abs() < 1e-6);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        store.insert("enc.w", array![[5.0]]);
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let x = store.get("enc.w").unwrap()[[0, 0]];
            opt.update(&mut store, &["enc.w".into()], &[array![[2.0 * (x - 2.0)]]]).unwrap();
        }
        assert!((store.get("enc.w").unwrap()[[0, 0]] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_non_finite() {
        let mut store = ParamStore::new();
        store.insert("enc.w", array![[1.0]]);
        let mut opt = Adam::new(0.1, 0.5, 0.9);
        assert!(opt.update(&mut store, &["enc.w".into()], &[array![[f64::NAN]]]).is_err());
        assert_eq!(store.get("enc.w").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![array![[3.0]], array![[4.0]]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-12 && (g[1][[0, 0]] - 0.8).abs() < 1e-12);
        let mut small = vec![array![[0.1]]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.1);
    }
}
