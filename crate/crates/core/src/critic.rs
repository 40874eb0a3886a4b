//! Conditional critic over pairs of hidden-state sequences.
//!
//! A candidate sequence `h` (T steps) and a condition sequence `h_x`
//! (T_x steps) are combined into a T_x × T image whose pixel `(i, j)` is
//! `[h_x,i; h_j; |h_x,i − h_j|; h_x,i ⊙ h_j]`. A small dense-block CNN
//! reduces the image to one score per class.
//!
//! Images are stored as `(batch · rows · cols) × channels` with row index
//! `(b · rows + i) · cols + j`.

use std::rc::Rc;

use ndarray::Array2;
use paragen_autodiff::{grad, Tensor, NO_ROW};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::params::{glorot, ParamStore, Vars};
use crate::rng::Rng;
use crate::seqnets::HiddenStates;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const NUM_CLASSES: usize = 2;
const NORM_EPS: f64 = 1e-12;

/// A batch of feature images.
#[derive(Clone, Debug)]
pub struct FeatureImage {
    pub data: Tensor,
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl FeatureImage {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn index(&self, b: usize, i: usize, j: usize) -> usize {
        (b * self.rows + i) * self.cols + j
    }

    /// Channel vector at pixel `(i, j)` of example `b`.
    pub fn pixel(&self, b: usize, i: usize, j: usize) -> Vec<f64> {
        self.data.value().row(self.index(b, i, j)).to_vec()
    }
}

/// Pair every condition step with every candidate step.
pub fn build_feature_map(h_x: &HiddenStates, h: &HiddenStates) -> Result<FeatureImage> {
    if h_x.width() != h.width() {
        return Err(Error::Shape(format!(
            "hidden widths differ: condition {}, candidate {}",
            h_x.width(),
            h.width()
        )));
    }
    if h_x.batch != h.batch {
        return Err(Error::Shape(format!(
            "batch sizes differ: condition {}, candidate {}",
            h_x.batch, h.batch
        )));
    }
    let (batch, rows, cols) = (h.batch, h_x.steps, h.steps);
    let n = batch * rows * cols;
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for b in 0..batch {
        for i in 0..rows {
            for j in 0..cols {
                left.push(h_x.row(i, b));
                right.push(h.row(j, b));
            }
        }
    }
    let a = h_x.data.gather_rows(left.into());
    let c = h.data.gather_rows(right.into());
    let diff = a.sub(&c).abs();
    let prod = a.mul(&c);
    Ok(FeatureImage {
        data: Tensor::concat_cols(&[a, c, diff, prod]),
        batch,
        rows,
        cols,
    })
}

/// Anything that scores candidate sequences against condition sequences,
/// one column per class.
pub trait Critic {
    fn scores(&self, h: &HiddenStates, h_x: &HiddenStates) -> Result<Tensor>;
}

/// Fully connected two-layer head with a Leaky-ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub slope: f64,
}

impl Mlp {
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let p = &self.prefix;
        store.insert(format!("{p}.w1"), glorot(self.input, self.hidden, rng));
        store.insert(format!("{p}.b1"), Array2::zeros((1, self.hidden)));
        store.insert(format!("{p}.w2"), glorot(self.hidden, self.output, rng));
        store.insert(format!("{p}.b2"), Array2::zeros((1, self.output)));
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Tensor {
        let p = &self.prefix;
        x.matmul(vars.get(&format!("{p}.w1")))
            .add(vars.get(&format!("{p}.b1")))
            .leaky_relu(self.slope)
            .matmul(vars.get(&format!("{p}.w2")))
            .add(vars.get(&format!("{p}.b2")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticConfig {
    /// Hidden-state width; images carry four times as many channels.
    pub hidden: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub slope: f64,
}

impl CriticConfig {
    pub fn new(hidden: usize) -> Self {
        CriticConfig {
            hidden,
            blocks: 2,
            layers_per_block: 3,
            growth: 12,
            mlp_hidden: 128,
            classes: NUM_CLASSES,
            slope: 0.2,
        }
    }
}

/// Dense blocks of 3×3 convolutions, each followed by a transition
/// (1×1 convolution halving the channels, then 2×2 average pooling),
/// global average pooling, and an MLP head.
#[derive(Clone, Debug)]
pub struct CriticNet {
    pub cfg: CriticConfig,
}

impl CriticNet {
    pub fn new(cfg: CriticConfig) -> Self {
        CriticNet { cfg }
    }

    /// Channel count entering the MLP head.
    pub fn pooled_channels(&self) -> usize {
        let mut c = 4 * self.cfg.hidden;
        for _ in 0..self.cfg.blocks {
            c += self.cfg.layers_per_block * self.cfg.growth;
            c = (c / 2).max(1);
        }
        c
    }

    pub fn head(&self) -> Mlp {
        Mlp {
            prefix: "critic.mlp".into(),
            input: self.pooled_channels(),
            hidden: self.cfg.mlp_hidden,
            output: self.cfg.classes,
            slope: self.cfg.slope,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let g = self.cfg.growth;
        let mut c = 4 * self.cfg.hidden;
        for k in 0..self.cfg.blocks {
            for l in 0..self.cfg.layers_per_block {
                // He-style uniform bound over the 3×3 receptive field.
                let limit = (6.0 / (9 * c) as f64).sqrt();
                let w = Array2::from_shape_fn((c, 9 * g), |_| rng.random_range(-limit..limit));
                store.insert(format!("critic.b{k}.l{l}.w"), w);
                store.insert(format!("critic.b{k}.l{l}.b"), Array2::zeros((1, g)));
                c += g;
            }
            let out = (c / 2).max(1);
            store.insert(format!("critic.t{k}.w"), glorot(c, out, rng));
            store.insert(format!("critic.t{k}.b"), Array2::zeros((1, out)));
            c = out;
        }
        self.head().init(store, rng);
    }

    /// Scores `batch × classes`; no activation on the output.
    pub fn forward(&self, vars: &Vars, image: &FeatureImage) -> Result<Tensor> {
        if image.channels() != 4 * self.cfg.hidden {
            return Err(Error::Shape(format!(
                "image has {} channels, critic expects {}",
                image.channels(),
                4 * self.cfg.hidden
            )));
        }
        let slope = self.cfg.slope;
        let g = self.cfg.growth;
        let (batch, mut rows, mut cols) = (image.batch, image.rows, image.cols);
        let mut x = image.data.clone();
        for k in 0..self.cfg.blocks {
            let shifts = conv_shifts(batch, rows, cols);
            for l in 0..self.cfg.layers_per_block {
                let y = x.matmul(vars.get(&format!("critic.b{k}.l{l}.w")));
                let mut acc: Option<Tensor> = None;
                for (o, shift) in shifts.iter().enumerate() {
                    let part = y.slice_cols(o * g..(o + 1) * g).gather_rows(shift.clone());
                    acc = Some(match acc {
                        Some(a) => a.add(&part),
                        None => part,
                    });
                }
                let new = acc
                    .unwrap()
                    .add(vars.get(&format!("critic.b{k}.l{l}.b")))
                    .leaky_relu(slope);
                x = Tensor::concat_cols(&[x, new]);
            }
            x = x
                .matmul(vars.get(&format!("critic.t{k}.w")))
                .add(vars.get(&format!("critic.t{k}.b")))
                .leaky_relu(slope);
            let (pooled, r, c) = avg_pool(&x, batch, rows, cols);
            x = pooled;
            rows = r;
            cols = c;
        }
        let per_image = rows * cols;
        let gap = Array2::from_shape_fn((batch, batch * per_image), |(b, r)| {
            if r / per_image == b { 1.0 / per_image as f64 } else { 0.0 }
        });
        let pooled = Tensor::constant(gap).matmul(&x);
        Ok(self.head().forward(vars, &pooled))
    }
}

/// Row sources for the nine 3×3 offsets, zero padding outside the image.
/// Offset `o` is `(di, dj) = (o / 3 − 1, o % 3 − 1)`.
fn conv_shifts(batch: usize, rows: usize, cols: usize) -> Vec<Rc<[usize]>> {
    (0..9)
        .map(|o| {
            let (di, dj) = (o as isize / 3 - 1, o as isize % 3 - 1);
            let mut index = Vec::with_capacity(batch * rows * cols);
            for b in 0..batch {
                for i in 0..rows as isize {
                    for j in 0..cols as isize {
                        let (si, sj) = (i + di, j + dj);
                        index.push(if si < 0 || sj < 0 || si >= rows as isize || sj >= cols as isize {
                            NO_ROW
                        } else {
                            (b * rows + si as usize) * cols + sj as usize
                        });
                    }
                }
            }
            index.into()
        })
        .collect()
}

/// 2×2 average pooling with stride 2; odd edges average the pixels present.
fn avg_pool(x: &Tensor, batch: usize, rows: usize, cols: usize) -> (Tensor, usize, usize) {
    let (r2, c2) = (rows.div_ceil(2), cols.div_ceil(2));
    let n = batch * r2 * c2;
    let mut counts = Array2::zeros((n, 1));
    let mut sum: Option<Tensor> = None;
    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut index = Vec::with_capacity(n);
        for b in 0..batch {
            for i in 0..r2 {
                for j in 0..c2 {
                    let (si, sj) = (2 * i + di, 2 * j + dj);
                    if si < rows && sj < cols {
                        counts[[index.len(), 0]] += 1.0;
                        index.push((b * rows + si) * cols + sj);
                    } else {
                        index.push(NO_ROW);
                    }
                }
            }
        }
        let part = x.gather_rows(index.into());
        sum = Some(match sum {
            Some(s) => s.add(&part),
            None => part,
        });
    }
    let inv = Tensor::constant(counts.mapv(|c: f64| 1.0 / c));
    (sum.unwrap().mul(&inv), r2, c2)
}

/// A [`CriticNet`] together with bound parameters.
pub struct BoundCritic<'a> {
    pub net: &'a CriticNet,
    pub vars: &'a Vars,
}

impl Critic for BoundCritic<'_> {
    fn scores(&self, h: &HiddenStates, h_x: &HiddenStates) -> Result<Tensor> {
        self.net.forward(self.vars, &build_feature_map(h_x, h)?)
    }
}

/// Critic that ignores the condition and applies an MLP to single-step states.
pub struct HeadCritic<'a> {
    pub head: &'a Mlp,
    pub vars: &'a Vars,
}

impl Critic for HeadCritic<'_> {
    fn scores(&self, h: &HiddenStates, _h_x: &HiddenStates) -> Result<Tensor> {
        if h.steps != 1 {
            return Err(Error::Shape(format!("head critic takes 1 step, got {}", h.steps)));
        }
        Ok(self.head.forward(self.vars, &h.data))
    }
}

/// Per-example `(‖∇_ĥ f^(class_b)(ĥ_b | h_x,b)‖ − 1)²` as a `batch × 1` tensor,
/// at `ĥ = u·h_real + (1 − u)·h_fake` with one `u ~ U(0, 1)` per example.
///
/// Real and fake values enter as constants, so the result is differentiable
/// with respect to the critic's parameters only.
pub fn gradient_penalties(
    critic: &dyn Critic,
    h_real: &HiddenStates,
    h_fake: &HiddenStates,
    h_x: &HiddenStates,
    classes: &[usize],
    rng: &mut Rng,
) -> Result<Tensor> {
    if h_real.data.shape() != h_fake.data.shape() || h_real.batch != h_fake.batch {
        return Err(Error::Shape(format!(
            "real {:?} and fake {:?} hidden states differ",
            h_real.data.shape(),
            h_fake.data.shape()
        )));
    }
    let batch = h_real.batch;
    if classes.len() != batch {
        return Err(Error::Shape(format!("{} class indices for {batch} examples", classes.len())));
    }
    let u: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
    let (real, fake) = (h_real.data.value(), h_fake.data.value());
    let mixed = Array2::from_shape_fn(real.dim(), |(r, c)| {
        let w = u[r % batch];
        w * real[[r, c]] + (1.0 - w) * fake[[r, c]]
    });
    let h_hat = HiddenStates::new(Tensor::var(mixed), h_real.steps, batch)?;
    let scores = critic.scores(&h_hat, &h_x.detach())?;
    if classes.iter().any(|&c| c >= scores.cols()) {
        return Err(Error::InvalidArgument(format!(
            "class index out of range for {} critic outputs",
            scores.cols()
        )));
    }
    let select = Array2::from_shape_fn(scores.shape(), |(b, c)| {
        if classes[b] == c { 1.0 } else { 0.0 }
    });
    let total = scores.mul(&Tensor::constant(select)).sum();
    let g = grad(&total, std::slice::from_ref(&h_hat.data), true).remove(0);
    let per_example = Tensor::constant(Array2::from_shape_fn((batch, g.rows()), |(b, r)| {
        if r % batch == b { 1.0 } else { 0.0 }
    }));
    let sq = per_example.matmul(&g.square().sum_cols());
    Ok(sq.offset(NORM_EPS).sqrt().offset(-1.0).square())
}

/// Batch-mean gradient penalty for one class.
pub fn gradient_penalty(
    critic: &dyn Critic,
    h_real: &HiddenStates,
    h_fake: &HiddenStates,
    h_x: &HiddenStates,
    class_index: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let classes = vec![class_index; h_real.batch];
    Ok(gradient_penalties(critic, h_real, h_fake, h_x, &classes, rng)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use proptest::prelude::*;

    fn states(rows: Array2<f64>, steps: usize, batch: usize) -> HiddenStates {
        HiddenStates::new(Tensor::constant(rows), steps, batch).unwrap()
    }

    fn tiny_cfg(hidden: usize) -> CriticConfig {
        CriticConfig {
            hidden,
            blocks: 2,
            layers_per_block: 2,
            growth: 3,
            mlp_hidden: 5,
            classes: 2,
            slope: 0.2,
        }
    }

    #[test]
    fn hand_feature_vector() {
        let hx = states(array![[1.0, -2.0]], 1, 1);
        let h = states(array![[3.0, 4.0]], 1, 1);
        let img = build_feature_map(&hx, &h).unwrap();
        assert_eq!(img.pixel(0, 0, 0), vec![1.0, -2.0, 3.0, 4.0, 2.0, 6.0, 3.0, -8.0]);
    }

    #[test]
    fn identical_vectors_zero_difference() {
        let hx = states(array![[0.5, -1.5, 2.0]], 1, 1);
        let img = build_feature_map(&hx, &hx).unwrap();
        let p = img.pixel(0, 0, 0);
        assert_eq!(&p[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(&p[9..12], &[0.25, 2.25, 4.0]);
    }

    #[test]
    fn channels_are_four_times_width() {
        let mut rng = seeded(0);
        let hx = states(crate::params::glorot(3, 512, &mut rng), 3, 1);
        let h = states(crate::params::glorot(2, 512, &mut rng), 2, 1);
        let img = build_feature_map(&hx, &h).unwrap();
        assert_eq!((img.rows, img.cols, img.channels()), (3, 2, 2048));
    }

    #[test]
    fn width_mismatch_is_error() {
        let hx = states(Array2::zeros((1, 2)), 1, 1);
        let h = states(Array2::zeros((1, 3)), 1, 1);
        assert!(build_feature_map(&hx, &h).is_err());
    }

    #[test]
    fn two_scores_and_determinism() {
        let mut rng = seeded(3);
        let net = CriticNet::new(tiny_cfg(4));
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng);
        let vars = store.bind(|_| false);
        let hx = states(crate::params::glorot(6, 4, &mut rng), 3, 2);
        let h = states(crate::params::glorot(10, 4, &mut rng), 5, 2);
        let img = build_feature_map(&hx, &h).unwrap();
        let a = net.forward(&vars, &img).unwrap();
        let b = net.forward(&vars, &img).unwrap();
        assert_eq!(a.shape(), (2, 2));
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn zero_image_zero_head() {
        let mut rng = seeded(1);
        let net = CriticNet::new(tiny_cfg(2));
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng);
        for name in ["critic.mlp.w2", "critic.mlp.b2"] {
            store.get_mut(name).unwrap().fill(0.0);
        }
        let zero = states(Array2::zeros((3, 2)), 3, 1);
        let s = net.forward(&store.bind(|_| false), &build_feature_map(&zero, &zero).unwrap()).unwrap();
        assert_eq!(s.value(), &Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn examples_are_scored_independently() {
        let mut rng = seeded(5);
        let net = CriticNet::new(tiny_cfg(3));
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng);
        let vars = store.bind(|_| false);
        let hx = states(crate::params::glorot(8, 3, &mut rng), 4, 2);
        let h = states(crate::params::glorot(6, 3, &mut rng), 3, 2);
        let both = net.forward(&vars, &build_feature_map(&hx, &h).unwrap()).unwrap();
        let first = net
            .forward(&vars, &build_feature_map(&hx.select(0..1), &h.select(0..1)).unwrap())
            .unwrap();
        for c in 0..2 {
            assert!((both.value()[[0, c]] - first.value()[[0, c]]).abs() < 1e-12);
        }
    }

    /// `f(ĥ) = k · sum(ĥ) / √d` in every class column.
    struct Linear {
        k: f64,
    }

    impl Critic for Linear {
        fn scores(&self, h: &HiddenStates, _: &HiddenStates) -> Result<Tensor> {
            let d = (h.steps * h.width()) as f64;
            let pool = Array2::from_shape_fn((h.batch, h.data.rows()), |(b, r)| {
                if r % h.batch == b { self.k / d.sqrt() } else { 0.0 }
            });
            let s = Tensor::constant(pool).matmul(&h.data.sum_cols());
            Ok(Tensor::concat_cols(&[s.clone(), s]))
        }
    }

    #[test]
    fn linear_critic_penalties() {
        let mut rng = seeded(2);
        let real = states(crate::params::glorot(12, 4, &mut rng), 4, 3);
        let fake = states(crate::params::glorot(12, 4, &mut rng), 4, 3);
        let hx = states(Array2::zeros((6, 4)), 2, 3);
        let unit = gradient_penalty(&Linear { k: 1.0 }, &real, &fake, &hx, 0, &mut rng).unwrap();
        assert!(unit.item().abs() < 1e-6);
        let double = gradient_penalty(&Linear { k: 2.0 }, &real, &fake, &hx, 1, &mut rng).unwrap();
        assert!((double.item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn penalty_shape_mismatch() {
        let a = states(Array2::zeros((4, 2)), 2, 2);
        let b = states(Array2::zeros((6, 2)), 3, 2);
        assert!(gradient_penalty(&Linear { k: 1.0 }, &a, &b, &a, 0, &mut seeded(0)).is_err());
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let mut rng = seeded(11);
        let net = CriticNet::new(CriticConfig {
            hidden: 4,
            blocks: 1,
            layers_per_block: 1,
            growth: 2,
            mlp_hidden: 3,
            classes: 2,
            slope: 0.2,
        });
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng);
        let real = states(crate::params::glorot(4, 4, &mut rng), 2, 2);
        let fake = states(crate::params::glorot(4, 4, &mut rng), 2, 2);
        let hx = states(crate::params::glorot(4, 4, &mut rng), 2, 2);
        let penalty = |store: &ParamStore, track: bool| {
            let vars = store.bind(|_| track);
            let critic = BoundCritic { net: &net, vars: &vars };
            let p = gradient_penalty(&critic, &real, &fake, &hx, 0, &mut seeded(99)).unwrap();
            (p, vars)
        };
        let (p, vars) = penalty(&store, true);
        let names: Vec<String> = store.names().cloned().collect();
        let grads = grad(&p, &vars.tensors(&names), false);
        let h = 1e-5;
        for (name, g) in names.iter().zip(&grads) {
            let (r, c) = (0, 0);
            let base = store.get(name).unwrap()[[r, c]];
            // Perturb without rounding to single precision.
            let mut plus = store.clone();
            plus.get_mut(name).unwrap()[[r, c]] = base + h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap()[[r, c]] = base - h;
            let fd = (penalty(&plus, false).0.item() - penalty(&minus, false).0.item()) / (2.0 * h);
            let an = g.value()[[r, c]];
            let tol = 1e-3 * an.abs().max(fd.abs()).max(1e-4);
            assert!((fd - an).abs() <= tol, "{name}: analytic {an} vs numeric {fd}");
        }
    }

    proptest! {
        #[test]
        fn permuting_condition_rows_permutes_image(seed in 0u64..500, rows in 1usize..5) {
            let mut rng = seeded(seed);
            let hx = crate::params::glorot(rows, 3, &mut rng);
            let h = states(crate::params::glorot(2, 3, &mut rng), 2, 1);
            let mut perm: Vec<usize> = (0..rows).collect();
            for i in (1..rows).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted = Array2::from_shape_fn(hx.dim(), |(i, c)| hx[[perm[i], c]]);
            let a = build_feature_map(&states(hx, rows, 1), &h).unwrap();
            let b = build_feature_map(&states(permuted, rows, 1), &h).unwrap();
            for i in 0..rows {
                for j in 0..2 {
                    prop_assert_eq!(b.pixel(0, i, j), a.pixel(0, perm[i], j));
                }
            }
        }

        #[test]
        fn penalty_is_nonnegative(seed in 0u64..200) {
            let mut rng = seeded(seed);
            let net = CriticNet::new(tiny_cfg(2));
            let mut store = ParamStore::new();
            net.init(&mut store, &mut rng);
            let vars = store.bind(|_| false);
            let real = states(crate::params::glorot(6, 2, &mut rng), 3, 2);
            let fake = states(crate::params::glorot(6, 2, &mut rng), 3, 2);
            let hx = states(crate::params::glorot(4, 2, &mut rng), 2, 2);
            let p = gradient_penalty(&BoundCritic { net: &net, vars: &vars }, &real, &fake, &hx, 1, &mut rng).unwrap();
            prop_assert!(p.item() >= 0.0);
        }
    }
}
