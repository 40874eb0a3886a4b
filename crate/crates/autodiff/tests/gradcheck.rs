//! Finite-difference checks of first and second derivatives for every op.

use std::rc::Rc;

use ndarray::Array2;
use paragen_autodiff::{grad, Tensor, NO_ROW};
use proptest::prelude::*;

fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut xp = x.clone();
        xp[[r, c]] += h;
        let mut xm = x.clone();
        xm[[r, c]] -= h;
        let fp = f(&Tensor::constant(xp)).item();
        let fm = f(&Tensor::constant(xm)).item();
        out[[r, c]] = (fp - fm) / (2.0 * h);
    }
    out
}

fn check(name: &str, f: &dyn Fn(&Tensor) -> Tensor, x: Array2<f64>) {
    let xv = Tensor::var(x.clone());
    let analytic = grad(&f(&xv), &[xv.clone()], false).remove(0);
    let numeric = numeric_grad(f, &x, 1e-6);
    for (a, n) in analytic.value().iter().zip(numeric.iter()) {
        let scale = a.abs().max(n.abs()).max(1.0);
        assert!((a - n).abs() / scale < 1e-6, "{name}: analytic {a} vs numeric {n}");
    }
}

/// Checks d/dx of ‖∇ₓ f‖² against finite differences of the first-order gradient.
fn check_second(name: &str, f: &dyn Fn(&Tensor) -> Tensor, x: Array2<f64>) {
    let gnorm = |t: &Tensor| {
        let g = grad(&f(t), &[t.clone()], true).remove(0);
        g.square().sum()
    };
    let xv = Tensor::var(x.clone());
    let analytic = grad(&gnorm(&xv), &[xv.clone()], false).remove(0);
    let numeric = numeric_grad(
        &|t: &Tensor| {
            let v = Tensor::var(t.value().clone());
            gnorm(&v)
        },
        &x,
        1e-5,
    );
    for (a, n) in analytic.value().iter().zip(numeric.iter()) {
        let scale = a.abs().max(n.abs()).max(1.0);
        assert!((a - n).abs() / scale < 1e-5, "{name}: analytic {a} vs numeric {n}");
    }
}

fn sample(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    // Small LCG keeps the inputs fixed without pulling in an RNG crate.
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Array2::from_shape_fn((rows, cols), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn ops() -> Vec<(&'static str, Box<dyn Fn(&Tensor) -> Tensor>)> {
    let w = Tensor::constant(sample(3, 4, 7));
    let w2 = w.clone();
    let row = Tensor::constant(sample(1, 3, 8));
    vec![
        ("matmul", Box::new(move |x: &Tensor| x.matmul(&w).tanh().sum())),
        ("transpose", Box::new(move |x: &Tensor| x.t().matmul(&x.slice_cols(0..1)).square().sum())),
        ("exp_log", Box::new(|x: &Tensor| x.exp().offset(1.0).ln().sum())),
        ("sigmoid", Box::new(|x: &Tensor| x.sigmoid().square().sum())),
        ("sqrt", Box::new(|x: &Tensor| x.square().offset(0.5).sqrt().sum())),
        ("abs", Box::new(|x: &Tensor| x.offset(0.1).abs().mul(x).sum())),
        ("leaky", Box::new(|x: &Tensor| x.leaky_relu(0.2).square().sum())),
        ("div", Box::new(|x: &Tensor| x.div(&x.square().offset(2.0)).sum())),
        ("broadcast_row", Box::new(move |x: &Tensor| x.mul(&row).add(&x.sum_rows()).square().sum())),
        ("broadcast_col", Box::new(|x: &Tensor| x.sub(&x.sum_cols()).square().mean())),
        ("softmax", Box::new(|x: &Tensor| x.softmax_rows().square().sum())),
        ("log_softmax", Box::new(|x: &Tensor| x.log_softmax_rows().slice_cols(1..2).sum())),
        ("reshape", Box::new(move |x: &Tensor| x.reshape((3, 4)).matmul(&w2.t()).square().sum())),
        ("concat", Box::new(|x: &Tensor| {
            Tensor::concat_cols(&[x.clone(), x.square()])
                .t()
                .matmul(&x.slice_cols(0..1))
                .square()
                .sum()
                .add(&Tensor::concat_rows(&[x.clone(), x.tanh()]).exp().sum())
        })),
        ("gather", Box::new(|x: &Tensor| {
            let idx: Rc<[usize]> = vec![2, NO_ROW, 0, 2, 1].into();
            x.gather_rows(idx).tanh().square().sum()
        })),
        ("scatter", Box::new(|x: &Tensor| {
            let idx: Rc<[usize]> = vec![1, 1, NO_ROW, 0].into();
            x.tanh().scatter_rows(idx, 2).square().sum()
        })),
        ("pad", Box::new(|x: &Tensor| x.pad((6, 5), (2, 1)).exp().sum())),
        ("blend", Box::new(|x: &Tensor| {
            let m = Tensor::constant(Array2::from_shape_fn((4, 3), |(r, _)| (r % 2) as f64));
            x.tanh().blend(&x.square(), &m).sum()
        })),
    ]
}

#[test]
fn first_order_matches_finite_differences() {
    for (i, (name, f)) in ops().into_iter().enumerate() {
        let x = sample(4, 3, 100 + i as u64);
        check(name, &*f, x);
    }
}

#[test]
fn second_order_matches_finite_differences() {
    for (i, (name, f)) in ops().into_iter().enumerate() {
        let x = sample(4, 3, 200 + i as u64);
        check_second(name, &*f, x);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor::constant(Array2::from_shape_vec((3, 4), v).unwrap());
        let s = x.softmax_rows();
        for r in s.value().rows() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| p >= 0.0));
        }
    }
}
