//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The backward pass of every operation is written in terms of other graph
//! operations, so gradients can be differentiated again. This is what the
//! gradient-penalty critic objective needs: the penalty depends on
//! `∇ₓ f(x)` and is itself minimised with respect to the critic weights.
//!
//! Everything is two-dimensional. Batched sequence and image data are laid
//! out as row blocks and rearranged with [`Tensor::gather_rows`].

mod backward;
mod tensor;

pub use backward::{grad, grad_with_seed};
pub use tensor::{Shape, Tensor, NO_ROW};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constants_do_not_track_graph() {
        let a = Tensor::constant(array![[1.0, 2.0]]);
        let b = a.exp().sum();
        assert!(!b.requires_grad());
    }

    #[test]
    fn unreachable_target_gets_zero_gradient() {
        let a = Tensor::var(array![[1.0, 2.0]]);
        let b = Tensor::var(array![[3.0]]);
        let g = grad(&a.sum(), &[a.clone(), b.clone()], false);
        assert_eq!(g[0].value(), &array![[1.0, 1.0]]);
        assert_eq!(g[1].value(), &array![[0.0]]);
    }

    #[test]
    fn repeated_operand_accumulates() {
        let a = Tensor::var(array![[3.0]]);
        let g = grad(&a.mul(&a), &[a.clone()], false);
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Tensor::var(array![[2.0]]);
        let y = x.mul(&x).mul(&x);
        let dy = grad(&y, &[x.clone()], true).remove(0);
        assert_eq!(dy.item(), 12.0);
        let d2y = grad(&dy, &[x.clone()], false).remove(0);
        assert_eq!(d2y.item(), 12.0);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut x = Tensor::var(array![[1.0]]);
        for _ in 0..200_000 {
            x = x.scale(1.0);
        }
        drop(x);
    }

    #[test]
    fn gather_with_empty_rows() {
        let a = Tensor::var(array![[1.0, 2.0], [3.0, 4.0]]);
        let idx: std::rc::Rc<[usize]> = vec![1, NO_ROW, 1].into();
        let b = a.gather_rows(idx);
        assert_eq!(b.value(), &array![[3.0, 4.0], [0.0, 0.0], [3.0, 4.0]]);
        let g = grad(&b.sum(), &[a.clone()], false).remove(0);
        assert_eq!(g.value(), &array![[0.0, 0.0], [2.0, 2.0]]);
    }
}
