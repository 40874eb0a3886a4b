use std::cell::Cell;
use std::fmt;
use std::ops::Range;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

/// `(rows, cols)` of a matrix.
pub type Shape = (usize, usize);

/// Row index marking "no source row" in [`Tensor::gather_rows`]; the output row is zero.
pub const NO_ROW: usize = usize::MAX;

thread_local!(static NEXT_ID: Cell<usize> = const { Cell::new(0) });

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// A node in a dynamically built computation graph.
///
/// Every tensor is a dense row-major `f64` matrix. Tensors that require a
/// gradient remember the operation that produced them; constants do not.
/// Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

pub(crate) struct Node {
    pub(crate) id: usize,
    pub(crate) value: Rc<Array2<f64>>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    Offset(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Sqrt(Tensor),
    Abs(Tensor),
    LeakyRelu(Tensor, f64),
    Sum(Tensor),
    SumRows(Tensor),
    SumCols(Tensor),
    Broadcast(Tensor),
    Reshape(Tensor),
    Slice(Tensor, Range<usize>, Range<usize>),
    Pad(Tensor, (usize, usize)),
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    GatherRows(Tensor, Rc<[usize]>),
    ScatterRows(Tensor, Rc<[usize]>),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | Offset(a) | Transpose(a) | Exp(a) | Log(a) | Tanh(a)
            | Sigmoid(a) | Sqrt(a) | Abs(a) | LeakyRelu(a, _) | Sum(a) | SumRows(a)
            | SumCols(a) | Broadcast(a) | Reshape(a) | Slice(a, _, _) | Pad(a, _)
            | GatherRows(a, _) | ScatterRows(a, _) => vec![a],
            ConcatCols(v) | ConcatRows(v) => v.iter().collect(),
        }
    }

    fn into_parents(self) -> Vec<Tensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | Offset(a) | Transpose(a) | Exp(a) | Log(a) | Tanh(a)
            | Sigmoid(a) | Sqrt(a) | Abs(a) | LeakyRelu(a, _) | Sum(a) | SumRows(a)
            | SumCols(a) | Broadcast(a) | Reshape(a) | Slice(a, _, _) | Pad(a, _)
            | GatherRows(a, _) | ScatterRows(a, _) => vec![a],
            ConcatCols(v) | ConcatRows(v) => v,
        }
    }
}

// Long recurrent graphs would otherwise recurse once per node on drop.
impl Drop for Node {
    fn drop(&mut self) {
        let mut stack = std::mem::replace(&mut self.op, Op::Leaf).into_parents();
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                stack.extend(std::mem::replace(&mut node.op, Op::Leaf).into_parents());
            }
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(value: Array2<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        }))
    }

    /// A value that is never differentiated.
    pub fn constant(value: Array2<f64>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn var(value: Array2<f64>) -> Self {
        Self::leaf(value, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array2::from_elem((1, 1), v))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::constant(Array2::zeros(shape))
    }

    pub fn ones(shape: Shape) -> Self {
        Self::constant(Array2::ones(shape))
    }

    fn from_op(value: Array2<f64>, op: Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            id: next_id(),
            value: Rc::new(value),
            op,
            requires_grad,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single entry of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.0.value[[0, 0]]
    }

    /// Same value, cut off from the graph. Shares storage.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            value: Rc::clone(&self.0.value),
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    pub(crate) fn op(&self) -> &Op {
        &self.0.op
    }

    // ---- elementwise binary ------------------------------------------------

    fn broadcast_pair(a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
        let (sa, sb) = (a.shape(), b.shape());
        if sa == sb {
            return (a.clone(), b.clone());
        }
        let dim = |x: usize, y: usize| {
            assert!(
                x == y || x == 1 || y == 1,
                "incompatible shapes for broadcasting: {sa:?} vs {sb:?}"
            );
            x.max(y)
        };
        let target = (dim(sa.0, sb.0), dim(sa.1, sb.1));
        (a.broadcast_to(target), b.broadcast_to(target))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = Self::broadcast_pair(self, other);
        let v = &*a.0.value + &*b.0.value;
        Self::from_op(v, Op::Add(a, b))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = Self::broadcast_pair(self, other);
        let v = &*a.0.value - &*b.0.value;
        Self::from_op(v, Op::Sub(a, b))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = Self::broadcast_pair(self, other);
        let v = &*a.0.value * &*b.0.value;
        Self::from_op(v, Op::Mul(a, b))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = Self::broadcast_pair(self, other);
        let v = &*a.0.value / &*b.0.value;
        Self::from_op(v, Op::Div(a, b))
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn neg(&self) -> Tensor {
        Self::from_op(self.0.value.mapv(|x| -x), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Self::from_op(self.0.value.mapv(|x| x * c), Op::Scale(self.clone(), c))
    }

    /// `self + c` for a constant `c`.
    pub fn offset(&self, c: f64) -> Tensor {
        Self::from_op(self.0.value.mapv(|x| x + c), Op::Offset(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        Self::from_op(self.0.value.mapv(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        Self::from_op(self.0.value.mapv(f64::ln), Op::Log(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        Self::from_op(self.0.value.mapv(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.0.value.mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Self::from_op(v, Op::Sigmoid(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        Self::from_op(self.0.value.mapv(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        Self::from_op(self.0.value.mapv(f64::abs), Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    /// `max(x, slope·x)`; the derivative at exactly zero is `slope`.
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.0.value.mapv(|x| if x > 0.0 { x } else { slope * x });
        Self::from_op(v, Op::LeakyRelu(self.clone(), slope))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols(),
            other.rows(),
            "matmul shape mismatch: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let v = self.0.value.dot(&*other.0.value);
        Self::from_op(v, Op::MatMul(self.clone(), other.clone()))
    }

    pub fn t(&self) -> Tensor {
        let v = self.0.value.t().to_owned();
        Self::from_op(v, Op::Transpose(self.clone()))
    }

    // ---- reductions & broadcasting ----------------------------------------

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&self) -> Tensor {
        Self::from_op(
            Array2::from_elem((1, 1), self.0.value.sum()),
            Op::Sum(self.clone()),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.0.value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums as a `1×cols` row.
    pub fn sum_rows(&self) -> Tensor {
        let v = self.0.value.sum_axis(Axis(0)).insert_axis(Axis(0));
        Self::from_op(v, Op::SumRows(self.clone()))
    }

    /// Row sums as a `rows×1` column.
    pub fn sum_cols(&self) -> Tensor {
        let v = self.0.value.sum_axis(Axis(1)).insert_axis(Axis(1));
        Self::from_op(v, Op::SumCols(self.clone()))
    }

    pub fn broadcast_to(&self, shape: Shape) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .0
            .value
            .broadcast(shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Self::from_op(v, Op::Broadcast(self.clone()))
    }

    /// Sum-reduce a broadcast result back down to `shape`.
    pub fn sum_to(&self, shape: Shape) -> Tensor {
        let own = self.shape();
        if own == shape {
            self.clone()
        } else if shape == (1, 1) {
            self.sum()
        } else if shape.0 == 1 && shape.1 == own.1 {
            self.sum_rows()
        } else if shape.1 == 1 && shape.0 == own.0 {
            self.sum_cols()
        } else {
            panic!("cannot sum {own:?} down to {shape:?}")
        }
    }

    /// Row-major reshape.
    pub fn reshape(&self, shape: Shape) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        assert_eq!(self.0.value.len(), shape.0 * shape.1, "reshape size mismatch");
        let flat: Vec<f64> = if self.0.value.is_standard_layout() {
            self.0.value.as_slice().unwrap().to_vec()
        } else {
            self.0.value.iter().copied().collect()
        };
        let v = Array2::from_shape_vec(shape, flat).expect("reshape");
        Self::from_op(v, Op::Reshape(self.clone()))
    }

    // ---- structural --------------------------------------------------------

    pub fn slice(&self, rows: Range<usize>, cols: Range<usize>) -> Tensor {
        let v = self
            .0
            .value
            .slice(s![rows.clone(), cols.clone()])
            .to_owned();
        Self::from_op(v, Op::Slice(self.clone(), rows, cols))
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> Tensor {
        let c = self.cols();
        self.slice(rows, 0..c)
    }

    pub fn slice_cols(&self, cols: Range<usize>) -> Tensor {
        let r = self.rows();
        self.slice(0..r, cols)
    }

    /// Embed into a zero matrix of `shape` with the top-left corner at `at`.
    pub fn pad(&self, shape: Shape, at: (usize, usize)) -> Tensor {
        let (r, c) = self.shape();
        let mut v = Array2::zeros(shape);
        v.slice_mut(s![at.0..at.0 + r, at.1..at.1 + c])
            .assign(&*self.0.value);
        Self::from_op(v, Op::Pad(self.clone(), at))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let rows = parts[0].rows();
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            assert_eq!(p.rows(), rows, "concat_cols row mismatch");
            v.slice_mut(s![.., at..at + p.cols()]).assign(&*p.0.value);
            at += p.cols();
        }
        Self::from_op(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let cols = parts[0].cols();
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            assert_eq!(p.cols(), cols, "concat_rows col mismatch");
            v.slice_mut(s![at..at + p.rows(), ..]).assign(&*p.0.value);
            at += p.rows();
        }
        Self::from_op(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Output row `k` is input row `index[k]`, or zeros for [`NO_ROW`].
    pub fn gather_rows(&self, index: Rc<[usize]>) -> Tensor {
        let src = &*self.0.value;
        let mut v = Array2::zeros((index.len(), self.cols()));
        for (k, &i) in index.iter().enumerate() {
            if i != NO_ROW {
                v.row_mut(k).assign(&src.row(i));
            }
        }
        Self::from_op(v, Op::GatherRows(self.clone(), index))
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): row `k` is added into output row `index[k]`.
    pub fn scatter_rows(&self, index: Rc<[usize]>, n_rows: usize) -> Tensor {
        assert_eq!(index.len(), self.rows());
        let src = &*self.0.value;
        let mut v = Array2::zeros((n_rows, self.cols()));
        for (k, &i) in index.iter().enumerate() {
            if i != NO_ROW {
                let mut row = v.row_mut(i);
                row += &src.row(k);
            }
        }
        Self::from_op(v, Op::ScatterRows(self.clone(), index))
    }

    // ---- composites --------------------------------------------------------

    /// Row-wise softmax. The row maximum is subtracted as a constant.
    pub fn softmax_rows(&self) -> Tensor {
        let e = self.sub(&self.row_max_const()).exp();
        e.div(&e.sum_cols())
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        let shifted = self.sub(&self.row_max_const());
        shifted.sub(&shifted.exp().sum_cols().ln())
    }

    fn row_max_const(&self) -> Tensor {
        let m = self
            .0
            .value
            .map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .insert_axis(Axis(1));
        Tensor::constant(m)
    }

    /// `self` where `mask` is 1, `other` where it is 0 (`mask` is a constant 0/1 array).
    pub fn blend(&self, other: &Tensor, mask: &Tensor) -> Tensor {
        other.add(&mask.mul(&self.sub(other)))
    }

    pub fn all_finite(&self) -> bool {
        self.0.value.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn sign_mask(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

pub(crate) fn leaky_mask(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { 1.0 } else { slope })
}

macro_rules! bin_op {
    ($tr:ident, $m:ident) => {
        impl std::ops::$tr<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $m(self, rhs: &Tensor) -> Tensor {
                Tensor::$m(self, rhs)
            }
        }
        impl std::ops::$tr<Tensor> for Tensor {
            type Output = Tensor;
            fn $m(self, rhs: Tensor) -> Tensor {
                Tensor::$m(&self, &rhs)
            }
        }
        impl std::ops::$tr<&Tensor> for Tensor {
            type Output = Tensor;
            fn $m(self, rhs: &Tensor) -> Tensor {
                Tensor::$m(&self, rhs)
            }
        }
    };
}

bin_op!(Add, add);
bin_op!(Sub, sub);
bin_op!(Mul, mul);
bin_op!(Div, div);

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}
