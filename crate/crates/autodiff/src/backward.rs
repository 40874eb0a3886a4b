use std::collections::{HashMap, HashSet};

use crate::tensor::{leaky_mask, sign_mask, Op, Tensor};

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable
/// (their graph references the forward graph), which is what a gradient
/// penalty needs. Without it they are constants. Tensors in `wrt` that do not
/// influence `output` get a zero gradient.
pub fn grad(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.shape(), (1, 1), "grad() needs a scalar output");
    grad_with_seed(output, &Tensor::ones((1, 1)), wrt, create_graph)
}

/// Vector-Jacobian product: like [`grad`] but starting from an explicit
/// cotangent `seed` shaped like `output`.
pub fn grad_with_seed(
    output: &Tensor,
    seed: &Tensor,
    wrt: &[Tensor],
    create_graph: bool,
) -> Vec<Tensor> {
    assert_eq!(output.shape(), seed.shape(), "seed shape mismatch");
    let targets: HashSet<usize> = wrt.iter().map(Tensor::id).collect();
    let order = topo_order(output);

    // A node matters only if some target is reachable through it.
    let mut relevant: HashSet<usize> = HashSet::new();
    for node in &order {
        if targets.contains(&node.id())
            || node.op().parents().iter().any(|p| relevant.contains(&p.id()))
        {
            relevant.insert(node.id());
        }
    }

    let mut found: HashMap<usize, Tensor> = HashMap::new();
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    if relevant.contains(&output.id()) {
        let seed = if create_graph { seed.clone() } else { seed.detach() };
        grads.insert(output.id(), seed);
    }

    for node in order.iter().rev() {
        if !relevant.contains(&node.id()) {
            continue;
        }
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if targets.contains(&node.id()) {
            found.insert(node.id(), g.clone());
        }
        let needs = |t: &Tensor| relevant.contains(&t.id());
        for (parent, pg) in vjp(node, &g, create_graph, &needs) {
            let pg = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), pg);
        }
    }

    wrt.iter()
        .map(|t| {
            found
                .remove(&t.id())
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

/// Post-order over nodes that require a gradient: parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.op().parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn vjp(
    node: &Tensor,
    g: &Tensor,
    create_graph: bool,
    needs: &dyn Fn(&Tensor) -> bool,
) -> Vec<(Tensor, Tensor)> {
    // Forward values enter the backward graph only when it must stay differentiable.
    let fwd = |t: &Tensor| if create_graph { t.clone() } else { t.detach() };
    let mut out = Vec::new();
    let mut push = |p: &Tensor, f: &dyn Fn() -> Tensor| {
        if needs(p) {
            out.push((p.clone(), f()));
        }
    };
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            push(a, &|| g.clone());
            push(b, &|| g.clone());
        }
        Op::Sub(a, b) => {
            push(a, &|| g.clone());
            push(b, &|| g.neg());
        }
        Op::Mul(a, b) => {
            push(a, &|| g.mul(&fwd(b)));
            push(b, &|| g.mul(&fwd(a)));
        }
        Op::Div(a, b) => {
            push(a, &|| g.div(&fwd(b)));
            push(b, &|| g.mul(&fwd(node)).div(&fwd(b)).neg());
        }
        Op::Neg(a) => push(a, &|| g.neg()),
        Op::Scale(a, c) => push(a, &|| g.scale(*c)),
        Op::Offset(a) => push(a, &|| g.clone()),
        Op::MatMul(a, b) => {
            push(a, &|| g.matmul(&fwd(b).t()));
            push(b, &|| fwd(a).t().matmul(g));
        }
        Op::Transpose(a) => push(a, &|| g.t()),
        Op::Exp(a) => push(a, &|| g.mul(&fwd(node))),
        Op::Log(a) => push(a, &|| g.div(&fwd(a))),
        Op::Tanh(a) => push(a, &|| {
            let y = fwd(node);
            g.mul(&y.square().neg().offset(1.0))
        }),
        Op::Sigmoid(a) => push(a, &|| {
            let y = fwd(node);
            g.mul(&y.mul(&y.neg().offset(1.0)))
        }),
        Op::Sqrt(a) => push(a, &|| g.div(&fwd(node)).scale(0.5)),
        Op::Abs(a) => push(a, &|| g.mul(&Tensor::constant(sign_mask(a.value())))),
        Op::LeakyRelu(a, slope) => push(a, &|| {
            g.mul(&Tensor::constant(leaky_mask(a.value(), *slope)))
        }),
        Op::Sum(a) | Op::SumRows(a) | Op::SumCols(a) => push(a, &|| g.broadcast_to(a.shape())),
        Op::Broadcast(a) => push(a, &|| g.sum_to(a.shape())),
        Op::Reshape(a) => push(a, &|| g.reshape(a.shape())),
        Op::Slice(a, rows, cols) => push(a, &|| g.pad(a.shape(), (rows.start, cols.start))),
        Op::Pad(a, at) => push(a, &|| {
            let (r, c) = a.shape();
            g.slice(at.0..at.0 + r, at.1..at.1 + c)
        }),
        Op::ConcatCols(parts) => {
            let mut at = 0;
            for p in parts {
                let w = p.cols();
                push(p, &|| g.slice_cols(at..at + w));
                at += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut at = 0;
            for p in parts {
                let h = p.rows();
                push(p, &|| g.slice_rows(at..at + h));
                at += h;
            }
        }
        Op::GatherRows(a, index) => push(a, &|| g.scatter_rows(index.clone(), a.rows())),
        Op::ScatterRows(a, index) => push(a, &|| g.gather_rows(index.clone())),
    }
    out
}
