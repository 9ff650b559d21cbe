//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node to the [`Tape`]; node ids are assigned in
//! creation order, so the list is already topologically sorted and backward
//! is a single reverse sweep. Straight-through estimators are ordinary ops
//! whose backward rule overrides the true derivative.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{broadcast_shape, numel, Tensor};

pub type NodeId = usize;

/// Tag describing which operation produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    Square,
    Sqrt,
    Abs,
    Silu,
    SignSte,
    Clamp,
    Sum,
    Mean,
    SumAxis,
    Reshape,
    Permute,
    Narrow,
    Concat,
    Conv2d,
    MatMul,
    GroupNorm,
    AvgPool2,
    Upsample2,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Affine { x: NodeId, mul: f64 },
    Square(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Silu(NodeId),
    /// Forward `sign`, backward passes the upstream gradient where `|x| <= clip`.
    SignSte { x: NodeId, clip: f64 },
    /// Forward clamp, backward passes the gradient inside `[lo, hi]`.
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Sum(NodeId),
    Mean(NodeId),
    SumAxis { x: NodeId, axis: usize },
    Reshape(NodeId),
    Permute { x: NodeId, perm: Vec<usize> },
    Narrow { x: NodeId, axis: usize, start: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom },
    MatMul { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize },
    GroupNorm { x: NodeId, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    AvgPool2(NodeId),
    Upsample2(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Affine { .. } => OpKind::Affine,
            Op::Square(_) => OpKind::Square,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Abs(_) => OpKind::Abs,
            Op::Silu(_) => OpKind::Silu,
            Op::SignSte { .. } => OpKind::SignSte,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::AvgPool2(_) => OpKind::AvgPool2,
            Op::Upsample2(_) => OpKind::Upsample2,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Tensor>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node. With `requires_grad` it receives a gradient on backward.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes.borrow()[id].op.kind()
    }

    fn push(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Populate gradients of every grad-tracking leaf with d`loss`/d`leaf`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Backward("loss belongs to a different tape".into()));
        }
        if self.grads.borrow().is_some() {
            return Err(Error::Backward("backward already ran; call zero_grad first".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in node_backward(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        // Only leaf gradients are retained.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            } else if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Gradient of a grad-tracking leaf after [`backward`](Self::backward).
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().as_ref()?.get(var.id)?.clone()
    }

    /// Drop computed gradients so that backward may run again.
    pub fn zero_grad(&self) {
        *self.grads.borrow_mut() = None;
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit `(out_index, a_index, b_index)` for every output element.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let r = out.len();
    let inner = out[r - 1];
    let (ia_step, ib_step) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let mut o = 0;
    while o < n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..r - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Merge adjacent output dims that are contiguous in both operands, so the
/// innermost row is as long as possible.
fn coalesce(out: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut o, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..out.len() {
        if out[d] == 1 {
            continue;
        }
        if let (Some(&la), Some(&lb)) = (a.last(), b.last()) {
            if la == sa[d] * out[d] && lb == sb[d] * out[d] {
                *o.last_mut().unwrap() *= out[d];
                *a.last_mut().unwrap() = sa[d];
                *b.last_mut().unwrap() = sb[d];
                continue;
            }
        }
        o.push(out[d]);
        a.push(sa[d]);
        b.push(sb[d]);
    }
    if o.is_empty() {
        return (vec![1], vec![0], vec![0]);
    }
    (o, a, b)
}

/// Broadcast iteration by rows: calls
/// `f(out_start, a_start, b_start, row_len, a_step, b_step)` per innermost row.
fn bcast_rows(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let (dims, sa, sb) = coalesce(out, &bcast_strides(a, out), &bcast_strides(b, out));
    let r = dims.len();
    let inner = dims[r - 1];
    let (sa_in, sb_in) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let mut o = 0;
    while o < n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..r - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        f(o, ia, ib, inner, sa_in, sb_in);
        o += inner;
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn apply_bcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        shape_err("broadcast", format!("{:?} vs {:?}", a.shape(), b.shape()))
    })?;
    let mut data = vec![0.0; numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    bcast_rows(&out, a.shape(), b.shape(), |o, ia, ib, len, sa, sb| {
        let dst = &mut data[o..o + len];
        match (sa, sb) {
            (1, 0) => {
                let y = bd[ib];
                dst.iter_mut().zip(&ad[ia..ia + len]).for_each(|(d, &x)| *d = f(x, y));
            }
            (0, 1) => {
                let x = ad[ia];
                dst.iter_mut().zip(&bd[ib..ib + len]).for_each(|(d, &y)| *d = f(x, y));
            }
            _ => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[ia + j * sa], bd[ib + j * sb]);
                }
            }
        }
    });
    Tensor::new(out, data)
}

fn binary_forward(a: &Tensor, b: &Tensor, kind: BinKind) -> Result<Tensor> {
    match kind {
        BinKind::Add => apply_bcast(a, b, |x, y| x + y),
        BinKind::Sub => apply_bcast(a, b, |x, y| x - y),
        BinKind::Mul => apply_bcast(a, b, |x, y| x * y),
        BinKind::Div => apply_bcast(a, b, |x, y| x / y),
    }
}

/// Gradient of one broadcast operand: `term(o, ia, ib)` summed into the
/// index of operand a (`target_is_a`) or b.
fn reduce_grad(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    target_is_a: bool,
    len_target: usize,
    term: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let mut acc = vec![0.0; len_target];
    bcast_rows(out, a, b, |o, ia, ib, len, sa, sb| {
        let (it, st) = if target_is_a { (ia, sa) } else { (ib, sb) };
        if st == 0 {
            let mut s = 0.0;
            for j in 0..len {
                s += term(o + j, ia + j * sa, ib + j * sb);
            }
            acc[it] += s;
        } else {
            for j in 0..len {
                acc[it + j * st] += term(o + j, ia + j * sa, ib + j * sb);
            }
        }
    });
    acc
}

fn binary_backward(a: &Tensor, b: &Tensor, g: &Tensor, kind: BinKind, need: (bool, bool)) -> (Option<Tensor>, Option<Tensor>) {
    let out = g.shape();
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let same = a.shape() == out && b.shape() == out;
    let ga = need.0.then(|| {
        let data = match kind {
            BinKind::Add | BinKind::Sub if a.shape() == out => gd.to_vec(),
            BinKind::Mul if same => gd.iter().zip(bd).map(|(g, y)| g * y).collect(),
            BinKind::Add | BinKind::Sub => reduce_grad(out, a.shape(), b.shape(), true, a.numel(), |o, _, _| gd[o]),
            BinKind::Mul => reduce_grad(out, a.shape(), b.shape(), true, a.numel(), |o, _, ib| gd[o] * bd[ib]),
            BinKind::Div => reduce_grad(out, a.shape(), b.shape(), true, a.numel(), |o, _, ib| gd[o] / bd[ib]),
        };
        Tensor::new(a.shape().to_vec(), data).expect("grad shape")
    });
    let gb = need.1.then(|| {
        let data = match kind {
            BinKind::Add if b.shape() == out => gd.to_vec(),
            BinKind::Sub if b.shape() == out => gd.iter().map(|g| -g).collect(),
            BinKind::Mul if same => gd.iter().zip(ad).map(|(g, x)| g * x).collect(),
            BinKind::Add => reduce_grad(out, a.shape(), b.shape(), false, b.numel(), |o, _, _| gd[o]),
            BinKind::Sub => reduce_grad(out, a.shape(), b.shape(), false, b.numel(), |o, _, _| -gd[o]),
            BinKind::Mul => reduce_grad(out, a.shape(), b.shape(), false, b.numel(), |o, ia, _| gd[o] * ad[ia]),
            BinKind::Div => reduce_grad(out, a.shape(), b.shape(), false, b.numel(), |o, ia, ib| {
                -gd[o] * ad[ia] / (bd[ib] * bd[ib])
            }),
        };
        Tensor::new(b.shape().to_vec(), data).expect("grad shape")
    });
    (ga, gb)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut data = vec![0.0; x.numel()];
    let xd = x.data();
    for_each_bcast(&out_shape, &src_strides, &zero, |o, i, _| data[o] = xd[i]);
    Tensor::new(out_shape, data).expect("permute shape")
}

#[inline(always)]
fn unary_grad(
    x: NodeId,
    xv: &Tensor,
    y: &Tensor,
    g: &Tensor,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Vec<(NodeId, Tensor)> {
    let data = xv
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
        .collect();
    vec![(x, Tensor::new(xv.shape().to_vec(), data).expect("unary grad"))]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// backward rules

fn node_backward(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
    let val = |id: NodeId| -> &Tensor { &nodes[id].value };
    let req = |id: NodeId| nodes[id].requires_grad;
    macro_rules! unary {
        ($x:expr, $f:expr) => {{
            let x: NodeId = $x;
            unary_grad(x, val(x), &node.value, g, $f)
        }};
    }
    let bin = |a: NodeId, b: NodeId, kind: BinKind| {
        let (ga, gb) = binary_backward(val(a), val(b), g, kind, (req(a), req(b)));
        let mut out = Vec::with_capacity(2);
        out.extend(ga.map(|t| (a, t)));
        out.extend(gb.map(|t| (b, t)));
        out
    };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => bin(*a, *b, BinKind::Add),
        Op::Sub(a, b) => bin(*a, *b, BinKind::Sub),
        Op::Mul(a, b) => bin(*a, *b, BinKind::Mul),
        Op::Div(a, b) => bin(*a, *b, BinKind::Div),
        Op::Affine { x, mul } => vec![(*x, g.scale(*mul))],
        Op::Square(x) => unary!(*x, |xi, _, gi| 2.0 * xi * gi),
        Op::Sqrt(x) => unary!(*x, |_, yi, gi| if yi > 0.0 { 0.5 * gi / yi } else { 0.0 }),
        Op::Abs(x) => unary!(*x, |xi, _, gi| {
            if xi > 0.0 {
                gi
            } else if xi < 0.0 {
                -gi
            } else {
                0.0
            }
        }),
        Op::Silu(x) => unary!(*x, |xi, _, gi| {
            let s = sigmoid(xi);
            gi * s * (1.0 + xi * (1.0 - s))
        }),
        Op::SignSte { x, clip } => {
            let c = *clip;
            unary!(*x, |xi, _, gi| if xi.abs() <= c { gi } else { 0.0 })
        }
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary!(*x, |xi, _, gi| if xi >= lo && xi <= hi { gi } else { 0.0 })
        }
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item()))],
        Op::Mean(x) => {
            let xv = val(*x);
            vec![(*x, Tensor::full(xv.shape().to_vec(), g.item() / xv.numel() as f64))]
        }
        Op::SumAxis { x, axis } => {
            let xv = val(*x);
            let (outer, len, inner) = split_axis(xv.shape(), *axis);
            let gd = g.data();
            let mut data = vec![0.0; xv.numel()];
            for o in 0..outer {
                for a in 0..len {
                    let dst = &mut data[(o * len + a) * inner..][..inner];
                    dst.copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), data).expect("sum_axis grad"))]
        }
        Op::Reshape(x) => {
            vec![(*x, g.clone().reshape(val(*x).shape().to_vec()).expect("reshape grad"))]
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*x, permute_data(g, &inv))]
        }
        Op::Narrow { x, axis, start } => {
            let xv = val(*x);
            let (outer, len, inner) = split_axis(xv.shape(), *axis);
            let part = g.shape()[*axis];
            let mut data = vec![0.0; xv.numel()];
            for o in 0..outer {
                let src = &g.data()[o * part * inner..(o + 1) * part * inner];
                data[(o * len + start) * inner..][..part * inner].copy_from_slice(src);
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), data).expect("narrow grad"))]
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                let xv = val(x);
                let len = xv.shape()[*axis];
                if req(x) {
                    let mut data = Vec::with_capacity(xv.numel());
                    for o in 0..outer {
                        data.extend_from_slice(&g.data()[(o * total + offset) * inner..][..len * inner]);
                    }
                    out.push((x, Tensor::new(xv.shape().to_vec(), data).expect("concat grad")));
                }
                offset += len;
            }
            out
        }
        Op::Conv2d { x, w, geom } => {
            let mut out = Vec::with_capacity(2);
            if req(*x) {
                let gi = conv::conv2d_backward_input(g.data(), val(*w).data(), geom);
                out.push((*x, Tensor::new(val(*x).shape().to_vec(), gi).expect("conv grad")));
            }
            if req(*w) {
                let gw = conv::conv2d_backward_weight(g.data(), val(*x).data(), geom);
                out.push((*w, Tensor::new(val(*w).shape().to_vec(), gw).expect("conv grad")));
            }
            out
        }
        Op::MatMul { a, b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            let mut out = Vec::with_capacity(2);
            if req(*a) {
                let mut ga = vec![0.0; av.numel()];
                for i in 0..*batch {
                    conv::matmul_into(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..],
                        false,
                        &bv.data()[i * k * n..],
                        true,
                        0.0,
                        &mut ga[i * m * k..],
                    );
                }
                out.push((*a, Tensor::new(av.shape().to_vec(), ga).expect("matmul grad")));
            }
            if req(*b) {
                let mut gb = vec![0.0; bv.numel()];
                for i in 0..*batch {
                    conv::matmul_into(
                        k,
                        m,
                        n,
                        &av.data()[i * m * k..],
                        true,
                        &g.data()[i * m * n..],
                        false,
                        0.0,
                        &mut gb[i * k * n..],
                    );
                }
                out.push((*b, Tensor::new(bv.shape().to_vec(), gb).expect("matmul grad")));
            }
            out
        }
        Op::GroupNorm { x, groups, mean, rstd } => {
            let xv = val(*x);
            let b = xv.shape()[0];
            let group_len = xv.numel() / (b * groups);
            let mut gx = vec![0.0; xv.numel()];
            for (gi, (&mu, &rs)) in mean.iter().zip(rstd).enumerate() {
                let range = gi * group_len..(gi + 1) * group_len;
                let xs = &xv.data()[range.clone()];
                let gs = &g.data()[range.clone()];
                let nf = group_len as f64;
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for (&xi, &go) in xs.iter().zip(gs) {
                    sum_g += go;
                    sum_gx += go * (xi - mu) * rs;
                }
                let (mg, mgx) = (sum_g / nf, sum_gx / nf);
                for ((dst, &xi), &go) in gx[range].iter_mut().zip(xs).zip(gs) {
                    let xhat = (xi - mu) * rs;
                    *dst = rs * (go - mg - xhat * mgx);
                }
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), gx).expect("gn grad"))]
        }
        Op::AvgPool2(x) => {
            let xv = val(*x);
            let s = xv.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            let mut gx = vec![0.0; xv.numel()];
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = 0.25 * g.data()[(p * oh + oy) * ow + ox];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                gx[(p * h + 2 * oy + dy) * w + 2 * ox + dx] = go;
                            }
                        }
                    }
                }
            }
            vec![(*x, Tensor::new(s.to_vec(), gx).expect("pool grad"))]
        }
        Op::Upsample2(x) => {
            let xv = val(*x);
            let s = xv.shape();
            let (w, ow) = (s[3], 2 * s[3]);
            let mut gx = vec![0.0; xv.numel()];
            for (dst, rows) in gx.chunks_mut(w).zip(g.data().chunks(2 * ow)) {
                let (top, bottom) = rows.split_at(ow);
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = top[2 * j] + top[2 * j + 1] + bottom[2 * j] + bottom[2 * j + 1];
                }
            }
            vec![(*x, Tensor::new(s.to_vec(), gx).expect("upsample grad"))]
        }
    }
}

// ---------------------------------------------------------------------------
// forward ops

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// The gradient of this leaf after backward.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// A new leaf holding the same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), Op::Leaf, false)
    }

    fn unary_op(self, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(Rc::new(value), op, rg)
    }

    fn binary(self, other: Var<'t>, kind: BinKind) -> Result<Var<'t>> {
        let value = binary_forward(&self.value(), &other.value(), kind)?;
        let op = match kind {
            BinKind::Add => Op::Add(self.id, other.id),
            BinKind::Sub => Op::Sub(self.id, other.id),
            BinKind::Mul => Op::Mul(self.id, other.id),
            BinKind::Div => Op::Div(self.id, other.id),
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Rc::new(value), op, rg))
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Div)
    }

    /// `mul * self + add`.
    pub fn affine(self, mul: f64, add: f64) -> Var<'t> {
        let v = self.value().map(|x| mul * x + add);
        self.unary_op(Op::Affine { x: self.id, mul }, v)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary_op(Op::Square(self.id), v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary_op(Op::Sqrt(self.id), v)
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary_op(Op::Abs(self.id), v)
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.unary_op(Op::Silu(self.id), v)
    }

    /// `sign` forward (`sign(0) = +1`); backward is the hard-clipped
    /// straight-through estimator: gradient passes where `|x| <= clip`.
    pub fn sign_ste(self, clip: f64) -> Var<'t> {
        let v = self.value().sign();
        self.unary_op(Op::SignSte { x: self.id, clip }, v)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary_op(Op::Clamp { x: self.id, lo, hi }, v)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary_op(Op::Sum(self.id), v)
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.unary_op(Op::Mean(self.id), v)
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(shape_err("sum_axis", format!("axis {axis} for shape {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.unary_op(Op::SumAxis { x: self.id, axis }, Tensor::new(shape, data)?))
    }

    /// Mean over `axis`, keeping it as a size-1 dimension.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary_op(Op::Reshape(self.id), v))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for shape {:?}", x.shape())));
        }
        let v = permute_data(&x, perm);
        Ok(self.unary_op(Op::Permute { x: self.id, perm: perm.to_vec() }, v))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return Err(shape_err(
                "narrow",
                format!("axis {axis} range {start}..{} for shape {:?}", start + len, x.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary_op(Op::Narrow { x: self.id, axis, start }, Tensor::new(shape, data)?))
    }

    pub fn conv2d(self, weight: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
        let out = Tensor::new(geom.out_shape(), conv::conv2d_forward(x.data(), w.data(), &geom))?;
        let rg = self.requires_grad() || weight.requires_grad();
        Ok(self.tape.push(Rc::new(out), Op::Conv2d { x: self.id, w: weight.id, geom }, rg))
    }

    /// Matrix product of `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, k2, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) => (1, m, k, k2, n),
            (&[ba, m, k], &[bb, k2, n]) if ba == bb => (ba, m, k, k2, n),
            (sa, sb) => return Err(shape_err("matmul", format!("{sa:?} · {sb:?}"))),
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} · {:?}", a.shape(), b.shape())));
        }
        let mut data = vec![0.0; batch * m * n];
        for i in 0..batch {
            conv::matmul_into(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                false,
                0.0,
                &mut data[i * m * n..],
            );
        }
        let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Rc::new(Tensor::new(shape, data)?),
            Op::MatMul { a: self.id, b: other.id, batch, m, k, n },
            rg,
        ))
    }

    /// Group normalization without affine terms over `[b,c,...]`.
    pub fn group_norm(self, groups: usize, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() < 2 || groups == 0 || x.shape()[1] % groups != 0 {
            return Err(shape_err(
                "group_norm",
                format!("{groups} groups for shape {:?}", x.shape()),
            ));
        }
        let b = x.shape()[0];
        let group_len = x.numel() / (b * groups);
        let mut out = vec![0.0; x.numel()];
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        for (xs, os) in x.data().chunks(group_len).zip(out.chunks_mut(group_len)) {
            let mean = xs.iter().sum::<f64>() / group_len as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = (v - mean) * rstd;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary_op(Op::GroupNorm { x: self.id, groups, mean: means, rstd: rstds }, v))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[b, c, h, w] = x.shape() else {
            return Err(shape_err("avg_pool2", format!("expected 4D, got {:?}", x.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; b * c * oh * ow];
        let xd = x.data();
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (p * h + 2 * oy) * w + 2 * ox;
                    data[(p * oh + oy) * ow + ox] =
                        0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
                }
            }
        }
        Ok(self.unary_op(Op::AvgPool2(self.id), Tensor::new([b, c, oh, ow], data)?))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[b, c, h, w] = x.shape() else {
            return Err(shape_err("upsample2", format!("expected 4D, got {:?}", x.shape())));
        };
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; b * c * oh * ow];
        let xd = x.data();
        for (src, dst) in xd.chunks(w).zip(data.chunks_mut(2 * ow)) {
            let (top, bottom) = dst.split_at_mut(ow);
            for (pair, &v) in top.chunks_mut(2).zip(src) {
                pair[0] = v;
                pair[1] = v;
            }
            bottom.copy_from_slice(top);
        }
        Ok(self.unary_op(Op::Upsample2(self.id), Tensor::new([b, c, oh, ow], data)?))
    }
}

/// Concatenate along `axis`.
pub fn concat<'t>(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = xs.iter().map(|v| v.value()).collect();
    let base = values[0].shape();
    if axis >= base.len() {
        return Err(shape_err("concat", format!("axis {axis} for shape {base:?}")));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}")));
        }
    }
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * len * inner..][..len * inner]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    let rg = xs.iter().any(|v| v.requires_grad());
    Ok(tape.push(
        Rc::new(Tensor::new(shape, data)?),
        Op::Concat { xs: xs.iter().map(|v| v.id).collect(), axis },
        rg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x.square()), Err(Error::Backward(_))));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
        tape.zero_grad();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn detached_leaf_gets_no_grad() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let d = x.detach();
        let loss = x.mul(d).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 2.0]);
        assert!(d.grad().is_none());
    }

    #[test]
    fn sign_ste_forward_and_clip() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -0.3, 0.0]));
        assert_eq!(x.sign_ste(1.0).value().data(), &[1.0, -1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(t(&[2], &[0.5, -2.0]));
        tape.backward(x.sign_ste(1.0).sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn sign_ste_weight_gradient_is_sign() {
        let tape = Tape::new();
        let x = tape.param(t(&[4], &[0.3, -1.7, 0.0, -0.01]));
        let w = tape.param(t(&[4], &[2.0, 3.0, -1.0, 0.5]));
        let loss = x.sign_ste(1.0).mul(w).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones([2, 3, 2, 2]));
        let bias = tape.param(t(&[3, 1, 1], &[1.0, 2.0, 3.0]));
        let y = x.add(bias).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 2, 2]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(bias.grad().unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        let b = tape.param(Tensor::new([1, 1, 2, 2], (8..12).map(f64::from).collect()).unwrap());
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![1, 3, 2, 2]);
        let back = c.narrow(1, 2, 1).unwrap();
        assert_eq!(back.value().data(), b.value().data());
        tape.backward(back.sum()).unwrap();
        assert_eq!(a.grad().unwrap().sum(), 0.0);
        assert_eq!(b.grad().unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn op_kinds_are_recorded() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones([1, 1, 2, 2]));
        let y = x.avg_pool2().unwrap();
        assert_eq!(tape.op_kind(x.id()), OpKind::Leaf);
        assert_eq!(tape.op_kind(y.id()), OpKind::AvgPool2);
    }
}
