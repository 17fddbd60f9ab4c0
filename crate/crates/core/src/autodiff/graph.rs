//! Reverse-mode automatic differentiation over a tensor tape.
//!
//! Nodes are matrices; values are computed eagerly as the graph is built, so
//! intermediate results can be inspected mid-construction (needed for
//! data-dependent index selection such as ray-surface crossings). Inputs can
//! be rebound with [`Tape::set_input`] and the whole graph re-evaluated with
//! [`Tape::forward`], which is what the finite-difference checks rely on.
//!
//! Topological order holds by construction: an op can only reference node ids
//! that already exist.

use thiserror::Error;

use super::fast_math::{
    cos_map, exp_map, sigmoid_map, sigmoid_value, sin_map, softplus_deriv_acc, softplus_map,
    softplus_value,
};
use super::tensor::{matmul_abt_acc, matmul_atb_acc, Tensor};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("backward requires a scalar root; node {node} is {rows}x{cols}")]
    NonScalarRoot {
        node: usize,
        rows: usize,
        cols: usize,
    },
    #[error("forward values are stale; call forward() after set_input()")]
    StaleForward,
    #[error("node {node} is not an input leaf")]
    NotAnInput { node: usize },
    #[error("set_input shape {got_rows}x{got_cols} differs from node {node} shape {rows}x{cols}")]
    InputShape {
        node: usize,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
}

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    DivElem(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// [m x n] + broadcast [1 x n]
    AddRow(NodeId, NodeId),
    /// [m x n] * broadcast [m x 1]
    MulCol(NodeId, NodeId),
    /// [m x n] * scalar node [1 x 1]
    ScaleByScalar(NodeId, NodeId),
    Neg(NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId, f64),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Sigmoid(NodeId),
    /// Softplus with sharpness beta: ln(1 + exp(beta x)) / beta.
    Softplus(NodeId, f64),
    Relu(NodeId),
    Square(NodeId),
    Recip(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    /// Exclusive cumulative product within consecutive groups of `n` rows
    /// (single column): out[g, 0] = 1, out[g, i] = prod_{j < i} x[g, j].
    SegCumprodExcl(NodeId, usize),
    /// Sum of each consecutive group of `n` rows: [g*n x c] -> [g x c].
    SegSum(NodeId, usize),
    /// Bilinear sample of a [H x W] map at continuous (x, y) pixel
    /// coordinates given as a [k x 2] tensor. Output [k x 1].
    Bilerp(NodeId, NodeId),
    /// Normalized box mean over a (2r+1)^2 window truncated at image borders.
    BoxFilter(NodeId, usize),
    /// Central difference along x (columns), clamped indices at borders.
    DiffCols(NodeId),
    /// Central difference along y (rows), clamped indices at borders.
    DiffRows(NodeId),
    /// 2x2 average pooling with truncated blocks at odd edges.
    Downsample2(NodeId),
    /// Nearest-neighbor 2x upsample to exactly (rows, cols).
    Upsample2(NodeId, usize, usize),
    Reshape(NodeId, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul",
            Op::DivElem(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::ScaleByScalar(..) => "scale_by_scalar",
            Op::Neg(..) => "neg",
            Op::ScaleConst(..) => "scale_const",
            Op::AddConst(..) => "add_const",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Recip(..) => "recip",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::SegCumprodExcl(..) => "seg_cumprod_excl",
            Op::SegSum(..) => "seg_sum",
            Op::Bilerp(..) => "bilerp",
            Op::BoxFilter(..) => "box_filter",
            Op::DiffCols(..) => "diff_cols",
            Op::DiffRows(..) => "diff_rows",
            Op::Downsample2(..) => "downsample2",
            Op::Upsample2(..) => "upsample2",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by a backward pass; indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient or a zero tensor of the given shape when no path reached it.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

/// Eagerly evaluated reverse-mode tape.
pub struct Tape {
    nodes: Vec<Node>,
    stale: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            stale: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node. Values are kept up to date during graph
    /// construction; after `set_input` they are stale until `forward()`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Add an input leaf holding `value`.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Alias of [`Tape::input`] for values that will never receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input(value)
    }

    pub fn scalar_input(&mut self, value: f64) -> NodeId {
        self.input(Tensor::scalar(value))
    }

    /// Rebind the value of an input leaf. Marks forward values stale.
    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<(), GraphError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input) {
            return Err(GraphError::NotAnInput { node: id.0 });
        }
        if node.value.shape() != value.shape() {
            return Err(GraphError::InputShape {
                node: id.0,
                rows: node.value.rows(),
                cols: node.value.cols(),
                got_rows: value.rows(),
                got_cols: value.cols(),
            });
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    /// Recompute every non-input node in topological order.
    pub fn forward(&mut self) -> Result<(), GraphError> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input) {
                continue;
            }
            let value = eval_op(&self.nodes[..i], &self.nodes[i].op, i)?;
            self.nodes[i].value = value;
        }
        self.stale = false;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId, GraphError> {
        let idx = self.nodes.len();
        let value = eval_op(&self.nodes, &op, idx)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(idx))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MulElem(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::DivElem(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MulCol(a, col))
    }

    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::ScaleByScalar(a, s))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        self.push(Op::ScaleConst(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        self.push(Op::AddConst(a, c))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Cos(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId, beta: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Softplus(a, beta))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Square(a))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Recip(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Mean(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::RowSum(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::ConcatRows(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, GraphError> {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, GraphError> {
        self.push(Op::GatherRows(a, indices.to_vec()))
    }

    pub fn seg_cumprod_excl(&mut self, a: NodeId, n: usize) -> Result<NodeId, GraphError> {
        self.push(Op::SegCumprodExcl(a, n))
    }

    pub fn seg_sum(&mut self, a: NodeId, n: usize) -> Result<NodeId, GraphError> {
        self.push(Op::SegSum(a, n))
    }

    pub fn bilerp(&mut self, map: NodeId, uv: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Bilerp(map, uv))
    }

    pub fn box_filter(&mut self, a: NodeId, radius: usize) -> Result<NodeId, GraphError> {
        self.push(Op::BoxFilter(a, radius))
    }

    pub fn diff_cols(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::DiffCols(a))
    }

    pub fn diff_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::DiffRows(a))
    }

    pub fn downsample2(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Downsample2(a))
    }

    pub fn upsample2(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId, GraphError> {
        self.push(Op::Upsample2(a, rows, cols))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId, GraphError> {
        self.push(Op::Reshape(a, rows, cols))
    }

    /// Reverse pass from a scalar root. The root's own adjoint is exactly 1.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients, GraphError> {
        if self.stale {
            return Err(GraphError::StaleForward);
        }
        let (r, c) = self.nodes[root.0].value.shape();
        if (r, c) != (1, 1) {
            return Err(GraphError::NonScalarRoot {
                node: root.0,
                rows: r,
                cols: c,
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(adj) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &adj, &mut grads);
            grads[i] = Some(adj);
        }
        Ok(Gradients { grads })
    }

    /// Accumulate `adj` (the adjoint of node `i`) into the parents of node `i`.
    fn propagate(&self, i: usize, adj: &Tensor, grads: &mut [Option<Tensor>]) {
        let value = &self.nodes[i].value;
        macro_rules! acc {
            ($id:expr, $build:expr) => {{
                let id: NodeId = $id;
                let g = grads[id.0].get_or_insert_with(|| {
                    let (r, c) = self.nodes[id.0].value.shape();
                    Tensor::zeros(r, c)
                });
                #[allow(clippy::redundant_closure_call)]
                ($build)(g);
            }};
        }
        let parent = |id: NodeId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Add(a, b) => {
                acc!(*a, |g: &mut Tensor| add_assign(g, adj));
                acc!(*b, |g: &mut Tensor| add_assign(g, adj));
            }
            Op::Sub(a, b) => {
                acc!(*a, |g: &mut Tensor| add_assign(g, adj));
                acc!(*b, |g: &mut Tensor| sub_assign(g, adj));
            }
            Op::MulElem(a, b) => {
                let (av, bv) = (parent(*a), parent(*b));
                acc!(*a, |g: &mut Tensor| add_assign_prod(g, adj, bv));
                acc!(*b, |g: &mut Tensor| add_assign_prod(g, adj, av));
            }
            Op::DivElem(a, b) => {
                let bv = parent(*b);
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &b) in g.data_mut().iter_mut().zip(adj.data()).zip(bv.data()) {
                        *g += u / b;
                    }
                });
                acc!(*b, |g: &mut Tensor| {
                    for (((g, &u), &out), &b) in g
                        .data_mut()
                        .iter_mut()
                        .zip(adj.data())
                        .zip(value.data())
                        .zip(bv.data())
                    {
                        *g -= u * out / b;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (parent(*a), parent(*b));
                acc!(*a, |g: &mut Tensor| matmul_abt_acc(g, adj, bv));
                acc!(*b, |g: &mut Tensor| matmul_atb_acc(g, av, adj));
            }
            Op::AddRow(a, row) => {
                acc!(*a, |g: &mut Tensor| add_assign(g, adj));
                acc!(*row, |g: &mut Tensor| {
                    let n = g.cols();
                    for r in 0..adj.rows() {
                        let src = adj.row(r);
                        let dst = g.row_mut(0);
                        for j in 0..n {
                            dst[j] += src[j];
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (parent(*a), parent(*col));
                acc!(*a, |g: &mut Tensor| {
                    for r in 0..g.rows() {
                        let s = cv.get(r, 0);
                        let dst = g.row_mut(r);
                        let src = adj.row(r);
                        for j in 0..dst.len() {
                            dst[j] += src[j] * s;
                        }
                    }
                });
                acc!(*col, |g: &mut Tensor| {
                    for r in 0..g.rows() {
                        let mut acc = 0.0;
                        let u = adj.row(r);
                        let x = av.row(r);
                        for j in 0..u.len() {
                            acc += u[j] * x[j];
                        }
                        g.data_mut()[r] += acc;
                    }
                });
            }
            Op::ScaleByScalar(a, s) => {
                let (av, sv) = (parent(*a), parent(*s).as_scalar());
                acc!(*a, |g: &mut Tensor| {
                    for (g, &u) in g.data_mut().iter_mut().zip(adj.data()) {
                        *g += u * sv;
                    }
                });
                acc!(*s, |g: &mut Tensor| {
                    let mut acc = 0.0;
                    for (&u, &x) in adj.data().iter().zip(av.data()) {
                        acc += u * x;
                    }
                    g.data_mut()[0] += acc;
                });
            }
            Op::Neg(a) => acc!(*a, |g: &mut Tensor| sub_assign(g, adj)),
            Op::ScaleConst(a, c) => {
                let c = *c;
                acc!(*a, |g: &mut Tensor| {
                    for (g, &u) in g.data_mut().iter_mut().zip(adj.data()) {
                        *g += c * u;
                    }
                });
            }
            Op::AddConst(a, _) => acc!(*a, |g: &mut Tensor| add_assign(g, adj)),
            Op::Sin(a) => {
                let av = parent(*a);
                let c = cos_map(av.data());
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &cv) in g.data_mut().iter_mut().zip(adj.data()).zip(&c) {
                        *g += u * cv;
                    }
                });
            }
            Op::Cos(a) => {
                let av = parent(*a);
                let sv = sin_map(av.data());
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &s) in g.data_mut().iter_mut().zip(adj.data()).zip(&sv) {
                        *g -= u * s;
                    }
                });
            }
            Op::Exp(a) => {
                acc!(*a, |g: &mut Tensor| add_assign_prod(g, adj, value));
            }
            Op::Sqrt(a) => {
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &y) in g.data_mut().iter_mut().zip(adj.data()).zip(value.data()) {
                        *g += u / (2.0 * y);
                    }
                });
            }
            Op::Abs(a) => {
                let av = parent(*a);
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &x) in g.data_mut().iter_mut().zip(adj.data()).zip(av.data()) {
                        *g += u * if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &y) in g.data_mut().iter_mut().zip(adj.data()).zip(value.data()) {
                        *g += u * y * (1.0 - y);
                    }
                });
            }
            Op::Softplus(a, beta) => {
                let av = parent(*a);
                let beta = *beta;
                acc!(*a, |g: &mut Tensor| {
                    softplus_deriv_acc(g.data_mut(), adj.data(), av.data(), beta);
                });
            }
            Op::Relu(a) => {
                let av = parent(*a);
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &x) in g.data_mut().iter_mut().zip(adj.data()).zip(av.data()) {
                        if x > 0.0 {
                            *g += u;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = parent(*a);
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &x) in g.data_mut().iter_mut().zip(adj.data()).zip(av.data()) {
                        *g += 2.0 * x * u;
                    }
                });
            }
            Op::Recip(a) => {
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &y) in g.data_mut().iter_mut().zip(adj.data()).zip(value.data()) {
                        *g -= u * y * y;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = parent(*a);
                let (lo, hi) = (*lo, *hi);
                acc!(*a, |g: &mut Tensor| {
                    for ((g, &u), &x) in g.data_mut().iter_mut().zip(adj.data()).zip(av.data()) {
                        if x >= lo && x <= hi {
                            *g += u;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let u = adj.as_scalar();
                acc!(*a, |g: &mut Tensor| {
                    for g in g.data_mut() {
                        *g += u;
                    }
                });
            }
            Op::Mean(a) => {
                let n = parent(*a).len() as f64;
                let u = adj.as_scalar() / n;
                acc!(*a, |g: &mut Tensor| {
                    for g in g.data_mut() {
                        *g += u;
                    }
                });
            }
            Op::RowSum(a) => {
                acc!(*a, |g: &mut Tensor| {
                    for r in 0..g.rows() {
                        let u = adj.get(r, 0);
                        for v in g.row_mut(r) {
                            *v += u;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let t = adj.transpose();
                acc!(*a, |g: &mut Tensor| add_assign(g, &t));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = parent(*p).cols();
                    acc!(*p, |g: &mut Tensor| {
                        for r in 0..g.rows() {
                            let src = &adj.row(r)[offset..offset + w];
                            let dst = g.row_mut(r);
                            for j in 0..w {
                                dst[j] += src[j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = parent(*a).rows();
                acc!(*a, |g: &mut Tensor| {
                    for r in 0..ra {
                        let src = adj.row(r);
                        let dst = g.row_mut(r);
                        for j in 0..dst.len() {
                            dst[j] += src[j];
                        }
                    }
                });
                acc!(*b, |g: &mut Tensor| {
                    for r in 0..g.rows() {
                        let src = adj.row(ra + r);
                        let dst = g.row_mut(r);
                        for j in 0..dst.len() {
                            dst[j] += src[j];
                        }
                    }
                });
            }
            Op::SliceCols(a, start, _end) => {
                let start = *start;
                acc!(*a, |g: &mut Tensor| {
                    for r in 0..g.rows() {
                        let src = adj.row(r);
                        let dst = g.row_mut(r);
                        for j in 0..src.len() {
                            dst[start + j] += src[j];
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                acc!(*a, |g: &mut Tensor| {
                    for (r, &src_row) in indices.iter().enumerate() {
                        let src = adj.row(r);
                        let dst = g.row_mut(src_row);
                        for j in 0..dst.len() {
                            dst[j] += src[j];
                        }
                    }
                });
            }
            Op::SegCumprodExcl(a, n) => {
                let n = *n;
                let av = parent(*a);
                acc!(*a, |g: &mut Tensor| {
                    let groups = av.rows() / n;
                    for grp in 0..groups {
                        let base = grp * n;
                        // out[i] = out[i-1] * x[i-1]; walk the recurrence backwards.
                        let mut carry = 0.0;
                        for i in (1..n).rev() {
                            let c = adj.data()[base + i] + carry;
                            g.data_mut()[base + i - 1] += c * value.data()[base + i - 1];
                            carry = c * av.data()[base + i - 1];
                        }
                    }
                });
            }
            Op::SegSum(a, n) => {
                let n = *n;
                acc!(*a, |g: &mut Tensor| {
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        let src = adj.row(r / n);
                        let dst = g.row_mut(r);
                        for j in 0..cols {
                            dst[j] += src[j];
                        }
                    }
                });
            }
            Op::Bilerp(map, uv) => {
                let mv = parent(*map);
                let uvv = parent(*uv);
                let (h, w) = mv.shape();
                acc!(*uv, |g: &mut Tensor| {
                    for k in 0..uvv.rows() {
                        let u = adj.get(k, 0);
                        let (x, y) = (uvv.get(k, 0), uvv.get(k, 1));
                        let s = BilerpStencil::at(mv, h, w, x, y);
                        if s.inside_x {
                            g.data_mut()[k * 2] += u * s.dx;
                        }
                        if s.inside_y {
                            g.data_mut()[k * 2 + 1] += u * s.dy;
                        }
                    }
                });
                acc!(*map, |g: &mut Tensor| {
                    for k in 0..uvv.rows() {
                        let u = adj.get(k, 0);
                        let (x, y) = (uvv.get(k, 0), uvv.get(k, 1));
                        let s = BilerpStencil::at(mv, h, w, x, y);
                        g.data_mut()[s.y0 * w + s.x0] += u * (1.0 - s.fy) * (1.0 - s.fx);
                        g.data_mut()[s.y0 * w + s.x0 + 1] += u * (1.0 - s.fy) * s.fx;
                        g.data_mut()[(s.y0 + 1) * w + s.x0] += u * s.fy * (1.0 - s.fx);
                        g.data_mut()[(s.y0 + 1) * w + s.x0 + 1] += u * s.fy * s.fx;
                    }
                });
            }
            Op::BoxFilter(a, radius) => {
                // Adjoint of a normalized box mean is a box sum of u/count,
                // since window membership is symmetric.
                let (h, w) = parent(*a).shape();
                let r = *radius as isize;
                let mut weighted = Tensor::zeros(h, w);
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let y0 = (y - r).max(0);
                        let y1 = (y + r).min(h as isize - 1);
                        let x0 = (x - r).max(0);
                        let x1 = (x + r).min(w as isize - 1);
                        let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                        weighted.set(y as usize, x as usize, adj.get(y as usize, x as usize) / count);
                    }
                }
                let scattered = box_sum(&weighted, *radius);
                acc!(*a, |g: &mut Tensor| add_assign(g, &scattered));
            }
            Op::DiffCols(a) => {
                let (h, w) = parent(*a).shape();
                acc!(*a, |g: &mut Tensor| {
                    for y in 0..h {
                        for x in 0..w {
                            let u = adj.get(y, x) * 0.5;
                            let xp = (x + 1).min(w - 1);
                            let xm = x.saturating_sub(1);
                            g.data_mut()[y * w + xp] += u;
                            g.data_mut()[y * w + xm] -= u;
                        }
                    }
                });
            }
            Op::DiffRows(a) => {
                let (h, w) = parent(*a).shape();
                acc!(*a, |g: &mut Tensor| {
                    for y in 0..h {
                        for x in 0..w {
                            let u = adj.get(y, x) * 0.5;
                            let yp = (y + 1).min(h - 1);
                            let ym = y.saturating_sub(1);
                            g.data_mut()[yp * w + x] += u;
                            g.data_mut()[ym * w + x] -= u;
                        }
                    }
                });
            }
            Op::Downsample2(a) => {
                let (h, w) = parent(*a).shape();
                acc!(*a, |g: &mut Tensor| {
                    for oy in 0..value.rows() {
                        for ox in 0..value.cols() {
                            let y1 = (2 * oy + 2).min(h);
                            let x1 = (2 * ox + 2).min(w);
                            let count = ((y1 - 2 * oy) * (x1 - 2 * ox)) as f64;
                            let u = adj.get(oy, ox) / count;
                            for y in 2 * oy..y1 {
                                for x in 2 * ox..x1 {
                                    g.data_mut()[y * w + x] += u;
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample2(a, oh, ow) => {
                let (h, w) = parent(*a).shape();
                let (oh, ow) = (*oh, *ow);
                acc!(*a, |g: &mut Tensor| {
                    for y in 0..oh {
                        for x in 0..ow {
                            let sy = (y / 2).min(h - 1);
                            let sx = (x / 2).min(w - 1);
                            g.data_mut()[sy * w + sx] += adj.get(y, x);
                        }
                    }
                });
            }
            Op::Reshape(a, _, _) => {
                let (r, c) = parent(*a).shape();
                acc!(*a, |g: &mut Tensor| {
                    for (g, &u) in g.data_mut().iter_mut().zip(adj.data()) {
                        *g += u;
                    }
                });
                let _ = (r, c);
            }
        }
    }
}

fn add_assign(dst: &mut Tensor, src: &Tensor) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn sub_assign(dst: &mut Tensor, src: &Tensor) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d -= s;
    }
}

fn add_assign_prod(dst: &mut Tensor, a: &Tensor, b: &Tensor) {
    for ((d, &x), &y) in dst.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *d += x * y;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid_value(x)
}

/// Numerically stable softplus ln(1 + exp(beta x)) / beta.
pub fn softplus_scalar(x: f64, beta: f64) -> f64 {
    softplus_value(x, beta)
}

struct BilerpStencil {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    dx: f64,
    dy: f64,
    inside_x: bool,
    inside_y: bool,
}

impl BilerpStencil {
    fn at(map: &Tensor, h: usize, w: usize, x: f64, y: f64) -> Self {
        let inside_x = (0.0..=(w - 1) as f64).contains(&x);
        let inside_y = (0.0..=(h - 1) as f64).contains(&y);
        let xc = x.clamp(0.0, (w - 1) as f64);
        let yc = y.clamp(0.0, (h - 1) as f64);
        let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
        let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let m00 = map.get(y0, x0);
        let m01 = map.get(y0, x0 + 1);
        let m10 = map.get(y0 + 1, x0);
        let m11 = map.get(y0 + 1, x0 + 1);
        let dx = (1.0 - fy) * (m01 - m00) + fy * (m11 - m10);
        let dy = (1.0 - fx) * (m10 - m00) + fx * (m11 - m01);
        BilerpStencil {
            x0,
            y0,
            fx,
            fy,
            dx,
            dy,
            inside_x,
            inside_y,
        }
    }

    fn value(&self, map: &Tensor) -> f64 {
        let m00 = map.get(self.y0, self.x0);
        let m01 = map.get(self.y0, self.x0 + 1);
        let m10 = map.get(self.y0 + 1, self.x0);
        let m11 = map.get(self.y0 + 1, self.x0 + 1);
        (1.0 - self.fy) * ((1.0 - self.fx) * m00 + self.fx * m01)
            + self.fy * ((1.0 - self.fx) * m10 + self.fx * m11)
    }
}

/// Sum over a truncated (2r+1)^2 window at every pixel, via a summed-area table.
fn box_sum(a: &Tensor, radius: usize) -> Tensor {
    let (h, w) = a.shape();
    let r = radius as isize;
    // sat[y][x] = sum of a[0..y, 0..x]
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row_acc = 0.0;
        for x in 0..w {
            row_acc += a.get(y, x);
            sat[(y + 1) * (w + 1) + (x + 1)] = sat[y * (w + 1) + (x + 1)] + row_acc;
        }
    }
    let mut out = Tensor::zeros(h, w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let y0 = (y - r).max(0) as usize;
            let y1 = ((y + r).min(h as isize - 1) + 1) as usize;
            let x0 = (x - r).max(0) as usize;
            let x1 = ((x + r).min(w as isize - 1) + 1) as usize;
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            out.set(y as usize, x as usize, s);
        }
    }
    out
}

fn eval_op(nodes: &[Node], op: &Op, idx: usize) -> Result<Tensor, GraphError> {
    let v = |id: &NodeId| &nodes[id.0].value;
    let mismatch = |detail: String| GraphError::ShapeMismatch {
        node: idx,
        op: op.name(),
        detail,
    };
    let same_shape = |a: &Tensor, b: &Tensor| -> Result<(), GraphError> {
        if a.shape() != b.shape() {
            Err(mismatch(format!(
                "{}x{} vs {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )))
        } else {
            Ok(())
        }
    };
    Ok(match op {
        Op::Input => unreachable!("inputs are never re-evaluated"),
        Op::Add(a, b) => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x - y)
        }
        Op::MulElem(a, b) => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x * y)
        }
        Op::DivElem(a, b) => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x / y)
        }
        Op::MatMul(a, b) => {
            if v(a).cols() != v(b).rows() {
                return Err(mismatch(format!(
                    "{}x{} * {}x{}",
                    v(a).rows(),
                    v(a).cols(),
                    v(b).rows(),
                    v(b).cols()
                )));
            }
            v(a).matmul(v(b))
        }
        Op::AddRow(a, row) => {
            let (av, rv) = (v(a), v(row));
            if rv.rows() != 1 || rv.cols() != av.cols() {
                return Err(mismatch(format!(
                    "{}x{} + row {}x{}",
                    av.rows(),
                    av.cols(),
                    rv.rows(),
                    rv.cols()
                )));
            }
            let mut out = av.clone();
            for r in 0..out.rows() {
                let dst = out.row_mut(r);
                let src = rv.row(0);
                for j in 0..dst.len() {
                    dst[j] += src[j];
                }
            }
            out
        }
        Op::MulCol(a, col) => {
            let (av, cv) = (v(a), v(col));
            if cv.cols() != 1 || cv.rows() != av.rows() {
                return Err(mismatch(format!(
                    "{}x{} * col {}x{}",
                    av.rows(),
                    av.cols(),
                    cv.rows(),
                    cv.cols()
                )));
            }
            let mut out = av.clone();
            for r in 0..out.rows() {
                let s = cv.get(r, 0);
                for x in out.row_mut(r) {
                    *x *= s;
                }
            }
            out
        }
        Op::ScaleByScalar(a, s) => {
            let sv = v(s);
            if sv.shape() != (1, 1) {
                return Err(mismatch(format!(
                    "scalar operand is {}x{}",
                    sv.rows(),
                    sv.cols()
                )));
            }
            let s = sv.as_scalar();
            v(a).map(|x| x * s)
        }
        Op::Neg(a) => v(a).map(|x| -x),
        Op::ScaleConst(a, c) => {
            let c = *c;
            v(a).map(|x| c * x)
        }
        Op::AddConst(a, c) => {
            let c = *c;
            v(a).map(|x| x + c)
        }
        Op::Sin(a) => {
            let av = v(a);
            Tensor::from_vec(av.rows(), av.cols(), sin_map(av.data()))
        }
        Op::Cos(a) => {
            let av = v(a);
            Tensor::from_vec(av.rows(), av.cols(), cos_map(av.data()))
        }
        Op::Exp(a) => {
            let av = v(a);
            Tensor::from_vec(av.rows(), av.cols(), exp_map(av.data()))
        }
        Op::Sqrt(a) => v(a).map(f64::sqrt),
        Op::Abs(a) => v(a).map(f64::abs),
        Op::Sigmoid(a) => {
            let av = v(a);
            Tensor::from_vec(av.rows(), av.cols(), sigmoid_map(av.data()))
        }
        Op::Softplus(a, beta) => {
            let av = v(a);
            Tensor::from_vec(av.rows(), av.cols(), softplus_map(av.data(), *beta))
        }
        Op::Relu(a) => v(a).map(|x| x.max(0.0)),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::Recip(a) => v(a).map(|x| 1.0 / x),
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            v(a).map(|x| x.clamp(lo, hi))
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Mean(a) => {
            let av = v(a);
            if av.is_empty() {
                return Err(mismatch("mean of empty tensor".into()));
            }
            Tensor::scalar(av.sum() / av.len() as f64)
        }
        Op::RowSum(a) => {
            let av = v(a);
            let mut out = Tensor::zeros(av.rows(), 1);
            for r in 0..av.rows() {
                out.data_mut()[r] = av.row(r).iter().sum();
            }
            out
        }
        Op::Transpose(a) => v(a).transpose(),
        Op::ConcatCols(parts) => {
            if parts.is_empty() {
                return Err(mismatch("concat of zero tensors".into()));
            }
            let rows = v(&parts[0]).rows();
            let mut cols = 0;
            for p in parts {
                if v(p).rows() != rows {
                    return Err(mismatch(format!(
                        "row counts differ: {} vs {}",
                        rows,
                        v(p).rows()
                    )));
                }
                cols += v(p).cols();
            }
            let mut out = Tensor::zeros(rows, cols);
            let mut offset = 0;
            for p in parts {
                let pv = v(p);
                for r in 0..rows {
                    let src = pv.row(r);
                    let dst = &mut out.row_mut(r)[offset..offset + src.len()];
                    dst.copy_from_slice(src);
                }
                offset += pv.cols();
            }
            out
        }
        Op::ConcatRows(a, b) => {
            let (av, bv) = (v(a), v(b));
            if av.cols() != bv.cols() {
                return Err(mismatch(format!(
                    "column counts differ: {} vs {}",
                    av.cols(),
                    bv.cols()
                )));
            }
            let mut data = Vec::with_capacity(av.len() + bv.len());
            data.extend_from_slice(av.data());
            data.extend_from_slice(bv.data());
            Tensor::from_vec(av.rows() + bv.rows(), av.cols(), data)
        }
        Op::SliceCols(a, start, end) => {
            let av = v(a);
            if *start >= *end || *end > av.cols() {
                return Err(mismatch(format!(
                    "slice {}..{} of {} cols",
                    start,
                    end,
                    av.cols()
                )));
            }
            let mut out = Tensor::zeros(av.rows(), end - start);
            for r in 0..av.rows() {
                out.row_mut(r).copy_from_slice(&av.row(r)[*start..*end]);
            }
            out
        }
        Op::GatherRows(a, indices) => {
            let av = v(a);
            let mut out = Tensor::zeros(indices.len(), av.cols());
            for (r, &src) in indices.iter().enumerate() {
                if src >= av.rows() {
                    return Err(mismatch(format!(
                        "gather index {} out of {} rows",
                        src,
                        av.rows()
                    )));
                }
                out.row_mut(r).copy_from_slice(av.row(src));
            }
            out
        }
        Op::SegCumprodExcl(a, n) => {
            let av = v(a);
            if av.cols() != 1 || *n == 0 || av.rows() % n != 0 {
                return Err(mismatch(format!(
                    "{}x{} not groups of {n} single-column rows",
                    av.rows(),
                    av.cols()
                )));
            }
            let mut out = Tensor::zeros(av.rows(), 1);
            for grp in 0..av.rows() / n {
                let base = grp * n;
                let mut acc = 1.0;
                for i in 0..*n {
                    out.data_mut()[base + i] = acc;
                    acc *= av.data()[base + i];
                }
            }
            out
        }
        Op::SegSum(a, n) => {
            let av = v(a);
            if *n == 0 || av.rows() % n != 0 {
                return Err(mismatch(format!("{} rows not groups of {n}", av.rows())));
            }
            let groups = av.rows() / n;
            let mut out = Tensor::zeros(groups, av.cols());
            for r in 0..av.rows() {
                let dst_row = r / n;
                for j in 0..av.cols() {
                    out.data_mut()[dst_row * av.cols() + j] += av.get(r, j);
                }
            }
            out
        }
        Op::Bilerp(map, uv) => {
            let (mv, uvv) = (v(map), v(uv));
            if uvv.cols() != 2 {
                return Err(mismatch(format!("uv is {}x{}, need kx2", uvv.rows(), uvv.cols())));
            }
            if mv.rows() < 2 || mv.cols() < 2 {
                return Err(mismatch(format!("map {}x{} too small", mv.rows(), mv.cols())));
            }
            let (h, w) = mv.shape();
            let mut out = Tensor::zeros(uvv.rows(), 1);
            for k in 0..uvv.rows() {
                let s = BilerpStencil::at(mv, h, w, uvv.get(k, 0), uvv.get(k, 1));
                out.data_mut()[k] = s.value(mv);
            }
            out
        }
        Op::BoxFilter(a, radius) => {
            let av = v(a);
            let summed = box_sum(av, *radius);
            let (h, w) = av.shape();
            let r = *radius as isize;
            let mut out = Tensor::zeros(h, w);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let y0 = (y - r).max(0);
                    let y1 = (y + r).min(h as isize - 1);
                    let x0 = (x - r).max(0);
                    let x1 = (x + r).min(w as isize - 1);
                    let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                    out.set(y as usize, x as usize, summed.get(y as usize, x as usize) / count);
                }
            }
            out
        }
        Op::DiffCols(a) => {
            let av = v(a);
            let (h, w) = av.shape();
            let mut out = Tensor::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    let xp = (x + 1).min(w - 1);
                    let xm = x.saturating_sub(1);
                    out.set(y, x, (av.get(y, xp) - av.get(y, xm)) * 0.5);
                }
            }
            out
        }
        Op::DiffRows(a) => {
            let av = v(a);
            let (h, w) = av.shape();
            let mut out = Tensor::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    let yp = (y + 1).min(h - 1);
                    let ym = y.saturating_sub(1);
                    out.set(y, x, (av.get(yp, x) - av.get(ym, x)) * 0.5);
                }
            }
            out
        }
        Op::Downsample2(a) => {
            let av = v(a);
            let (h, w) = av.shape();
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let mut out = Tensor::zeros(oh, ow);
            for oy in 0..oh {
                for ox in 0..ow {
                    let y1 = (2 * oy + 2).min(h);
                    let x1 = (2 * ox + 2).min(w);
                    let mut acc = 0.0;
                    for y in 2 * oy..y1 {
                        for x in 2 * ox..x1 {
                            acc += av.get(y, x);
                        }
                    }
                    out.set(oy, ox, acc / ((y1 - 2 * oy) * (x1 - 2 * ox)) as f64);
                }
            }
            out
        }
        Op::Upsample2(a, oh, ow) => {
            let av = v(a);
            let (h, w) = av.shape();
            if oh.div_ceil(2) != h || ow.div_ceil(2) != w {
                return Err(mismatch(format!(
                    "upsample {}x{} to {}x{}",
                    h, w, oh, ow
                )));
            }
            let mut out = Tensor::zeros(*oh, *ow);
            for y in 0..*oh {
                for x in 0..*ow {
                    out.set(y, x, av.get((y / 2).min(h - 1), (x / 2).min(w - 1)));
                }
            }
            out
        }
        Op::Reshape(a, rows, cols) => {
            let av = v(a);
            if av.len() != rows * cols {
                return Err(mismatch(format!(
                    "reshape {}x{} to {}x{}",
                    av.rows(),
                    av.cols(),
                    rows,
                    cols
                )));
            }
            Tensor::from_vec(*rows, *cols, av.data().to_vec())
        }
    })
}

/// Central-difference gradient of the scalar `root` with respect to every
/// entry of the input leaf `input`, using step size `h`. Rebuilds nothing:
/// perturbs the input and re-runs `forward`.
pub fn numeric_gradient(
    tape: &mut Tape,
    root: NodeId,
    input: NodeId,
    h: f64,
) -> Result<Tensor, GraphError> {
    let base = tape.value(input).clone();
    let (rows, cols) = base.shape();
    let mut grad = Tensor::zeros(rows, cols);
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        tape.set_input(input, plus)?;
        tape.forward()?;
        let fp = tape.value(root).as_scalar();

        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        tape.set_input(input, minus)?;
        tape.forward()?;
        let fm = tape.value(root).as_scalar();

        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    tape.set_input(input, base)?;
    tape.forward()?;
    Ok(grad)
}
