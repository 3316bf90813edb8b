//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node on a linear tape while the
//! forward pass runs. [`Graph::backward`] then walks the tape in reverse and
//! accumulates vector-Jacobian products. Everything is a 2-D matrix; vectors
//! are `1 x n` and scalars are `1 x 1`.
//!
//! Parameters live outside the graph in a [`ParamStore`]. A store is bound to a
//! graph with [`Graph::bind`], either as trainable (gradients are collected) or
//! frozen (treated as constants that gradients still flow *through*).

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::params::{Grads, ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Handle to a parameter store bound to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot(usize);

enum Value<'a> {
    Owned(Mat),
    Borrowed(&'a Mat),
}

impl Value<'_> {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    SliceCols { input: NodeId, start: usize },
    Pick { input: NodeId, at: Vec<(usize, usize)> },
    Sum(NodeId),
    RowSum(NodeId),
    Transpose(NodeId),
    Log(NodeId),
    Exp(NodeId),
    ClampMin(NodeId, f64),
}

struct Node<'a> {
    op: Op,
    value: Value<'a>,
    requires_grad: bool,
}

struct Binding<'a> {
    store: &'a ParamStore,
    trainable: bool,
    nodes: Vec<Option<NodeId>>,
}

/// A tape of recorded operations.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    bindings: Vec<Binding<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn bind(&mut self, store: &'a ParamStore, trainable: bool) -> Slot {
        self.bindings.push(Binding {
            store,
            trainable,
            nodes: vec![None; store.len()],
        });
        Slot(self.bindings.len() - 1)
    }

    /// Node for parameter `id` of the store bound at `slot`. Repeated calls
    /// return the same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, slot: Slot, id: ParamId) -> NodeId {
        if let Some(n) = self.bindings[slot.0].nodes[id.index()] {
            return n;
        }
        let binding = &self.bindings[slot.0];
        let value = Value::Borrowed(binding.store.get(id));
        let requires_grad = binding.trainable;
        let n = self.push_raw(Op::Leaf, value, requires_grad);
        self.bindings[slot.0].nodes[id.index()] = Some(n);
        n
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push_raw(Op::Leaf, Value::Owned(value), false)
    }

    /// Input leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push_raw(Op::Leaf, Value::Owned(value), true)
    }

    pub fn value(&self, n: NodeId) -> &Mat {
        self.nodes[n.0].value.get()
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        let v = self.value(n);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self, n: NodeId) -> (usize, usize) {
        self.value(n).dim()
    }

    fn push_raw(&mut self, op: Op, value: Value<'a>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Mat, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_raw(op, Value::Owned(value), requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), v, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v, &[a, b])
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), v, &[a, row])
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` row `row`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        self.push(Op::MulRow(a, row), v, &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), v, &[a])
    }

    /// Row-wise softmax. Entries equal to `-inf` get zero weight; every row
    /// needs at least one finite entry.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a).view());
        self.push(Op::Softmax(a), v, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(Op::LogSoftmax(a), v, &[a])
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Op::LayerNorm { input: a, inv_std }, v, &[a])
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts differ in concat_rows");
        self.push(Op::ConcatRows(parts.to_vec()), v, parts)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts differ in concat_cols");
        self.push(Op::ConcatCols(parts.to_vec()), v, parts)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows { input: a, start }, v, &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { input: a, start }, v, &[a])
    }

    /// `1 x k` row of the entries of `a` at `(row, col)` positions.
    pub fn pick(&mut self, a: NodeId, at: &[(usize, usize)]) -> NodeId {
        let x = self.value(a);
        let v = Mat::from_shape_fn((1, at.len()), |(_, j)| x[at[j]]);
        self.push(
            Op::Pick {
                input: a,
                at: at.to_vec(),
            },
            v,
            &[a],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v, &[a])
    }

    /// `n x 1` column of row sums.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::RowSum(a), v, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), v, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Log(a), v, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v, &[a])
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), v, &[a])
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn needs(&self, n: NodeId) -> bool {
        self.nodes[n.0].requires_grad
    }

    fn propagate(&self, idx: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, -dy);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy * self.value(*b));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.needs(*row) {
                    accumulate(grads, *row, col_sums(dy));
                }
            }
            Op::MulRow(a, row) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy * self.value(*row));
                }
                if self.needs(*row) {
                    accumulate(grads, *row, col_sums(&(dy * self.value(*a))));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, dy * *c),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = dy.clone();
                d.zip_mut_with(x, |g, &x| *g *= gelu_grad(x));
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = dy * out;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |g, &y| *g -= y * dot);
                }
                accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = dy.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let total = drow.sum();
                    drow.zip_mut_with(&yrow, |g, &y| *g -= y.exp() * total);
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm { input, inv_std } => {
                let n = out.ncols() as f64;
                let mut d = dy.clone();
                for (r, (mut drow, xhat)) in d.rows_mut().into_iter().zip(out.rows()).enumerate() {
                    let sum_dy = drow.sum();
                    let sum_dy_xhat = drow.iter().zip(xhat.iter()).map(|(g, x)| g * x).sum::<f64>();
                    let inv = inv_std[r];
                    drow.zip_mut_with(&xhat, |g, &x| {
                        *g = inv / n * (n * *g - sum_dy - x * sum_dy_xhat);
                    });
                }
                accumulate(grads, *input, d);
            }
            Op::Gather { table, ids } => {
                let mut d = Mat::zeros(self.shape(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &dy.row(r);
                }
                accumulate(grads, *table, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.needs(*p) {
                        accumulate(grads, *p, dy.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    if self.needs(*p) {
                        accumulate(grads, *p, dy.slice(s![.., start..start + cols]).to_owned());
                    }
                    start += cols;
                }
            }
            Op::SliceRows { input, start } => {
                let mut d = Mat::zeros(self.shape(*input));
                d.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                accumulate(grads, *input, d);
            }
            Op::SliceCols { input, start } => {
                let mut d = Mat::zeros(self.shape(*input));
                d.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                accumulate(grads, *input, d);
            }
            Op::Pick { input, at } => {
                let mut d = Mat::zeros(self.shape(*input));
                for (j, &pos) in at.iter().enumerate() {
                    d[pos] += dy[[0, j]];
                }
                accumulate(grads, *input, d);
            }
            Op::Sum(a) => {
                let d = Mat::from_elem(self.shape(*a), dy[[0, 0]]);
                accumulate(grads, *a, d);
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                let d = Mat::from_shape_fn((r, c), |(i, _)| dy[[i, 0]]);
                accumulate(grads, *a, d);
            }
            Op::Transpose(a) => accumulate(grads, *a, dy.t().to_owned()),
            Op::Log(a) => accumulate(grads, *a, dy / self.value(*a)),
            Op::Exp(a) => accumulate(grads, *a, dy * out),
            Op::ClampMin(a, floor) => {
                let x = self.value(*a);
                let mut d = dy.clone();
                d.zip_mut_with(x, |g, &x| {
                    if x < *floor {
                        *g = 0.0;
                    }
                });
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], n: NodeId, d: Mat) {
    match &mut grads[n.0] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

fn col_sums(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax on a plain matrix.
pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Mat {
    let mut v = x.to_owned();
    for mut row in v.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    v
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `n`, if any flowed there.
    pub fn wrt(&self, n: NodeId) -> Option<&Mat> {
        self.grads.get(n.0).and_then(Option::as_ref)
    }

    /// Parameter gradients for the store bound at `slot`. Parameters the loss
    /// never touched get no entry.
    pub fn params(&self, graph: &Graph<'_>, slot: Slot) -> Grads {
        let binding = &graph.bindings[slot.0];
        let mut out = Grads::empty(binding.store.len());
        if !binding.trainable {
            return out;
        }
        for (i, node) in binding.nodes.iter().enumerate() {
            if let Some(g) = node.and_then(|n| self.wrt(n)) {
                out.set(ParamId::from_index(i), g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_forward_and_backward() {
        let mut g = Graph::new();
        let a = g.input(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.input(array![[0.5, -1.0], [2.0, 0.0]]);
        let c = g.matmul(a, b);
        let loss = g.sum(c);
        assert_eq!(g.value(c), &array![[4.5, -1.0], [9.5, -3.0]]);
        let grads = g.backward(loss);
        // d/dA sum(AB) = 1·Bᵀ
        assert_eq!(grads.wrt(a).unwrap(), &array![[-0.5, 2.0], [-0.5, 2.0]]);
        assert_eq!(grads.wrt(b).unwrap(), &array![[4.0, 4.0], [6.0, 6.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_neg_inf() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, f64::NEG_INFINITY, 3.0], [0.0, 0.0, 0.0]]);
        let p = g.softmax(a);
        let v = g.value(p);
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut g = Graph::new();
        let a = g.constant(array![[2.0]]);
        let b = g.input(array![[3.0]]);
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn shared_param_nodes_are_reused() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[2.0]]);
        let mut g = Graph::new();
        let slot = g.bind(&store, true);
        let p1 = g.param(slot, w);
        let p2 = g.param(slot, w);
        assert_eq!(p1, p2);
        let y = g.mul(p1, p2);
        let grads = g.backward(y);
        let pg = grads.params(&g, slot);
        assert_eq!(pg.get(w).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn frozen_binding_yields_no_param_grads_but_passes_through() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[2.0]]);
        let mut g = Graph::new();
        let slot = g.bind(&store, false);
        let x = g.input(array![[5.0]]);
        let p = g.param(slot, w);
        let y = g.mul(p, x);
        let grads = g.backward(y);
        assert!(grads.params(&g, slot).get(w).is_none());
        assert_eq!(grads.wrt(x).unwrap()[[0, 0]], 2.0);
    }
}
