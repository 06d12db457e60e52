//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Forward values are computed eagerly as nodes are recorded; `backward`
//! replays the tape in reverse, accumulating gradients into the
//! [`ParamRegistry`]. Only the operations this crate actually needs exist —
//! there is no broadcasting beyond row vectors and no tensor rank above 2.
//!
//! Frozen parameters participate in the tape like any other node (gradients
//! must flow *through* frozen layers to reach trainable ones below); their own
//! accumulated gradients are zeroed at the end of the backward pass.

use libm::erf;
use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::tensor::ParamRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant leaf (inputs, masks, precomputed biases).
    Input,
    /// Leaf bound to a registry parameter by name.
    Param(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a `1×m` row to every row of an `n×m` matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Select rows of `table` by index, in order, with repetition allowed.
    Gather(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    L2NormalizeRows(NodeId),
    /// Per-row maximum: `n×m` -> `n×1`. Ties break toward the first column.
    RowMax(NodeId),
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    CrossEntropyRows(NodeId, Vec<usize>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// A single forward pass recorded for differentiation. Build one per training
/// step, read the loss value, then consume it with [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> [usize; 2] {
        let v = self.value(id);
        [v.nrows(), v.ncols()]
    }

    /// Record a constant leaf.
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Record a leaf bound to a registry parameter. The value is snapshotted
    /// at record time; gradients accumulate back into the registry by name.
    pub fn param(&mut self, registry: &ParamRegistry, name: &str) -> Result<NodeId> {
        let p = registry.require(name)?;
        Ok(self.push(Op::Param(name.to_string()), p.values().clone()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da[1] != db[0] {
            return Err(Error::shape("matmul", &da, &db));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).t().to_owned();
        self.push(Op::Transpose(x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape("add", &da, &db));
        }
        let value = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (dx, dr) = (self.dims(x), self.dims(row));
        if dr[0] != 1 || dr[1] != dx[1] {
            return Err(Error::shape("add_row", &dx, &dr));
        }
        let value = self.value(x) + self.value(row);
        Ok(self.push(Op::AddRow(x, row), value))
    }

    /// `x · W + b` with `b` broadcast over rows; the shared building block of
    /// projections, adapters, and poolers.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (dx, dw) = (self.dims(x), self.dims(w));
        if dx[1] != dw[0] {
            return Err(Error::shape("affine", &dx, &dw));
        }
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x) * c;
        self.push(Op::Scale(x, c), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(gelu_exact);
        self.push(Op::Gelu(x), value)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(softplus_stable);
        self.push(Op::Softplus(x), value)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = softmax_rows_array(self.value(x));
        self.push(Op::SoftmaxRows(x), value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (dx, dg, db) = (self.dims(x), self.dims(gamma), self.dims(beta));
        if dx[1] == 0 {
            return Err(Error::shape("layer_norm", &dx, &[dx[0], 1]));
        }
        if dg != [1, dx[1]] {
            return Err(Error::shape("layer_norm gamma", &dx, &dg));
        }
        if db != [1, dx[1]] {
            return Err(Error::shape("layer_norm beta", &dx, &db));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (g, b) = (self.value(gamma).clone(), self.value(beta).clone());
        let mut value = self.value(x).clone();
        for mut r in value.rows_mut() {
            let n = r.len() as f64;
            let mean = r.sum() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - mean) / sd * g[[0, j]] + b[[0, j]];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, value))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let dt = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= dt[0]) {
            return Err(Error::Config(format!(
                "gather index {bad} out of range for table with {} rows",
                dt[0]
            )));
        }
        let t = self.value(table);
        let value = Array2::from_shape_fn((ids.len(), dt[1]), |(i, j)| t[[ids[i], j]]);
        Ok(self.push(Op::Gather(table, ids.to_vec()), value))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let dx = self.dims(x);
        if start >= end || end > dx[1] {
            return Err(Error::Config(format!(
                "slice_cols {start}..{end} invalid for {} columns",
                dx[1]
            )));
        }
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        Ok(self.push(Op::SliceCols(x, start, end), value))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Config("concat_cols of zero inputs".into()));
        }
        let rows = self.dims(xs[0])[0];
        for &x in xs {
            if self.dims(x)[0] != rows {
                return Err(Error::shape("concat_cols", &self.dims(xs[0]), &self.dims(x)));
            }
        }
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts checked above");
        Ok(self.push(Op::ConcatCols(xs.to_vec()), value))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for mut r in value.rows_mut() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.mapv_inplace(|v| v / norm);
            }
        }
        self.push(Op::L2NormalizeRows(x), value)
    }

    pub fn row_max(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Array2::from_shape_fn((v.nrows(), 1), |(i, _)| {
            v.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        self.push(Op::RowMax(x), value)
    }

    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let dl = self.dims(logits);
        if targets.len() != dl[0] {
            return Err(Error::shape("cross_entropy_rows", &dl, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= dl[1]) {
            return Err(Error::Config(format!(
                "cross_entropy target {bad} out of range for {} classes",
                dl[1]
            )));
        }
        let l = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Array2::from_elem((1, 1), total / targets.len() as f64);
        Ok(self.push(Op::CrossEntropyRows(logits, targets.to_vec()), value))
    }

    /// Reverse pass from a scalar loss node. Gradients for every parameter on
    /// a path to the loss are accumulated into the registry; frozen
    /// parameters' gradients are then zeroed. Consumes the graph.
    pub fn backward(self, loss: NodeId, registry: &mut ParamRegistry) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward before forward: loss node was never recorded".into(),
            ));
        }
        if self.value(loss).dim() != (1, 1) {
            let d = self.dims(loss);
            return Err(Error::State(format!(
                "backward requires a scalar loss node, got shape {d:?}"
            )));
        }

        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        // Builders only reference earlier node ids, so descending id order is
        // a reverse topological order and each node is visited exactly once.
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    registry.require_mut(name)?.accumulate_grad(&g)?;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Transpose(x) => accumulate(&mut grads[x.0], g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(x, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], grow);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Scale(x, c) => accumulate(&mut grads[x.0], &g * *c),
                Op::Relu(x) => {
                    let gx = &g * &self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gelu(x) => {
                    let gx = &g * &self.value(*x).mapv(gelu_derivative);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Softplus(x) => {
                    let gx = &g * &self.value(*x).mapv(sigmoid_stable);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SoftmaxRows(x) => {
                    // dx_row = y_row * (g_row - <g_row, y_row>)
                    let y = &node.value;
                    let mut gx = &g * y;
                    for i in 0..gx.nrows() {
                        let dot: f64 = gx.row(i).sum();
                        for j in 0..gx.ncols() {
                            gx[[i, j]] -= dot * y[[i, j]];
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let n = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.dim());
                    let mut ggamma = Array2::zeros((1, xv.ncols()));
                    let mut gbeta = Array2::zeros((1, xv.ncols()));
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let sd = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / sd).collect();
                        let dxhat: Vec<f64> = (0..xv.ncols())
                            .map(|j| g[[i, j]] * gv[[0, j]])
                            .collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n;
                        for j in 0..xv.ncols() {
                            ggamma[[0, j]] += g[[i, j]] * xhat[j];
                            gbeta[[0, j]] += g[[i, j]];
                            gx[[i, j]] =
                                (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sd;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gamma.0], ggamma);
                    accumulate(&mut grads[beta.0], gbeta);
                }
                Op::Gather(table, ids) => {
                    let dt = self.value(*table).dim();
                    let mut gt = Array2::zeros(dt);
                    for (i, &r) in ids.iter().enumerate() {
                        for j in 0..dt.1 {
                            gt[[r, j]] += g[[i, j]];
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::SliceCols(x, start, end) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.value(x).ncols();
                        let gx = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads[x.0], gx);
                        offset += w;
                    }
                }
                Op::L2NormalizeRows(x) => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.dim());
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let dot: f64 = (0..xv.ncols()).map(|j| g[[i, j]] * row[j]).sum();
                        for j in 0..xv.ncols() {
                            gx[[i, j]] = g[[i, j]] / norm - row[j] * dot / norm.powi(3);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::RowMax(x) => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.dim());
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let mut arg = 0;
                        for j in 1..row.len() {
                            if row[j] > row[arg] {
                                arg = j;
                            }
                        }
                        gx[[i, arg]] = g[[i, 0]];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::CrossEntropyRows(logits, targets) => {
                    let y = softmax_rows_array(self.value(*logits));
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut gl = y * scale;
                    for (i, &t) in targets.iter().enumerate() {
                        gl[[i, t]] -= scale;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }

        registry.zero_frozen_grads();
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn softmax_rows_array(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        r.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = r.sum();
        r.mapv_inplace(|v| v / sum);
    }
    out
}

/// Exact (erf-based) GELU, matching the reference transformer formulation.
fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Overflow-safe ln(1 + e^x).
fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn reg() -> ParamRegistry {
        ParamRegistry::new(0)
    }

    #[test]
    fn affine_identity_case() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 2.0]]);
        let w = g.input(array![[1.0, 0.0], [0.0, 1.0]]);
        let b = g.input(array![[1.0, 1.0]]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &array![[2.0, 3.0]]);
    }

    #[test]
    fn affine_diagonal_case() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 0.0], [0.0, 1.0]]);
        let w = g.input(array![[2.0, 0.0], [0.0, 3.0]]);
        let b = g.input(array![[0.0, 0.0]]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &array![[2.0, 0.0], [0.0, 3.0]]);
    }

    #[test]
    fn affine_column_vector_case() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 2.0]]);
        let w = g.input(array![[1.0], [1.0]]);
        let b = g.input(array![[0.5]]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &array![[3.5]]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Array2::zeros((1, 3)));
        let w = g.input(Array2::zeros((2, 2)));
        let b = g.input(Array2::zeros((1, 2)));
        let err = g.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut g = Graph::new();
        let gamma = g.input(array![[1.0, 1.0]]);
        let beta = g.input(array![[0.0, 0.0]]);

        let x1 = g.input(array![[1.0, -1.0]]);
        let y1 = g.layer_norm(x1, gamma, beta, 1e-12).unwrap();
        assert_abs_diff_eq!(g.value(y1)[[0, 0]], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.value(y1)[[0, 1]], -1.0, epsilon = 1e-6);

        let x2 = g.input(array![[5.0, 5.0]]);
        let y2 = g.layer_norm(x2, gamma, beta, 1e-12).unwrap();
        assert_abs_diff_eq!(g.value(y2)[[0, 0]], 0.0, epsilon = 1e-6);

        let gamma2 = g.input(array![[2.0, 2.0]]);
        let beta2 = g.input(array![[1.0, 1.0]]);
        let x3 = g.input(array![[0.0, 2.0]]);
        let y3 = g.layer_norm(x3, gamma2, beta2, 1e-12).unwrap();
        assert_abs_diff_eq!(g.value(y3)[[0, 0]], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.value(y3)[[0, 1]], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn layer_norm_rejects_zero_width() {
        let mut g = Graph::new();
        let x = g.input(Array2::zeros((2, 0)));
        let gamma = g.input(Array2::zeros((1, 0)));
        let beta = g.input(Array2::zeros((1, 0)));
        assert!(g.layer_norm(x, gamma, beta, 1e-12).is_err());
    }

    #[test]
    fn relu_and_softmax_examples() {
        let mut g = Graph::new();
        let x = g.input(array![[-1.0, 0.0, 2.0]]);
        let y = g.relu(x);
        assert_eq!(g.value(y), &array![[0.0, 0.0, 2.0]]);

        let z = g.input(array![[0.0, 0.0]]);
        let s = g.softmax_rows(z);
        assert_eq!(g.value(s), &array![[0.5, 0.5]]);

        let big = g.input(array![[1000.0, 1000.0]]);
        let sb = g.softmax_rows(big);
        assert_eq!(g.value(sb), &array![[0.5, 0.5]]);
        assert!(g.value(sb).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_square_gives_two_x() {
        // f(x) = x·x at x = 3 (as a 1×1 matmul) → df/dx = 6.
        let mut reg = reg();
        reg.insert(crate::tensor::ParamTensor::new("x", vec![1, 1], array![[3.0]]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&reg, "x").unwrap();
        let y = g.matmul(x, x).unwrap();
        g.backward(y, &mut reg).unwrap();
        assert_eq!(reg.get("x").unwrap().grad().unwrap(), &array![[6.0]]);
    }

    #[test]
    fn unused_parameter_gets_no_grad() {
        let mut reg = reg();
        reg.add_weight("used", 1, 1).unwrap();
        reg.add_weight("unused", 1, 1).unwrap();
        let mut g = Graph::new();
        let x = g.param(&reg, "used").unwrap();
        let y = g.matmul(x, x).unwrap();
        g.backward(y, &mut reg).unwrap();
        assert!(reg.get("used").unwrap().grad().is_some());
        assert!(reg.get("unused").unwrap().grad().is_none());
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut reg = reg();
        let g = Graph::new();
        let err = g.backward(NodeId(0), &mut reg).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut reg = reg();
        let mut g = Graph::new();
        let x = g.input(Array2::zeros((2, 2)));
        let err = g.backward(x, &mut reg).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn frozen_param_grad_is_zeroed_but_gradient_flows_through() {
        // y = (x · w_frozen) · w_live: the frozen matrix sits between the
        // loss and the trainable one; the trainable one must still see grad.
        let mut reg = reg();
        reg.insert(crate::tensor::ParamTensor::new("frozen", vec![1, 1], array![[2.0]]).unwrap())
            .unwrap();
        reg.insert(crate::tensor::ParamTensor::new("live", vec![1, 1], array![[4.0]]).unwrap())
            .unwrap();
        reg.set_trainable_where(|n| n == "live");

        let mut g = Graph::new();
        let x = g.input(array![[3.0]]);
        let wf = g.param(&reg, "frozen").unwrap();
        let wl = g.param(&reg, "live").unwrap();
        let h = g.matmul(x, wf).unwrap();
        let y = g.matmul(h, wl).unwrap();
        g.backward(y, &mut reg).unwrap();

        assert!(reg.get("frozen").unwrap().grad().is_none());
        // dy/d live = x·frozen = 6
        assert_eq!(reg.get("live").unwrap().grad().unwrap(), &array![[6.0]]);
    }

    #[test]
    fn shared_param_accumulates_across_uses() {
        // y = x·w + x·w → dy/dw = 2x.
        let mut reg = reg();
        reg.insert(crate::tensor::ParamTensor::new("w", vec![1, 1], array![[5.0]]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let x = g.input(array![[3.0]]);
        let w1 = g.param(&reg, "w").unwrap();
        let w2 = g.param(&reg, "w").unwrap();
        let a = g.matmul(x, w1).unwrap();
        let b = g.matmul(x, w2).unwrap();
        let y = g.add(a, b).unwrap();
        g.backward(y, &mut reg).unwrap();
        assert_eq!(reg.get("w").unwrap().grad().unwrap(), &array![[6.0]]);
    }

    #[test]
    fn gather_accumulates_repeated_ids() {
        let mut reg = reg();
        reg.insert(
            crate::tensor::ParamTensor::new("table", vec![3, 1], array![[1.0], [2.0], [3.0]])
                .unwrap(),
        )
        .unwrap();
        let mut g = Graph::new();
        let t = g.param(&reg, "table").unwrap();
        let rows = g.gather(t, &[1, 1, 2]).unwrap();
        assert_eq!(g.value(rows), &array![[2.0], [2.0], [3.0]]);
        let ones = g.input(array![[1.0, 1.0, 1.0]]);
        let y = g.matmul(ones, rows).unwrap();
        g.backward(y, &mut reg).unwrap();
        assert_eq!(
            reg.get("table").unwrap().grad().unwrap(),
            &array![[0.0], [2.0], [1.0]]
        );
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let t = g.input(Array2::zeros((3, 2)));
        assert!(g.gather(t, &[3]).is_err());
    }

    #[test]
    fn row_max_routes_gradient_to_argmax() {
        let mut reg = reg();
        reg.insert(
            crate::tensor::ParamTensor::new("m", vec![1, 3], array![[1.0, 4.0, 2.0]]).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new();
        let m = g.param(&reg, "m").unwrap();
        let y = g.row_max(m);
        assert_eq!(g.value(y), &array![[4.0]]);
        g.backward(y, &mut reg).unwrap();
        assert_eq!(
            reg.get("m").unwrap().grad().unwrap(),
            &array![[0.0, 1.0, 0.0]]
        );
    }

    #[test]
    fn l2_normalize_rows_produces_unit_norm_and_keeps_zero_rows() {
        let mut g = Graph::new();
        let x = g.input(array![[3.0, 4.0], [0.0, 0.0]]);
        let y = g.l2_normalize_rows(x);
        assert_abs_diff_eq!(g.value(y)[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y)[[0, 1]], 0.8, epsilon = 1e-12);
        assert_eq!(g.value(y)[[1, 0]], 0.0);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // Row [0, 0]: loss = ln 2 regardless of target.
        let mut g = Graph::new();
        let logits = g.input(array![[0.0, 0.0]]);
        let y = g.cross_entropy_rows(logits, &[0]).unwrap();
        assert_abs_diff_eq!(g.value(y)[[0, 0]], std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let mut g = Graph::new();
        let x = g.input(array![[-1000.0, 0.0, 1000.0]]);
        let y = g.softplus(x);
        let v = g.value(y);
        assert_eq!(v[[0, 0]], 0.0);
        assert_abs_diff_eq!(v[[0, 1]], std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(v[[0, 2]], 1000.0);
    }

    #[test]
    fn concat_and_slice_cols_roundtrip() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 2.0, 3.0, 4.0]]);
        let a = g.slice_cols(x, 0, 2).unwrap();
        let b = g.slice_cols(x, 2, 4).unwrap();
        let back = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }
}
