//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough bookkeeping to push gradients back to its inputs. Graphs
//! are built fresh for every forward pass and dropped afterwards.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    SumAll(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SumCols(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SegmentMax(Var, Vec<usize>),
    RepeatRow(Var),
    BceLogitsRows(Var, Array2<f64>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Tape of operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "scalar() on non-scalar node");
        value[[0, 0]]
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a parameter of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(id, v)| (*id, *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(&[a, b]);
        self.push(value, Op::MatMulT(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let t = self.tracked(&[a]);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let value = self.value(a) / self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Div(a, b), t)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: row shape mismatch");
        let value = self.value(a) + self.value(row);
        let t = self.tracked(&[a, row]);
        self.push(value, Op::AddRow(a, row), t)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row: row shape mismatch");
        let value = self.value(a) * self.value(row);
        let t = self.tracked(&[a, row]);
        self.push(value, Op::MulRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, c), t)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let t = self.tracked(&[a]);
        self.push(value, Op::AddScalar(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let t = self.tracked(&[a]);
        self.push(value, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let t = self.tracked(&[a]);
        self.push(value, Op::Sigmoid(a), t)
    }

    /// Row-wise softmax. Entries where `blocked` is true get probability
    /// exactly zero; a row with every entry blocked comes out all zeros.
    pub fn softmax_rows(&mut self, a: Var, blocked: Option<&Array2<bool>>) -> Var {
        let x = self.value(a);
        if let Some(mask) = blocked {
            assert_eq!(mask.dim(), x.dim(), "softmax_rows: mask shape mismatch");
        }
        let mut value = Array2::zeros(x.dim());
        for (r, row) in x.outer_iter().enumerate() {
            let open = |c: usize| blocked.is_none_or(|m| !m[[r, c]]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(c, _)| open(*c))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (c, v) in row.iter().enumerate() {
                if open(c) {
                    let e = (v - max).exp();
                    value[[r, c]] = e;
                    sum += e;
                }
            }
            value.row_mut(r).mapv_inplace(|e| e / sum);
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::Softmax(a), t)
    }

    /// Per-row standardization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dim();
        let mut value = Array2::zeros((m, n));
        let mut inv_std = Vec::with_capacity(m);
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (c, v) in row.iter().enumerate() {
                value[[r, c]] = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::LayerNorm(a, inv_std), t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(value, Op::SumAll(a), t)
    }

    /// Column means: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.nrows() > 0, "mean_rows over zero rows");
        let value = x.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let t = self.tracked(&[a]);
        self.push(value, Op::MeanRows(a), t)
    }

    /// Column maxima: `m × n → 1 × n`; ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.nrows() > 0, "max_rows over zero rows");
        let n = x.ncols();
        let mut arg = vec![0usize; n];
        let mut value = Array2::zeros((1, n));
        for c in 0..n {
            let mut best = 0;
            for r in 1..x.nrows() {
                if x[[r, c]] > x[[best, c]] {
                    best = r;
                }
            }
            arg[c] = best;
            value[[0, c]] = x[[best, c]];
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::MaxRows(a, arg), t)
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let t = self.tracked(&[a]);
        self.push(value, Op::SumCols(a), t)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let t = self.tracked(&[a]);
        self.push(value, Op::Gather(a, rows.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let t = self.tracked(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let t = self.tracked(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let t = self.tracked(&[a]);
        self.push(value, Op::SliceCols(a, start), t)
    }

    /// Max over consecutive groups of `group` rows: `(g·group) × n → g × n`.
    pub fn segment_max(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        let (m, n) = x.dim();
        assert!(group > 0 && m % group == 0, "segment_max: rows not divisible by group");
        let g = m / group;
        let mut value = Array2::zeros((g, n));
        let mut arg = vec![0usize; g * n];
        for seg in 0..g {
            let base = seg * group;
            for c in 0..n {
                let mut best = base;
                for r in base + 1..base + group {
                    if x[[r, c]] > x[[best, c]] {
                        best = r;
                    }
                }
                arg[seg * n + c] = best;
                value[[seg, c]] = x[[best, c]];
            }
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::SegmentMax(a, arg), t)
    }

    /// Stacks a `1 × n` row `m` times.
    pub fn repeat_row(&mut self, a: Var, m: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1, "repeat_row expects a single row");
        let value = row.broadcast((m, row.ncols())).unwrap().to_owned();
        let t = self.tracked(&[a]);
        self.push(value, Op::RepeatRow(a), t)
    }

    /// Row-wise mean binary cross-entropy of `logits` against `targets`:
    /// `m × n → m × 1`.
    pub fn bce_logits_rows(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "bce: shape mismatch");
        let n = x.ncols().max(1) as f64;
        let mut value = Array2::zeros((x.nrows(), 1));
        for (r, (row, trow)) in x.outer_iter().zip(targets.outer_iter()).enumerate() {
            let total: f64 = row.iter().zip(trow.iter()).map(|(z, y)| bce_with_logit(*z, *y)).sum();
            value[[r, 0]] = total / n;
        }
        let t = self.tracked(&[logits]);
        self.push(value, Op::BceLogitsRows(logits, targets), t)
    }

    /// Weighted softmax cross-entropy, reduced as
    /// `Σ w_i · (−log p_i[target_i]) / Σ w_i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "cross_entropy: target count mismatch");
        assert_eq!(weights.len(), targets.len(), "cross_entropy: weight count mismatch");
        let mut probs = Array2::zeros(x.dim());
        let mut loss = 0.0;
        let total: f64 = weights.iter().sum();
        for (r, row) in x.outer_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (c, v) in row.iter().enumerate() {
                probs[[r, c]] = (v - lse).exp();
            }
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let value = Array2::from_elem((1, 1), if total > 0.0 { loss / total } else { 0.0 });
        let t = self.tracked(&[logits]);
        self.push(
            value,
            Op::CrossEntropy(logits, targets.to_vec(), weights.to_vec(), probs),
            t,
        )
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.backprop(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, gy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut send = |v: Var, g: Array2<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, gy.dot(&self.value(*b).t()));
                send(*b, self.value(*a).t().dot(gy));
            }
            Op::MatMulT(a, b) => {
                send(*a, gy.dot(self.value(*b)));
                send(*b, gy.t().dot(self.value(*a)));
            }
            Op::Transpose(a) => send(*a, gy.t().to_owned()),
            Op::Add(a, b) => {
                send(*a, gy.clone());
                send(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, gy.clone());
                send(*b, -gy);
            }
            Op::Mul(a, b) => {
                send(*a, gy * self.value(*b));
                send(*b, gy * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                send(*a, gy / bv);
                send(*b, -(gy * &node.value) / bv);
            }
            Op::AddRow(a, row) => {
                send(*a, gy.clone());
                send(*row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                send(*a, gy * self.value(*row));
                let prod = gy * self.value(*a);
                send(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => send(*a, gy * *c),
            Op::AddScalar(a) => send(*a, gy.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut g = gy.clone();
                g.zip_mut_with(x, |g, x| {
                    if *x <= 0.0 {
                        *g = 0.0
                    }
                });
                send(*a, g);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                send(*a, gy * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let dot = (gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*a, y * &(gy - &dot));
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = y.ncols() as f64;
                let mut g = Array2::zeros(y.dim());
                for r in 0..y.nrows() {
                    let gr = gy.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.sum() / n;
                    let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..y.ncols() {
                        g[[r, c]] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                send(*a, g);
            }
            Op::SumAll(a) => {
                let dim = self.shape(*a);
                send(*a, Array2::from_elem(dim, gy[[0, 0]]));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.shape(*a);
                let g = (gy / m as f64).broadcast((m, n)).unwrap().to_owned();
                send(*a, g);
            }
            Op::MaxRows(a, arg) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (c, r) in arg.iter().enumerate() {
                    g[[*r, c]] += gy[[0, c]];
                }
                send(*a, g);
            }
            Op::SumCols(a) => {
                let dim = self.shape(*a);
                send(*a, gy.broadcast(dim).unwrap().to_owned());
            }
            Op::Gather(a, rows) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (i, r) in rows.iter().enumerate() {
                    let mut dst = g.row_mut(*r);
                    dst += &gy.row(i);
                }
                send(*a, g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    send(*p, gy.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    send(*p, gy.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                let w = gy.ncols();
                g.slice_mut(s![.., *start..*start + w]).assign(gy);
                send(*a, g);
            }
            Op::SegmentMax(a, arg) => {
                let n = gy.ncols();
                let mut g = Array2::zeros(self.shape(*a));
                for seg in 0..gy.nrows() {
                    for c in 0..n {
                        g[[arg[seg * n + c], c]] += gy[[seg, c]];
                    }
                }
                send(*a, g);
            }
            Op::RepeatRow(a) => send(*a, gy.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::BceLogitsRows(a, targets) => {
                let x = self.value(*a);
                let n = x.ncols().max(1) as f64;
                let mut g = Array2::zeros(x.dim());
                for r in 0..x.nrows() {
                    let scale = gy[[r, 0]] / n;
                    for c in 0..x.ncols() {
                        g[[r, c]] = scale * (sigmoid(x[[r, c]]) - targets[[r, c]]);
                    }
                }
                send(*a, g);
            }
            Op::CrossEntropy(a, targets, weights, probs) => {
                let total: f64 = weights.iter().sum();
                let mut g = Array2::zeros(probs.dim());
                if total > 0.0 {
                    let scale = gy[[0, 0]] / total;
                    for r in 0..probs.nrows() {
                        for c in 0..probs.ncols() {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            g[[r, c]] = scale * weights[r] * (probs[[r, c]] - onehot);
                        }
                    }
                }
                send(*a, g);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `−[y log σ(z) + (1−y) log(1−σ(z))]`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(w ∘ f(x)))/dx for a unary graph builder.
    fn check_unary(x: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let weights = {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let out = build(&mut g, v);
            let dim = g.shape(out);
            Array2::from_shape_fn(dim, |(i, j)| 0.3 + 0.17 * i as f64 - 0.11 * j as f64)
        };
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let out = build(&mut g, v);
            (g.value(out) * &weights).sum()
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(v).unwrap().clone();
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "grad mismatch at ({r},{c}): analytic {a}, numeric {numeric}"
            );
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5], [-0.9, 0.25, 2.0]]
    }

    #[test]
    fn unary_gradients() {
        check_unary(sample(), |g, v| g.sigmoid(v));
        check_unary(sample(), |g, v| g.relu(v));
        check_unary(sample(), |g, v| g.softmax_rows(v, None));
        check_unary(sample(), |g, v| g.layer_norm(v));
        check_unary(sample(), |g, v| g.mean_rows(v));
        check_unary(sample(), |g, v| g.max_rows(v));
        check_unary(sample(), |g, v| g.sum_cols(v));
        check_unary(sample(), |g, v| g.transpose(v));
        check_unary(sample(), |g, v| g.gather_rows(v, &[2, 0, 2]));
        check_unary(sample(), |g, v| g.slice_cols(v, 1, 2));
        check_unary(sample(), |g, v| {
            let r = g.slice_cols(v, 0, 1);
            let r = g.transpose(r);
            g.repeat_row(r, 2)
        });
        check_unary(sample(), |g, v| g.matmul_t(v, v));
        check_unary(sample(), |g, v| g.matmul(v, v));
        check_unary(sample(), |g, v| {
            let sq = g.mul(v, v);
            let den = g.add_scalar(sq, 1.0);
            g.div(v, den)
        });
        check_unary(sample(), |g, v| {
            let row = g.slice_cols(v, 0, 3);
            let row = g.gather_rows(row, &[1]);
            let a = g.add_row(v, row);
            g.mul_row(a, row)
        });
        check_unary(sample(), |g, v| g.bce_logits_rows(v, array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]));
        check_unary(sample(), |g, v| g.cross_entropy(v, &[2, 0, 1], &[1.0, 0.5, 2.0]));
        check_unary(
            array![[0.3, -1.2], [1.1, 0.4], [-0.9, 0.25], [2.0, -0.1]],
            |g, v| g.segment_max(v, 2),
        );
        check_unary(sample(), |g, v| {
            let a = g.concat_cols(&[v, v]);
            let b = g.concat_rows(&[a, a]);
            g.scale(b, -0.7)
        });
    }

    #[test]
    fn masked_softmax_blocks_entries() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let mask = array![[false, true, false], [true, true, true]];
        let y = g.softmax_rows(x, Some(&mask));
        let v = g.value(y);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(v.row(1).sum(), 0.0);
    }

    #[test]
    fn masked_softmax_gradient() {
        let mask = array![[false, true, false], [false, false, true], [true, false, false]];
        check_unary(sample(), move |g, v| g.softmax_rows(v, Some(&mask)));
    }

    #[test]
    fn stable_bce_matches_textbook_formula() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-0.7, 1.0)] {
            let p = sigmoid(z);
            let textbook = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logit(z, y) - textbook).abs() < 1e-12);
        }
    }
}
