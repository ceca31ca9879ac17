//! A small reverse-mode automatic differentiation tape over f64 matrices.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with its forward value. Parameters live outside the graph in a
//! [`ParamStore`]; the graph borrows them read-only, so forward passes over
//! one store can run concurrently. [`Graph::backward`] returns one gradient
//! per parameter.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect()
    }
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn randn(rng: &mut impl rand::Rng, rows: usize, cols: usize, std: f64) -> Mat {
    use rand_distr::{Distribution, StandardNormal};
    Mat::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a + r` with the 1×c row `r` broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `a ⊙ r` with the 1×c row `r` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    /// Row-wise normalisation without affine terms; aux holds 1/σ per row.
    LayerNorm(Var),
    /// Row-wise softmax where entry (i, j) is masked out for j > i.
    CausalSoftmax(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Ln(Var),
    Recip(Var),
    Square(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Mat,
    aux: Option<Mat>,
    needs_grad: bool,
}

/// Recorded computation over parameters from one [`ParamStore`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows(x: &Mat, causal: bool) -> Mat {
    let mut out = Mat::zeros(x.raw_dim());
    for (i, (row, mut dst)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
        let width = if causal { (i + 1).min(row.len()) } else { row.len() };
        let max = row.iter().take(width).cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..width {
            let e = (row[j] - max).exp();
            dst[j] = e;
            total += e;
        }
        for j in 0..width {
            dst[j] /= total;
        }
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, value: Mat, aux: Option<Mat>) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Gelu(a)
            | Op::LayerNorm(a)
            | Op::CausalSoftmax(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Ln(a)
            | Op::Recip(a)
            | Op::Square(a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::Sum(a) => self.nodes[a.0].needs_grad,
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            aux,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Constant, value, None)
    }

    /// Handle to a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Op::Param(id), Mat::zeros((0, 0)), None);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value, None)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), value, None)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×c row");
        let value = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), value, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), value, None)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1×c row");
        let value = self.value(a) * self.value(row);
        self.push(Op::MulRow(a, row), value, None)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(Op::Scale(a, factor), value, None)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a) + offset;
        self.push(Op::AddScalar(a), value, None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), value, None)
    }

    /// Zero-mean, unit-variance rows (population variance, ε = 1e-5).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut value = x.clone();
        let mut rstd = Mat::zeros((x.nrows(), 1));
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd[[i, 0]] = r;
        }
        self.push(Op::LayerNorm(a), value, Some(rstd))
    }

    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a), true);
        self.push(Op::CausalSoftmax(a), value, None)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a), false);
        self.push(Op::Softmax(a), value, None)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(Op::LogSoftmax(a), value, None)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(Op::Ln(a), value, None)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 / v);
        self.push(Op::Recip(a), value, None)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v * v);
        self.push(Op::Square(a), value, None)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let value = src.select(Axis(0), rows);
        self.push(Op::GatherRows(a, rows.to_vec()), value, None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(Op::ConcatRows(parts.to_vec()), value, None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(Op::ConcatCols(parts.to_vec()), value, None)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows(a, start, len), value, None)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols(a, start, len), value, None)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), value, None)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `x · w + b` with `b` a 1×out row.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Gradients of the 1×1 node `loss` with respect to every parameter, in
    /// [`ParamStore`] order. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Vec<Mat> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param(_)) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if wants(a) {
                        acc(&mut grads, *a, dy.dot(&self.value(*b).t()));
                    }
                    if wants(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&dy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if wants(a) {
                        acc(&mut grads, *a, dy.dot(self.value(*b)));
                    }
                    if wants(b) {
                        acc(&mut grads, *b, dy.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        acc(&mut grads, *a, dy.clone());
                    }
                    if wants(b) {
                        acc(&mut grads, *b, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(a) {
                        acc(&mut grads, *a, dy.clone());
                    }
                    if wants(b) {
                        acc(&mut grads, *b, -dy);
                    }
                }
                Op::AddRow(a, r) => {
                    if wants(r) {
                        acc(&mut grads, *r, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(a) {
                        acc(&mut grads, *a, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        acc(&mut grads, *a, &dy * self.value(*b));
                    }
                    if wants(b) {
                        acc(&mut grads, *b, &dy * self.value(*a));
                    }
                }
                Op::MulRow(a, r) => {
                    if wants(r) {
                        let g = (&dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *r, g);
                    }
                    if wants(a) {
                        acc(&mut grads, *a, &dy * self.value(*r));
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, dy * *f),
                Op::AddScalar(a) => acc(&mut grads, *a, dy),
                Op::Gelu(a) => {
                    let g = &dy * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm(a) => {
                    let y = &node.value;
                    let rstd = node.aux.as_ref().expect("layer norm caches 1/σ");
                    let cols = y.ncols() as f64;
                    let mut dx = Mat::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let dyr = dy.row(i);
                        let yr = y.row(i);
                        let mean_dy = dyr.sum() / cols;
                        let mean_dyy = dyr.dot(&yr) / cols;
                        let r = rstd[[i, 0]];
                        for j in 0..y.ncols() {
                            dx[[i, j]] = r * (dyr[j] - mean_dy - yr[j] * mean_dyy);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::CausalSoftmax(a) | Op::Softmax(a) => {
                    let p = &node.value;
                    let mut dx = &dy * p;
                    for (mut row, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = dy.clone();
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        row.zip_mut_with(&yrow, |d, &lp| *d -= lp.exp() * total);
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Ln(a) => acc(&mut grads, *a, &dy / self.value(*a)),
                Op::Recip(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, -(&dy * &(y * y)));
                }
                Op::Square(a) => acc(&mut grads, *a, &dy * &(self.value(*a) * 2.0)),
                Op::GatherRows(a, rows) => {
                    let src = self.value(*a);
                    let slot = grads[a.0].get_or_insert_with(|| Mat::zeros(src.raw_dim()));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = slot.row_mut(r);
                        dst += &dy.row(i);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for v in parts {
                        let len = self.value(*v).nrows();
                        if wants(v) {
                            acc(&mut grads, *v, dy.slice(s![start..start + len, ..]).to_owned());
                        }
                        start += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for v in parts {
                        let len = self.value(*v).ncols();
                        if wants(v) {
                            acc(&mut grads, *v, dy.slice(s![.., start..start + len]).to_owned());
                        }
                        start += len;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let src = self.value(*a);
                    let slot = grads[a.0].get_or_insert_with(|| Mat::zeros(src.raw_dim()));
                    let mut dst = slot.slice_mut(s![*start..*start + *len, ..]);
                    dst += &dy;
                }
                Op::SliceCols(a, start, len) => {
                    let src = self.value(*a);
                    let slot = grads[a.0].get_or_insert_with(|| Mat::zeros(src.raw_dim()));
                    let mut dst = slot.slice_mut(s![.., *start..*start + *len]);
                    dst += &dy;
                }
                Op::Sum(a) => {
                    let g = Mat::from_elem(self.value(*a).raw_dim(), dy[[0, 0]]);
                    acc(&mut grads, *a, g);
                }
            }
        }

        let mut out = self.params.zeros_like();
        for (id, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads[v.0].take() {
                    out[id] = g;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of `f` against its tape gradient, for every
    /// entry of every parameter.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let analytic = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let h = 1e-5;
        for id in 0..store.len() {
            for idx in 0..store.values()[id].len() {
                let (r, c) = (idx / store.values()[id].ncols(), idx % store.values()[id].ncols());
                let orig = store.values()[id][[r, c]];
                store.values_mut()[id][[r, c]] = orig + h;
                let up = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                store.values_mut()[id][[r, c]] = orig - h;
                let down = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                store.values_mut()[id][[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[id][[r, c]];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-6,
                    "param {} [{r},{c}]: analytic {a} numeric {numeric}",
                    store.names()[id]
                );
            }
        }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]);
        s.add("w", array![[0.2, -0.1], [0.5, 0.3], [-0.4, 0.9]]);
        s.add("r", array![[0.7, -0.2, 1.3]]);
        s
    }

    #[test]
    fn matmul_and_broadcast_ops() {
        let mut s = store();
        check(&mut s, |g| {
            let x = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let r = g.param(ParamId(2));
            let a = g.add_row(x, r);
            let b = g.mul_row(a, r);
            let c = g.matmul(b, w);
            let d = g.matmul_t(c, c);
            let e = g.square(d);
            g.sum(e)
        });
    }

    #[test]
    fn normalisation_and_activations() {
        let mut s = store();
        check(&mut s, |g| {
            let x = g.param(ParamId(0));
            let r = g.param(ParamId(2));
            let n = g.layer_norm(x);
            let a = g.gelu(n);
            let b = g.mul_row(a, r);
            let c = g.causal_softmax(b);
            let d = g.log_softmax(b);
            let e = g.mul(c, d);
            g.mean(e)
        });
    }

    #[test]
    fn structural_ops() {
        let mut s = store();
        check(&mut s, |g| {
            let x = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let rows = g.gather_rows(w, &[2, 0, 2]);
            let top = g.slice_rows(rows, 1, 2);
            let left = g.slice_cols(x, 0, 2);
            let cat = g.concat_rows(&[top, left]);
            let wide = g.concat_cols(&[cat, cat]);
            let sm = g.softmax(wide);
            let sh = g.add_scalar(sm, 2.0);
            let l = g.ln(sh);
            let inv = g.recip(sh);
            let d = g.sub(l, inv);
            let sc = g.scale(d, 3.0);
            g.sum(sc)
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        let p = g.causal_softmax(x);
        let p = g.value(p);
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[0, 1]], 0.0);
        assert_eq!(p[[1, 2]], 0.0);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_param_handles_share_a_node() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.param(ParamId(1));
        let b = g.param(ParamId(1));
        assert_eq!(a, b);
    }

    #[test]
    fn untouched_params_get_zero_grads() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.param(ParamId(0));
        let l = g.sum(x);
        let grads = g.backward(l);
        assert_eq!(grads[0], Mat::ones((2, 3)));
        assert_eq!(grads[1], Mat::zeros((3, 2)));
    }
}
