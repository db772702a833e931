//! Recorded computation tape with exact reverse-mode gradients.
//!
//! All tape values are rank-2 (`[rows, cols]`); scalars are `[1, 1]`. Shape
//! misuse inside the tape is a programming error and panics; public model
//! entry points validate shapes before recording.

use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamStore};
use super::tensor::{
    dot, log_softmax_in_place, matmul_into, matmul_nt_into, matmul_tn_into, softmax_in_place,
    Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    GroupMax(Var, Vec<usize>),
    PairwiseSum(Var, Var),
    Pick(Var, Vec<(usize, usize)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(vec![rows, cols], data)
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Distance to the nearest non-smooth point among nodes that depend on a
    /// parameter: |x| at ReLU inputs, and the gap between the two largest
    /// entries of each group max. A central difference whose stencil
    /// straddles such a point measures the kink, not the gradient. Exact
    /// zeros and exact ties are structural (identical rows, zero inputs with
    /// no bias), move together under any perturbation and are skipped.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) if self.nodes[x.0].requires_grad => {
                    margin = self.nodes[x.0].value.data().iter().filter(|v| **v != 0.0).fold(margin, |m, v| m.min(v.abs()));
                }
                Op::GroupMax(x, _) if self.nodes[x.0].requires_grad => {
                    let (r, c) = self.dims(*x);
                    let n = node.value.rows();
                    let k = r / n;
                    let src = self.nodes[x.0].value.data();
                    for g in 0..n {
                        for j in 0..c {
                            let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                            for m in 0..k {
                                let v = src[(g * k + m) * c + j];
                                if v > top {
                                    second = top;
                                    top = v;
                                } else if v > second && v < top {
                                    second = v;
                                }
                            }
                            if second > f64::NEG_INFINITY {
                                margin = margin.min(top - second);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (r, c) = value.dims2();
        let value = if value.shape().len() == 2 {
            value
        } else {
            Tensor::from_parts(vec![r, c], value.into_data())
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient but is not bound to a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {n}x{k} · {k2}x{m}");
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        self.push(mat(n, m, out), Op::MatMul(a, b), rg)
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt inner dims {n}x{k} · ({m}x{k2})ᵀ");
        let mut out = vec![0.0; n * m];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        self.push(mat(n, m, out), Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(mat(c, r, out), Op::Transpose(a), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ra, ca) = self.dims(a);
        assert_eq!((ra, ca), self.dims(b), "{name}: shape mismatch");
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        mat(ra, ca, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, "add", |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, "sub", |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, "mul", |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// x[r,c] + row[1,c] broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(row), (1, c), "add_row: bias shape");
        let b = self.value(row).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(mat(r, c, out), Op::AddRow(x, row), rg)
    }

    /// x[r,c] * row[1,c] broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(row), (1, c), "mul_row: gain shape");
        let g = self.value(row).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, gv) in chunk.iter_mut().zip(&g) {
                *o *= gv;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(mat(r, c, out), Op::MulRow(x, row), rg)
    }

    /// x[r,c] * col[r,1] broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(col), (r, 1), "mul_col: scale shape");
        let s = self.value(col).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (chunk, sv) in out.chunks_mut(c).zip(&s) {
            for o in chunk.iter_mut() {
                *o *= sv;
            }
        }
        let rg = self.rg(&[x, col]);
        self.push(mat(r, c, out), Op::MulCol(x, col), rg)
    }

    /// x * s for a [1,1] tape scalar s.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.dims(s), (1, 1), "scale_by: scalar expected");
        let sv = self.value(s).item();
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|v| v * sv).collect();
        let rg = self.rg(&[x, s]);
        self.push(mat(r, c, out), Op::ScaleBy(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|v| v * k).collect();
        let rg = self.rg(&[x]);
        self.push(mat(r, c, out), Op::Scale(x, k), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|v| f(*v)).collect();
        let rg = self.rg(&[x]);
        self.push(mat(r, c, out), op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(mat(r, c, out), Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(mat(r, c, out), Op::LogSoftmaxRows(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        let mut inv = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv.push(s);
        }
        let rg = self.rg(&[x]);
        self.push(mat(r, c, out), Op::LayerNorm(x, inv), rg)
    }

    /// x / sqrt(‖x‖² + eps) per row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(mat(r, c, out), Op::L2NormalizeRows(x, norms), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows: index {i} out of {r}");
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        self.push(mat(idx.len(), c, out), Op::GatherRows(x, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows: column mismatch");
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        self.push(mat(rows, c, out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.dims(p).0, r, "concat_cols: row mismatch");
                self.dims(p).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(mat(r, total, out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= r && len > 0, "slice_rows: {start}+{len} of {r}");
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        self.push(mat(len, c, out), Op::SliceRows(x, start), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= c && len > 0, "slice_cols: {start}+{len} of {c}");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(mat(r, len, out), Op::SliceCols(x, start), rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(r * c, rows * cols, "reshape: element count");
        let out = self.value(x).data().to_vec();
        let rg = self.rg(&[x]);
        self.push(mat(rows, cols, out), Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means: [r,c] -> [1,c].
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let rg = self.rg(&[x]);
        self.push(mat(1, c, out), Op::MeanRows(x), rg)
    }

    /// Max over consecutive groups of `k` rows: [n·k, c] -> [n, c].
    /// Ties resolve to the first row of the group.
    pub fn group_max(&mut self, x: Var, k: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(k > 0 && r % k == 0, "group_max: {r} rows not divisible by {k}");
        let n = r / k;
        let src = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut arg = vec![0usize; n * c];
        for g in 0..n {
            for m in 0..k {
                let row = g * k + m;
                for j in 0..c {
                    let v = src[row * c + j];
                    if v > out[g * c + j] {
                        out[g * c + j] = v;
                        arg[g * c + j] = row;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(mat(n, c, out), Op::GroupMax(x, arg), rg)
    }

    /// out[i·m + j] = a[i] + b[j] for a[n,h], b[m,h].
    pub fn pairwise_sum(&mut self, a: Var, b: Var) -> Var {
        let (n, h) = self.dims(a);
        let (m, h2) = self.dims(b);
        assert_eq!(h, h2, "pairwise_sum: width mismatch");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * m * h);
        for i in 0..n {
            let ar = &av[i * h..(i + 1) * h];
            for j in 0..m {
                let br = &bv[j * h..(j + 1) * h];
                out.extend(ar.iter().zip(br).map(|(x, y)| x + y));
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(mat(n * m, h, out), Op::PairwiseSum(a, b), rg)
    }

    /// Select individual entries into a [1, len] row.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let out: Vec<f64> = coords
            .iter()
            .map(|&(i, j)| {
                assert!(i < r && j < c, "pick: ({i},{j}) out of {r}x{c}");
                src[i * c + j]
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push(mat(1, coords.len(), out), Op::Pick(x, coords.to_vec()), rg)
    }

    /// Gradients of a scalar with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass reduced to stored-parameter gradients.
    pub fn backward_params(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.backward(loss)?;
        let mut out = ParamGrads::default();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.get(v) {
                out.grads.insert(id, g.clone());
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let (r, c) = node.value.dims2();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_nt_into(g, self.value(*b).data(), &mut da, n, m, k);
                    acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_tn_into(self.value(*a).data(), g, &mut db, n, k, m);
                    acc(grads, *b, &db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).0;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_into(g, self.value(*b).data(), &mut da, n, m, k);
                    acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; m * k];
                    matmul_tn_into(g, self.value(*a).data(), &mut db, n, m, k);
                    acc(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g[i * c + j];
                    }
                }
                acc(grads, *a, &da);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    acc(grads, *a, &d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    acc(grads, *b, &d);
                }
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, g);
                if self.requires_grad(*row) {
                    let mut d = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (o, v) in d.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc(grads, *row, &d);
                }
            }
            Op::MulRow(x, row) => {
                let gain = self.value(*row).data();
                if self.requires_grad(*x) {
                    let mut d = g.to_vec();
                    for chunk in d.chunks_mut(c) {
                        for (o, s) in chunk.iter_mut().zip(gain) {
                            *o *= s;
                        }
                    }
                    acc(grads, *x, &d);
                }
                if self.requires_grad(*row) {
                    let xv = self.value(*x).data();
                    let mut d = vec![0.0; c];
                    for (gc, xc) in g.chunks(c).zip(xv.chunks(c)) {
                        for j in 0..c {
                            d[j] += gc[j] * xc[j];
                        }
                    }
                    acc(grads, *row, &d);
                }
            }
            Op::MulCol(x, col) => {
                let s = self.value(*col).data();
                if self.requires_grad(*x) {
                    let mut d = g.to_vec();
                    for (chunk, sv) in d.chunks_mut(c).zip(s) {
                        for o in chunk.iter_mut() {
                            *o *= sv;
                        }
                    }
                    acc(grads, *x, &d);
                }
                if self.requires_grad(*col) {
                    let xv = self.value(*x).data();
                    let d: Vec<f64> = g.chunks(c).zip(xv.chunks(c)).map(|(gc, xc)| dot(gc, xc)).collect();
                    acc(grads, *col, &d);
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                if self.requires_grad(*x) {
                    let d: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    acc(grads, *x, &d);
                }
                if self.requires_grad(*s) {
                    acc(grads, *s, &[dot(g, self.value(*x).data())]);
                }
            }
            Op::Scale(x, k) => {
                let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                acc(grads, *x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(a, y)| a * y).collect();
                acc(grads, *x, &d);
            }
            Op::Log(x) => {
                let d: Vec<f64> = g.iter().zip(self.value(*x).data()).map(|(a, v)| a / v).collect();
                acc(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(a, y)| a * (1.0 - y * y)).collect();
                acc(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(a, y)| a * y * (1.0 - y)).collect();
                acc(grads, *x, &d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(a, v)| if *v > 0.0 { *a } else { 0.0 })
                    .collect();
                acc(grads, *x, &d);
            }
            Op::SoftmaxRows(x) => {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let s = dot(y, gy);
                    for j in 0..c {
                        d[i * c + j] = y[j] * (gy[j] - s);
                    }
                }
                acc(grads, *x, &d);
            }
            Op::LogSoftmaxRows(x) => {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let s: f64 = gy.iter().sum();
                    for j in 0..c {
                        d[i * c + j] = gy[j] - y[j].exp() * s;
                    }
                }
                acc(grads, *x, &d);
            }
            Op::LayerNorm(x, inv) => {
                let mut d = vec![0.0; r * c];
                let n = c as f64;
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let sg: f64 = gy.iter().sum();
                    let sgy = dot(gy, y);
                    for j in 0..c {
                        d[i * c + j] = inv[i] / n * (n * gy[j] - sg - y[j] * sgy);
                    }
                }
                acc(grads, *x, &d);
            }
            Op::L2NormalizeRows(x, norms) => {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let s = dot(y, gy);
                    for j in 0..c {
                        d[i * c + j] = (gy[j] - y[j] * s) / norms[i];
                    }
                }
                acc(grads, *x, &d);
            }
            Op::GatherRows(x, idx) => {
                let (xr, _) = self.dims(*x);
                let mut d = vec![0.0; xr * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[k * c + j];
                    }
                }
                acc(grads, *x, &d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        acc(grads, p, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * c + start..i * c + start + w]);
                        }
                        acc(grads, p, &d);
                    }
                    start += w;
                }
            }
            Op::SliceRows(x, start) => {
                let mut d = vec![0.0; self.value(*x).numel()];
                d[start * c..start * c + r * c].copy_from_slice(g);
                acc(grads, *x, &d);
            }
            Op::SliceCols(x, start) => {
                let xc = self.dims(*x).1;
                let mut d = vec![0.0; r * xc];
                for i in 0..r {
                    d[i * xc + start..i * xc + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                acc(grads, *x, &d);
            }
            Op::Reshape(x) => acc(grads, *x, g),
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                acc(grads, *x, &d);
            }
            Op::MeanRows(x) => {
                let xr = self.dims(*x).0;
                let mut d = Vec::with_capacity(xr * c);
                for _ in 0..xr {
                    d.extend(g.iter().map(|v| v / xr as f64));
                }
                acc(grads, *x, &d);
            }
            Op::GroupMax(x, arg) => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (k, &row) in arg.iter().enumerate() {
                    let j = k % c;
                    d[row * c + j] += g[k];
                }
                acc(grads, *x, &d);
            }
            Op::PairwiseSum(a, b) => {
                let (n, h) = self.dims(*a);
                let m = self.dims(*b).0;
                let mut da = vec![0.0; n * h];
                let mut db = vec![0.0; m * h];
                for i in 0..n {
                    for j in 0..m {
                        let gr = &g[(i * m + j) * h..(i * m + j + 1) * h];
                        for t in 0..h {
                            da[i * h + t] += gr[t];
                            db[j * h + t] += gr[t];
                        }
                    }
                }
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Pick(x, coords) => {
                let xc = self.dims(*x).1;
                let mut d = vec![0.0; self.value(*x).numel()];
                for (k, &(i, j)) in coords.iter().enumerate() {
                    d[i * xc + j] += g[k];
                }
                acc(grads, *x, &d);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&Vec<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Gradients keyed by stored parameter. Absent keys have zero gradient.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub grads: BTreeMap<ParamId, Vec<f64>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    /// Sum `other` into `self`; the reduction order is fixed by the caller.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(e) => e.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_parts(vec![1, v.len()], v.to_vec())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn kink_margin_sees_relu_and_group_max() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_parts(vec![4, 2], vec![0.5, -2.0, 0.3, 1.0, -0.01, 4.0, 0.2, 3.0]));
        let c = g.constant(row(&[0.0, 0.001]));
        g.relu(c);
        let z = g.leaf(Tensor::from_parts(vec![2, 1], vec![0.0, 7.0]));
        g.relu(z);
        g.group_max(z, 1);
        let tie = g.leaf(Tensor::from_parts(vec![2, 1], vec![3.0, 3.0]));
        g.group_max(tie, 2);
        assert_eq!(g.kink_margin(), 7.0);
        g.relu(x);
        assert_eq!(g.kink_margin(), 0.01);
        g.group_max(x, 2);
        assert!((g.kink_margin() - 0.01).abs() < 1e-15);
        let y = g.leaf(Tensor::from_parts(vec![2, 1], vec![1.0, 1.0005]));
        g.group_max(y, 2);
        assert!((g.kink_margin() - 0.0005).abs() < 1e-12);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0]));
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &vec![2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0]));
        let k = g.constant(row(&[3.0, 4.0]));
        let p = g.mul(x, k);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &vec![3.0, 4.0]);
        assert!(grads.get(k).is_none() || !g.requires_grad(k));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0]));
        let d = g.detach(x);
        let sq = g.mul(d, d);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }
}
