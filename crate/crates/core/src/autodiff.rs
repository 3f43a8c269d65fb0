//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are borrowed from a [`ParamStore`] without copying; calling
//! [`Graph::backward`] walks the tape once in reverse.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Matrix};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    /// Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
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

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.values.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> ParamGrads<T> {
        ParamGrads { grads: self.values.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.grads.iter()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.grads[id.0]
    }

    pub fn sq_norm(&self) -> T {
        self.grads.iter().map(Matrix::sq_norm).sum()
    }

    pub fn scale(&mut self, c: T) {
        for g in &mut self.grads {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<T>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Row(Var, usize),
    EmbedMean { table: Var, ids: Vec<usize> },
    Cosine(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Mse(Var, Var),
}

enum Value<'p, T> {
    Owned(Matrix<T>),
    Borrowed(&'p Matrix<T>),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
}

const LN_EPS: f64 = 1e-5;

/// Recording of one forward computation.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    param_vars: Vec<Option<Var>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the seeded output with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::with_capacity(1024), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    /// A constant (or an input whose gradient the caller wants to read back).
    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: Value::Borrowed(self.params.get(id)), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul shape mismatch");
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm_nn(va.rows(), va.cols(), vb.cols(), va.as_slice(), vb.as_slice(), out.as_mut_slice());
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_t shape mismatch");
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm_nt(va.rows(), va.cols(), vb.rows(), va.as_slice(), vb.as_slice(), out.as_mut_slice());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), vb.shape(), "sub shape mismatch");
        for (x, &y) in out.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *x -= y;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// Adds the row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        assert_eq!((1, out.cols()), vb.shape(), "add_row shape mismatch");
        for i in 0..out.rows() {
            for (x, &y) in out.row_mut(i).iter_mut().zip(vb.as_slice()) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the 1x1 variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, mask: Vec<T>) -> Var {
        let va = self.value(a);
        assert_eq!(mask.len(), va.len());
        let data = va.as_slice().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Dropout(a, mask))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let (g, b) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        assert_eq!(g.len(), cols);
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = vx.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            let o = out.row_mut(i);
            for j in 0..cols {
                let h = (row[j] - mean) * r;
                xhat[i * cols + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`,
    /// split into `heads` column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, d) = vq.shape();
        let n = vk.rows();
        assert_eq!(vk.cols(), d);
        assert_eq!(vv.shape(), (n, d));
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); heads * m * n];
        let mut out = Matrix::zeros(m, d);
        for h in 0..heads {
            let cs = h * dh;
            for i in 0..m {
                let qi = &vq.row(i)[cs..cs + dh];
                let p = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
                for j in 0..n {
                    p[j] = dot(qi, &vk.row(j)[cs..cs + dh]) * scale;
                }
                softmax_in_place(p);
                let o = &mut out.row_mut(i)[cs..cs + dh];
                for j in 0..n {
                    let pj = p[j];
                    for (oc, &vc) in o.iter_mut().zip(&vv.row(j)[cs..cs + dh]) {
                        *oc += pj * vc;
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        self.push(out, Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows width mismatch");
            rows += vp.rows();
            data.extend_from_slice(vp.as_slice());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + vp.cols()].copy_from_slice(vp.row(i));
            }
            off += vp.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let out = Matrix::row_vector(self.value(a).row(i).to_vec());
        self.push(out, Op::Row(a, i))
    }

    /// Mean of the embedding-table rows selected by `ids`; an empty id list
    /// gives the zero row.
    pub fn embed_mean(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = vec![T::zero(); vt.cols()];
        if !ids.is_empty() {
            for &id in ids {
                for (o, &x) in out.iter_mut().zip(vt.row(id)) {
                    *o += x;
                }
            }
            let inv = T::one() / T::from_usize(ids.len()).unwrap();
            out.iter_mut().for_each(|o| *o *= inv);
        }
        self.push(Matrix::row_vector(out), Op::EmbedMean { table, ids: ids.to_vec() })
    }

    /// Cosine similarity of two row vectors as a 1x1 node. Zero vectors give 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let c = cosine(self.value(a).as_slice(), self.value(b).as_slice());
        self.push(Matrix::scalar(c), Op::Cosine(a, b))
    }

    /// Mean token cross-entropy over rows with a target; rows with `None`
    /// are ignored. No targets at all gives 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len(), "one target per logit row");
        let cols = vl.cols();
        let mut probs = vec![T::zero(); vl.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            let p = &mut probs[i * cols..(i + 1) * cols];
            p.copy_from_slice(vl.row(i));
            if let Some(t) = *t {
                let row = vl.row(i);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
                total += lse - row[t];
                count += 1;
            }
            softmax_in_place(p);
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_usize(count).unwrap() };
        self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = T::from_usize(va.len().max(1)).unwrap();
        let s: T = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Matrix::scalar(s / n), Op::Mse(a, b))
    }

    /// Reverse pass seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(output).shape();
        grads[output.0] = Some(Matrix::filled(r, c, T::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds the parameter gradients in `grads` into `into`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, into: &mut ParamGrads<T>) {
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = &grads.grads[v.0] {
                    into.grads[pid].add_assign(g);
                }
            }
        }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Matrix<T>>], v: Var) -> &'a mut Matrix<T> {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Matrix::zeros(r, c));
        }
        slot.as_mut().unwrap()
    }

    fn backprop_node(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                gemm_nt(m, n, k, g.as_slice(), vb.as_slice(), self.acc(grads, *a).as_mut_slice());
                gemm_tn(k, m, n, va.as_slice(), g.as_slice(), self.acc(grads, *b).as_mut_slice());
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ, a: m×k, b: n×k
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                gemm_nn(m, n, k, g.as_slice(), vb.as_slice(), self.acc(grads, *a).as_mut_slice());
                gemm_tn(n, m, k, g.as_slice(), va.as_slice(), self.acc(grads, *b).as_mut_slice());
            }
            Op::Add(a, b) => {
                self.acc(grads, *a).add_assign(g);
                self.acc(grads, *b).add_assign(g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a).add_assign(g);
                let gb = self.acc(grads, *b);
                for (x, &y) in gb.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *x -= y;
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a).add_assign(g);
                let gb = self.acc(grads, *b);
                for r in 0..g.rows() {
                    for (x, &y) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = self.acc(grads, *a);
                for (x, &y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *x += y * *c;
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                let ds: T = g.as_slice().iter().zip(self.value(*a).as_slice()).map(|(&x, &y)| x * y).sum();
                let ga = self.acc(grads, *a);
                for (x, &y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *x += y * sv;
                }
                self.acc(grads, *s).as_mut_slice()[0] += ds;
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let ga = self.acc(grads, *a);
                for ((x, &gy), &xv) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(va.as_slice()) {
                    *x += gy * gelu_grad(xv);
                }
            }
            Op::Sigmoid(a) => {
                let out = self.value(Var(i));
                let ga = self.acc(grads, *a);
                for ((x, &gy), &y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                    *x += gy * y * (T::one() - y);
                }
            }
            Op::Dropout(a, mask) => {
                let ga = self.acc(grads, *a);
                for ((x, &gy), &m) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(mask) {
                    *x += gy * m;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).as_slice().to_vec();
                let (rows, cols) = g.shape();
                let n = T::from_usize(cols).unwrap();
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..cols {
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for j in 0..cols {
                        let d = gr[j] * gam[j];
                        dx[r * cols + j] = rstd[r] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                add_slice(self.acc(grads, *x).as_mut_slice(), &dx);
                add_slice(self.acc(grads, *gamma).as_mut_slice(), &dgamma);
                add_slice(self.acc(grads, *beta).as_mut_slice(), &dbeta);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (m, d) = vq.shape();
                let n = vk.rows();
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut dq = vec![T::zero(); m * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut dp = vec![T::zero(); n];
                for h in 0..*heads {
                    let cs = h * dh;
                    for i in 0..m {
                        let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
                        let go = &g.row(i)[cs..cs + dh];
                        let mut weighted = T::zero();
                        for j in 0..n {
                            dp[j] = dot(go, &vv.row(j)[cs..cs + dh]);
                            weighted += dp[j] * p[j];
                            let dvj = &mut dv[j * d + cs..j * d + cs + dh];
                            for (x, &y) in dvj.iter_mut().zip(go) {
                                *x += p[j] * y;
                            }
                        }
                        let qi = &vq.row(i)[cs..cs + dh];
                        for j in 0..n {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &vk.row(j)[cs..cs + dh];
                            let dqi = &mut dq[i * d + cs..i * d + cs + dh];
                            for (x, &y) in dqi.iter_mut().zip(kj) {
                                *x += ds * y;
                            }
                            let dkj = &mut dk[j * d + cs..j * d + cs + dh];
                            for (x, &y) in dkj.iter_mut().zip(qi) {
                                *x += ds * y;
                            }
                        }
                    }
                }
                add_slice(self.acc(grads, *q).as_mut_slice(), &dq);
                add_slice(self.acc(grads, *k).as_mut_slice(), &dk);
                add_slice(self.acc(grads, *v).as_mut_slice(), &dv);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                if rows == 0 {
                    return;
                }
                let inv = T::one() / T::from_usize(rows).unwrap();
                let ga = self.acc(grads, *a);
                for r in 0..rows {
                    for (x, &y) in ga.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *x += y * inv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_slice(self.acc(grads, p).as_mut_slice(), &g.as_slice()[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = self.acc(grads, p);
                    for r in 0..g.rows() {
                        add_slice(gp.row_mut(r), &g.row(r)[off..off + w]);
                    }
                    off += w;
                }
            }
            Op::Row(a, r) => {
                add_slice(self.acc(grads, *a).row_mut(*r), g.as_slice());
            }
            Op::EmbedMean { table, ids } => {
                if ids.is_empty() {
                    return;
                }
                let inv = T::one() / T::from_usize(ids.len()).unwrap();
                let gt = self.acc(grads, *table);
                for &id in ids {
                    for (x, &y) in gt.row_mut(id).iter_mut().zip(g.as_slice()) {
                        *x += y * inv;
                    }
                }
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a).as_slice(), self.value(*b).as_slice());
                let na = dot(va, va);
                let nb = dot(vb, vb);
                let denom = (na * nb).sqrt();
                if denom == T::zero() {
                    return;
                }
                let c = dot(va, vb) / denom;
                let gy = g.item();
                let ga: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| gy * (y / denom - c * x / na)).collect();
                let gb: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| gy * (x / denom - c * y / nb)).collect();
                add_slice(self.acc(grads, *a).as_mut_slice(), &ga);
                add_slice(self.acc(grads, *b).as_mut_slice(), &gb);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let cols = self.value(*logits).cols();
                let scale = g.item() / T::from_usize(count).unwrap();
                let gl = self.acc(grads, *logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let p = &probs[r * cols..(r + 1) * cols];
                    let row = gl.row_mut(r);
                    for j in 0..cols {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        row[j] += scale * (p[j] - onehot);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = T::from_usize(va.len().max(1)).unwrap();
                let c = g.item() * T::lit(2.0) / n;
                let diff: Vec<T> = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| c * (x - y)).collect();
                add_slice(self.acc(grads, *a).as_mut_slice(), &diff);
                let gb = self.acc(grads, *b);
                for (x, &y) in gb.as_mut_slice().iter_mut().zip(&diff) {
                    *x -= y;
                }
            }
        }
    }
}

fn add_slice<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Cosine similarity; `cosine(a, a)` is exactly 1 for any finite non-zero `a`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = dot(a, a);
    let nb = dot(b, b);
    let denom = (na * nb).sqrt();
    if denom == T::zero() {
        T::zero()
    } else {
        dot(a, b) / denom
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
