//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Parameters live in a [`ParamStore`] that a [`Graph`] borrows read-only, so
//! many graphs (one per training instance) can be evaluated against the same
//! parameters and their [`Gradients`] summed afterwards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    value: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; parameter names are fixed by model code.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter gradient accumulators, indexed like the owning store.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::all_finite)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a` (r × c) plus a `1 × c` row broadcast over every row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Row softmax over a `1 × n` input; masked entries are exactly 0.
    Softmax(Var),
    Select(Var, usize),
    Sum(Var),
    /// Per-row L2 normalisation; zero rows stay zero.
    NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Matrix>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(value)) => value,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for i in 0..value.rows() {
            for (x, y) in value.row_mut(i).iter_mut().zip(r.data()) {
                *x += y;
            }
        }
        debug_assert_eq!(cols, r.cols());
        self.push(Op::AddRow(a, row), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Matrix::from_vec(rows, cols, data),
        )
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(va.rows(), len);
        for r in 0..va.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), value)
    }

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let va = self.value(a);
        let rows: Vec<&[f64]> = ids.iter().map(|&i| va.row(i)).collect();
        let value = Matrix::from_rows(&rows, va.cols());
        self.push(Op::GatherRows(a, ids.to_vec()), value)
    }

    /// Softmax over a row vector. Entries with `mask[i] == true` receive
    /// probability exactly 0 and take no part in the normaliser.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "softmax expects a row vector");
        let value = Matrix::row_vector(softmax_values(va.data(), mask));
        self.push(Op::Softmax(a), value)
    }

    pub fn select(&mut self, a: Var, index: usize) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).data()[index]]);
        self.push(Op::Select(a, index), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(Op::Sum(a), value)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..va.rows() {
            let norm = row_norm(va.row(r));
            let row = value.row_mut(r);
            if norm > 0.0 {
                for x in row.iter_mut() {
                    *x /= norm;
                }
            } else {
                row.fill(0.0);
            }
        }
        self.push(Op::NormalizeRows(a), value)
    }

    /// Reverse sweep from a scalar node. Returns gradients for every parameter
    /// that the loss depends on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = || node.value.as_ref().expect("value");
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, &gy),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, gy.matmul(&vb.transpose()));
                    acc(&mut grads, *b, va.transpose().matmul(&gy));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (x, y) in gr.data_mut().iter_mut().zip(gy.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, gy.map(|x| -x));
                    acc(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, zip_with(&gy, vb, |g, x| g * x));
                    acc(&mut grads, *b, zip_with(&gy, va, |g, x| g * x));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, gy.map(|x| x * s)),
                Op::Tanh(a) => acc(&mut grads, *a, zip_with(&gy, y(), |g, t| g * (1.0 - t * t))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_with(&gy, y(), |g, s| g * s * (1.0 - s))),
                Op::Relu(a) => {
                    acc(
                        &mut grads,
                        *a,
                        zip_with(&gy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                    );
                }
                Op::Ln(a) => acc(&mut grads, *a, zip_with(&gy, self.value(*a), |g, x| g / x)),
                Op::Transpose(a) => acc(&mut grads, *a, gy.transpose()),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Matrix::zeros(gy.rows(), cols);
                        for r in 0..gy.rows() {
                            gp.row_mut(r)
                                .copy_from_slice(&gy.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let cols = gy.cols();
                        let data = gy.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        acc(&mut grads, p, Matrix::from_vec(rows, cols, data));
                    }
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..gy.rows() {
                        ga.row_mut(r)[*start..*start + gy.cols()].copy_from_slice(gy.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, ids) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for (r, &i) in ids.iter().enumerate() {
                        for (x, g) in ga.row_mut(i).iter_mut().zip(gy.row(r)) {
                            *x += g;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    // masked entries have p = 0 and so receive no gradient
                    let p = y();
                    let dot: f64 = p.data().iter().zip(gy.data()).map(|(p, g)| p * g).sum();
                    acc(&mut grads, *a, zip_with(&gy, p, |g, p| p * (g - dot)));
                }
                Op::Select(a, index) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    ga.data_mut()[*index] = gy.data()[0];
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        Matrix::filled(va.rows(), va.cols(), gy.data()[0]),
                    );
                }
                Op::NormalizeRows(a) => {
                    let va = self.value(*a);
                    let out_v = y();
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let norm = row_norm(va.row(r));
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = out_v.row(r);
                        let gr = gy.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((x, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *x = (gv - yv * dot) / norm;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with exact zeros at masked positions. If every entry is masked the
/// result is all zeros.
pub fn softmax_values(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let masked = |i: usize| mask.is_some_and(|m| m[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|(i, _)| !masked(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; x.len()];
    }
    let exps: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if masked(i) { 0.0 } else { (v - max).exp() })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
