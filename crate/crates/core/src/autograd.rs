//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass and discarded after
//! [`Graph::backward`]. Parameters enter the tape through [`Graph::param`]
//! and their gradients come back keyed by [`ParamId`].

use std::sync::Arc;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear map over rows: output row `i` is `Σ w · input[j]` for each
/// `(j, w)` in entry `i`.
#[derive(Clone, Debug)]
pub struct RowMix {
    pub input_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(input_rows: usize, indices: &[usize]) -> Self {
        Self {
            input_rows,
            entries: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Mean over each group of rows; empty groups yield a zero row.
    pub fn mean_pool(input_rows: usize, groups: &[Vec<usize>]) -> Self {
        Self {
            input_rows,
            entries: groups
                .iter()
                .map(|g| {
                    let w = 1.0 / g.len().max(1) as f64;
                    g.iter().map(|&i| (i, w)).collect()
                })
                .collect(),
        }
    }
}

/// Patch extraction for a convolution over an `h x w` grid stored as
/// `h*w` rows of `channels` columns. Output columns are ordered
/// `(ky, kx, channel)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Im2Col {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2Col {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn source(&self, orow: usize, ocol: usize, ky: usize, kx: usize) -> Option<usize> {
        let r = (orow * self.stride + ky) as isize - self.pad as isize;
        let c = (ocol * self.stride + kx) as isize - self.pad as isize;
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            None
        } else {
            Some(r as usize * self.width + c as usize)
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm(Var),
    L2Normalize(Var),
    RowMix(Var, Arc<RowMix>),
    Im2Col(Var, Arc<Im2Col>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    BoxCorners(Var),
    /// Scalar node whose local gradients were computed eagerly.
    External(Vec<(Var, Tensor)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by parameter id; `None` for parameters not on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds `other` into `self` parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter (used by
    /// gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = Tensor::matmul(self.value(a), self.value(b), ta, tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "add_row expects a 1 x cols row");
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "mul_row expects a 1 x cols row");
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let row = value.row_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a), rg)
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let row = value.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > NORM_EPS {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::L2Normalize(a), rg)
    }

    pub fn row_mix(&mut self, a: Var, map: Arc<RowMix>) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), map.input_rows, "row_mix input row count");
        let cols = x.cols();
        let mut value = Tensor::zeros(map.entries.len(), cols);
        for (i, entry) in map.entries.iter().enumerate() {
            let out = &mut value.data_mut()[i * cols..(i + 1) * cols];
            for &(j, w) in entry {
                for (o, v) in out.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::RowMix(a, map), rg)
    }

    pub fn im2col(&mut self, a: Var, spec: Arc<Im2Col>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), (spec.height * spec.width, spec.channels), "im2col input shape");
        let (oh, ow, k, ch) = (spec.out_height(), spec.out_width(), spec.kernel, spec.channels);
        let mut value = Tensor::zeros(oh * ow, k * k * ch);
        for orow in 0..oh {
            for ocol in 0..ow {
                let out = value.row_mut(orow * ow + ocol);
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(src) = spec.source(orow, ocol, ky, kx) {
                            let off = (ky * k + kx) * ch;
                            out[off..off + ch].copy_from_slice(x.row(src));
                        }
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::Im2Col(a, spec), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.rows(), "slice_rows out of range");
        let data = x.data()[start * x.cols()..end * x.cols()].to_vec();
        let value = Tensor::from_vec(end - start, x.cols(), data);
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Maps raw `N x 4` head output to corner-form boxes in `[0, 1]`: each
    /// axis takes the min and max of two sigmoids.
    pub fn box_corners(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols(), 4, "box head expects 4 columns");
        let mut value = Tensor::zeros(x.rows(), 4);
        for i in 0..x.rows() {
            let s: Vec<f64> = x.row(i).iter().map(|&v| sigmoid(v)).collect();
            let out = value.row_mut(i);
            out[0] = s[0].min(s[2]);
            out[2] = s[0].max(s[2]);
            out[1] = s[1].min(s[3]);
            out[3] = s[1].max(s[3]);
        }
        let rg = self.rg(a);
        self.push(value, Op::BoxCorners(a), rg)
    }

    /// Inserts a scalar whose gradients with respect to `inputs` were
    /// computed outside the tape.
    pub fn external(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).shape(), g.shape(), "external gradient shape");
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::External(inputs), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var, num_params: usize) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients {
            grads: vec![None; num_params],
        };
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                match &mut out.grads[pid.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g.clone()),
                }
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        out
    }

    /// Gradient of `root` with respect to arbitrary nodes (inputs created
    /// with [`Graph::input`]). Used by gradient checks.
    pub fn backward_to(&self, root: Var, wrt: &[Var]) -> Vec<Tensor> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut keep: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if wrt.iter().any(|w| w.0 == idx) {
                keep[idx] = Some(g.clone());
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        wrt.iter()
            .map(|w| {
                keep[w.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*w).rows(), self.value(*w).cols()))
            })
            .collect()
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    // C = op(A) op(B); dA = g op(B)^T (transposed back if ta)
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    if *ta {
                        gemm_acc(bv, g, *tb, true, &mut ga, 1.0);
                    } else {
                        gemm_acc(g, bv, false, !*tb, &mut ga, 1.0);
                    }
                    acc(*a, ga, grads);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    if *tb {
                        gemm_acc(g, av, true, *ta, &mut gb, 1.0);
                    } else {
                        gemm_acc(av, g, !*ta, false, &mut gb, 1.0);
                    }
                    acc(*b, gb, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let data = g.data().iter().zip(bv.data()).map(|(p, q)| p * q).collect();
                    acc(*a, Tensor::from_vec(g.rows(), g.cols(), data), grads);
                }
                if self.rg(*b) {
                    let data = g.data().iter().zip(av.data()).map(|(p, q)| p * q).collect();
                    acc(*b, Tensor::from_vec(g.rows(), g.cols(), data), grads);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if self.rg(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    acc(*row, gr, grads);
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (v, s) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                            *v *= s;
                        }
                    }
                    acc(*a, ga, grads);
                }
                if self.rg(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for ((s, gv), xv) in gr.data_mut().iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *s += gv * xv;
                        }
                    }
                    acc(*row, gr, grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s), grads),
            Op::Relu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*a, Tensor::from_vec(g.rows(), g.cols(), data), grads);
            }
            Op::Softmax(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for ((o, yv), gv) in ga.row_mut(i).iter_mut().zip(y).zip(gy) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, ga, grads);
            }
            Op::LayerNorm(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let row = x.row(i);
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let (y, gy) = (out.row(i), g.row(i));
                    let mg = gy.iter().sum::<f64>() / n;
                    let mgy = gy.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((o, yv), gv) in ga.row_mut(i).iter_mut().zip(y).zip(gy) {
                        *o = inv * (gv - mg - yv * mgy);
                    }
                }
                acc(*a, ga, grads);
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= NORM_EPS {
                        continue;
                    }
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for ((o, yv), gv) in ga.row_mut(i).iter_mut().zip(y).zip(gy) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                acc(*a, ga, grads);
            }
            Op::RowMix(a, map) => {
                let cols = g.cols();
                let mut ga = Tensor::zeros(map.input_rows, cols);
                for (i, entry) in map.entries.iter().enumerate() {
                    let gi = g.row(i);
                    for &(j, w) in entry {
                        for (o, v) in ga.row_mut(j).iter_mut().zip(gi) {
                            *o += w * v;
                        }
                    }
                }
                acc(*a, ga, grads);
            }
            Op::Im2Col(a, spec) => {
                let (oh, ow, k, ch) = (spec.out_height(), spec.out_width(), spec.kernel, spec.channels);
                let mut ga = Tensor::zeros(spec.height * spec.width, ch);
                for orow in 0..oh {
                    for ocol in 0..ow {
                        let gi = g.row(orow * ow + ocol);
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some(src) = spec.source(orow, ocol, ky, kx) {
                                    let off = (ky * k + kx) * ch;
                                    for (o, v) in ga.row_mut(src).iter_mut().zip(&gi[off..off + ch]) {
                                        *o += v;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*a, ga, grads);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let data = g.data()[start * g.cols()..(start + rows) * g.cols()].to_vec();
                    acc(p, Tensor::from_vec(rows, g.cols(), data), grads);
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, gp, grads);
                    }
                    off += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let c = x.cols();
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                acc(*a, ga, grads);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, ga, grads);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::filled(x.rows(), x.cols(), g.item()), grads);
            }
            Op::BoxCorners(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), 4);
                for i in 0..x.rows() {
                    let s: Vec<f64> = x.row(i).iter().map(|&v| sigmoid(v)).collect();
                    let gi = g.row(i);
                    let row = ga.row_mut(i);
                    for (lo, hi) in [(0usize, 2usize), (1, 3)] {
                        // ties route the min to the first raw coordinate
                        let (min_src, max_src) = if s[lo] <= s[hi] { (lo, hi) } else { (hi, lo) };
                        row[min_src] += gi[lo] * s[min_src] * (1.0 - s[min_src]);
                        row[max_src] += gi[hi] * s[max_src] * (1.0 - s[max_src]);
                    }
                }
                acc(*a, ga, grads);
            }
            Op::External(inputs) => {
                let scale = g.item();
                for (v, lg) in inputs {
                    acc(*v, lg.map(|x| x * scale), grads);
                }
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

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
