//! Dense row-major matrices and a small reverse-mode autodiff tape.
//!
//! Everything is `f64`. The tape records one node per operation; calling
//! [`Tape::backward`] walks it in reverse and accumulates gradients only for
//! nodes that transitively depend on a trainable leaf.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(self, false, other, false, 1.0, &mut out, 0.0);
        out
    }
}

/// `c = alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool, alpha: f64, c: &mut Mat, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe the owned buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogClamp(Var, f64),
    ColMax(Var, Vec<usize>),
    MeanRows(Var),
    RepeatRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentMax { src: Var, empty: Var, arg: Vec<Option<Vec<usize>>> },
    NormalizeRows(Var),
    Sum(Var),
    PickMean(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
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

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Mat::zeros(av.rows, bv.rows);
        gemm(av, false, bv, true, 1.0, &mut value, 0.0);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shape mismatch");
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a 1×cols row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows, 1, "add_row expects a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols, rv.cols, "add_row width mismatch");
        let rvd = rv.data.clone();
        for r in 0..value.rows {
            for (x, b) in value.row_mut(r).iter_mut().zip(&rvd) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let av = self.value(a);
        let value = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| x * k).collect());
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| x.tanh()).collect());
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|&x| gelu(x)).collect());
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// `ln(max(a, floor))`, zero gradient where clamped.
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        let av = self.value(a);
        let value =
            Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| x.max(floor).ln()).collect());
        let ng = self.needs(a);
        self.push(value, Op::LogClamp(a, floor), ng)
    }

    /// Column-wise max over rows: `rows×cols → 1×cols`. Ties go to the first row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.rows > 0, "col_max of empty matrix");
        let mut arg = vec![0usize; av.cols];
        let mut out = av.row(0).to_vec();
        for r in 1..av.rows {
            for (c, &v) in av.row(r).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        let value = Mat::from_vec(1, av.cols, out);
        let ng = self.needs(a);
        self.push(value, Op::ColMax(a, arg), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.rows > 0, "mean_rows of empty matrix");
        let mut out = vec![0.0; av.cols];
        for r in 0..av.rows {
            for (o, v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let n = av.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let value = Mat::from_vec(1, av.cols, out);
        let ng = self.needs(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Stacks `n` copies of a row vector.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(n * av.cols);
        for _ in 0..n {
            data.extend_from_slice(&av.data);
        }
        let value = Mat::from_vec(n, av.cols, data);
        let ng = self.needs(a);
        self.push(value, Op::RepeatRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols, "slice out of range");
        let mut value = Mat::zeros(av.rows, width);
        for r in 0..av.rows {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup, e.g. an embedding table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let mut value = Mat::zeros(idx.len(), tv.cols);
        for (i, &j) in idx.iter().enumerate() {
            value.row_mut(i).copy_from_slice(tv.row(j));
        }
        let ng = self.needs(table);
        self.push(value, Op::GatherRows(table, idx.to_vec()), ng)
    }

    /// Column-wise max of `src` over each row segment. Empty segments take the
    /// row vector `empty`.
    pub fn segment_max(&mut self, src: Var, segments: &[Vec<usize>], empty: Var) -> Var {
        let sv = self.value(src);
        let ev = self.value(empty);
        assert_eq!(ev.shape(), (1, sv.cols), "empty row shape mismatch");
        let mut value = Mat::zeros(segments.len(), sv.cols);
        let mut arg = Vec::with_capacity(segments.len());
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                value.row_mut(s).copy_from_slice(&ev.data);
                arg.push(None);
                continue;
            }
            let mut best = sv.row(seg[0]).to_vec();
            let mut which = vec![seg[0]; sv.cols];
            for &r in &seg[1..] {
                for (c, &v) in sv.row(r).iter().enumerate() {
                    if v > best[c] {
                        best[c] = v;
                        which[c] = r;
                    }
                }
            }
            value.row_mut(s).copy_from_slice(&best);
            arg.push(Some(which));
        }
        let ng = self.needs(src) || self.needs(empty);
        self.push(value, Op::SegmentMax { src, empty, arg }, ng)
    }

    /// Divides each row by its Euclidean norm. Rows must be nonzero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let ng = self.needs(a);
        self.push(value, Op::NormalizeRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a), ng)
    }

    /// `mean_i a[i, idx[i]]`
    pub fn pick_mean(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, idx.len(), "one index per row");
        let s: f64 = idx.iter().enumerate().map(|(i, &j)| av.get(i, j)).sum();
        let ng = self.needs(a);
        self.push(Mat::from_vec(1, 1, vec![s / idx.len() as f64]), Op::PickMean(a, idx.to_vec()), ng)
    }

    /// `Σ_k w_k · s_k` for 1×1 nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t),
            });
        }
        acc.unwrap_or_else(|| self.constant(Mat::zeros(1, 1)))
    }

    /// Reverse pass from a scalar node. Returns one optional gradient per node.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut d = Mat::zeros(av.rows, av.cols);
                    gemm(g, false, bv, true, 1.0, &mut d, 0.0);
                    acc(*a, d);
                }
                if self.needs(*b) {
                    let mut d = Mat::zeros(bv.rows, bv.cols);
                    gemm(av, true, g, false, 1.0, &mut d, 0.0);
                    acc(*b, d);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut d = Mat::zeros(av.rows, av.cols);
                    gemm(g, false, bv, false, 1.0, &mut d, 0.0);
                    acc(*a, d);
                }
                if self.needs(*b) {
                    let mut d = Mat::zeros(bv.rows, bv.cols);
                    gemm(g, true, av, false, 1.0, &mut d, 0.0);
                    acc(*b, d);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut d = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in d.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*row, d);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                let db = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                acc(*a, Mat::from_vec(g.rows, g.cols, da));
                acc(*b, Mat::from_vec(g.rows, g.cols, db));
            }
            Op::Scale(a, k) => {
                acc(*a, Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * k).collect()));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data.iter().zip(&y.data).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                acc(*a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data.iter().zip(&x.data).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                acc(*a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::LogClamp(a, floor) => {
                let x = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                    .collect();
                acc(*a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::ColMax(a, arg) => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.rows, av.cols);
                for (c, &r) in arg.iter().enumerate() {
                    d.data[r * av.cols + c] += g.data[c];
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let n = av.rows as f64;
                let mut d = Mat::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    for (o, gv) in d.row_mut(r).iter_mut().zip(&g.data) {
                        *o = gv / n;
                    }
                }
                acc(*a, d);
            }
            Op::RepeatRows(a) => {
                let mut d = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in d.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    let mut d = Mat::zeros(g.rows, w);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows;
                    let d = Mat::from_vec(h, g.cols, g.data[off * g.cols..(off + h) * g.cols].to_vec());
                    off += h;
                    acc(p, d);
                }
            }
            Op::GatherRows(table, idx) => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let mut d = Mat::zeros(tv.rows, tv.cols);
                    for (i, &j) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*table, d);
                }
            }
            Op::SegmentMax { src, empty, arg } => {
                let sv = self.value(*src);
                let mut ds = Mat::zeros(sv.rows, sv.cols);
                let mut de = Mat::zeros(1, sv.cols);
                for (s, which) in arg.iter().enumerate() {
                    match which {
                        None => {
                            for (o, v) in de.data.iter_mut().zip(g.row(s)) {
                                *o += v;
                            }
                        }
                        Some(rows) => {
                            for (c, &r) in rows.iter().enumerate() {
                                ds.data[r * sv.cols + c] += g.get(s, c);
                            }
                        }
                    }
                }
                acc(*src, ds);
                acc(*empty, de);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = Mat::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Mat::from_vec(av.rows, av.cols, vec![g.data[0]; av.data.len()]));
            }
            Op::PickMean(a, idx) => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.rows, av.cols);
                let w = g.data[0] / idx.len() as f64;
                for (i, &j) in idx.iter().enumerate() {
                    d.data[i * av.cols + j] += w;
                }
                acc(*a, d);
            }
        }
    }
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient for `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eps = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], input.shape());
            for e in 0..input.data.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == k {
                                m.data[e] += delta;
                            }
                            t.param(m)
                        })
                        .collect();
                    let l = build(&mut t, &vs);
                    t.scalar(l)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 5, &mut rng);
        let b = random(5, 4, &mut rng);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..4 {
                let naive: f64 = (0..5).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_of_dense_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(3, 4, &mut rng), random(4, 5, &mut rng), random(1, 5, &mut rng)];
        check(inputs, |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.gelu(h);
            let h = t.tanh(h);
            let s = t.softmax_rows(h);
            let l = t.log_clamp(s, 1e-12);
            let m = t.mul(l, h);
            t.sum(m)
        });
    }

    #[test]
    fn gradients_of_attention_shaped_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(4, 6, &mut rng), random(3, 6, &mut rng)];
        check(inputs, |t, v| {
            let q = t.slice_cols(v[0], 0, 3);
            let k = t.slice_cols(v[1], 3, 3);
            let s = t.matmul_t(q, k);
            let s = t.scale(s, 0.7);
            let a = t.softmax_rows(s);
            let val = t.slice_cols(v[1], 0, 3);
            let o = t.matmul(a, val);
            let o2 = t.concat_cols(&[o, q]);
            let st = t.concat_rows(&[o2, v[1]]);
            let mx = t.col_max(st);
            let mn = t.mean_rows(st);
            let r = t.repeat_rows(mx, 2);
            let r2 = t.repeat_rows(mn, 2);
            let p = t.mul(r, r2);
            t.sum(p)
        });
    }

    #[test]
    fn gradients_of_normalize_logsoftmax_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(3, 4, &mut rng), random(3, 4, &mut rng)];
        check(inputs, |t, v| {
            let a = t.normalize_rows(v[0]);
            let b = t.normalize_rows(v[1]);
            let s = t.matmul_t(a, b);
            let s = t.scale(s, 1.0 / 0.3);
            let l = t.log_softmax_rows(s);
            let p = t.pick_mean(l, &[0, 1, 2]);
            t.scale(p, -1.0)
        });
    }

    #[test]
    fn gradients_of_gather_and_segment_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![random(5, 3, &mut rng), random(1, 3, &mut rng)];
        check(inputs, |t, v| {
            let g = t.gather_rows(v[0], &[4, 0, 0, 2]);
            let sm = t.segment_max(v[0], &[vec![0, 1], vec![], vec![2, 3, 4]], v[1]);
            let s1 = t.sum(g);
            let sq = t.mul(sm, sm);
            let s2 = t.sum(sq);
            t.weighted_sum(&[(0.5, s1), (2.0, s2)])
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let p = t.param(Mat::from_vec(1, 2, vec![3.0, 4.0]));
        let m = t.mul(c, p);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data, vec![1.0, 2.0]);
    }
}
