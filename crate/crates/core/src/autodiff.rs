//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node and
//! return a [`Var`] handle; parents always have smaller ids than their
//! children, so [`Tape::backward`] is a single sweep in descending id order.
//! The sweep order is fixed, which makes gradients bit-reproducible.
//!
//! Only the handful of primitives needed by the encoder, BEV pooling, grid
//! warping and the contrastive loss are provided. Every forward op checks its
//! result for NaN/Inf and fails instead of propagating them.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

/// Dense row-major tensor. A shape of `[]` is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TapeError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TapeError::Shape { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Builds an `[rows, cols]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TapeError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TapeError::Shape { op: "from_rows", lhs: vec![cols], rhs: vec![bad.len()] });
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize), TapeError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TapeError::Shape { op, lhs: self.shape.clone(), rhs: vec![0, 0] }),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Scale(Var, f64),
    Transpose(Var),
    ReduceSum(Var),
    MeanByGroup { input: Var, groups: Vec<Option<usize>>, counts: Vec<u32> },
    L2NormalizeRows { input: Var, eps: f64, norms: Vec<f64> },
    LogSumExpRows(Var),
    GatherRows { input: Var, index: Vec<usize> },
    MixRows { input: Var, taps: Vec<Vec<(usize, f64)>> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that influenced it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient data, or zeros of `len` when the node did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |t| t.data.clone())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> Result<&Tensor, TapeError> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(TapeError::UnknownVar(v.0))
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var, TapeError> {
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, TapeError> {
        self.push(Op::Leaf, value, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        let (n, k) = ta.matrix_dims("matmul")?;
        let (k2, m) = tb.matrix_dims("matmul")?;
        if k != k2 {
            return Err(TapeError::Shape { op: "matmul", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let data = matmul_raw(&ta.data, &tb.data, n, k, m);
        self.push(Op::MatMul(a, b), Tensor { shape: vec![n, m], data }, "matmul")
    }

    /// Elementwise sum. A `[n, m]` left operand also accepts a `[m]` right
    /// operand, added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
            let shape = ta.shape.clone();
            return self.push(Op::Add(a, b), Tensor { shape, data }, "add");
        }
        match (&ta.shape[..], &tb.shape[..]) {
            ([_, m], [m2]) if m == m2 => {
                let data = ta.data.chunks(*m).flat_map(|row| row.iter().zip(&tb.data).map(|(x, y)| x + y)).collect();
                let shape = ta.shape.clone();
                self.push(Op::AddRow(a, b), Tensor { shape, data }, "add")
            }
            _ => Err(TapeError::Shape { op: "add", lhs: ta.shape.clone(), rhs: tb.shape.clone() }),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        if ta.shape != tb.shape {
            return Err(TapeError::Shape { op: "mul", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push(Op::Mul(a, b), Tensor { shape, data }, "mul")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect() };
        self.push(Op::Relu(a), value, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x.tanh()).collect() };
        self.push(Op::Tanh(a), value, "tanh")
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x * alpha).collect() };
        self.push(Op::Scale(a, alpha), value, "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let (r, c) = t.matrix_dims("transpose")?;
        let value = Tensor { shape: vec![c, r], data: transpose_raw(&t.data, r, c) };
        self.push(Op::Transpose(a), value, "transpose")
    }

    /// Sum of all entries, as a scalar.
    pub fn reduce_sum(&mut self, a: Var) -> Result<Var, TapeError> {
        let s = self.val(a)?.data.iter().sum();
        self.push(Op::ReduceSum(a), Tensor::scalar(s), "reduce_sum")
    }

    /// Averages the rows of `a` ([n, d]) by group. Row `i` belongs to
    /// `groups[i]` or to none; the result is `[n_groups, d]` with all-zero rows
    /// for empty groups. Within a group the rows are summed in lexicographic
    /// order of their values, so the result does not depend on row order.
    pub fn reduce_mean_by_group(&mut self, a: Var, groups: &[Option<usize>], n_groups: usize) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let (n, d) = t.matrix_dims("reduce_mean_by_group")?;
        if groups.len() != n {
            return Err(TapeError::Shape { op: "reduce_mean_by_group", lhs: t.shape.clone(), rhs: vec![groups.len()] });
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for (i, g) in groups.iter().enumerate() {
            if let Some(g) = *g {
                if g >= n_groups {
                    return Err(TapeError::InvalidArgument {
                        op: "reduce_mean_by_group",
                        msg: format!("group {g} out of range {n_groups}"),
                    });
                }
                members[g].push(i);
            }
        }
        let mut data = vec![0.0; n_groups * d];
        let mut counts = vec![0u32; n_groups];
        for (g, rows) in members.iter_mut().enumerate() {
            if rows.is_empty() {
                continue;
            }
            rows.sort_by(|&i, &j| lex_cmp(t.row(i), t.row(j)));
            let out = &mut data[g * d..(g + 1) * d];
            for &i in rows.iter() {
                for (o, v) in out.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            let c = rows.len() as f64;
            out.iter_mut().for_each(|o| *o /= c);
            counts[g] = rows.len() as u32;
        }
        let op = Op::MeanByGroup { input: a, groups: groups.to_vec(), counts };
        self.push(op, Tensor { shape: vec![n_groups, d], data }, "reduce_mean_by_group")
    }

    /// Divides every row by `max(||row||_2, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let (r, c) = t.matrix_dims("l2_normalize_rows")?;
        let mut data = t.data.clone();
        let mut norms = Vec::with_capacity(r);
        for row in data.chunks_mut(c.max(1)).take(r) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = n.max(eps);
            row.iter_mut().for_each(|x| *x /= denom);
            norms.push(n);
        }
        let value = Tensor { shape: vec![r, c], data };
        self.push(Op::L2NormalizeRows { input: a, eps, norms }, value, "l2_normalize_rows")
    }

    /// `log(sum_j exp(a[i, j]))` per row, evaluated with the max shift.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let (r, c) = t.matrix_dims("log_sum_exp_rows")?;
        if c == 0 {
            return Err(TapeError::InvalidArgument { op: "log_sum_exp_rows", msg: "zero columns".into() });
        }
        let data = (0..r)
            .map(|i| {
                let row = t.row(i);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Op::LogSumExpRows(a), Tensor { shape: vec![r], data }, "log_sum_exp_rows")
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let (r, c) = t.matrix_dims("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(TapeError::InvalidArgument { op: "gather_rows", msg: format!("row {bad} out of range {r}") });
        }
        let data = index.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor { shape: vec![index.len(), c], data };
        self.push(Op::GatherRows { input: a, index: index.to_vec() }, value, "gather_rows")
    }

    /// Sparse linear map on rows: `out[r] = sum_k w_k * a[src_k]` over
    /// `taps[r] = [(src_k, w_k), ...]`, accumulated in tap order.
    pub fn mix_rows(&mut self, a: Var, taps: Vec<Vec<(usize, f64)>>) -> Result<Var, TapeError> {
        let t = self.val(a)?;
        let (r, c) = t.matrix_dims("mix_rows")?;
        if let Some(&(bad, _)) = taps.iter().flatten().find(|(s, _)| *s >= r) {
            return Err(TapeError::InvalidArgument { op: "mix_rows", msg: format!("row {bad} out of range {r}") });
        }
        let mut data = vec![0.0; taps.len() * c];
        for (out, row_taps) in data.chunks_mut(c.max(1)).zip(&taps) {
            for &(s, w) in row_taps {
                for (o, v) in out.iter_mut().zip(t.row(s)) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor { shape: vec![taps.len(), c], data };
        self.push(Op::MixRows { input: a, taps }, value, "mix_rows")
    }

    /// Propagates `d loss / d node` to every node with id below `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let lv = self.val(loss)?;
        if lv.data.len() != 1 {
            return Err(TapeError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => t.data.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => *slot = Some(Tensor { shape: self.nodes[v.0].value.shape.clone(), data: delta }),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape[0], ta.shape[1]);
                let m = tb.shape[1];
                let bt = transpose_raw(&tb.data, k, m);
                acc(*a, matmul_raw(&g.data, &bt, n, m, k));
                let at = transpose_raw(&ta.data, n, k);
                acc(*b, matmul_raw(&at, &g.data, k, n, m));
            }
            Op::Add(a, b) => {
                acc(*a, g.data.clone());
                acc(*b, g.data.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.data.clone());
                let m = self.value(*b).data.len();
                let mut db = vec![0.0; m];
                for row in g.data.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(*b, db);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.data.iter().zip(&tb.data).map(|(g, y)| g * y).collect());
                acc(*b, g.data.iter().zip(&ta.data).map(|(g, x)| g * x).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.data.iter().zip(&x.data).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Tanh(a) => {
                acc(*a, g.data.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Scale(a, alpha) => acc(*a, g.data.iter().map(|g| g * alpha).collect()),
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                acc(*a, transpose_raw(&g.data, r, c));
            }
            Op::ReduceSum(a) => {
                let n = self.value(*a).data.len();
                acc(*a, vec![g.data[0]; n]);
            }
            Op::MeanByGroup { input, groups, counts } => {
                let d = out.shape[1];
                let mut dx = vec![0.0; groups.len() * d];
                for (i, grp) in groups.iter().enumerate() {
                    if let Some(grp) = *grp {
                        let c = counts[grp] as f64;
                        let src = &g.data[grp * d..(grp + 1) * d];
                        dx[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(o, v)| *o = v / c);
                    }
                }
                acc(*input, dx);
            }
            Op::L2NormalizeRows { input, eps, norms } => {
                let c = out.shape[1];
                let mut dx = vec![0.0; out.data.len()];
                for (i, &n) in norms.iter().enumerate() {
                    let y = &out.data[i * c..(i + 1) * c];
                    let gy = &g.data[i * c..(i + 1) * c];
                    let dst = &mut dx[i * c..(i + 1) * c];
                    if n > *eps {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        dst.iter_mut().zip(y.iter().zip(gy)).for_each(|(o, (y, g))| *o = (g - y * dot) / n);
                    } else {
                        dst.iter_mut().zip(gy).for_each(|(o, g)| *o = g / eps);
                    }
                }
                acc(*input, dx);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let c = x.shape[1];
                let mut dx = vec![0.0; x.data.len()];
                for (i, (&lse, &gi)) in out.data.iter().zip(&g.data).enumerate() {
                    for j in 0..c {
                        dx[i * c + j] = gi * (x.data[i * c + j] - lse).exp();
                    }
                }
                acc(*a, dx);
            }
            Op::GatherRows { input, index } => {
                let x = self.value(*input);
                let c = x.shape[1];
                let mut dx = vec![0.0; x.data.len()];
                for (k, &i) in index.iter().enumerate() {
                    dx[i * c..(i + 1) * c].iter_mut().zip(&g.data[k * c..(k + 1) * c]).for_each(|(o, v)| *o += v);
                }
                acc(*input, dx);
            }
            Op::MixRows { input, taps } => {
                let x = self.value(*input);
                let c = x.shape[1];
                let mut dx = vec![0.0; x.data.len()];
                for (r, row_taps) in taps.iter().enumerate() {
                    let gr = &g.data[r * c..(r + 1) * c];
                    for &(s, w) in row_taps {
                        dx[s * c..(s + 1) * c].iter_mut().zip(gr).for_each(|(o, v)| *o += w * v);
                    }
                }
                acc(*input, dx);
            }
        }
    }
}
