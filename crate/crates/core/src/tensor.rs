//! Dense row-major matrices and a tape for reverse-mode differentiation.
//!
//! Every value the model touches is a 2-D [`Tensor`]; vectors are stored as
//! `1 × n` rows and scalars as `1 × 1`. A [`Graph`] records each operation as
//! it executes, and [`Graph::backward`] replays the record in reverse to
//! produce [`Gradients`] for every node that requires one.
//!
//! Learnable weights live in a [`ParamStore`] and are bound into a graph by
//! reference, so building a graph never copies parameter data.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Builds a tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Tensor::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Index of a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named registry of learnable tensors. Registration order is stable and
/// defines iteration order everywhere (optimizer state, checkpoints).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter {name} registered twice"
            )));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        keep_scale: Vec<f64>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    MeanRows {
        x: Var,
        weights: Vec<f64>,
    },
    Broadcast(Var),
    Scatter {
        ptr: Var,
        ids: Vec<usize>,
    },
    WeightedSum {
        weights: Var,
        parts: Vec<Var>,
    },
    Nll {
        p: Var,
        coeffs: Vec<(usize, usize, f64)>,
        floor: f64,
    },
}

struct Node<'p> {
    value: Value<'p>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A graph is single-writer. Nodes are appended in execution order, so the
/// reverse of insertion order is a valid topological order for backward.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `mark` (a previous [`Graph::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.params.retain(|_, v| v.0 < mark);
    }

    fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            value: Value::Owned(data),
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let [rows, cols] = self.shape(v);
        Tensor {
            rows,
            cols,
            data: self.value(v).to_vec(),
        }
    }

    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let cols = self.nodes[v.0].cols;
        &self.value(v)[r * cols..(r + 1) * cols]
    }

    /// Leaf that owns a copy of `t`.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.data, t.rows, t.cols, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Leaf that borrows `t` for the lifetime of the graph.
    pub fn leaf_ref(&mut self, t: &'p Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(&t.data),
            rows: t.rows,
            cols: t.cols,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter, at most once per graph.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf_ref(store.get(id), true);
        self.params.insert(id, v);
        v
    }

    /// Parameters bound in this graph, in parameter-id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", [m, k], [k2, n]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, m, n, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", [m, k], [n, k2]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_t(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, m, n, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, sa[0], sa[1], Op::Add(a, b), rg))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr[0] != 1 || sr[1] != sx[1] {
            return Err(Error::shape("add_row", sx, sr));
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(sx[1]) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, sx[0], sx[1], Op::AddRow(x, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, sa[0], sa[1], Op::Mul(a, b), rg))
    }

    /// Sum of all entries as a `1 × 1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], 1, 1, Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let [m, n] = self.shape(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(out, m, n, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let [m, n] = self.shape(x);
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(out, m, n, Op::Relu(x), rg)
    }

    /// Row-wise softmax. `keep[i * n + j] == false` removes entry `(i, j)`
    /// from row `i`; removed entries come out as exactly zero.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let [m, n] = self.shape(x);
        if let Some(k) = keep {
            if k.len() != m * n {
                return Err(Error::shape("softmax_rows mask", [m, n], [1, k.len()]));
            }
        }
        let xs = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            let kept = |j: usize| keep.map_or(true, |k| k[i * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..n {
                if kept(j) {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    sum += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, m, n, Op::Softmax(x), rg))
    }

    /// Per-row normalization with affine `gain`/`bias` (both `1 × d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [m, d] = self.shape(x);
        for p in [gain, bias] {
            let s = self.shape(p);
            if s != [1, d] {
                return Err(Error::shape("layer_norm", [m, d], s));
            }
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(out, m, d, op, rg))
    }

    /// Selects rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [v, d] = self.shape(table);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, ids.len(), d, op, rg))
    }

    /// Inverted dropout: surviving entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let [m, n] = self.shape(x);
        let scale = 1.0 / (1.0 - rate);
        let keep_scale: Vec<f64> = (0..m * n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&keep_scale)
            .map(|(v, s)| v * s)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(out, m, n, Op::Dropout { x, keep_scale }, rg))
    }

    /// Concatenates along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let m = self.shape(first)[0];
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[0] != m {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &x in xs {
                out.extend_from_slice(self.row(x, i));
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, m, total, Op::Concat(xs.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", [m, n], [start, len]));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, m, len, Op::Slice { x, start }, rg))
    }

    /// Mean over the rows whose `keep` flag is set, as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let [m, n] = self.shape(x);
        let flags: Vec<bool> = match keep {
            Some(k) if k.len() != m => return Err(Error::shape("mean_rows mask", [m, n], [1, k.len()])),
            Some(k) => k.to_vec(),
            None => vec![true; m],
        };
        let count = flags.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::DegenerateRow { row: 0 });
        }
        let weights: Vec<f64> = flags
            .iter()
            .map(|&k| if k { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let xs = self.value(x);
        let mut out = vec![0.0; n];
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(&xs[i * n..(i + 1) * n]) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, 1, n, Op::MeanRows { x, weights }, rg))
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let s = self.shape(x);
        if s[0] != 1 || rows == 0 {
            return Err(Error::shape("broadcast_rows", s, [rows, s[1]]));
        }
        let out = self.value(x).repeat(rows);
        let rg = self.rg(x);
        Ok(self.push(out, rows, s[1], Op::Broadcast(x), rg))
    }

    /// Accumulates column mass of `ptr` (`L × Lx`) onto vocabulary ids:
    /// `out[i][w] = Σ_{j : ids[j] = w} ptr[i][j]`.
    pub fn scatter_cols(&mut self, ptr: Var, ids: &[usize], vocab: usize) -> Result<Var> {
        let [m, lx] = self.shape(ptr);
        if ids.len() != lx {
            return Err(Error::shape("scatter_cols", [m, lx], [1, ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        let p = self.value(ptr);
        let mut out = vec![0.0; m * vocab];
        for i in 0..m {
            for (j, &w) in ids.iter().enumerate() {
                out[i * vocab + w] += p[i * lx + j];
            }
        }
        let rg = self.rg(ptr);
        let op = Op::Scatter {
            ptr,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, m, vocab, op, rg))
    }

    /// `out[i] = Σ_k weights[i][k] · parts[k][i]`.
    pub fn weighted_sum(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        let [m, k] = self.shape(weights);
        if parts.len() != k || k == 0 {
            return Err(Error::shape("weighted_sum", [m, k], [1, parts.len()]));
        }
        let n = self.shape(parts[0])[1];
        for &p in parts {
            if self.shape(p) != [m, n] {
                return Err(Error::shape("weighted_sum", [m, n], self.shape(p)));
            }
        }
        let w = self.value(weights);
        let mut out = vec![0.0; m * n];
        for (c, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            for i in 0..m {
                let s = w[i * k + c];
                for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(&pv[i * n..(i + 1) * n]) {
                    *o += s * v;
                }
            }
        }
        let rg = self.rg(weights) || parts.iter().any(|&p| self.rg(p));
        let op = Op::WeightedSum {
            weights,
            parts: parts.to_vec(),
        };
        Ok(self.push(out, m, n, op, rg))
    }

    /// Scalar `-Σ coeff · ln(max(p[row][col], floor))` over `(row, col, coeff)`
    /// triples. Entries at or below the floor contribute no gradient.
    pub fn weighted_nll(&mut self, p: Var, coeffs: Vec<(usize, usize, f64)>, floor: f64) -> Result<Var> {
        let [m, n] = self.shape(p);
        if let Some(&(r, c, _)) = coeffs.iter().find(|(r, c, _)| *r >= m || *c >= n) {
            return Err(Error::shape("weighted_nll", [m, n], [r, c]));
        }
        let pv = self.value(p);
        let loss: f64 = coeffs
            .iter()
            .map(|&(r, c, q)| -q * pv[r * n + c].max(floor).ln())
            .sum();
        let rg = self.rg(p);
        Ok(self.push(vec![loss], 1, 1, Op::Nll { p, coeffs, floor }, rg))
    }

    /// Reverse pass from a `1 × 1` node, seeded with `seed`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(Error::shape("backward (scalar required)", s, [1, 1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Populates gradients of every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.rows * node.cols;
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_t_acc(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::t_matmul_acc(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let k = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_acc(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::t_matmul_acc(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, v), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += v * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, v), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += v * x;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, v), &xi) in gx.iter_mut().zip(g).zip(xs) {
                        if xi > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.as_slice();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Dropout { x, keep_scale } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, v), s) in gx.iter_mut().zip(g).zip(keep_scale) {
                        *o += v * s;
                    }
                }
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    if let Some(gx) = self.acc(grads, x) {
                        for i in 0..m {
                            add_into(&mut gx[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let w = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        add_into(&mut gx[i * w + start..i * w + start + n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::MeanRows { x, weights } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &w) in weights.iter().enumerate() {
                        for (o, v) in gx[i * n..(i + 1) * n].iter_mut().zip(g) {
                            *o += w * v;
                        }
                    }
                }
            }
            Op::Broadcast(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for chunk in g.chunks(n) {
                        add_into(gx, chunk);
                    }
                }
            }
            Op::Scatter { ptr, ids } => {
                let lx = ids.len();
                if let Some(gp) = self.acc(grads, *ptr) {
                    for i in 0..m {
                        for (j, &w) in ids.iter().enumerate() {
                            gp[i * lx + j] += g[i * n + w];
                        }
                    }
                }
            }
            Op::WeightedSum { weights, parts } => {
                let k = parts.len();
                let w = self.value(*weights);
                for (c, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            let s = w[i * k + c];
                            for (o, v) in gp[i * n..(i + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += s * v;
                            }
                        }
                    }
                }
                if self.rg(*weights) {
                    let mut gw = vec![0.0; m * k];
                    for (c, &p) in parts.iter().enumerate() {
                        let pv = self.value(p);
                        for i in 0..m {
                            gw[i * k + c] = pv[i * n..(i + 1) * n]
                                .iter()
                                .zip(&g[i * n..(i + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    if let Some(acc) = self.acc(grads, *weights) {
                        add_into(acc, &gw);
                    }
                }
            }
            Op::Nll { p, coeffs, floor } => {
                let cols = self.shape(*p)[1];
                let pv = self.value(*p);
                if let Some(gp) = self.acc(grads, *p) {
                    for &(r, c, q) in coeffs {
                        let v = pv[r * cols + c];
                        if v > *floor {
                            gp[r * cols + c] -= g[0] * q / v;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub(crate) mod kernels {
    /// `c[m×n] = a[m×k] · b[k×n]`
    pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        matmul_acc(a, b, c, m, k, n);
    }

    /// `c[m×n] += a[m×k] · b[k×n]`
    pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c[m×n] = a[m×k] · b[n×k]ᵀ`
    pub fn matmul_t(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        matmul_t_acc(a, b, c, m, k, n);
    }

    /// `c[m×n] += a[m×k] · b[n×k]ᵀ`
    pub fn matmul_t_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                c[i * n + j] += dot(arow, brow);
            }
        }
    }

    /// `c[k×n] += a[m×k]ᵀ · b[m×n]`
    pub fn t_matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        // four accumulators so the loop vectorizes
        let mut acc = [0.0; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            for l in 0..4 {
                acc[l] += a[c * 4 + l] * b[c * 4 + l];
            }
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in chunks * 4..a.len() {
            s += a[i] * b[i];
        }
        s
    }
}
