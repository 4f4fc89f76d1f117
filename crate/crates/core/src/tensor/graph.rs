use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    /// `scale · x + diag · I`
    Affine {
        x: usize,
        scale: f64,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    SegmentMeans {
        x: usize,
        bounds: Vec<Range<usize>>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    PinvInit {
        a: usize,
        scale: f64,
        n1: f64,
        ninf: f64,
        col: usize,
        row: usize,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Every value is a row-major matrix; vectors are single rows and scalars are
/// 1×1. Each operation checks its output for NaN/Inf and refuses to record a
/// non-finite value.
#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    param_of: HashMap<usize, ParamId>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            param_of: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            graph: self.id,
            idx,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable used with a foreign graph");
        &self.nodes[v.idx]
    }

    fn push(
        &mut self,
        op_name: &'static str,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2();
        self.push_leaf(r, c, t.to_f64(), false)
    }

    /// Leaf that participates in differentiation (but is not a parameter).
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2();
        self.push_leaf(r, c, t.to_f64(), true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::shape("constant", format!("{rows}x{cols} vs {}", value.len())));
        }
        self.push_leaf(rows, cols, value, false)
    }

    /// Loads a parameter. Repeated loads of the same id share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&idx) = self.params.get(&id) {
            return Ok(self.var(idx));
        }
        let t = &store.get(id).tensor;
        let (r, c) = t.dims2();
        let v = self.push_leaf(r, c, t.to_f64(), true)?;
        self.params.insert(id, v.idx);
        self.param_of.insert(v.idx, id);
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.node(v).rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.node(v).cols
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_f64(vec![n.rows, n.cols], &n.value).expect("graph values are finite")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul_nn(&self.node(a).value, &self.node(b).value, m, k, n);
        self.push("matmul", m, n, out, Op::MatMul(a.idx, b.idx), &[a.idx, b.idx])
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = matmul_nt(&self.node(a).value, &self.node(b).value, m, k, n);
        self.push("matmul_nt", m, n, out, Op::MatMulNt(a.idx, b.idx), &[a.idx, b.idx])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = transpose(&self.node(a).value, r, c);
        self.push("transpose", c, r, out, Op::Transpose(a.idx), &[a.idx])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = zip(&self.node(a).value, &self.node(b).value, |x, y| x + y);
        self.push("add", r, c, out, Op::Add(a.idx, b.idx), &[a.idx, b.idx])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = zip(&self.node(a).value, &self.node(b).value, |x, y| x - y);
        self.push("sub", r, c, out, Op::Sub(a.idx, b.idx), &[a.idx, b.idx])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = zip(&self.node(a).value, &self.node(b).value, |x, y| x * y);
        self.push("mul", r, c, out, Op::Mul(a.idx, b.idx), &[a.idx, b.idx])
    }

    /// Adds a 1×c row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::shape("add_row", format!("{r}x{c} + {:?}", self.shape(row))));
        }
        let b = &self.node(row).value;
        let out: Vec<f64> = self
            .node(x)
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        self.push("add_row", r, c, out, Op::AddRow(x.idx, row.idx), &[x.idx, row.idx])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine_identity(x, factor, 0.0)
    }

    /// `scale · x + diag · I`; `x` must be square when `diag != 0`.
    pub fn affine_identity(&mut self, x: Var, scale: f64, diag: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if diag != 0.0 && r != c {
            return Err(Error::shape("affine_identity", format!("{r}x{c} is not square")));
        }
        let mut out: Vec<f64> = self.node(x).value.iter().map(|v| scale * v).collect();
        if diag != 0.0 {
            for i in 0..r {
                out[i * c + i] += diag;
            }
        }
        self.push("affine_identity", r, c, out, Op::Affine { x: x.idx, scale }, &[x.idx])
    }

    // ---- nonlinearities ------------------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = self.node(x).value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", r, c, out, Op::Softmax(x.idx), &[x.idx])
    }

    /// Softmax where row `i` only sees columns `0..=i`; masked entries are 0.
    pub fn softmax_rows_causal(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = self.node(x).value.clone();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let visible = (i + 1).min(c);
            softmax_in_place(&mut row[..visible]);
            row[visible..].fill(0.0);
        }
        self.push("softmax_rows_causal", r, c, out, Op::Softmax(x.idx), &[x.idx])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!("width {c}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::shape("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let xs = &self.node(x).value;
        let g = &self.node(gamma).value;
        let b = &self.node(beta).value;
        let mut normed = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let n = (row[j] - mean) * s;
                normed[i * c + j] = n;
                out[i * c + j] = n * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x: x.idx,
            gamma: gamma.idx,
            beta: beta.idx,
            normed,
            rstd,
        };
        self.push("layer_norm", r, c, out, op, &[x.idx, gamma.idx, beta.idx])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.node(x).value.iter().map(|&v| gelu(v)).collect();
        self.push("gelu", r, c, out, Op::Gelu(x.idx), &[x.idx])
    }

    // ---- reductions ----------------------------------------------------

    /// Column means, returned as a single row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xs = &self.node(x).value;
        let mut out = vec![0.0; c];
        for row in xs.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push("mean_rows", 1, c, out, Op::MeanRows(x.idx), &[x.idx])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x).value.iter().sum();
        self.push("sum", 1, 1, vec![s], Op::SumAll(x.idx), &[x.idx])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x).value.len() as f64;
        let s = self.node(x).value.iter().sum::<f64>() / n;
        self.push("mean", 1, 1, vec![s], Op::MeanAll(x.idx), &[x.idx])
    }

    // ---- slicing -------------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if width == 0 || start + width > c {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {c}", start + width)));
        }
        let xs = &self.node(x).value;
        let mut out = Vec::with_capacity(r * width);
        for row in xs.chunks(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        self.push("slice_cols", r, width, out, Op::SliceCols { x: x.idx, start }, &[x.idx])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = match parts.first() {
            Some(&p) => self.rows(p),
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        if parts.iter().any(|&p| self.rows(p) != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.cols(p);
                out.extend_from_slice(&self.node(p).value[i * pc..(i + 1) * pc]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        self.push("concat_cols", r, c, out, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if count == 0 || start + count > r {
            return Err(Error::shape("slice_rows", format!("[{start}, {}) of {r}", start + count)));
        }
        let out = self.node(x).value[start * c..(start + count) * c].to_vec();
        self.push("slice_rows", count, c, out, Op::SliceRows { x: x.idx, start }, &[x.idx])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.cols(p),
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        if parts.iter().any(|&p| self.cols(p) != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let r: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(&self.node(p).value);
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        self.push("concat_rows", r, c, out, Op::ConcatRows(idx.clone()), &idx)
    }

    /// One output row per range: the mean of the rows of `x` in that range.
    pub fn segment_means(&mut self, x: Var, bounds: Vec<Range<usize>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if bounds.iter().any(|b| b.is_empty() || b.end > r) {
            return Err(Error::shape("segment_means", format!("bad segment for {r} rows")));
        }
        let xs = &self.node(x).value;
        let mut out = vec![0.0; bounds.len() * c];
        for (s, b) in bounds.iter().enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            for i in b.clone() {
                for (o, v) in dst.iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            let n = b.len() as f64;
            dst.iter_mut().for_each(|o| *o /= n);
        }
        let m = bounds.len();
        self.push("segment_means", m, c, out, Op::SegmentMeans { x: x.idx, bounds }, &[x.idx])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("id {bad} of {r} rows")));
        }
        let t = &self.node(table).value;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let op = Op::Gather {
            table: table.idx,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", ids.len(), c, out, op, &[table.idx])
    }

    // ---- losses --------------------------------------------------------

    /// Mean cross-entropy over the rows whose target is `Some`, computed via
    /// log-sum-exp. Rows with `None` (padding) contribute nothing.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        let xs = &self.node(logits).value;
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let row = &xs[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            if let Some(label) = *t {
                if label >= c {
                    return Err(Error::LabelOutOfRange { label, classes: c });
                }
                total += lse - row[label];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyTarget);
        }
        let loss = total / count as f64;
        let op = Op::CrossEntropy {
            logits: logits.idx,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.push("cross_entropy", 1, 1, vec![loss], op, &[logits.idx])
    }

    /// Cross-entropy of a single logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 {
            return Err(Error::shape("cross_entropy", format!("expected one row, got {r}x{c}")));
        }
        self.cross_entropy_rows(logits, &[Some(label)])
    }

    /// Newton–Schulz starting point `aᵀ / (‖a‖₁ · ‖a‖_∞)`.
    ///
    /// Returns `None` when `a` is the zero matrix.
    pub fn pinv_init(&mut self, a: Var) -> Result<Option<Var>> {
        let (r, c) = self.shape(a);
        let xs = &self.node(a).value;
        let mut col_sums = vec![0.0; c];
        let mut row_sums = vec![0.0; r];
        for i in 0..r {
            for j in 0..c {
                let v = xs[i * c + j].abs();
                col_sums[j] += v;
                row_sums[i] += v;
            }
        }
        let (col, n1) = argmax(&col_sums);
        let (row, ninf) = argmax(&row_sums);
        if n1 == 0.0 || ninf == 0.0 {
            return Ok(None);
        }
        let scale = 1.0 / (n1 * ninf);
        let out: Vec<f64> = transpose(xs, r, c).into_iter().map(|v| v * scale).collect();
        let op = Op::PinvInit {
            a: a.idx,
            scale,
            n1,
            ninf,
            col,
            row,
        };
        self.push("pinv_init", c, r, out, op, &[a.idx]).map(Some)
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates d(root)/d(node) to every node on the path to the leaves.
    /// Gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.graph != self.id || root.idx >= self.nodes.len() {
            return Err(Error::DetachedRoot);
        }
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.idx + 1];
        adj[root.idx] = Some(vec![1.0]);
        for idx in (0..=root.idx).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &dy, &mut adj);
            match &mut self.grads[idx] {
                Some(g) => g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d),
                slot @ None => *slot = Some(dy),
            }
        }
        Ok(())
    }

    /// Accumulated gradient of the last backward passes with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = self.node(v);
        self.grads
            .get(v.idx)?
            .as_ref()
            .map(|g| Tensor::from_f64(vec![n.rows, n.cols], g).expect("finite gradient"))
    }

    pub fn grad_f64(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.graph, self.id);
        self.grads.get(v.idx)?.as_deref()
    }

    /// Adds the graph's parameter gradients into the store's grad buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut pairs: Vec<_> = self.params.iter().collect();
        pairs.sort_by_key(|(id, _)| **id);
        for (&id, &idx) in pairs {
            if let Some(Some(g)) = self.grads.get(idx) {
                store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
    }

    /// `backward` followed by `accumulate_param_grads`.
    pub fn backward_params(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(root)?;
        self.accumulate_param_grads(store);
        Ok(())
    }

    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        self.param_of.get(&v.idx).copied()
    }

    fn propagate(&self, idx: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let needs = |i: usize| self.nodes[i].requires_grad;
        let send = |adj: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut adj[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = cols;
                if needs(*a) {
                    send(adj, *a, matmul_nt(dy, &self.nodes[*b].value, m, n, k));
                }
                if needs(*b) {
                    let at = transpose(&self.nodes[*a].value, m, k);
                    send(adj, *b, matmul_nn(&at, dy, k, m, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = cols;
                if needs(*a) {
                    send(adj, *a, matmul_nn(dy, &self.nodes[*b].value, m, n, k));
                }
                if needs(*b) {
                    let dyt = transpose(dy, m, n);
                    send(adj, *b, matmul_nn(&dyt, &self.nodes[*a].value, n, m, k));
                }
            }
            Op::Transpose(a) => send(adj, *a, transpose(dy, rows, cols)),
            Op::Add(a, b) => {
                send(adj, *a, dy.to_vec());
                send(adj, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                send(adj, *a, dy.to_vec());
                send(adj, *b, dy.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(adj, *a, zip(dy, &self.nodes[*b].value, |d, y| d * y));
                }
                if needs(*b) {
                    send(adj, *b, zip(dy, &self.nodes[*a].value, |d, x| d * x));
                }
            }
            Op::AddRow(x, row) => {
                send(adj, *x, dy.to_vec());
                if needs(*row) {
                    let mut g = vec![0.0; cols];
                    for chunk in dy.chunks(cols) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                    send(adj, *row, g);
                }
            }
            Op::Affine { x, scale } => send(adj, *x, dy.iter().map(|d| scale * d).collect()),
            Op::Softmax(x) => {
                let y = &node.value;
                let mut g = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let dr = &dy[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        g[i * cols + j] = (dr[j] - dot) * yr[j];
                    }
                }
                send(adj, *x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let gam = &self.nodes[*gamma].value;
                if needs(*gamma) {
                    let mut dg = vec![0.0; cols];
                    for (i, d) in dy.iter().enumerate() {
                        dg[i % cols] += d * normed[i];
                    }
                    send(adj, *gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; cols];
                    for (i, d) in dy.iter().enumerate() {
                        db[i % cols] += d;
                    }
                    send(adj, *beta, db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for i in 0..rows {
                        let s = i * cols..(i + 1) * cols;
                        let dn: Vec<f64> = dy[s.clone()].iter().zip(gam).map(|(d, g)| d * g).collect();
                        let xn = &normed[s.clone()];
                        let mean_dn = dn.iter().sum::<f64>() / n;
                        let mean_dn_xn = dn.iter().zip(xn).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..cols {
                            dx[i * cols + j] = rstd[i] * (dn[j] - mean_dn - xn[j] * mean_dn_xn);
                        }
                    }
                    send(adj, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let xs = &self.nodes[*x].value;
                send(adj, *x, zip(dy, xs, |d, v| d * gelu_grad(v)));
            }
            Op::MeanRows(x) => {
                let r = self.nodes[*x].rows;
                let g = (0..r * cols).map(|i| dy[i % cols] / r as f64).collect();
                send(adj, *x, g);
            }
            Op::SumAll(x) => {
                let n = self.nodes[*x].value.len();
                send(adj, *x, vec![dy[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].value.len();
                send(adj, *x, vec![dy[0] / n as f64; n]);
            }
            Op::SliceCols { x, start } => {
                let xc = self.nodes[*x].cols;
                let mut g = vec![0.0; rows * xc];
                for i in 0..rows {
                    g[i * xc + start..i * xc + start + cols].copy_from_slice(&dy[i * cols..(i + 1) * cols]);
                }
                send(adj, *x, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    if needs(p) {
                        let mut g = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            g.extend_from_slice(&dy[i * cols + offset..i * cols + offset + pc]);
                        }
                        send(adj, p, g);
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let xr = self.nodes[*x].rows;
                let mut g = vec![0.0; xr * cols];
                g[start * cols..(start + rows) * cols].copy_from_slice(dy);
                send(adj, *x, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if needs(p) {
                        send(adj, p, dy[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SegmentMeans { x, bounds } => {
                let xr = self.nodes[*x].rows;
                let mut g = vec![0.0; xr * cols];
                for (s, b) in bounds.iter().enumerate() {
                    let n = b.len() as f64;
                    for i in b.clone() {
                        for j in 0..cols {
                            g[i * cols + j] += dy[s * cols + j] / n;
                        }
                    }
                }
                send(adj, *x, g);
            }
            Op::Gather { table, ids } => {
                let tr = self.nodes[*table].rows;
                let mut g = vec![0.0; tr * cols];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        g[id * cols + j] += dy[i * cols + j];
                    }
                }
                send(adj, *table, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = self.nodes[*logits].cols;
                let scale = dy[0] / *count as f64;
                let mut g = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(label) = *t {
                        for j in 0..c {
                            g[i * c + j] = probs[i * c + j] * scale;
                        }
                        g[i * c + label] -= scale;
                    }
                }
                send(adj, *logits, g);
            }
            Op::PinvInit {
                a,
                scale,
                n1,
                ninf,
                col,
                row,
            } => {
                // z = aᵀ·s with s = 1/(n1·ninf); n1 is the largest absolute
                // column sum (column `col`), ninf the largest absolute row sum.
                let (ar, ac) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let av = &self.nodes[*a].value;
                let mut g = transpose(dy, rows, cols);
                g.iter_mut().for_each(|v| *v *= scale);
                let t: f64 = g.iter().zip(av).map(|(d, x)| d * x).sum::<f64>();
                for i in 0..ar {
                    for j in 0..ac {
                        let sign = av[i * ac + j].signum();
                        let mut dn = 0.0;
                        if j == *col {
                            dn += 1.0 / n1;
                        }
                        if i == *row {
                            dn += 1.0 / ninf;
                        }
                        g[i * ac + j] -= t * sign * dn;
                    }
                }
                send(adj, *a, g);
            }
        }
    }
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `a (m×k) · b (k×n)`
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in ci.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a (m×k) · bᵀ` where `b` is n×k.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = ai.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    c
}

pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;
