//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends one record to the [`Tape`]; [`Tape::backward`]
//! walks the records once in reverse order and accumulates gradients
//! additively into each input, so values used several times receive the sum
//! of their upstream contributions.
//!
//! Operations that act on "rows" treat a tensor as `[product(leading), last]`.

use std::rc::Rc;

use super::kernels;
use super::{Tensor, TensorError};

/// Clamp bound applied to every probability that reaches a logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    Embedding(Var, Rc<[usize]>),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MeanRows(Var),
    Sum(Var),
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    TargetLogProb { logits: Var, targets: Rc<[usize]>, probs: Vec<f64> },
    Bce { p: Var, labels: Rc<[f64]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Embedding(..) => "embedding_lookup",
            Op::Softmax(_) => "softmax",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::MeanRows(_) => "mean_pool",
            Op::Sum(_) => "sum",
            Op::Cosine { .. } => "cosine_similarity",
            Op::TargetLogProb { .. } => "target_log_prob",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Allowed-attention pattern for [`Tape::masked_softmax`]: entry `(i, j)` is
/// true when row `i` may attend to column `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        AttentionMask { n, allowed }
    }

    /// A shared prefix of length `prefix` followed by independent segments.
    /// Each segment attends causally to the prefix and to itself only.
    pub fn prefix_segments(prefix: usize, segments: &[usize]) -> Self {
        let n = prefix + segments.iter().sum::<usize>();
        let mut allowed = vec![false; n * n];
        for i in 0..prefix {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        let mut start = prefix;
        for &len in segments {
            for i in start..start + len {
                for j in 0..prefix {
                    allowed[i * n + j] = true;
                }
                for j in start..=i {
                    allowed[i * n + j] = true;
                }
            }
            start += len;
        }
        AttentionMask { n, allowed }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&last, lead)) => (lead.iter().product(), last),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::shape("leaf", &[&shape], format!("data length {}", data.len())));
        }
        self.push("leaf", shape, data, Op::Leaf)
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var, TensorError> {
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name, index: pos });
        }
        Ok(self.push_unchecked(shape, value, op))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn shape_err(&self, op: &'static str, vars: &[Var], msg: impl Into<String>) -> TensorError {
        let shapes: Vec<&[usize]> = vars.iter().map(|v| self.shape(*v)).collect();
        TensorError::shape(op, &shapes, msg)
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", &[a, b], "expected [m,k] x [k,n]"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(self.shape_err("transpose", &[a], "expected a matrix"));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(self.shape_err("reshape", &[a], format!("cannot reshape to {shape:?}")));
        }
        let v = self.value(a).to_vec();
        self.push("reshape", shape, v, Op::Reshape(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", &[a, b], "shapes differ"));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b))
    }

    /// Adds a vector `bias[n]` to every row of `a[.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.shape(bias) != [cols] {
            return Err(self.shape_err("add_bias", &[a, bias], "bias must match the last axis"));
        }
        let b = self.value(bias);
        let out = self.value(a).chunks(cols).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_bias", shape, out, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", &[a, b], "shapes differ"));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale(a, k))
    }

    /// Concatenates along the last axis; all inputs need the same leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| TensorError::shape("concat", &[], "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        let rank = self.shape(first).len();
        if rank == 0 {
            return Err(self.shape_err("concat", parts, "scalars cannot be concatenated"));
        }
        for p in parts {
            let s = self.shape(*p);
            if s.len() != rank || &s[..rank - 1] != lead {
                return Err(self.shape_err("concat", parts, "leading shapes differ"));
            }
        }
        let rows = numel(lead);
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[rank - 1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(parts.to_vec()))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (rows, cols) = rows_cols(self.shape(a));
        if self.shape(a).is_empty() || start >= end || end > cols {
            return Err(self.shape_err("slice_cols", &[a], format!("bad range {start}..{end}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = end - start;
        self.push("slice_cols", shape, out, Op::SliceCols(a, start))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(self.shape_err("gather_rows", &[a], "expected a matrix"));
        }
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, bound: m });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        self.push("gather_rows", vec![rows.len(), n], out, Op::GatherRows(a, rows.into()))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(self.shape_err("embedding_lookup", &[table], "expected [vocab, dim]"));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index { op: "embedding_lookup", index: bad, bound: v });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push("embedding_lookup", vec![ids.len(), d], out, Op::Embedding(table, ids.into()))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            kernels::softmax_in_place(row, cols);
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, out, Op::Softmax(a))
    }

    /// Row softmax restricted to the allowed entries of `mask`; disallowed
    /// entries are exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &AttentionMask) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != mask.n || s[1] != mask.n {
            return Err(self.shape_err("masked_softmax", &[a], format!("mask is {}x{}", mask.n, mask.n)));
        }
        let n = mask.n;
        let src = self.value(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &src[i * n..(i + 1) * n];
            let allowed = &mask.allowed[i * n..(i + 1) * n];
            let max = row.iter().zip(allowed).filter(|(_, &ok)| ok).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::BadInput(format!("masked_softmax row {i} has no allowed entries")));
            }
            let mut sum = 0.0;
            for j in 0..n {
                if allowed[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= sum;
            }
        }
        self.push("masked_softmax", vec![n, n], out, Op::MaskedSoftmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(self.shape_err("layer_norm", &[x, gamma, beta], "gain/bias must match the last axis"));
        }
        let (y, mean, rstd) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), cols);
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, y, Op::LayerNorm { x, gamma, beta, mean, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push("tanh", shape, out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", shape, out, Op::Sigmoid(a))
    }

    /// Mean over rows: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] == 0 {
            return Err(self.shape_err("mean_pool", &[a], "expected a nonempty matrix"));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        for row in self.value(a).chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push("mean_pool", vec![n], out, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    /// Cosine similarity of two equal-length vectors; zero norms are rejected.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 1 {
            return Err(self.shape_err("cosine_similarity", &[a, b], "expected two vectors of equal length"));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let na = kernels::dot(va, va).sqrt();
        let nb = kernels::dot(vb, vb).sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::Degenerate("cosine similarity of a zero-norm vector"));
        }
        let c = (kernels::dot(va, vb) / (na * nb)).clamp(-1.0, 1.0);
        self.push("cosine_similarity", vec![], vec![c], Op::Cosine { a, b, na, nb })
    }

    /// `ln clamp(softmax(logits[r])[targets[r]], eps, 1 - eps)` for each row.
    ///
    /// The clamp only bounds the value; the gradient is that of the
    /// unclamped log-softmax, so confidently wrong rows still learn.
    pub fn target_log_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(self.shape_err("target_log_prob", &[logits], format!("{} targets", targets.len())));
        }
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::Index { op: "target_log_prob", index: bad, bound: n });
        }
        let mut probs = self.value(logits).to_vec();
        for row in probs.chunks_mut(n) {
            kernels::softmax_in_place(row, n);
        }
        let out = (0..m).map(|r| probs[r * n + targets[r]].clamp(PROB_EPS, 1.0 - PROB_EPS).ln()).collect();
        self.push("target_log_prob", vec![m], out, Op::TargetLogProb { logits, targets: targets.into(), probs })
    }

    /// Mean token cross-entropy of `logits[m, V]` against `targets[m]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        if targets.is_empty() {
            return Err(self.shape_err("cross_entropy", &[logits], "no targets"));
        }
        let lp = self.target_log_prob(logits, targets)?;
        let total = self.sum(lp)?;
        self.scale(total, -1.0 / targets.len() as f64)
    }

    /// Mean binary cross-entropy of probabilities `p[n]` against labels in {0, 1}.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var, TensorError> {
        if self.shape(p) != [labels.len()] || labels.is_empty() {
            return Err(self.shape_err("binary_cross_entropy", &[p], format!("{} labels", labels.len())));
        }
        let n = labels.len() as f64;
        let loss = self
            .value(p)
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        self.push("binary_cross_entropy", vec![], vec![loss], Op::Bce { p, labels: labels.into() })
    }

    // ---- backward ----------------------------------------------------------

    /// Fills gradients of `loss` with respect to every node on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v` (zeros when
    /// `v` did not influence the loss).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    pub fn grad_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Inputs always precede their output.
        let Tape { nodes, grads } = self;
        let nodes: &[Node] = nodes;
        let node = &nodes[i];
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        let shp = |v: Var| -> &[usize] { &nodes[v.0].shape };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = (shp(*a)[0], shp(*a)[1], shp(*b)[1]);
                // dA = dC * B^T
                let da = kernels::matmul_bt(g, val(*b), m, n, k);
                add_into(acc(grads, nodes, *a), &da);
                // dB = A^T * dC
                kernels::matmul_at_acc(acc(grads, nodes, *b), val(*a), g, m, k, n);
            }
            Op::Transpose(a) => {
                let (m, n) = (shp(*a)[0], shp(*a)[1]);
                let ga = acc(grads, nodes, *a);
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Reshape(a) => add_into(acc(grads, nodes, *a), g),
            Op::Add(a, b) => {
                add_into(acc(grads, nodes, *a), g);
                add_into(acc(grads, nodes, *b), g);
            }
            Op::AddBias(a, b) => {
                add_into(acc(grads, nodes, *a), g);
                let cols = shp(*b)[0];
                let gb = acc(grads, nodes, *b);
                for row in g.chunks(cols) {
                    add_into(gb, row);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                add_into(acc(grads, nodes, *a), &ga);
                add_into(acc(grads, nodes, *b), &gb);
            }
            Op::Scale(a, k) => {
                let k = *k;
                for (d, s) in acc(grads, nodes, *a).iter_mut().zip(g) {
                    *d += k * s;
                }
            }
            Op::Concat(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = node.value.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = *shp(*p).last().unwrap();
                    let gp = acc(grads, nodes, *p);
                    for r in 0..rows {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = *shp(*a).last().unwrap();
                let w = *node.shape.last().unwrap();
                let rows = node.value.len() / w;
                let ga = acc(grads, nodes, *a);
                for r in 0..rows {
                    add_into(&mut ga[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::GatherRows(a, rows) | Op::Embedding(a, rows) => {
                let n = shp(*a)[1];
                let ga = acc(grads, nodes, *a);
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut ga[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let cols = *node.shape.last().unwrap();
                let ga = acc(grads, nodes, *a);
                for (r, (y, gy)) in node.value.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot = kernels::dot(y, gy);
                    for c in 0..cols {
                        ga[r * cols + c] += y[c] * (gy[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = *node.shape.last().unwrap();
                let ga = acc(grads, nodes, *a);
                for (r, (y, gy)) in node.value.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let s: f64 = gy.iter().sum();
                    for c in 0..cols {
                        ga[r * cols + c] += gy[c] - y[c].exp() * s;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let cols = shp(*gamma)[0];
                let (vx, vg) = (val(*x), val(*gamma));
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = vec![0.0; vx.len()];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..mean.len() {
                    let xr = &vx[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        xhat[c] = (xr[c] - mean[r]) * rstd[r];
                        dxhat[c] = gr[c] * vg[c];
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = kernels::dot(&dxhat, &xhat) / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                add_into(acc(grads, nodes, *x), &dx);
                add_into(acc(grads, nodes, *gamma), &dgamma);
                add_into(acc(grads, nodes, *beta), &dbeta);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = val(*a).iter().zip(g).map(|(&x, g)| g * kernels::gelu_grad(x)).collect();
                add_into(acc(grads, nodes, *a), &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = node.value.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect();
                add_into(acc(grads, nodes, *a), &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = node.value.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect();
                add_into(acc(grads, nodes, *a), &d);
            }
            Op::MeanRows(a) => {
                let (m, n) = (shp(*a)[0], shp(*a)[1]);
                let ga = acc(grads, nodes, *a);
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c] / m as f64;
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                for d in acc(grads, nodes, *a).iter_mut() {
                    *d += g0;
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let c = node.value[0];
                let (va, vb) = (val(*a), val(*b));
                let g0 = g[0];
                let da: Vec<f64> =
                    va.iter().zip(vb).map(|(x, y)| g0 * (y / (na * nb) - c * x / (na * na))).collect();
                let db: Vec<f64> =
                    va.iter().zip(vb).map(|(x, y)| g0 * (x / (na * nb) - c * y / (nb * nb))).collect();
                add_into(acc(grads, nodes, *a), &da);
                add_into(acc(grads, nodes, *b), &db);
            }
            Op::TargetLogProb { logits, targets, probs } => {
                let n = shp(*logits)[1];
                let gl = acc(grads, nodes, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * n + c] += gr * (onehot - probs[r * n + c]);
                    }
                }
            }
            Op::Bce { p, labels } => {
                let n = labels.len() as f64;
                let g0 = g[0];
                let d: Vec<f64> = val(*p)
                    .iter()
                    .zip(labels.iter())
                    .map(|(&p, &y)| {
                        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        g0 * (-y / pc + (1.0 - y) / (1.0 - pc)) / n
                    })
                    .collect();
                add_into(acc(grads, nodes, *p), &d);
            }
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op.name()
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), vec![6.0]);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(&t(&[3], &[1.0, 1.0, 1.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused), vec![0.0; 3]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.5, -2.0]));
        let y = tape.add(a, a).unwrap();
        let w = tape.leaf(&t(&[2], &[0.3, 0.7]));
        let z = tape.mul(y, w).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        // grad_y = w, grad_a = 2 * w
        assert_eq!(tape.grad(y), vec![0.3, 0.7]);
        assert_eq!(tape.grad(a), vec![0.6, 1.4]);

        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1], &[2.0]));
        let mut acc = a;
        for _ in 0..4 {
            acc = tape.add(acc, a).unwrap();
        }
        let s = tape.sum(acc).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a), vec![5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[0.3; 4]));
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s), &[0.25; 4]);
        let y = tape.leaf(&t(&[2, 3], &[1.0, -2.0, 0.5, 30.0, 29.0, -40.0]));
        let s = tape.softmax(y).unwrap();
        for row in tape.value(s).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ls = tape.log_softmax(y).unwrap();
        for (a, b) in tape.value(ls).iter().zip(tape.value(s)) {
            assert!((a - b.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 8], &[0.0; 8]));
        let ce = tape.cross_entropy(x, &[5]).unwrap();
        assert!((tape.scalar(ce) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matmul_forward_matches_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        // Brute-force triple loop.
        let (av, bv) = ([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], [[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]);
        let mut expect = vec![];
        for row in av {
            for j in 0..2 {
                expect.push((0..3).map(|k| row[k] * bv[k][j]).sum::<f64>());
            }
        }
        assert_eq!(tape.value(c), expect.as_slice());
    }

    #[test]
    fn masked_softmax_respects_mask() {
        let mask = AttentionMask::causal(3);
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 3], &[1.0, 5.0, 9.0, 2.0, 2.0, 7.0, 0.0, 0.0, 0.0]));
        let s = tape.masked_softmax(x, &mask).unwrap();
        let v = tape.value(s);
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert!((v[6] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn prefix_segment_mask_layout() {
        let m = AttentionMask::prefix_segments(2, &[2, 1]);
        assert_eq!(m.size(), 5);
        assert!(m.allows(1, 0) && !m.allows(0, 1));
        assert!(m.allows(3, 0) && m.allows(3, 2) && m.allows(3, 3));
        assert!(!m.allows(4, 2) && !m.allows(4, 3) && m.allows(4, 4) && m.allows(4, 1));
    }

    #[test]
    fn non_finite_is_a_fault() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[1e300]));
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "mul", .. }));
    }

    #[test]
    fn adversarial_logits_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1e300, -1e300, 0.0, -1e308, 1e308, 5.0]));
        let ce = tape.cross_entropy(x, &[1, 0]).unwrap();
        assert!(tape.scalar(ce).is_finite());
        tape.backward(ce).unwrap();
        assert!(tape.grad(x).iter().all(|g| g.is_finite()));
    }
}
