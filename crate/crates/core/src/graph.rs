//! Dense f64 matrices on a replayable compute tape with reverse-mode
//! gradient propagation.
//!
//! Every tensor is a row-major `rows x cols` matrix owned by a [`Graph`].
//! Operations record themselves on the tape as they execute; [`Graph::backward`]
//! walks the tape in exact reverse execution order and accumulates gradients
//! additively, so a tensor feeding several consumers receives the sum of
//! their contributions. All loops run in a fixed order, which makes a replay
//! of the same graph bit-identical.

use crate::error::{Error, Result};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// Zero-guard inside layer normalization. Kept far below any realistic row
/// variance so the normalized output variance stays within 1e-8 of 1.
const LAYER_NORM_EPS: f64 = 1e-30;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// Adds a 1 x n row vector to every row of an m x n matrix.
    AddRow { a: TensorId, row: TensorId },
    Scale { a: TensorId, c: f64 },
    AddConst { a: TensorId },
    /// Multiplies every entry by a learnable 1x1 scalar tensor.
    MulScalar { a: TensorId, s: TensorId },
    /// Adds a learnable 1x1 scalar tensor to every entry.
    AddScalar { a: TensorId, s: TensorId },
    Gelu { a: TensorId },
    Exp { a: TensorId },
    Ln { a: TensorId },
    LayerNorm { a: TensorId, gain: TensorId, bias: TensorId },
    RowSoftmax { a: TensorId },
    RowLogSumExp { a: TensorId },
    L2NormalizeRows { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    RowSum { a: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    GatherRows { a: TensorId, idx: Vec<usize> },
    Diag { a: TensorId },
    /// Entry (j, p) is the Euclidean distance between row j of `pred`
    /// and row p of `truth`.
    PairwiseDist { pred: TensorId, truth: TensorId },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Ordered record of executed operations, replayable backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Exact Gaussian-CDF GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of the exact GELU: Phi(x) + x * phi(x).
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() * INV_SQRT_2PI;
    phi_cdf + x * phi_pdf
}

/// `out += a * b` for row-major `a: m x k`, `b: k x n`, `out: m x n`.
///
/// Accumulation over k runs in increasing order per output element, so the
/// result for any given row does not depend on how many rows the call covers.
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = bv.mul_add(av, *o);
            }
        }
    }
}

fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf tensor (parameter, input, or constant).
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<TensorId> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "leaf wants {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn leaf_zeros(&mut self, rows: usize, cols: usize) -> Result<TensorId> {
        self.leaf(rows, cols, vec![0.0; rows * cols])
    }

    pub fn shape(&self, t: TensorId) -> (usize, usize) {
        let n = &self.nodes[t.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn scalar_value(&self, t: TensorId) -> Result<f64> {
        let (r, c) = self.shape(t);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar((r, c)));
        }
        Ok(self.nodes[t.0].data[0])
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, t: TensorId) -> &Node {
        &self.nodes[t.0]
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, &self.node(a).data, &self.node(b).data, m, k, n);
        Ok(self.push(m, n, data, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let data = transpose_data(&self.node(a).data, r, c);
        self.push(c, r, data, Op::Transpose { a })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(sa.0, sa.1, data, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(sa.0, sa.1, data, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(sa.0, sa.1, data, Op::Mul { a, b }))
    }

    /// `a + row` where `row` is `1 x n` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let rs = self.shape(row);
        if rs != (1, n) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: (m, n),
                rhs: rs,
            });
        }
        let mut data = self.node(a).data.clone();
        let rv = &self.node(row).data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rv[j];
            }
        }
        Ok(self.push(m, n, data, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (r, cl) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * c).collect();
        self.push(r, cl, data, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let (r, cl) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x + c).collect();
        self.push(r, cl, data, Op::AddConst { a })
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let ss = self.shape(s);
        if ss != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.shape(a),
                rhs: ss,
            });
        }
        let sv = self.node(s).data[0];
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * sv).collect();
        Ok(self.push(r, c, data, Op::MulScalar { a, s }))
    }

    pub fn add_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let ss = self.shape(s);
        if ss != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "add_scalar",
                lhs: self.shape(a),
                rhs: ss,
            });
        }
        let sv = self.node(s).data[0];
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x + sv).collect();
        Ok(self.push(r, c, data, Op::AddScalar { a, s }))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| gelu_scalar(x)).collect();
        self.push(r, c, data, Op::Gelu { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.exp()).collect();
        self.push(r, c, data, Op::Exp { a })
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.ln()).collect();
        self.push(r, c, data, Op::Ln { a })
    }

    /// Per-row normalization to zero mean / unit variance, then learned
    /// gain and bias (both `1 x n`).
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        for (name, t) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(t);
            if s != (1, n) {
                let _ = name;
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: (m, n),
                    rhs: s,
                });
            }
        }
        let mut data = vec![0.0; m * n];
        {
            let x = &self.node(a).data;
            let g = &self.node(gain).data;
            let b = &self.node(bias).data;
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..n {
                    data[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
            }
        }
        Ok(self.push(m, n, data, Op::LayerNorm { a, gain, bias }))
    }

    /// Row-wise softmax, stabilized by subtracting the row max.
    pub fn row_softmax(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut data = vec![0.0; m * n];
        {
            let x = &self.node(a).data;
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    data[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[i * n + j] /= sum;
                }
            }
        }
        self.push(m, n, data, Op::RowSoftmax { a })
    }

    /// Row-wise log-sum-exp, stabilized; `m x n -> m x 1`.
    pub fn row_log_sum_exp(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut data = vec![0.0; m];
        {
            let x = &self.node(a).data;
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                data[i] = mx + sum.ln();
            }
        }
        self.push(m, 1, data, Op::RowLogSumExp { a })
    }

    /// Scales every row to unit L2 norm. Rows with norm below 1e-30 map to zero.
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut data = vec![0.0; m * n];
        {
            let x = &self.node(a).data;
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                for j in 0..n {
                    data[i * n + j] = row[j] / norm;
                }
            }
        }
        self.push(m, n, data, Op::L2NormalizeRows { a })
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.node(a).data.iter().sum::<f64>();
        self.push(1, 1, vec![s], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let node = self.node(a);
        let s = node.data.iter().sum::<f64>() / node.data.len() as f64;
        self.push(1, 1, vec![s], Op::MeanAll { a })
    }

    /// Row sums: `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let x = &self.node(a).data;
        let data: Vec<f64> = (0..m).map(|i| x[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(m, 1, data, Op::RowSum { a })
    }

    /// Concatenates along the token (row) axis. All parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of zero parts".into()));
        }
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, n),
                    rhs: (r, c),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(&self.node(p).data);
        }
        Ok(self.push(
            rows,
            n,
            data,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Takes `len` consecutive rows starting at `start`.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if start + len > m || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice_rows [{start}, {}) out of {m} rows",
                start + len
            )));
        }
        let data = self.node(a).data[start * n..(start + len) * n].to_vec();
        Ok(self.push(len, n, data, Op::SliceRows { a, start }))
    }

    /// Gathers rows by index; duplicate indices accumulate gradient additively.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index out of range (rows = {m})"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.node(a).data[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            idx.len(),
            n,
            data,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Extracts the main diagonal of a square matrix as `n x 1`.
    pub fn diag(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if m != n {
            return Err(Error::ShapeMismatch {
                op: "diag",
                lhs: (m, n),
                rhs: (n, n),
            });
        }
        let x = &self.node(a).data;
        let data: Vec<f64> = (0..n).map(|i| x[i * n + i]).collect();
        Ok(self.push(n, 1, data, Op::Diag { a }))
    }

    /// Pairwise Euclidean distances: `pred: m x d`, `truth: p x d -> m x p`.
    pub fn pairwise_dist(&mut self, pred: TensorId, truth: TensorId) -> Result<TensorId> {
        let (m, d) = self.shape(pred);
        let (p, d2) = self.shape(truth);
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_dist",
                lhs: (m, d),
                rhs: (p, d2),
            });
        }
        let mut data = vec![0.0; m * p];
        {
            let a = &self.node(pred).data;
            let b = &self.node(truth).data;
            for j in 0..m {
                let aj = &a[j * d..(j + 1) * d];
                for q in 0..p {
                    let bq = &b[q * d..(q + 1) * d];
                    let mut s = 0.0;
                    for t in 0..d {
                        let diff = aj[t] - bq[t];
                        s += diff * diff;
                    }
                    data[j * p + q] = s.sqrt();
                }
            }
        }
        Ok(self.push(m, p, data, Op::PairwiseDist { pred, truth }))
    }

    /// Propagates gradients from a scalar loss back through the whole tape.
    ///
    /// Every node reachable from the loss receives a populated gradient;
    /// unreachable nodes keep zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(Error::NotScalar(s));
        }
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        // Inputs always precede their output on the tape, so splitting at i
        // leaves every input mutable while the output stays readable.
        let (inputs, rest) = self.nodes.split_at_mut(i);
        let out = &rest[0];
        let gout = &out.grad;
        if gout.iter().all(|&g| g == 0.0) {
            return;
        }
        let (m, n) = (out.rows, out.cols);
        match &out.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (am, ak) = (inputs[a.0].rows, inputs[a.0].cols);
                // dA += g . B^T
                let bt = transpose_data(&inputs[b.0].data, ak, n);
                matmul_acc(&mut inputs[a.0].grad, gout, &bt, am, n, ak);
                // dB += A^T . g
                let at = transpose_data(&inputs[a.0].data, am, ak);
                matmul_acc(&mut inputs[b.0].grad, &at, gout, ak, am, n);
            }
            Op::Transpose { a } => {
                let node = &mut inputs[a.0];
                for i2 in 0..m {
                    for j in 0..n {
                        node.grad[j * m + i2] += gout[i2 * n + j];
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for (g, d) in inputs[a.0].grad.iter_mut().zip(gout) {
                    *g += d;
                }
                for (g, d) in inputs[b.0].grad.iter_mut().zip(gout) {
                    *g += d;
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                for (g, d) in inputs[a.0].grad.iter_mut().zip(gout) {
                    *g += d;
                }
                for (g, d) in inputs[b.0].grad.iter_mut().zip(gout) {
                    *g -= d;
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let bd = inputs[b.0].data.clone();
                for ((g, d), bv) in inputs[a.0].grad.iter_mut().zip(gout).zip(&bd) {
                    *g += d * bv;
                }
                let ad = inputs[a.0].data.clone();
                for ((g, d), av) in inputs[b.0].grad.iter_mut().zip(gout).zip(&ad) {
                    *g += d * av;
                }
            }
            Op::AddRow { a, row } => {
                let (a, row) = (*a, *row);
                for (g, d) in inputs[a.0].grad.iter_mut().zip(gout) {
                    *g += d;
                }
                let rg = &mut inputs[row.0].grad;
                for i2 in 0..m {
                    for j in 0..n {
                        rg[j] += gout[i2 * n + j];
                    }
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                for (g, d) in inputs[a.0].grad.iter_mut().zip(gout) {
                    *g += d * c;
                }
            }
            Op::AddConst { a } => {
                for (g, d) in inputs[a.0].grad.iter_mut().zip(gout) {
                    *g += d;
                }
            }
            Op::MulScalar { a, s } => {
                let (a, s) = (*a, *s);
                let sv = inputs[s.0].data[0];
                let ad = inputs[a.0].data.clone();
                for (g, d) in inputs[a.0].grad.iter_mut().zip(gout) {
                    *g += d * sv;
                }
                let mut acc = 0.0;
                for (d, av) in gout.iter().zip(&ad) {
                    acc += d * av;
                }
                inputs[s.0].grad[0] += acc;
            }
            Op::AddScalar { a, s } => {
                let (a, s) = (*a, *s);
                for (g, d) in inputs[a.0].grad.iter_mut().zip(gout) {
                    *g += d;
                }
                inputs[s.0].grad[0] += gout.iter().sum::<f64>();
            }
            Op::Gelu { a } => {
                let node = &mut inputs[a.0];
                for (j, (g, d)) in node.grad.iter_mut().zip(gout).enumerate() {
                    *g += d * gelu_grad_scalar(node.data[j]);
                }
            }
            Op::Exp { a } => {
                let y = &out.data;
                for ((g, d), yv) in inputs[a.0].grad.iter_mut().zip(gout).zip(y) {
                    *g += d * yv;
                }
            }
            Op::Ln { a } => {
                let node = &mut inputs[a.0];
                for (j, (g, d)) in node.grad.iter_mut().zip(gout).enumerate() {
                    *g += d / node.data[j];
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let gv = inputs[gain.0].data.clone();
                {
                    let node = &mut inputs[a.0];
                    for i2 in 0..m {
                        let row = &node.data[i2 * n..(i2 + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gr = &gout[i2 * n..(i2 + 1) * n];
                        // gh = upstream grad through the gain; xh = normalized input
                        let mut mean_gh = 0.0;
                        let mut mean_gh_xh = 0.0;
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            let xh = (row[j] - mean) * rstd;
                            mean_gh += gh;
                            mean_gh_xh += gh * xh;
                        }
                        mean_gh /= n as f64;
                        mean_gh_xh /= n as f64;
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            let xh = (row[j] - mean) * rstd;
                            node.grad[i2 * n + j] += rstd * (gh - mean_gh - xh * mean_gh_xh);
                        }
                    }
                }
                // Gain and bias grads need the normalized input again.
                let (xdata, _) = (inputs[a.0].data.clone(), ());
                let ggrad = &mut inputs[gain.0].grad;
                for i2 in 0..m {
                    let row = &xdata[i2 * n..(i2 + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for j in 0..n {
                        ggrad[j] += gout[i2 * n + j] * (row[j] - mean) * rstd;
                    }
                }
                let bgrad = &mut inputs[bias.0].grad;
                for i2 in 0..m {
                    for j in 0..n {
                        bgrad[j] += gout[i2 * n + j];
                    }
                }
            }
            Op::RowSoftmax { a } => {
                let y = &out.data;
                let ag = &mut inputs[a.0].grad;
                for i2 in 0..m {
                    let yr = &y[i2 * n..(i2 + 1) * n];
                    let gr = &gout[i2 * n..(i2 + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        ag[i2 * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::RowLogSumExp { a } => {
                let y = &out.data;
                let node = &mut inputs[a.0];
                let nc = node.cols;
                for i2 in 0..node.rows {
                    let g = gout[i2];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..nc {
                        node.grad[i2 * nc + j] += g * (node.data[i2 * nc + j] - y[i2]).exp();
                    }
                }
            }
            Op::L2NormalizeRows { a } => {
                let node = &mut inputs[a.0];
                for i2 in 0..m {
                    let row = &node.data[i2 * n..(i2 + 1) * n];
                    let gr = &gout[i2 * n..(i2 + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                    // y = x / |x|; dx = (g - x * (x.g) / |x|^2) / |x|
                    let xdotg: f64 =
                        row.iter().zip(gr).map(|(x, g)| x * g).sum::<f64>() / (norm * norm);
                    for j in 0..n {
                        node.grad[i2 * n + j] += (gr[j] - row[j] * xdotg) / norm;
                    }
                }
            }
            Op::SumAll { a } => {
                let g = gout[0];
                for gv in inputs[a.0].grad.iter_mut() {
                    *gv += g;
                }
            }
            Op::MeanAll { a } => {
                let cnt = inputs[a.0].data.len() as f64;
                let g = gout[0] / cnt;
                for gv in inputs[a.0].grad.iter_mut() {
                    *gv += g;
                }
            }
            Op::RowSum { a } => {
                let node = &mut inputs[a.0];
                let nc = node.cols;
                for i2 in 0..node.rows {
                    let g = gout[i2];
                    for j in 0..nc {
                        node.grad[i2 * nc + j] += g;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = inputs[p.0].data.len();
                    for (g, d) in inputs[p.0]
                        .grad
                        .iter_mut()
                        .zip(&gout[offset..offset + len])
                    {
                        *g += d;
                    }
                    offset += len;
                }
            }
            Op::SliceRows { a, start } => {
                let start = *start;
                let node = &mut inputs[a.0];
                let nc = node.cols;
                for (g, d) in node.grad[start * nc..start * nc + gout.len()]
                    .iter_mut()
                    .zip(gout)
                {
                    *g += d;
                }
            }
            Op::GatherRows { a, idx } => {
                let idx = idx.clone();
                let node = &mut inputs[a.0];
                let nc = node.cols;
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..nc {
                        node.grad[src * nc + j] += gout[r * nc + j];
                    }
                }
            }
            Op::Diag { a } => {
                let node = &mut inputs[a.0];
                let nc = node.cols;
                for i2 in 0..nc {
                    node.grad[i2 * nc + i2] += gout[i2];
                }
            }
            Op::PairwiseDist { pred, truth } => {
                let (pred, truth) = (*pred, *truth);
                let d = inputs[pred.0].cols;
                let dist = &out.data;
                let td = inputs[truth.0].data.clone();
                {
                    let pnode = &mut inputs[pred.0];
                    for j in 0..m {
                        for q in 0..n {
                            let g = gout[j * n + q];
                            let dv = dist[j * n + q];
                            if g == 0.0 || dv == 0.0 {
                                continue;
                            }
                            let w = g / dv;
                            for t in 0..d {
                                pnode.grad[j * d + t] +=
                                    w * (pnode.data[j * d + t] - td[q * d + t]);
                            }
                        }
                    }
                }
                let pd = inputs[pred.0].data.clone();
                {
                    let tnode = &mut inputs[truth.0];
                    for j in 0..m {
                        for q in 0..n {
                            let g = gout[j * n + q];
                            let dv = dist[j * n + q];
                            if g == 0.0 || dv == 0.0 {
                                continue;
                            }
                            let w = g / dv;
                            for t in 0..d {
                                tnode.grad[q * d + t] +=
                                    w * (tnode.data[q * d + t] - pd[j * d + t]);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_is_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let y = g.gelu(x);
        assert_eq!(g.value(y)[1], 0.0);
        // odd-point symmetry around the linear term: gelu(1) + gelu(-1) = 1*Phi(1) - 1*Phi(-1) ... = 1 - 1 = not trivial;
        // just check the closed form at 1.0
        let expected = 0.5 * (1.0 + libm::erf(std::f64::consts::FRAC_1_SQRT_2));
        assert!((g.value(y)[2] - expected).abs() < 1e-15);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        for c in [-7.3, 0.0, 123.4] {
            let mut g = Graph::new();
            let x = g.leaf(1, 3, vec![c, c, c]).unwrap();
            let y = g.row_softmax(x);
            for &v in g.value(y) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.leaf(1, 2, vec![3.0, 4.0]).unwrap();
        let y = g.l2_normalize_rows(x);
        assert!((g.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((g.value(y)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(x . x), x = [1, 2] -> grad [2, 4]
        let mut g = Graph::new();
        let x = g.leaf(1, 2, vec![1.0, 2.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let c = g.leaf(1, 1, vec![3.0]).unwrap();
        let loss = g.sum_all(c);
        let _unused = g.mul(x, x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar((1, 2)))));
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(2, 3, vec![0.0; 6]).unwrap();
        let b = g.leaf(2, 2, vec![0.0; 4]).unwrap();
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, (2, 3));
                assert_eq!(rhs, (2, 2));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        // loss = sum(x + x) -> dx = 2 per entry
        let mut g = Graph::new();
        let x = g.leaf(1, 2, vec![5.0, -3.0]).unwrap();
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[2.0, 2.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = || {
            let mut g = Graph::new();
            let a = g.leaf(2, 3, vec![0.3, -1.2, 0.7, 2.2, -0.4, 0.9]).unwrap();
            let b = g.leaf(3, 2, vec![1.0, 0.1, -0.5, 0.4, 0.2, -1.1]).unwrap();
            let c = g.matmul(a, b).unwrap();
            let d = g.gelu(c);
            let loss = g.mean_all(d);
            g.backward(loss).unwrap();
            (g.value(loss).to_vec(), g.grad(a).to_vec())
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
