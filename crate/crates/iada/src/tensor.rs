//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A `Graph` is a single-pass Wengert tape: every operation appends a node
//! holding its output data and the references needed for its backward rule.
//! Node ids only ever point at earlier nodes, so reverse id order is a valid
//! reverse topological order and `backward` visits each node exactly once.
//!
//! Everything is stored as f64. In `Precision::F32` mode each op output is
//! rounded through f32 before it is stored, emulating a 32-bit forward pass
//! while keeping a single code path. Verification runs use `Precision::F64`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite element in output")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("backward: loss must be a scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward: called twice on the same graph without reset")]
    BackwardTwice,
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
}

pub type Result<T> = std::result::Result<T, NumericError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn quantize(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Handle to a node in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast {
        m: Var,
        row: Var,
    },
    ScaleConst {
        x: Var,
        c: f64,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    SoftmaxRows(Var),
    Sigmoid(Var),
    Gelu(Var),
    MeanRows(Var),
    SumAll(Var),
    RowNorm {
        x: Var,
        scale: Var,
        bias: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<u32>,
    },
    ScatterRows {
        src: Var,
        idx: Vec<u32>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Transpose(Var),
    CrossEntropyRow {
        logits: Var,
        row: usize,
        target: usize,
    },
}

struct Node {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

const NORM_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn push(
        &mut self,
        op_name: &'static str,
        data: Vec<f64>,
        rows: usize,
        cols: usize,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(data.len(), rows * cols);
        let mut data = data;
        self.precision.quantize(&mut data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            data,
            rows,
            cols,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
    ) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(NumericError::ShapeMismatch {
                op: "leaf",
                detail: format!("{} elements for {}x{}", data.len(), rows, cols),
            });
        }
        self.push("leaf", data, rows, cols, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(data, rows, cols, false)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Result<Var> {
        self.leaf(vec![v], 1, 1, false)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `op(a) · op(b)` where `ta`/`tb` transpose the stored operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} (t={}) vs {}x{} (t={})", ar, ac, ta, br, bc, tb),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &self.nodes[a.0].data,
            ta,
            &self.nodes[b.0].data,
            tb,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, m, n, Op::Matmul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    fn binary_same_shape(&mut self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, r, c, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, r, c, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, r, c, Op::Mul(a, b), rg)
    }

    /// `m + 1·row` where `row` is `1 x cols`.
    pub fn add_row_broadcast(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(m);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(NumericError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("{}x{} + {}x{}", r, c, rr, rc),
            });
        }
        let mut out = self.nodes[m.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.nodes[row.0].data[j];
            }
        }
        let rg = self.rg(m) || self.rg(row);
        self.push(
            "add_row_broadcast",
            out,
            r,
            c,
            Op::AddRowBroadcast { m, row },
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let (r, cl) = self.shape(x);
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push("scale", out, r, cl, Op::ScaleConst { x, c }, rg)
    }

    /// Elementwise multiply by a `1x1` scalar node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(NumericError::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("scalar has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        self.push("mul_scalar", out, r, c, Op::MulScalar { x, s }, rg)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(NumericError::EmptyInput { op: "softmax" });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let rg = self.rg(x);
        self.push("softmax", out, r, c, Op::SoftmaxRows(x), rg)
    }

    /// Softmax along `axis` of a 2-D tensor (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax_rows(x),
            0 => {
                let t = self.transpose(x)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(NumericError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {} on a 2-D tensor", axis),
            }),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let rg = self.rg(x);
        self.push("sigmoid", out, r, c, Op::Sigmoid(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        let rg = self.rg(x);
        self.push("gelu", out, r, c, Op::Gelu(x), rg)
    }

    /// Mean over axis 0: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(NumericError::EmptyInput { op: "mean_rows" });
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.nodes[x.0].data[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v /= r as f64;
        }
        let rg = self.rg(x);
        self.push("mean_rows", out, 1, c, Op::MeanRows(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push("sum_all", vec![s], 1, 1, Op::SumAll(x), rg)
    }

    /// Per-row standardization (zero mean, unit variance over the columns)
    /// followed by an elementwise affine map. `scale` and `bias` are `1 x d`.
    pub fn row_norm(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(scale) != (1, c) || self.shape(bias) != (1, c) {
            return Err(NumericError::ShapeMismatch {
                op: "row_norm",
                detail: format!(
                    "x {}x{}, scale {:?}, bias {:?}",
                    r,
                    c,
                    self.shape(scale),
                    self.shape(bias)
                ),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                out[i * c + j] = xh * self.nodes[scale.0].data[j] + self.nodes[bias.0].data[j];
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(bias);
        self.push("row_norm", out, r, c, Op::RowNorm { x, scale, bias }, rg)
    }

    /// Select rows by index; duplicates allowed (also serves as embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[u32]) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i as usize >= r {
                return Err(NumericError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i as usize,
                    limit: r,
                });
            }
            out.extend_from_slice(&self.nodes[x.0].data[i as usize * c..(i as usize + 1) * c]);
        }
        let rg = self.rg(x);
        self.push(
            "gather_rows",
            out,
            idx.len(),
            c,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Place rows of `src` at positions `idx` of an `n_rows x d` output, zero
    /// elsewhere. A single-row `src` is broadcast over every index.
    pub fn scatter_rows(&mut self, src: Var, idx: &[u32], n_rows: usize) -> Result<Var> {
        let (sr, c) = self.shape(src);
        if sr != 1 && sr != idx.len() {
            return Err(NumericError::ShapeMismatch {
                op: "scatter_rows",
                detail: format!("{} source rows for {} indices", sr, idx.len()),
            });
        }
        let mut out = vec![0.0; n_rows * c];
        for (pos, &i) in idx.iter().enumerate() {
            if i as usize >= n_rows {
                return Err(NumericError::IndexOutOfRange {
                    op: "scatter_rows",
                    index: i as usize,
                    limit: n_rows,
                });
            }
            let srow = if sr == 1 { 0 } else { pos };
            for j in 0..c {
                out[i as usize * c + j] = self.nodes[src.0].data[srow * c + j];
            }
        }
        let rg = self.rg(src);
        self.push(
            "scatter_rows",
            out,
            n_rows,
            c,
            Op::ScatterRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericError::EmptyInput { op: "concat_rows" });
        }
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts {} vs {}", c, pc),
                });
            }
            out.extend_from_slice(&self.nodes[p.0].data);
            rows += pr;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_rows",
            out,
            rows,
            c,
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericError::EmptyInput { op: "concat_cols" });
        }
        let r = self.shape(parts[0]).0;
        let mut widths = Vec::new();
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", r, pr),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_cols",
            out,
            r,
            total,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(NumericError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.nodes[x.0].data[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(
            "slice_cols",
            out,
            r,
            len,
            Op::SliceCols { x, start, len },
            rg,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.nodes[x.0].data[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push("transpose", out, c, r, Op::Transpose(x), rg)
    }

    /// Softmax cross-entropy of one row of a logit matrix against a target id.
    pub fn cross_entropy_row(&mut self, logits: Var, row: usize, target: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if row >= r {
            return Err(NumericError::IndexOutOfRange {
                op: "cross_entropy",
                index: row,
                limit: r,
            });
        }
        if target >= c {
            return Err(NumericError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                limit: c,
            });
        }
        let lr = &self.nodes[logits.0].data[row * c..(row + 1) * c];
        let mx = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + lr.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let loss = lse - lr[target];
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            vec![loss],
            1,
            1,
            Op::CrossEntropyRow {
                logits,
                row,
                target,
            },
            rg,
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients on every node
    /// that requires grad; erroring paths leave the graph untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(NumericError::BackwardTwice);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(NumericError::NonScalarLoss { rows: r, cols: c });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        // slot is re-borrowed mutably outside self.nodes access paths
        let mut buf = std::mem::take(slot);
        add(&mut buf);
        self.grads[v.0] = Some(buf);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let (m, n) = (self.nodes[id].rows, self.nodes[id].cols);
                let k = if ta {
                    self.nodes[a.0].rows
                } else {
                    self.nodes[a.0].cols
                };
                if self.rg(a) {
                    // dA' = dC·B'ᵀ, transposed back when ta
                    let (ar, ac) = self.shape(a);
                    let mut da = self.grads[a.0].take().unwrap_or_else(|| vec![0.0; ar * ac]);
                    if !ta {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            g,
                            false,
                            &self.nodes[b.0].data,
                            !tb,
                            1.0,
                            &mut da,
                        );
                    } else {
                        // dA = B'·dCᵀ
                        gemm(
                            k,
                            n,
                            m,
                            1.0,
                            &self.nodes[b.0].data,
                            tb,
                            g,
                            true,
                            1.0,
                            &mut da,
                        );
                    }
                    self.grads[a.0] = Some(da);
                }
                if self.rg(b) {
                    let (br, bc) = self.shape(b);
                    let mut db = self.grads[b.0].take().unwrap_or_else(|| vec![0.0; br * bc]);
                    if !tb {
                        // dB = A'ᵀ·dC
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &self.nodes[a.0].data,
                            !ta,
                            g,
                            false,
                            1.0,
                            &mut db,
                        );
                    } else {
                        // dB = dCᵀ·A'
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            g,
                            true,
                            &self.nodes[a.0].data,
                            ta,
                            1.0,
                            &mut db,
                        );
                    }
                    self.grads[b.0] = Some(db);
                }
            }
            Op::Add(a, b) => {
                self.accum(a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let bd = self.nodes[b.0].data.clone();
                self.accum(a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bd[i];
                    }
                });
                let ad = self.nodes[a.0].data.clone();
                self.accum(b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRowBroadcast { m, row } => {
                self.accum(m, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                let (r, c) = self.shape(m);
                self.accum(row, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ScaleConst { x, c } => {
                self.accum(x, |d| {
                    for (v, gv) in d.iter_mut().zip(g) {
                        *v += c * gv;
                    }
                });
            }
            Op::MulScalar { x, s } => {
                let sv = self.nodes[s.0].data[0];
                self.accum(x, |d| {
                    for (v, gv) in d.iter_mut().zip(g) {
                        *v += sv * gv;
                    }
                });
                let dot: f64 = self.nodes[x.0].data.iter().zip(g).map(|(a, b)| a * b).sum();
                self.accum(s, |d| d[0] += dot);
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = (self.nodes[id].rows, self.nodes[id].cols);
                let y = self.nodes[id].data.clone();
                self.accum(x, |d| {
                    for i in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g[i * c + j] * y[i * c + j];
                        }
                        for j in 0..c {
                            d[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[id].data.clone();
                self.accum(x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xin = self.nodes[x.0].data.clone();
                self.accum(x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_bwd(xin[i]);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (r, c) = self.shape(x);
                let inv = 1.0 / r as f64;
                self.accum(x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.accum(x, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::RowNorm { x, scale, bias } => {
                let (r, c) = self.shape(x);
                let xd = self.nodes[x.0].data.clone();
                let sd = self.nodes[scale.0].data.clone();
                // recompute per-row statistics for the backward rule
                let mut dscale = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv;
                        let dy = g[i * c + j];
                        dscale[j] += dy * xh;
                        dbias[j] += dy;
                        let dxh = dy * sd[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv;
                        let dxh = g[i * c + j] * sd[j];
                        dx[i * c + j] +=
                            inv * (dxh - sum_dxh / c as f64 - xh * sum_dxh_xh / c as f64);
                    }
                }
                self.accum(x, |d| {
                    for i in 0..d.len() {
                        d[i] += dx[i];
                    }
                });
                self.accum(scale, |d| {
                    for j in 0..c {
                        d[j] += dscale[j];
                    }
                });
                self.accum(bias, |d| {
                    for j in 0..c {
                        d[j] += dbias[j];
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.nodes[id].cols;
                self.accum(x, |d| {
                    for (pos, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i as usize * c + j] += g[pos * c + j];
                        }
                    }
                });
            }
            Op::ScatterRows { src, idx } => {
                let (sr, c) = self.shape(src);
                self.accum(src, |d| {
                    for (pos, &i) in idx.iter().enumerate() {
                        let srow = if sr == 1 { 0 } else { pos };
                        for j in 0..c {
                            d[srow * c + j] += g[i as usize * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let c = self.nodes[id].cols;
                let mut off = 0;
                for p in parts {
                    let pr = self.nodes[p.0].rows;
                    let start = off;
                    self.accum(p, |d| {
                        d.copy_len_add(&g[start * c..(start + pr) * c]);
                    });
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (self.nodes[id].rows, self.nodes[id].cols);
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p.0].cols;
                    let start = off;
                    self.accum(p, |d| {
                        for i in 0..r {
                            for j in 0..pc {
                                d[i * pc + j] += g[i * total + start + j];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.shape(x);
                self.accum(x, |d| {
                    for i in 0..r {
                        for j in 0..len {
                            d[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.shape(x);
                self.accum(x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::CrossEntropyRow {
                logits,
                row,
                target,
            } => {
                let (_, c) = self.shape(logits);
                let lr = self.nodes[logits.0].data[row * c..(row + 1) * c].to_vec();
                let gv = g[0];
                self.accum(logits, |d| {
                    let mx = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = lr.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (lr[j] - mx).exp() / z;
                        let t = if j == target { 1.0 } else { 0.0 };
                        d[row * c + j] += gv * (p - t);
                    }
                });
            }
        }
    }
}

trait AddSlice {
    fn copy_len_add(&mut self, src: &[f64]);
}

impl AddSlice for [f64] {
    fn copy_len_add(&mut self, src: &[f64]) {
        for (a, b) in self.iter_mut().zip(src) {
            *a += b;
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `c = alpha * op(a)·op(b) + beta * c` over row-major storage.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{finite_diff_grad, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity_and_projection() {
        let mut g = Graph::new(Precision::F64);
        let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(vec![1.0, 0.0, 0.0, 0.0], 2, 2).unwrap();
        let x = g.constant(vec![5.0, 7.0], 2, 1).unwrap();
        let y = g.matmul(p, x).unwrap();
        assert_eq!(g.data(y), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(vec![0.0; 6], 2, 3).unwrap();
        let b = g.constant(vec![0.0; 4], 2, 2).unwrap();
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = randn(&mut rng, 12);
        let b0 = randn(&mut rng, 8);
        let f = |av: &[f64]| -> Result<f64> {
            let mut g = Graph::new(Precision::F64);
            let a = g.leaf(av.to_vec(), 3, 4, true)?;
            let b = g.constant(b0.clone(), 4, 2)?;
            let c = g.matmul(a, b)?;
            let s = g.sum_all(c)?;
            Ok(g.scalar(s))
        };
        let fd = finite_diff_grad(f, &a0, 1e-5).unwrap();
        let mut g = Graph::new(Precision::F64);
        let a = g.leaf(a0.clone(), 3, 4, true).unwrap();
        let b = g.constant(b0.clone(), 4, 2).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        let err = max_rel_err(g.grad(a).unwrap(), &fd);
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn matmul_transpose_variants_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            // logical A is 3x4, B is 4x2
            let (ar, ac) = if ta { (4, 3) } else { (3, 4) };
            let (br, bc) = if tb { (2, 4) } else { (4, 2) };
            let a0 = randn(&mut rng, 12);
            let b0 = randn(&mut rng, 8);
            let run = |av: &[f64], bv: &[f64], want_grad: bool| -> (f64, Vec<f64>, Vec<f64>) {
                let mut g = Graph::new(Precision::F64);
                let a = g.leaf(av.to_vec(), ar, ac, true).unwrap();
                let b = g.leaf(bv.to_vec(), br, bc, true).unwrap();
                let c = g.matmul_t(a, b, ta, tb).unwrap();
                let c2 = g.mul(c, c).unwrap();
                let s = g.sum_all(c2).unwrap();
                if want_grad {
                    g.backward(s).unwrap();
                    (
                        g.scalar(s),
                        g.grad(a).unwrap().to_vec(),
                        g.grad(b).unwrap().to_vec(),
                    )
                } else {
                    (g.scalar(s), vec![], vec![])
                }
            };
            let (_, da, db) = run(&a0, &b0, true);
            let fa = finite_diff_grad(|x| Ok(run(x, &b0, false).0), &a0, 1e-5).unwrap();
            let fb = finite_diff_grad(|x| Ok(run(&a0, x, false).0), &b0, 1e-5).unwrap();
            assert!(max_rel_err(&da, &fa) < 1e-6, "dA ta={ta} tb={tb}");
            assert!(max_rel_err(&db, &fb) < 1e-6, "dB ta={ta} tb={tb}");
        }
    }

    #[test]
    fn softmax_uniform_and_logistic() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(vec![0.0, 0.0, 0.0], 1, 3).unwrap();
        let s = g.softmax_rows(x).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // [x, x+c] -> [sigma(-c), sigma(c)] for c = 1
        let y = g.constant(vec![5.0, 6.0], 1, 2).unwrap();
        let sy = g.softmax_rows(y).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v as f64).exp());
        assert!((g.data(sy)[0] - sig(-1.0)).abs() < 1e-12);
        assert!((g.data(sy)[1] - sig(1.0)).abs() < 1e-12);
        assert!((g.data(sy)[0] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x0 = randn(&mut rng, 15);
            let shift: f64 = rng.gen_range(-5.0..5.0);
            let mut g = Graph::new(Precision::F64);
            let x = g.constant(x0.clone(), 3, 5).unwrap();
            let xs = g
                .constant(x0.iter().map(|v| v + shift).collect(), 3, 5)
                .unwrap();
            let s = g.softmax_rows(x).unwrap();
            let ss = g.softmax_rows(xs).unwrap();
            for (a, b) in g.data(s).iter().zip(g.data(ss)) {
                assert!((a - b).abs() < 1e-12);
            }
            for row in 0..3 {
                let sum: f64 = g.data(s)[row * 5..(row + 1) * 5].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_axis_zero_matches_transposed_rows() {
        let mut g = Graph::new(Precision::F64);
        let x = g
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3)
            .unwrap();
        let s0 = g.softmax(x, 0).unwrap();
        assert_eq!(g.shape(s0), (2, 3));
        for j in 0..3 {
            let col: f64 = g.data(s0)[j] + g.data(s0)[3 + j];
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_and_meanpool_basics() {
        let mut g = Graph::new(Precision::F64);
        let z = g.constant(vec![0.0], 1, 1).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.scalar(s), 0.5);

        let v = vec![1.0, -2.0, 0.5];
        let rows = g
            .constant([v.clone(), v.clone(), v.clone()].concat(), 3, 3)
            .unwrap();
        let m = g.mean_rows(rows).unwrap();
        for (a, b) in g.data(m).iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn meanpool_empty_axis_errors() {
        let mut g = Graph::new(Precision::F64);
        let e = g.constant(vec![], 0, 3).unwrap();
        assert!(g.mean_rows(e).is_err());
    }

    #[test]
    fn affine_norm_standardizes() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(vec![1.0, 3.0], 1, 2).unwrap();
        let scale = g.constant(vec![1.0, 1.0], 1, 2).unwrap();
        let bias = g.constant(vec![0.0, 0.0], 1, 2).unwrap();
        let y = g.row_norm(x, scale, bias).unwrap();
        assert!((g.data(y)[0] - -1.0).abs() < 1e-4);
        assert!((g.data(y)[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn backward_linear_map_and_sigmoid_slope() {
        // loss = sum(W·x) with x fixed  =>  dW = 1·xT broadcast over rows
        let mut g = Graph::new(Precision::F64);
        let w = g
            .leaf(vec![0.3, -0.1, 0.2, 0.5, 0.0, -0.7], 2, 3, true)
            .unwrap();
        let x = g.constant(vec![2.0, -1.0, 0.5], 3, 1).unwrap();
        let y = g.matmul(w, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, -1.0, 0.5, 2.0, -1.0, 0.5]);

        // loss = sum(sigmoid(w)) at w = 0  =>  dw = 0.25 per element
        let mut g = Graph::new(Precision::F64);
        let w = g.leaf(vec![0.0; 4], 1, 4, true).unwrap();
        let s = g.sigmoid(w).unwrap();
        let l = g.sum_all(s).unwrap();
        g.backward(l).unwrap();
        for v in g.grad(w).unwrap() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_errors_and_non_scalar_loss_errors() {
        let mut g = Graph::new(Precision::F64);
        let w = g.leaf(vec![1.0, 2.0], 1, 2, true).unwrap();
        let s = g.sum_all(w).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(NumericError::BackwardTwice)));

        let mut g = Graph::new(Precision::F64);
        let w = g.leaf(vec![1.0, 2.0], 1, 2, true).unwrap();
        assert!(matches!(
            g.backward(w),
            Err(NumericError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(vec![1e308, 1e308], 1, 2).unwrap();
        let y = g.constant(vec![1e308, 1e308], 1, 2).unwrap();
        assert!(matches!(g.add(x, y), Err(NumericError::NonFinite { .. })));
    }

    #[test]
    fn finite_diff_quadratic_and_cross_entropy() {
        let fd =
            finite_diff_grad(|x| Ok(x.iter().map(|v| v * v).sum()), &[1.0, 2.0], 1e-5).unwrap();
        assert!((fd[0] - 2.0).abs() < 1e-8);
        assert!((fd[1] - 4.0).abs() < 1e-8);

        // softmax cross-entropy on 3 logits vs the analytic p - onehot
        let logits = vec![0.4, -1.2, 0.7];
        let target = 2usize;
        let f = |x: &[f64]| -> Result<f64> {
            let mut g = Graph::new(Precision::F64);
            let l = g.leaf(x.to_vec(), 1, 3, true)?;
            let ce = g.cross_entropy_row(l, 0, target)?;
            Ok(g.scalar(ce))
        };
        let fd = finite_diff_grad(f, &logits, 1e-5).unwrap();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        let analytic: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mx).exp() / z - if j == target { 1.0 } else { 0.0 })
            .collect();
        assert!(max_rel_err(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn finite_diff_dead_branch_has_zero_gradient() {
        // the second element is never used by f
        let fd = finite_diff_grad(|x| Ok(x[0] * 3.0), &[1.0, 9.0], 1e-5).unwrap();
        assert!((fd[0] - 3.0).abs() < 1e-8);
        assert_eq!(fd[1], 0.0);
    }

    /// Composite gradcheck across every differentiable op, 20 seeds.
    #[test]
    fn all_ops_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = randn(&mut rng, 12);
            let scale0 = randn(&mut rng, 4);
            let build = |xv: &[f64], sv: &[f64]| -> Result<(Graph, Var, Var, Var)> {
                let mut g = Graph::new(Precision::F64);
                let x = g.leaf(xv.to_vec(), 3, 4, true)?;
                let sc = g.leaf(sv.to_vec(), 1, 4, true)?;
                let bias = g.constant(vec![0.1, -0.2, 0.3, 0.0], 1, 4)?;
                let n = g.row_norm(x, sc, bias)?;
                let gl = g.gelu(n)?;
                let sm = g.softmax_rows(gl)?;
                let sg = g.sigmoid(sm)?;
                let mp = g.mean_rows(sg)?;
                let t = g.transpose(x)?;
                let mm = g.matmul(mp, t)?; // 1x3
                let picked = g.gather_rows(x, &[2, 0])?;
                let sl = g.slice_cols(picked, 1, 3)?;
                let cat = g.concat_rows(&[mm, sl])?; // 3x3
                let sc2 = g.scatter_rows(mp, &[1], 2)?; // 2x4
                let s1 = g.sum_all(cat)?;
                let s2 = g.sum_all(sc2)?;
                let tot = g.add(s1, s2)?;
                Ok((g, tot, x, sc))
            };
            let (mut g, loss, x, sc) = build(&x0, &scale0).unwrap();
            g.backward(loss).unwrap();
            let dx = g.grad(x).unwrap().to_vec();
            let dsc = g.grad(sc).unwrap().to_vec();
            let fx = finite_diff_grad(
                |v| build(v, &scale0).map(|(gg, l, _, _)| gg.scalar(l)),
                &x0,
                1e-5,
            )
            .unwrap();
            let fsc = finite_diff_grad(
                |v| build(&x0, v).map(|(gg, l, _, _)| gg.scalar(l)),
                &scale0,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_err(&dx, &fx) < 1e-5, "seed {seed} dx");
            assert!(max_rel_err(&dsc, &fsc) < 1e-5, "seed {seed} dscale");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x0 = randn(&mut rng, 20);
            let mut g = Graph::new(Precision::F64);
            let x = g.leaf(x0, 4, 5, true).unwrap();
            let s = g.softmax_rows(x).unwrap();
            let gl = g.gelu(s).unwrap();
            let l = g.sum_all(gl).unwrap();
            g.backward(l).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "gradients must be bit-identical across runs");
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut g = Graph::new(Precision::F32);
        let x = g.constant(vec![0.1, 0.2], 1, 2).unwrap();
        for (v, orig) in g.data(x).iter().zip([0.1f64, 0.2]) {
            assert_eq!(*v, orig as f32 as f64);
            assert_ne!(*v, orig, "0.1 and 0.2 are inexact in f32");
        }
        let s = g.softmax_rows(x).unwrap();
        let row_sum: f64 = g.data(s).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-6);
    }
}
