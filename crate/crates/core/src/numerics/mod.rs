//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are flat row-major `f64` buffers owned by a [`Tape`]. The tape
//! records every primitive applied to gradient-requiring inputs during the
//! forward pass (define-by-run) and replays the records in reverse to
//! accumulate gradients. One tape corresponds to one forward/backward pass;
//! it is rebuilt from scratch for the next evaluation.
//!
//! The op set is exactly what the toy transformer forward pass and the
//! attack loss need: elementwise arithmetic, matmul, transpose,
//! row/column slicing and concatenation, softmax, layer norm, GELU,
//! embedding lookup, and masked cross-entropy.

pub mod gradcheck;

use std::borrow::Cow;
use std::fmt;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// A dense tensor: row-major flat storage plus shape metadata.
///
/// Constants may borrow their data (model weights are registered on a fresh
/// tape every forward pass without copying); variables own theirs. `grad` is
/// populated by [`Tape::backward`] for every tensor with `requires_grad`.
#[derive(Debug, Clone)]
pub struct Tensor<'a> {
    shape: Vec<usize>,
    data: Cow<'a, [f64]>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl<'a> Tensor<'a> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Errors from tensor construction, op application, or backward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NumericsError {
    ShapeMismatch { expected: String, got: String, op: &'static str },
    IndexOutOfRange { index: usize, bound: usize, op: &'static str },
    InvalidArgument(String),
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::ShapeMismatch { expected, got, op } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got}")
            }
            NumericsError::IndexOutOfRange { index, bound, op } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            NumericsError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl std::error::Error for NumericsError {}

/// Elementwise binary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Right operand of an elementwise op: a same-shape tensor or a scalar.
#[derive(Debug, Clone, Copy)]
enum EwOperand {
    Tensor(TensorId),
    Scalar(f64),
}

/// One recorded primitive. Holds whatever the backward rule needs beyond
/// the arena buffers themselves (shapes, indices, cached statistics).
#[derive(Debug, Clone)]
enum Node {
    Elementwise {
        kind: EwKind,
        a: TensorId,
        b: EwOperand,
        out: TensorId,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: TensorId,
        out: TensorId,
        rows: usize,
        cols: usize,
    },
    ConcatRows {
        parts: Vec<TensorId>,
        out: TensorId,
        cols: usize,
        row_counts: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<TensorId>,
        out: TensorId,
        rows: usize,
        col_counts: Vec<usize>,
    },
    SliceRows {
        a: TensorId,
        out: TensorId,
        start: usize,
        len: usize,
        cols: usize,
        total_rows: usize,
    },
    SliceCols {
        a: TensorId,
        out: TensorId,
        start: usize,
        len: usize,
        rows: usize,
        total_cols: usize,
    },
    AddRowBias {
        x: TensorId,
        bias: TensorId,
        out: TensorId,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: TensorId,
        out: TensorId,
        lines: LineLayout,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        out: TensorId,
        rows: usize,
        d: usize,
        // per-row mean and reciprocal stddev cached at forward time
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Gelu {
        x: TensorId,
        out: TensorId,
    },
    EmbeddingRows {
        table: TensorId,
        out: TensorId,
        ids: Vec<u32>,
        d: usize,
        vocab: usize,
    },
    CrossEntropy {
        logits: TensorId,
        out: TensorId,
        targets: Vec<u32>,
        mask: Option<Vec<bool>>,
        vocab: usize,
        // per-row log-sum-exp cached at forward time
        lse: Vec<f64>,
        n_valid: usize,
    },
    SumAll {
        x: TensorId,
        out: TensorId,
    },
}

/// Iteration layout for axis reductions over rank-1/rank-2 tensors.
#[derive(Debug, Clone, Copy)]
struct LineLayout {
    n_lines: usize,
    line_len: usize,
    elem_stride: usize,
    line_stride: usize,
}

impl LineLayout {
    fn for_axis(shape: &[usize], axis: usize) -> Result<Self, NumericsError> {
        match (shape.len(), axis) {
            (1, 0) => Ok(LineLayout { n_lines: 1, line_len: shape[0], elem_stride: 1, line_stride: 0 }),
            (2, 0) => Ok(LineLayout {
                n_lines: shape[1],
                line_len: shape[0],
                elem_stride: shape[1],
                line_stride: 1,
            }),
            (2, 1) => Ok(LineLayout {
                n_lines: shape[0],
                line_len: shape[1],
                elem_stride: 1,
                line_stride: shape[1],
            }),
            _ => Err(NumericsError::InvalidArgument(format!(
                "axis {axis} invalid for shape {shape:?}"
            ))),
        }
    }
}

/// Define-by-run tape: tensor arena plus the ordered record of primitives.
#[derive(Default)]
pub struct Tape<'a> {
    tensors: Vec<Tensor<'a>>,
    nodes: Vec<Node>,
}

fn check_2d(shape: &[usize], op: &'static str) -> Result<(usize, usize), NumericsError> {
    if shape.len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            expected: "rank-2 tensor".into(),
            got: format!("{shape:?}"),
            op,
        });
    }
    Ok((shape[0], shape[1]))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), nodes: Vec::new() }
    }

    fn push(&mut self, t: Tensor<'a>) -> TensorId {
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        let id = TensorId(self.tensors.len());
        self.tensors.push(t);
        id
    }

    /// Register an owned constant (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.push(Tensor {
            shape: shape.to_vec(),
            data: Cow::Owned(data),
            requires_grad: false,
            grad: None,
        })
    }

    /// Register a borrowed constant. Avoids copying model weights onto the
    /// tape on every forward pass.
    pub fn constant_ref(&mut self, data: &'a [f64], shape: &[usize]) -> TensorId {
        self.push(Tensor {
            shape: shape.to_vec(),
            data: Cow::Borrowed(data),
            requires_grad: false,
            grad: None,
        })
    }

    /// Register an owned gradient-requiring tensor.
    pub fn variable(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.push(Tensor {
            shape: shape.to_vec(),
            data: Cow::Owned(data),
            requires_grad: true,
            grad: None,
        })
    }

    /// Register a borrowed gradient-requiring tensor (training weights).
    pub fn variable_ref(&mut self, data: &'a [f64], shape: &[usize]) -> TensorId {
        self.push(Tensor {
            shape: shape.to_vec(),
            data: Cow::Borrowed(data),
            requires_grad: true,
            grad: None,
        })
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<'a> {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    /// Record `node` only when some input carries gradient; pure-constant
    /// subgraphs (inference) leave the tape empty.
    fn emit(&mut self, any_grad: bool, out: TensorId, node: Node) -> TensorId {
        if any_grad {
            self.tensors[out.0].requires_grad = true;
            self.nodes.push(node);
        }
        out
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// Elementwise op between two same-shape tensors.
    pub fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        kind: EwKind,
    ) -> Result<TensorId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
                op: "elementwise",
            });
        }
        let out_data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| ew_apply(kind, x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let any_grad = self.requires_grad(a) || self.requires_grad(b);
        let out = self.constant(out_data, &shape);
        Ok(self.emit(any_grad, out, Node::Elementwise { kind, a, b: EwOperand::Tensor(b), out }))
    }

    /// Elementwise op between a tensor and a scalar constant.
    pub fn elementwise_scalar(&mut self, a: TensorId, s: f64, kind: EwKind) -> TensorId {
        let out_data: Vec<f64> = self.data(a).iter().map(|&x| ew_apply(kind, x, s)).collect();
        let shape = self.shape(a).to_vec();
        let any_grad = self.requires_grad(a);
        let out = self.constant(out_data, &shape);
        self.emit(any_grad, out, Node::Elementwise { kind, a, b: EwOperand::Scalar(s), out })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.elementwise(a, b, EwKind::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.elementwise(a, b, EwKind::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.elementwise(a, b, EwKind::Mul)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.elementwise(a, b, EwKind::Div)
    }

    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.elementwise(a, b, EwKind::Max)
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        self.elementwise_scalar(a, s, EwKind::Mul)
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        self.elementwise_scalar(a, s, EwKind::Add)
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `[M,K] · [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (m, k) = check_2d(self.shape(a), "matmul")?;
        let (k2, n) = check_2d(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("[{k}, N]"),
                got: format!("[{k2}, {n}]"),
                op: "matmul",
            });
        }
        let mut out_data = vec![0.0; m * n];
        dgemm_nn(m, k, n, self.data(a), self.data(b), &mut out_data);
        let any_grad = self.requires_grad(a) || self.requires_grad(b);
        let out = self.constant(out_data, &[m, n]);
        Ok(self.emit(any_grad, out, Node::Matmul { a, b, out, m, k, n }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, NumericsError> {
        let (rows, cols) = check_2d(self.shape(a), "transpose")?;
        let src = self.data(a);
        let mut out_data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out_data[c * rows + r] = src[r * cols + c];
            }
        }
        let any_grad = self.requires_grad(a);
        let out = self.constant(out_data, &[cols, rows]);
        Ok(self.emit(any_grad, out, Node::Transpose { a, out, rows, cols }))
    }

    /// Vertically stack rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument("concat_rows of zero parts".into()));
        }
        let (_, cols) = check_2d(self.shape(parts[0]), "concat_rows")?;
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut out_data = Vec::new();
        let mut any_grad = false;
        for &p in parts {
            let (r, c) = check_2d(self.shape(p), "concat_rows")?;
            if c != cols {
                return Err(NumericsError::ShapeMismatch {
                    expected: format!("[*, {cols}]"),
                    got: format!("[{r}, {c}]"),
                    op: "concat_rows",
                });
            }
            row_counts.push(r);
            out_data.extend_from_slice(self.data(p));
            any_grad |= self.requires_grad(p);
        }
        let total_rows: usize = row_counts.iter().sum();
        let out = self.constant(out_data, &[total_rows, cols]);
        Ok(self.emit(
            any_grad,
            out,
            Node::ConcatRows { parts: parts.to_vec(), out, cols, row_counts },
        ))
    }

    /// Horizontally stack rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument("concat_cols of zero parts".into()));
        }
        let (rows, _) = check_2d(self.shape(parts[0]), "concat_cols")?;
        let mut col_counts = Vec::with_capacity(parts.len());
        let mut any_grad = false;
        for &p in parts {
            let (r, c) = check_2d(self.shape(p), "concat_cols")?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    expected: format!("[{rows}, *]"),
                    got: format!("[{r}, {c}]"),
                    op: "concat_cols",
                });
            }
            col_counts.push(c);
            any_grad |= self.requires_grad(p);
        }
        let total_cols: usize = col_counts.iter().sum();
        let mut out_data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for (&p, &c) in parts.iter().zip(col_counts.iter()) {
            let src = self.data(p);
            for r in 0..rows {
                out_data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let out = self.constant(out_data, &[rows, total_cols]);
        Ok(self.emit(
            any_grad,
            out,
            Node::ConcatCols { parts: parts.to_vec(), out, rows, col_counts },
        ))
    }

    /// Contiguous row range of a rank-2 tensor.
    pub fn slice_rows(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, NumericsError> {
        let (rows, cols) = check_2d(self.shape(a), "slice_rows")?;
        if start + len > rows {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                bound: rows,
                op: "slice_rows",
            });
        }
        let out_data = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let any_grad = self.requires_grad(a);
        let out = self.constant(out_data, &[len, cols]);
        Ok(self.emit(
            any_grad,
            out,
            Node::SliceRows { a, out, start, len, cols, total_rows: rows },
        ))
    }

    /// Contiguous column range of a rank-2 tensor.
    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, NumericsError> {
        let (rows, cols) = check_2d(self.shape(a), "slice_cols")?;
        if start + len > cols {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                bound: cols,
                op: "slice_cols",
            });
        }
        let src = self.data(a);
        let mut out_data = vec![0.0; rows * len];
        for r in 0..rows {
            out_data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let any_grad = self.requires_grad(a);
        let out = self.constant(out_data, &[rows, len]);
        Ok(self.emit(
            any_grad,
            out,
            Node::SliceCols { a, out, start, len, rows, total_cols: cols },
        ))
    }

    /// `[T,D] + [D]` row-broadcast bias add.
    pub fn add_row_bias(
        &mut self,
        x: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, NumericsError> {
        let (rows, cols) = check_2d(self.shape(x), "add_row_bias")?;
        if self.shape(bias) != [cols] {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("[{cols}]"),
                got: format!("{:?}", self.shape(bias)),
                op: "add_row_bias",
            });
        }
        let xb = self.data(x);
        let bb = self.data(bias);
        let mut out_data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out_data[r * cols + c] = xb[r * cols + c] + bb[c];
            }
        }
        let any_grad = self.requires_grad(x) || self.requires_grad(bias);
        let out = self.constant(out_data, &[rows, cols]);
        Ok(self.emit(any_grad, out, Node::AddRowBias { x, bias, out, rows, cols }))
    }

    // ── nonlinearities ───────────────────────────────────────────────

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, NumericsError> {
        let lines = LineLayout::for_axis(self.shape(x), axis)?;
        let src = self.data(x);
        let mut out_data = src.to_vec();
        for l in 0..lines.n_lines {
            let base = l * lines.line_stride;
            let idx = |i: usize| base + i * lines.elem_stride;
            let mut max = f64::NEG_INFINITY;
            for i in 0..lines.line_len {
                max = max.max(src[idx(i)]);
            }
            let mut sum = 0.0;
            for i in 0..lines.line_len {
                let e = (src[idx(i)] - max).exp();
                out_data[idx(i)] = e;
                sum += e;
            }
            for i in 0..lines.line_len {
                out_data[idx(i)] /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let any_grad = self.requires_grad(x);
        let out = self.constant(out_data, &shape);
        Ok(self.emit(any_grad, out, Node::Softmax { x, out, lines }))
    }

    /// Per-row zero-mean unit-variance normalization over the last axis,
    /// followed by an affine transform with `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, NumericsError> {
        let (rows, d) = match self.shape(x) {
            [d] => (1, *d),
            [r, d] => (*r, *d),
            s => {
                return Err(NumericsError::ShapeMismatch {
                    expected: "rank-1 or rank-2 tensor".into(),
                    got: format!("{s:?}"),
                    op: "layer_norm",
                })
            }
        };
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("gain/bias [{d}]"),
                got: format!("{:?}/{:?}", self.shape(gain), self.shape(bias)),
                op: "layer_norm",
            });
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out_data = vec![0.0; rows * d];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for c in 0..d {
                out_data[r * d + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let any_grad =
            self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let out = self.constant(out_data, &shape);
        Ok(self.emit(
            any_grad,
            out,
            Node::LayerNorm { x, gain, bias, out, rows, d, means, rstds },
        ))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out_data: Vec<f64> = self.data(x).iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let any_grad = self.requires_grad(x);
        let out = self.constant(out_data, &shape);
        self.emit(any_grad, out, Node::Gelu { x, out })
    }

    // ── embedding / loss ─────────────────────────────────────────────

    /// Gather rows of `table` `[V,D]` by token id, producing `[T,D]`.
    pub fn embedding_rows(
        &mut self,
        table: TensorId,
        ids: &[u32],
    ) -> Result<TensorId, NumericsError> {
        let (vocab, d) = check_2d(self.shape(table), "embedding_rows")?;
        let src = self.data(table);
        let mut out_data = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    index: id,
                    bound: vocab,
                    op: "embedding_rows",
                });
            }
            out_data[t * d..(t + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let any_grad = self.requires_grad(table);
        let out = self.constant(out_data, &[ids.len(), d]);
        Ok(self.emit(
            any_grad,
            out,
            Node::EmbeddingRows { table, out, ids: ids.to_vec(), d, vocab },
        ))
    }

    /// Mean negative log-softmax probability of `targets` under `logits`
    /// `[T,V]`. Scalar output.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
    ) -> Result<TensorId, NumericsError> {
        self.cross_entropy_impl(logits, targets, None)
    }

    /// Cross-entropy averaged over positions where `mask` is true.
    pub fn cross_entropy_masked(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<TensorId, NumericsError> {
        if mask.len() != targets.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "cross_entropy mask length {} != targets length {}",
                mask.len(),
                targets.len()
            )));
        }
        self.cross_entropy_impl(logits, targets, Some(mask.to_vec()))
    }

    fn cross_entropy_impl(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        mask: Option<Vec<bool>>,
    ) -> Result<TensorId, NumericsError> {
        let (t_len, vocab) = check_2d(self.shape(logits), "cross_entropy")?;
        if targets.is_empty() {
            return Err(NumericsError::InvalidArgument("cross_entropy on empty targets".into()));
        }
        if targets.len() != t_len {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("targets of length {t_len}"),
                got: format!("length {}", targets.len()),
                op: "cross_entropy",
            });
        }
        let n_valid = match &mask {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => t_len,
        };
        if n_valid == 0 {
            return Err(NumericsError::InvalidArgument(
                "cross_entropy with all positions masked out".into(),
            ));
        }
        let src = self.data(logits);
        let mut lse = vec![0.0; t_len];
        let mut total = 0.0;
        for t in 0..t_len {
            let tgt = targets[t] as usize;
            if tgt >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    index: tgt,
                    bound: vocab,
                    op: "cross_entropy",
                });
            }
            let row = &src[t * vocab..(t + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            lse[t] = max + sum.ln();
            let active = mask.as_ref().map_or(true, |m| m[t]);
            if active {
                total += lse[t] - row[tgt];
            }
        }
        let loss = total / n_valid as f64;
        let any_grad = self.requires_grad(logits);
        let out = self.constant(vec![loss], &[1]);
        Ok(self.emit(
            any_grad,
            out,
            Node::CrossEntropy {
                logits,
                out,
                targets: targets.to_vec(),
                mask,
                vocab,
                lse,
                n_valid,
            },
        ))
    }

    /// Sum of all entries. Scalar output.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        let any_grad = self.requires_grad(x);
        let out = self.constant(vec![s], &[1]);
        self.emit(any_grad, out, Node::SumAll { x, out })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-replay the tape from a scalar `loss`, accumulating
    /// `d loss / d tensor` into every gradient-requiring tensor. Fan-out
    /// gradients add. Tensors that require grad but receive no flow get
    /// zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NumericsError> {
        if self.tensor(loss).numel() != 1 {
            return Err(NumericsError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        grads[loss.0] = Some(vec![1.0]);

        // Each node is visited exactly once, in reverse topological order
        // (append order is topological by construction).
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            self.backward_node(node, &mut grads);
        }
        self.nodes = nodes;

        for (i, g) in grads.into_iter().enumerate() {
            if self.tensors[i].requires_grad {
                let n = self.tensors[i].numel();
                self.tensors[i].grad = Some(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, &di) in g.iter_mut().zip(delta.iter()) {
                    *gi += di;
                }
            }
            None => grads[id.0] = Some(delta.to_vec()),
        }
    }

    /// True when gradient flow into `id` is needed: either `id` itself wants
    /// a gradient or it is an intermediate that upstream tensors feed into.
    /// Intermediates produced by recorded nodes always have requires_grad
    /// set, so the check is a plain flag read; constants are skipped, which
    /// avoids materializing weight-shaped gradients during the attack.
    fn wants_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node, grads: &mut [Option<Vec<f64>>]) {
        match node {
            Node::Elementwise { kind, a, b, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                match (kind, b) {
                    (EwKind::Add, EwOperand::Tensor(b)) => {
                        if self.wants_grad(*a) {
                            self.accumulate(grads, *a, &d_out);
                        }
                        if self.wants_grad(*b) {
                            self.accumulate(grads, *b, &d_out);
                        }
                    }
                    (EwKind::Add, EwOperand::Scalar(_)) => {
                        if self.wants_grad(*a) {
                            self.accumulate(grads, *a, &d_out);
                        }
                    }
                    (EwKind::Sub, EwOperand::Tensor(b)) => {
                        if self.wants_grad(*a) {
                            self.accumulate(grads, *a, &d_out);
                        }
                        if self.wants_grad(*b) {
                            let neg: Vec<f64> = d_out.iter().map(|&d| -d).collect();
                            self.accumulate(grads, *b, &neg);
                        }
                    }
                    (EwKind::Sub, EwOperand::Scalar(_)) => {
                        if self.wants_grad(*a) {
                            self.accumulate(grads, *a, &d_out);
                        }
                    }
                    (EwKind::Mul, EwOperand::Tensor(b)) => {
                        if self.wants_grad(*a) {
                            let d: Vec<f64> = d_out
                                .iter()
                                .zip(self.data(*b).iter())
                                .map(|(&d, &bv)| d * bv)
                                .collect();
                            self.accumulate(grads, *a, &d);
                        }
                        if self.wants_grad(*b) {
                            let d: Vec<f64> = d_out
                                .iter()
                                .zip(self.data(*a).iter())
                                .map(|(&d, &av)| d * av)
                                .collect();
                            self.accumulate(grads, *b, &d);
                        }
                    }
                    (EwKind::Mul, EwOperand::Scalar(s)) => {
                        if self.wants_grad(*a) {
                            let d: Vec<f64> = d_out.iter().map(|&d| d * s).collect();
                            self.accumulate(grads, *a, &d);
                        }
                    }
                    (EwKind::Div, EwOperand::Tensor(b)) => {
                        if self.wants_grad(*a) {
                            let d: Vec<f64> = d_out
                                .iter()
                                .zip(self.data(*b).iter())
                                .map(|(&d, &bv)| d / bv)
                                .collect();
                            self.accumulate(grads, *a, &d);
                        }
                        if self.wants_grad(*b) {
                            let av = self.data(*a);
                            let bv = self.data(*b);
                            let d: Vec<f64> = d_out
                                .iter()
                                .enumerate()
                                .map(|(i, &d)| -d * av[i] / (bv[i] * bv[i]))
                                .collect();
                            self.accumulate(grads, *b, &d);
                        }
                    }
                    (EwKind::Div, EwOperand::Scalar(s)) => {
                        if self.wants_grad(*a) {
                            let d: Vec<f64> = d_out.iter().map(|&d| d / s).collect();
                            self.accumulate(grads, *a, &d);
                        }
                    }
                    // Subgradient convention: ties route to `a`.
                    (EwKind::Max, EwOperand::Tensor(b)) => {
                        let av = self.data(*a);
                        let bv = self.data(*b);
                        if self.wants_grad(*a) {
                            let d: Vec<f64> = d_out
                                .iter()
                                .enumerate()
                                .map(|(i, &d)| if av[i] >= bv[i] { d } else { 0.0 })
                                .collect();
                            self.accumulate(grads, *a, &d);
                        }
                        if self.wants_grad(*b) {
                            let d: Vec<f64> = d_out
                                .iter()
                                .enumerate()
                                .map(|(i, &d)| if av[i] >= bv[i] { 0.0 } else { d })
                                .collect();
                            self.accumulate(grads, *b, &d);
                        }
                    }
                    (EwKind::Max, EwOperand::Scalar(s)) => {
                        if self.wants_grad(*a) {
                            let av = self.data(*a);
                            let d: Vec<f64> = d_out
                                .iter()
                                .enumerate()
                                .map(|(i, &d)| if av[i] >= *s { d } else { 0.0 })
                                .collect();
                            self.accumulate(grads, *a, &d);
                        }
                    }
                }
            }
            Node::Matmul { a, b, out, m, k, n } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut d_a = vec![0.0; m * k];
                    dgemm_nt(*m, *n, *k, &d_out, self.data(*b), &mut d_a);
                    self.accumulate(grads, *a, &d_a);
                }
                if self.wants_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut d_b = vec![0.0; k * n];
                    dgemm_tn(*k, *m, *n, self.data(*a), &d_out, &mut d_b);
                    self.accumulate(grads, *b, &d_b);
                }
            }
            Node::Transpose { a, out, rows, cols } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*a) {
                    let mut d_a = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d_a[r * cols + c] = d_out[c * rows + r];
                        }
                    }
                    self.accumulate(grads, *a, &d_a);
                }
            }
            Node::ConcatRows { parts, out, cols, row_counts } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let mut offset = 0;
                for (&p, &r) in parts.iter().zip(row_counts.iter()) {
                    if self.wants_grad(p) {
                        self.accumulate(grads, p, &d_out[offset..offset + r * cols]);
                    }
                    offset += r * cols;
                }
            }
            Node::ConcatCols { parts, out, rows, col_counts } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let total_cols: usize = col_counts.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(col_counts.iter()) {
                    if self.wants_grad(p) {
                        let mut d_p = vec![0.0; rows * c];
                        for r in 0..*rows {
                            d_p[r * c..(r + 1) * c].copy_from_slice(
                                &d_out[r * total_cols + offset..r * total_cols + offset + c],
                            );
                        }
                        self.accumulate(grads, p, &d_p);
                    }
                    offset += c;
                }
            }
            Node::SliceRows { a, out, start, len, cols, total_rows } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*a) {
                    let mut d_a = vec![0.0; total_rows * cols];
                    d_a[start * cols..(start + len) * cols].copy_from_slice(&d_out);
                    self.accumulate(grads, *a, &d_a);
                }
            }
            Node::SliceCols { a, out, start, len, rows, total_cols } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*a) {
                    let mut d_a = vec![0.0; rows * total_cols];
                    for r in 0..*rows {
                        d_a[r * total_cols + start..r * total_cols + start + len]
                            .copy_from_slice(&d_out[r * len..(r + 1) * len]);
                    }
                    self.accumulate(grads, *a, &d_a);
                }
            }
            Node::AddRowBias { x, bias, out, rows, cols } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*x) {
                    self.accumulate(grads, *x, &d_out);
                }
                if self.wants_grad(*bias) {
                    let mut d_b = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d_b[c] += d_out[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *bias, &d_b);
                }
            }
            Node::Softmax { x, out, lines } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*x) {
                    let y = self.data(*out);
                    let mut d_x = vec![0.0; y.len()];
                    for l in 0..lines.n_lines {
                        let base = l * lines.line_stride;
                        let idx = |i: usize| base + i * lines.elem_stride;
                        let mut dot = 0.0;
                        for i in 0..lines.line_len {
                            dot += d_out[idx(i)] * y[idx(i)];
                        }
                        for i in 0..lines.line_len {
                            d_x[idx(i)] = y[idx(i)] * (d_out[idx(i)] - dot);
                        }
                    }
                    self.accumulate(grads, *x, &d_x);
                }
            }
            Node::LayerNorm { x, gain, bias, out, rows, d, means, rstds } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let src = self.data(*x);
                let g = self.data(*gain);
                let df = *d as f64;
                if self.wants_grad(*x) {
                    let mut d_x = vec![0.0; rows * d];
                    for r in 0..*rows {
                        let row = &src[r * d..(r + 1) * d];
                        let dy = &d_out[r * d..(r + 1) * d];
                        let rstd = rstds[r];
                        let mean = means[r];
                        // dyh = dy ∘ gain; dx = rstd (dyh − mean(dyh) − x̂ mean(dyh ∘ x̂))
                        let mut sum_dyh = 0.0;
                        let mut sum_dyh_xh = 0.0;
                        for c in 0..*d {
                            let xh = (row[c] - mean) * rstd;
                            let dyh = dy[c] * g[c];
                            sum_dyh += dyh;
                            sum_dyh_xh += dyh * xh;
                        }
                        let m1 = sum_dyh / df;
                        let m2 = sum_dyh_xh / df;
                        for c in 0..*d {
                            let xh = (row[c] - mean) * rstd;
                            d_x[r * d + c] = rstd * (dy[c] * g[c] - m1 - xh * m2);
                        }
                    }
                    self.accumulate(grads, *x, &d_x);
                }
                if self.wants_grad(*gain) {
                    let mut d_g = vec![0.0; *d];
                    for r in 0..*rows {
                        let row = &src[r * d..(r + 1) * d];
                        let dy = &d_out[r * d..(r + 1) * d];
                        for c in 0..*d {
                            d_g[c] += dy[c] * (row[c] - means[r]) * rstds[r];
                        }
                    }
                    self.accumulate(grads, *gain, &d_g);
                }
                if self.wants_grad(*bias) {
                    let mut d_b = vec![0.0; *d];
                    for r in 0..*rows {
                        for c in 0..*d {
                            d_b[c] += d_out[r * d + c];
                        }
                    }
                    self.accumulate(grads, *bias, &d_b);
                }
            }
            Node::Gelu { x, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*x) {
                    let d: Vec<f64> = self
                        .data(*x)
                        .iter()
                        .zip(d_out.iter())
                        .map(|(&v, &d)| d * gelu_bwd(v))
                        .collect();
                    self.accumulate(grads, *x, &d);
                }
            }
            Node::EmbeddingRows { table, out, ids, d, vocab } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*table) {
                    // scatter-add: repeated ids sum their row gradients
                    let mut d_t = vec![0.0; vocab * d];
                    for (t, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for c in 0..*d {
                            d_t[id * d + c] += d_out[t * d + c];
                        }
                    }
                    self.accumulate(grads, *table, &d_t);
                }
            }
            Node::CrossEntropy { logits, out, targets, mask, vocab, lse, n_valid } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*logits) {
                    let scale = d_out[0] / *n_valid as f64;
                    let src = self.data(*logits);
                    let mut d_l = vec![0.0; targets.len() * vocab];
                    for (t, &tgt) in targets.iter().enumerate() {
                        if !mask.as_ref().map_or(true, |m| m[t]) {
                            continue;
                        }
                        let row = &src[t * vocab..(t + 1) * vocab];
                        let drow = &mut d_l[t * vocab..(t + 1) * vocab];
                        for c in 0..*vocab {
                            drow[c] = scale * (row[c] - lse[t]).exp();
                        }
                        drow[tgt as usize] -= scale;
                    }
                    self.accumulate(grads, *logits, &d_l);
                }
            }
            Node::SumAll { x, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.wants_grad(*x) {
                    let d = vec![d_out[0]; self.tensor(*x).numel()];
                    self.accumulate(grads, *x, &d);
                }
            }
        }
    }
}

fn ew_apply(kind: EwKind, x: f64, y: f64) -> f64 {
    match kind {
        EwKind::Add => x + y,
        EwKind::Sub => x - y,
        EwKind::Mul => x * y,
        EwKind::Div => x / y,
        EwKind::Max => x.max(y),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// matrixmultiply handles arbitrary strides, so the transposed products in
// the backward pass read operands in place.

/// C[m,n] = A[m,k] · B[k,n]
fn dgemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
fn dgemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C[m,n] = A[k,m]ᵀ · B[k,n]
fn dgemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{finite_difference_gradient, max_rel_err_sampled};
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn elementwise_add_and_mul_values() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], &[2]);
        let b = tape.constant(vec![3.0, 4.0], &[2]);
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.data(sum), &[4.0, 6.0]);

        let c = tape.constant(vec![1.0, -2.0], &[2]);
        let z = tape.mul_scalar(c, 0.0);
        assert_eq!(tape.data(z), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], &[2]);
        let b = tape.constant(vec![1.0, 2.0, 3.0], &[3]);
        assert!(matches!(
            tape.add(a, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn div_gradient_wrt_denominator() {
        // loss = a/b at a=2, b=4; dL/db = -a/b^2 = -0.125
        let mut tape = Tape::new();
        let a = tape.constant(vec![2.0], &[1]);
        let b = tape.variable(vec![4.0], &[1]);
        let q = tape.div(a, b).unwrap();
        let loss = tape.sum_all(q);
        tape.backward(loss).unwrap();
        let g = tape.grad(b).unwrap();
        assert!((g[0] - (-0.125)).abs() < 1e-12, "got {}", g[0]);

        // cross-checked against the central-difference oracle
        let fd = finite_difference_gradient(
            &mut |x: &[f64]| 2.0 / x[0],
            &[4.0],
            1e-5,
        );
        assert!((fd[0] - (-0.125)).abs() < 1e-9);
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = tape.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let prod = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.data(prod), tape.data(b));

        let a = tape.constant(vec![1.0, 2.0], &[1, 2]);
        let c = tape.constant(vec![3.0, 4.0], &[2, 1]);
        let p = tape.matmul(a, c).unwrap();
        assert_eq!(tape.data(p), &[11.0]);

        let bad = tape.constant(vec![0.0; 6], &[3, 2]);
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a_data = randn(&mut rng, 12);
        let b_data = randn(&mut rng, 8);

        let mut tape = Tape::new();
        let a = tape.variable(a_data.clone(), &[3, 4]);
        let b = tape.constant(b_data.clone(), &[4, 2]);
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(a).unwrap().to_vec();

        let f = |x: &[f64]| {
            let mut t = Tape::new();
            let a = t.constant(x.to_vec(), &[3, 4]);
            let b = t.constant(b_data.clone(), &[4, 2]);
            let p = t.matmul(a, b).unwrap();
            let l = t.sum_all(p);
            t.data(l)[0]
        };
        let err = max_rel_err_sampled(&analytic, &a_data, &mut { f }, 1e-5, 10, 3);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.0, 0.0], &[3]);
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = tape.constant(vec![1000.0, 0.0], &[2]);
        let y2 = tape.softmax(big, 0).unwrap();
        assert!((tape.data(y2)[0] - 1.0).abs() < 1e-12);
        assert!(tape.data(y2)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_even_at_large_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..20).map(|_| (rng.gen::<f64>() - 0.5) * 2e3).collect();
        let mut tape = Tape::new();
        let x = tape.constant(data, &[4, 5]);
        let y = tape.softmax(x, 1).unwrap();
        let out = tape.data(y);
        for r in 0..4 {
            let s: f64 = out[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row {r} sums to {s}");
            assert!(out[r * 5..(r + 1) * 5].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_data = randn(&mut rng, 5);
        let w = randn(&mut rng, 5); // fixed projection so the loss is scalar

        let mut tape = Tape::new();
        let x = tape.variable(x_data.clone(), &[5]);
        let y = tape.softmax(x, 0).unwrap();
        let wt = tape.constant(w.clone(), &[5]);
        let prod = tape.mul(y, wt).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();

        let w2 = w.clone();
        let err = max_rel_err_sampled(
            &analytic,
            &x_data,
            &mut move |v: &[f64]| {
                let mut t = Tape::new();
                let x = t.constant(v.to_vec(), &[5]);
                let y = t.softmax(x, 0).unwrap();
                let wt = t.constant(w2.clone(), &[5]);
                let p = t.mul(y, wt).unwrap();
                let l = t.sum_all(p);
                t.data(l)[0]
            },
            1e-5,
            5,
            5,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn layer_norm_constant_input_and_bias_shift() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 1.0, 1.0], &[3]);
        let g = tape.constant(vec![1.0, 1.0, 1.0], &[3]);
        let b = tape.constant(vec![0.0, 0.0, 0.0], &[3]);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-9);
        }

        let x2 = tape.constant(vec![0.3, -1.2, 2.0], &[3]);
        let b5 = tape.constant(vec![5.0, 5.0, 5.0], &[3]);
        let y2 = tape.layer_norm(x2, g, b5, 1e-5).unwrap();
        let mean: f64 = tape.data(y2).iter().sum::<f64>() / 3.0;
        assert!((mean - 5.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_data = randn(&mut rng, 8);
        let g_data = randn(&mut rng, 4);
        let b_data = randn(&mut rng, 4);
        let w = randn(&mut rng, 8);

        let run = |xv: &[f64], gv: &[f64], bv: &[f64]| -> (f64, Tape<'static>) {
            let mut t = Tape::new();
            let x = t.variable(xv.to_vec(), &[2, 4]);
            let g = t.variable(gv.to_vec(), &[4]);
            let b = t.variable(bv.to_vec(), &[4]);
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            let wt = t.constant(w.clone(), &[2, 4]);
            let p = t.mul(y, wt).unwrap();
            let l = t.sum_all(p);
            let v = t.data(l)[0];
            t.backward(l).unwrap();
            (v, t)
        };
        let (_, tape) = run(&x_data, &g_data, &b_data);
        // tensor ids are allocated in run order: x=0, g=1, b=2
        let gx = tape.grad(TensorId(0)).unwrap().to_vec();
        let gg = tape.grad(TensorId(1)).unwrap().to_vec();
        let gb = tape.grad(TensorId(2)).unwrap().to_vec();

        let gd = g_data.clone();
        let bd = b_data.clone();
        let err_x = max_rel_err_sampled(
            &gx,
            &x_data,
            &mut |v: &[f64]| run(v, &gd, &bd).0,
            1e-5,
            8,
            9,
        );
        assert!(err_x < 1e-6, "x grad err {err_x}");

        let xd = x_data.clone();
        let bd2 = b_data.clone();
        let err_g = max_rel_err_sampled(
            &gg,
            &g_data,
            &mut |v: &[f64]| run(&xd, v, &bd2).0,
            1e-5,
            4,
            13,
        );
        assert!(err_g < 1e-6, "gain grad err {err_g}");

        let xd2 = x_data.clone();
        let gd2 = g_data.clone();
        let err_b = max_rel_err_sampled(
            &gb,
            &b_data,
            &mut |v: &[f64]| run(&xd2, &gd2, v).0,
            1e-5,
            4,
            17,
        );
        assert!(err_b < 1e-6, "bias grad err {err_b}");
    }

    #[test]
    fn embedding_rows_lookup_and_scatter_add() {
        let mut tape = Tape::new();
        let table = tape.variable(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[4, 2]);
        let out = tape.embedding_rows(table, &[0]).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0]);

        // repeated id: gradient into row 3 is the sum of both rows' grads
        let rep = tape.embedding_rows(table, &[3, 3]).unwrap();
        assert_eq!(tape.data(rep), &[7.0, 8.0, 7.0, 8.0]);
        let loss = tape.sum_all(rep);
        tape.backward(loss).unwrap();
        let g = tape.grad(table).unwrap();
        assert_eq!(&g[6..8], &[2.0, 2.0]);
        assert!(g[..6].iter().all(|&v| v == 0.0));

        let mut t2 = Tape::new();
        let small = t2.constant(vec![0.0; 4], &[2, 2]);
        assert!(matches!(
            t2.embedding_rows(small, &[2]),
            Err(NumericsError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let table_data = randn(&mut rng, 12);
        let w = randn(&mut rng, 9);
        let ids = [2u32, 0, 2];

        let mut tape = Tape::new();
        let table = tape.variable(table_data.clone(), &[4, 3]);
        let rows = tape.embedding_rows(table, &ids).unwrap();
        let wt = tape.constant(w.clone(), &[3, 3]);
        let p = tape.mul(rows, wt).unwrap();
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(table).unwrap().to_vec();

        let err = max_rel_err_sampled(
            &analytic,
            &table_data,
            &mut move |v: &[f64]| {
                let mut t = Tape::new();
                let table = t.constant(v.to_vec(), &[4, 3]);
                let rows = t.embedding_rows(table, &ids).unwrap();
                let wt = t.constant(w.clone(), &[3, 3]);
                let p = t.mul(rows, wt).unwrap();
                let l = t.sum_all(p);
                t.data(l)[0]
            },
            1e-5,
            12,
            23,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn cross_entropy_uniform_saturated_and_oracle() {
        // uniform logits over V=16: loss = ln 16
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.25; 2 * 16], &[2, 16]);
        let loss = tape.cross_entropy(logits, &[3, 9]).unwrap();
        assert!((tape.data(loss)[0] - (16.0f64).ln()).abs() < 1e-12);

        // +1000 on the target: loss ~ 0
        let mut hot = vec![0.0; 8];
        hot[5] = 1000.0;
        let l2 = tape.constant(hot, &[1, 8]);
        let loss2 = tape.cross_entropy(l2, &[5]).unwrap();
        assert!(tape.data(loss2)[0].abs() < 1e-12);

        // random logits vs an independent naive log-sum-exp recomputation
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data = randn(&mut rng, 24);
        let targets = [1u32, 7, 4];
        let l3 = tape.constant(data.clone(), &[3, 8]);
        let loss3 = tape.cross_entropy(l3, &targets).unwrap();
        let mut expected = 0.0;
        for (t, &tgt) in targets.iter().enumerate() {
            let row = &data[t * 8..(t + 1) * 8];
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            expected += -(row[tgt as usize].exp() / denom).ln();
        }
        expected /= 3.0;
        assert!((tape.data(loss3)[0] - expected).abs() < 1e-10);

        // empty targets rejected
        let l4 = tape.constant(vec![], &[0, 8]);
        assert!(tape.cross_entropy(l4, &[]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let data = randn(&mut rng, 24);
        let targets = [2u32, 0, 7];

        let mut tape = Tape::new();
        let logits = tape.variable(data.clone(), &[3, 8]);
        let loss = tape.cross_entropy(logits, &targets).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(logits).unwrap().to_vec();

        let err = max_rel_err_sampled(
            &analytic,
            &data,
            &mut move |v: &[f64]| {
                let mut t = Tape::new();
                let l = t.constant(v.to_vec(), &[3, 8]);
                let loss = t.cross_entropy(l, &targets).unwrap();
                t.data(loss)[0]
            },
            1e-5,
            10,
            43,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn masked_cross_entropy_ignores_masked_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let data = randn(&mut rng, 32);
        let targets = [1u32, 2, 3, 0];
        let mask = [true, false, true, false];

        let mut tape = Tape::new();
        let logits = tape.constant(data.clone(), &[4, 8]);
        let masked = tape.cross_entropy_masked(logits, &targets, &mask).unwrap();

        // equal to plain cross-entropy over only the unmasked rows
        let kept: Vec<f64> = data[0..8].iter().chain(&data[16..24]).copied().collect();
        let l2 = tape.constant(kept, &[2, 8]);
        let plain = tape.cross_entropy(l2, &[1, 3]).unwrap();
        assert!((tape.data(masked)[0] - tape.data(plain)[0]).abs() < 1e-14);

        let l3 = tape.constant(data.clone(), &[4, 8]);
        assert!(tape
            .cross_entropy_masked(l3, &targets, &[false; 4])
            .is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![1.0, 2.0, 3.0, 4.0], &[4]);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let mut t2 = Tape::new();
        let x = t2.variable(vec![3.0], &[1]);
        let sq = t2.mul(x, x).unwrap();
        let loss = t2.sum_all(sq);
        t2.backward(loss).unwrap();
        assert_eq!(t2.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![1.0, 2.0], &[2]);
        let y = tape.mul_scalar(x, 2.0);
        assert!(matches!(
            tape.backward(y),
            Err(NumericsError::InvalidArgument(_))
        ));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x*x) + sum(x) => grad = 2x + 1, exercising two branches
        let mut tape = Tape::new();
        let x = tape.variable(vec![1.5, -2.0], &[2]);
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum_all(sq);
        let s2 = tape.sum_all(x);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-12);
        assert!((g[1] - (-3.0)).abs() < 1e-12);

        // matches the manually composed single-use version
        let fd = finite_difference_gradient(
            &mut |v: &[f64]| v.iter().map(|&a| a * a + a).sum(),
            &[1.5, -2.0],
            1e-6,
        );
        assert!((fd[0] - g[0]).abs() < 1e-6);
        assert!((fd[1] - g[1]).abs() < 1e-6);
    }

    #[test]
    fn unused_variable_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![1.0], &[1]);
        let unused = tape.variable(vec![5.0, 6.0], &[2]);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_grad_buffer() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![2.0], &[1]);
        let c = tape.constant(vec![3.0], &[1]);
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let top = tape.slice_rows(x, 0, 1).unwrap();
        let rest = tape.slice_rows(x, 1, 2).unwrap();
        let back = tape.concat_rows(&[top, rest]).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
        let doubled = tape.mul_scalar(back, 2.0);
        let loss = tape.sum_all(doubled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);

        let mut t2 = Tape::new();
        let y = t2.variable(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let left = t2.slice_cols(y, 0, 2).unwrap();
        let right = t2.slice_cols(y, 2, 1).unwrap();
        let joined = t2.concat_cols(&[left, right]).unwrap();
        assert_eq!(t2.data(joined), t2.data(y));
        let loss = t2.sum_all(joined);
        t2.backward(loss).unwrap();
        assert_eq!(t2.grad(y).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn transpose_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let xt = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(xt), &[3, 2]);
        assert_eq!(tape.data(xt), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let w = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let p = tape.mul(xt, w).unwrap();
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        // dx[r,c] = w[c,r]
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn add_row_bias_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![0.0; 6], &[2, 3]);
        let b = tape.variable(vec![1.0, 2.0, 3.0], &[3]);
        let y = tape.add_row_bias(x, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn max_gradient_routes_to_larger_side() {
        let mut tape = Tape::new();
        let a = tape.variable(vec![2.0, -1.0], &[2]);
        let b = tape.variable(vec![1.0, 3.0], &[2]);
        let m = tape.maximum(a, b).unwrap();
        assert_eq!(tape.data(m), &[2.0, 3.0]);
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let x_data = vec![-2.0, -0.5, 0.0, 0.7, 3.0];
        let mut tape = Tape::new();
        let x = tape.variable(x_data.clone(), &[5]);
        let y = tape.gelu(x);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();

        let err = max_rel_err_sampled(
            &analytic,
            &x_data,
            &mut |v: &[f64]| {
                let mut t = Tape::new();
                let x = t.constant(v.to_vec(), &[5]);
                let y = t.gelu(x);
                let l = t.sum_all(y);
                t.data(l)[0]
            },
            1e-5,
            5,
            1,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a_data = randn(&mut rng, 6);
            let mut tape = Tape::new();
            let a = tape.variable(a_data, &[2, 3]);
            let sm = tape.softmax(a, 1).unwrap();
            let loss = tape.cross_entropy(sm, &[1, 2]).unwrap();
            let v = tape.data(loss)[0];
            tape.backward(loss).unwrap();
            (v, tape.grad(a).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
