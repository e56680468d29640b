//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an arena of nodes built eagerly during the forward pass.
//! Node indices are topologically ordered by construction, so [`Graph::backward`]
//! is a single reverse sweep. Parameters enter a graph as shared leaves
//! (see [`crate::params::ParamStore`]); everything else is owned by the graph.
//!
//! All tensors are matrices `[rows, cols]`; vectors are `[1, n]` rows and
//! scalars are `[1, 1]`. Training runs in `f32`, gradient checks in `f64`.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

/// Element type for all tensor math (`f32` or `f64`).
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    const DTYPE: Dtype;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}
impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// Dtype tag, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

/// Convert an `f64` constant into the graph's element type.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("constant representable in scalar type")
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Backing buffer for a node: owned by the graph or shared with a parameter store.
#[derive(Debug, Clone)]
pub enum Buf<S> {
    Owned(Vec<S>),
    Shared(Arc<Vec<S>>),
}

impl<S> Buf<S> {
    #[inline]
    pub fn as_slice(&self) -> &[S] {
        match self {
            Buf::Owned(v) => v,
            Buf::Shared(a) => a,
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Identifier of an entry in a `ParamStore`, tracked so gradients can be
/// routed back after `backward`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: S },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<S>, inv_std: Vec<S> },
    MeanRows { a: NodeId },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    Reshape { a: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    GatherRows { a: NodeId, ids: Vec<usize> },
    NllMasked { logp: NodeId, targets: Vec<Option<usize>> },
    Dropout { a: NodeId, mask: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    data: Buf<S>,
    rows: usize,
    cols: usize,
    op: Op<S>,
    /// Gradient reaches this node (it requires grad or an ancestor does).
    needs_grad: bool,
    /// Persistent accumulated gradient; only filled for requires-grad nodes.
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

/// Forward tape. Build ops, then call [`Graph::backward`] on a scalar loss.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_leaves: Vec<(ParamId, NodeId)>,
}

// Raw row-major matmul kernels; `out` is accumulated into.
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] = or[j] + av * br[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc = acc + ar[p] * br[p];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ar[p];
            if av == S::zero() {
                continue;
            }
            let or = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] = or[j] + av * br[j];
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_leaves: Vec::new() }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        self.nodes[id.0].data.as_slice()
    }

    /// Accumulated gradient of a requires-grad node, if backward has run.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self, id: NodeId) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// (param, node) pairs for all parameter leaves inserted into this graph.
    pub fn param_leaves(&self) -> &[(ParamId, NodeId)] {
        &self.param_leaves
    }

    fn push(&mut self, data: Buf<S>, rows: usize, cols: usize, op: Op<S>, requires_grad: bool) -> NodeId {
        let needs_grad = requires_grad
            || match &op {
                Op::Leaf => false,
                Op::Matmul { a, b }
                | Op::MatmulNT { a, b }
                | Op::Add { a, b }
                | Op::AddRow { a, row: b }
                | Op::Mul { a, b } => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
                Op::LayerNorm { a, gamma, beta, .. } => {
                    self.nodes[a.0].needs_grad
                        || self.nodes[gamma.0].needs_grad
                        || self.nodes[beta.0].needs_grad
                }
                Op::Scale { a, .. }
                | Op::Gelu { a }
                | Op::SoftmaxRows { a }
                | Op::LogSoftmaxRows { a }
                | Op::MeanRows { a }
                | Op::MeanAll { a }
                | Op::SumAll { a }
                | Op::Reshape { a }
                | Op::SliceRows { a, .. }
                | Op::SliceCols { a, .. }
                | Op::GatherRows { a, .. }
                | Op::Dropout { a, .. } => self.nodes[a.0].needs_grad,
                Op::NllMasked { logp, .. } => self.nodes[logp.0].needs_grad,
                Op::ConcatRows { parts } | Op::ConcatCols { parts } => {
                    parts.iter().any(|p| self.nodes[p.0].needs_grad)
                }
            };
        let grad = if requires_grad {
            Some(vec![S::zero(); rows * cols])
        } else {
            None
        };
        self.nodes.push(Node { data, rows, cols, op, needs_grad, grad, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, data: Vec<S>, rows: usize, cols: usize) -> NodeId {
        assert_eq!(data.len(), rows * cols, "constant: data length vs shape");
        self.push(Buf::Owned(data), rows, cols, Op::Leaf, false)
    }

    /// Leaf that accumulates gradient.
    pub fn leaf(&mut self, data: Vec<S>, rows: usize, cols: usize, requires_grad: bool) -> NodeId {
        assert_eq!(data.len(), rows * cols, "leaf: data length vs shape");
        self.push(Buf::Owned(data), rows, cols, Op::Leaf, requires_grad)
    }

    /// Parameter leaf sharing the store's buffer; tracked for gradient routing.
    pub fn param(&mut self, pid: ParamId, data: Arc<Vec<S>>, rows: usize, cols: usize, trainable: bool) -> NodeId {
        assert_eq!(data.len(), rows * cols, "param: data length vs shape");
        let id = self.push(Buf::Shared(data), rows, cols, Op::Leaf, trainable);
        self.param_leaves.push((pid, id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let mut out = vec![S::zero(); m * n];
        mm_nn(self.data(a), self.data(b), m, k, n, &mut out);
        Ok(self.push(Buf::Owned(out), m, n, Op::Matmul { a, b }, false))
    }

    /// `a [m,k] @ b[n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul_nt", lhs: (m, k), rhs: (n, k2) });
        }
        let mut out = vec![S::zero(); m * n];
        mm_nt(self.data(a), self.data(b), m, k, n, &mut out);
        Ok(self.push(Buf::Owned(out), m, n, Op::MatmulNT { a, b }, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(Buf::Owned(out), sa.0, sa.1, Op::Add { a, b }, false))
    }

    /// Broadcast add of a `[1,n]` row onto every row of `[m,n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let sr = self.shape(row);
        if sr != (1, n) {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs: (m, n), rhs: sr });
        }
        let r = self.data(row).to_vec();
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        Ok(self.push(Buf::Owned(out), m, n, Op::AddRow { a, row }, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Buf::Owned(out), sa.0, sa.1, Op::Mul { a, b }, false))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let (m, n) = self.shape(a);
        let out: Vec<S> = self.data(a).iter().map(|&x| x * c).collect();
        self.push(Buf::Owned(out), m, n, Op::Scale { a, c }, false)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out: Vec<S> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        self.push(Buf::Owned(out), m, n, Op::Gelu { a }, false)
    }

    /// Row-wise stabilized softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let x = self.data(a);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum = sum + e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / sum;
            }
        }
        Ok(self.push(Buf::Owned(out), m, n, Op::SoftmaxRows { a }, false))
    }

    /// Row-wise log-softmax via stabilized log-sum-exp.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let x = self.data(a);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in 0..n {
                sum = sum + (row[j] - mx).exp();
            }
            let lse = mx + sum.ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        Ok(self.push(Buf::Owned(out), m, n, Op::LogSoftmaxRows { a }, false))
    }

    /// Row-wise layer norm with learned gain/bias (`gamma`, `beta` are `[1,n]`).
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: (m, n),
                rhs: self.shape(gamma),
            });
        }
        let eps = lit::<S>(eps);
        let x = self.data(a);
        let nn = lit::<S>(n as f64);
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().cloned().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * is;
            }
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let out: Vec<S> = xhat
            .iter()
            .enumerate()
            .map(|(idx, &xh)| xh * g[idx % n] + b[idx % n])
            .collect();
        Ok(self.push(
            Buf::Owned(out),
            m,
            n,
            Op::LayerNorm { a, gamma, beta, xhat, inv_std },
            false,
        ))
    }

    /// Column means: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let x = self.data(a);
        let mut out = vec![S::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] = out[j] + x[i * n + j];
            }
        }
        let mm = lit::<S>(m as f64);
        out.iter_mut().for_each(|v| *v = *v / mm);
        self.push(Buf::Owned(out), 1, n, Op::MeanRows { a }, false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let s = self.data(a).iter().cloned().sum::<S>() / lit::<S>((m * n) as f64);
        self.push(Buf::Owned(vec![s]), 1, 1, Op::MeanAll { a }, false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().cloned().sum::<S>();
        self.push(Buf::Owned(vec![s]), 1, 1, Op::SumAll { a }, false)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if m * n != rows * cols {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: (m, n), rhs: (rows, cols) });
        }
        let out = self.data(a).to_vec();
        Ok(self.push(Buf::Owned(out), rows, cols, Op::Reshape { a }, false))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_rows: empty part list");
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(TensorError::ShapeMismatch { op: "concat_rows", lhs: (rows, n), rhs: (pm, pn) });
            }
            rows += pm;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(Buf::Owned(out), rows, n, Op::ConcatRows { parts: parts.to_vec() }, false))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let (m, _) = self.shape(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(TensorError::ShapeMismatch { op: "concat_cols", lhs: (m, n), rhs: (pm, pn) });
            }
            widths.push(pn);
            n += pn;
        }
        let mut out = vec![S::zero(); m * n];
        let mut off = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let pn = widths[idx];
            let d = self.data(p).to_vec();
            for i in 0..m {
                out[i * n + off..i * n + off + pn].copy_from_slice(&d[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        Ok(self.push(Buf::Owned(out), m, n, Op::ConcatCols { parts: parts.to_vec() }, false))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if start + len > m {
            return Err(TensorError::Contract {
                op: "slice_rows",
                msg: format!("rows {}..{} out of {}", start, start + len, m),
            });
        }
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        Ok(self.push(Buf::Owned(out), len, n, Op::SliceRows { a, start }, false))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(TensorError::Contract {
                op: "slice_cols",
                msg: format!("cols {}..{} out of {}", start, start + len, n),
            });
        }
        let x = self.data(a);
        let mut out = vec![S::zero(); m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&x[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Buf::Owned(out), m, len, Op::SliceCols { a, start }, false))
    }

    /// Gather rows of `a` by index (embedding lookup). Gradient scatters back.
    pub fn gather_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        for &i in ids {
            if i >= m {
                return Err(TensorError::Contract {
                    op: "gather_rows",
                    msg: format!("row id {} out of {}", i, m),
                });
            }
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        Ok(self.push(Buf::Owned(out), ids.len(), n, Op::GatherRows { a, ids: ids.to_vec() }, false))
    }

    /// Masked negative log-likelihood from log-probabilities.
    ///
    /// `targets[t] = Some(v)` contributes `-logp[t, v]`; `None` positions
    /// contribute nothing and receive exactly zero gradient.
    pub fn nll_masked(&mut self, logp: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let (m, v) = self.shape(logp);
        if targets.len() != m {
            return Err(TensorError::Contract {
                op: "nll_masked",
                msg: format!("{} targets for {} positions", targets.len(), m),
            });
        }
        let x = self.data(logp);
        let mut loss = S::zero();
        for (t, tgt) in targets.iter().enumerate() {
            if let Some(c) = tgt {
                if *c >= v {
                    return Err(TensorError::Contract {
                        op: "nll_masked",
                        msg: format!("target id {} out of vocab {}", c, v),
                    });
                }
                loss = loss - x[t * v + c];
            }
        }
        Ok(self.push(
            Buf::Owned(vec![loss]),
            1,
            1,
            Op::NllMasked { logp, targets: targets.to_vec() },
            false,
        ))
    }

    /// Inverted dropout with keep-scale `1/(1-p)`; mask drawn from `rng`.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, p: f64, rng: &mut R) -> NodeId {
        let (m, n) = self.shape(a);
        let keep = lit::<S>(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..m * n)
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &k)| x * k)
            .collect();
        self.push(Buf::Owned(out), m, n, Op::Dropout { a, mask }, false)
    }

    /// Reverse sweep from a scalar loss; accumulates into every
    /// requires-grad node's persistent grad buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let ls = self.shape(loss);
        if ls != (1, 1) {
            return Err(TensorError::NonScalarLoss(ls));
        }
        let mut ws: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        ws[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let dy = match ws[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].requires_grad {
                let acc = self.nodes[i].grad.as_mut().expect("grad buffer");
                for (g, &d) in acc.iter_mut().zip(&dy) {
                    *g = *g + d;
                }
            }
            self.propagate(i, &dy, &mut ws);
        }
        Ok(())
    }

    fn ensure<'a>(ws: &'a mut [Option<Vec<S>>], id: NodeId, len: usize) -> &'a mut Vec<S> {
        ws[id.0].get_or_insert_with(|| vec![S::zero(); len])
    }

    fn numel(&self, id: NodeId) -> usize {
        let (m, n) = self.shape(id);
        m * n
    }

    fn propagate(&mut self, i: usize, dy: &[S], ws: &mut [Option<Vec<S>>]) {
        // Clone of the op to appease the borrow checker; saved buffers are small
        // relative to the matmul work.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                if self.nodes[a.0].needs_grad {
                    let bd = self.data(b).to_vec();
                    let ga = Self::ensure(ws, a, m * k);
                    mm_nt(dy, &bd, m, n, k, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.data(a).to_vec();
                    let gb = Self::ensure(ws, b, k * n);
                    mm_tn(&ad, dy, m, k, n, gb);
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = self.shape(a);
                let (n, _) = self.shape(b);
                if self.nodes[a.0].needs_grad {
                    let bd = self.data(b).to_vec();
                    let ga = Self::ensure(ws, a, m * k);
                    mm_nn(dy, &bd, m, n, k, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.data(a).to_vec();
                    let gb = Self::ensure(ws, b, n * k);
                    mm_tn(dy, &ad, m, n, k, gb);
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.nodes[id.0].needs_grad {
                        let g = Self::ensure(ws, id, dy.len());
                        for (gv, &d) in g.iter_mut().zip(dy) {
                            *gv = *gv + d;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                let (m, n) = self.shape(a);
                if self.nodes[a.0].needs_grad {
                    let g = Self::ensure(ws, a, m * n);
                    for (gv, &d) in g.iter_mut().zip(dy) {
                        *gv = *gv + d;
                    }
                }
                if self.nodes[row.0].needs_grad {
                    let g = Self::ensure(ws, row, n);
                    for i in 0..m {
                        for j in 0..n {
                            g[j] = g[j] + dy[i * n + j];
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let bd = self.data(b).to_vec();
                    let g = Self::ensure(ws, a, dy.len());
                    for ((gv, &d), &bv) in g.iter_mut().zip(dy).zip(&bd) {
                        *gv = *gv + d * bv;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.data(a).to_vec();
                    let g = Self::ensure(ws, b, dy.len());
                    for ((gv, &d), &av) in g.iter_mut().zip(dy).zip(&ad) {
                        *gv = *gv + d * av;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[a.0].needs_grad {
                    let g = Self::ensure(ws, a, dy.len());
                    for (gv, &d) in g.iter_mut().zip(dy) {
                        *gv = *gv + d * c;
                    }
                }
            }
            Op::Gelu { a } => {
                if self.nodes[a.0].needs_grad {
                    let xd = self.data(a).to_vec();
                    let g = Self::ensure(ws, a, dy.len());
                    for ((gv, &d), &x) in g.iter_mut().zip(dy).zip(&xd) {
                        *gv = *gv + d * gelu_bwd(x);
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.shape(a);
                    let y = self.data(NodeId(i)).to_vec();
                    let g = Self::ensure(ws, a, m * n);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &dy[r * n..(r + 1) * n];
                        let dot = yr.iter().zip(dr).map(|(&yv, &dv)| yv * dv).sum::<S>();
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { a } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.shape(a);
                    let y = self.data(NodeId(i)).to_vec();
                    let g = Self::ensure(ws, a, m * n);
                    for r in 0..m {
                        let dr = &dy[r * n..(r + 1) * n];
                        let sum = dr.iter().cloned().sum::<S>();
                        for j in 0..n {
                            let p = y[r * n + j].exp();
                            g[r * n + j] = g[r * n + j] + dr[j] - p * sum;
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                let (m, n) = self.shape(a);
                let nn = lit::<S>(n as f64);
                let gd = self.data(gamma).to_vec();
                if self.nodes[beta.0].needs_grad {
                    let g = Self::ensure(ws, beta, n);
                    for r in 0..m {
                        for j in 0..n {
                            g[j] = g[j] + dy[r * n + j];
                        }
                    }
                }
                if self.nodes[gamma.0].needs_grad {
                    let g = Self::ensure(ws, gamma, n);
                    for r in 0..m {
                        for j in 0..n {
                            g[j] = g[j] + dy[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.nodes[a.0].needs_grad {
                    let g = Self::ensure(ws, a, m * n);
                    for r in 0..m {
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for j in 0..n {
                            let dxh = dy[r * n + j] * gd[j];
                            mean_dxhat = mean_dxhat + dxh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[r * n + j];
                        }
                        mean_dxhat = mean_dxhat / nn;
                        mean_dxhat_xhat = mean_dxhat_xhat / nn;
                        for j in 0..n {
                            let dxh = dy[r * n + j] * gd[j];
                            g[r * n + j] = g[r * n + j]
                                + inv_std[r] * (dxh - mean_dxhat - xhat[r * n + j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::MeanRows { a } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.shape(a);
                    let inv = lit::<S>(1.0 / m as f64);
                    let g = Self::ensure(ws, a, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + dy[j] * inv;
                        }
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.nodes[a.0].needs_grad {
                    let len = self.numel(a);
                    let inv = lit::<S>(1.0 / len as f64);
                    let g = Self::ensure(ws, a, len);
                    for gv in g.iter_mut() {
                        *gv = *gv + dy[0] * inv;
                    }
                }
            }
            Op::SumAll { a } => {
                if self.nodes[a.0].needs_grad {
                    let len = self.numel(a);
                    let g = Self::ensure(ws, a, len);
                    for gv in g.iter_mut() {
                        *gv = *gv + dy[0];
                    }
                }
            }
            Op::Reshape { a } => {
                if self.nodes[a.0].needs_grad {
                    let g = Self::ensure(ws, a, dy.len());
                    for (gv, &d) in g.iter_mut().zip(dy) {
                        *gv = *gv + d;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let (pm, pn) = self.shape(p);
                    let len = pm * pn;
                    if self.nodes[p.0].needs_grad {
                        let g = Self::ensure(ws, p, len);
                        for (gv, &d) in g.iter_mut().zip(&dy[off..off + len]) {
                            *gv = *gv + d;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (m, n) = self.shape(NodeId(i));
                let mut off = 0;
                for p in parts {
                    let (_, pn) = self.shape(p);
                    if self.nodes[p.0].needs_grad {
                        let g = Self::ensure(ws, p, m * pn);
                        for r in 0..m {
                            for j in 0..pn {
                                g[r * pn + j] = g[r * pn + j] + dy[r * n + off + j];
                            }
                        }
                    }
                    off += pn;
                }
            }
            Op::SliceRows { a, start } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.shape(a);
                    let (lm, _) = self.shape(NodeId(i));
                    let g = Self::ensure(ws, a, m * n);
                    for r in 0..lm {
                        for j in 0..n {
                            g[(start + r) * n + j] = g[(start + r) * n + j] + dy[r * n + j];
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.shape(a);
                    let (_, ln) = self.shape(NodeId(i));
                    let g = Self::ensure(ws, a, m * n);
                    for r in 0..m {
                        for j in 0..ln {
                            g[r * n + start + j] = g[r * n + start + j] + dy[r * ln + j];
                        }
                    }
                }
            }
            Op::GatherRows { a, ids } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.shape(a);
                    let g = Self::ensure(ws, a, m * n);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            g[id * n + j] = g[id * n + j] + dy[r * n + j];
                        }
                    }
                }
            }
            Op::NllMasked { logp, targets } => {
                if self.nodes[logp.0].needs_grad {
                    let (m, v) = self.shape(logp);
                    let g = Self::ensure(ws, logp, m * v);
                    for (t, tgt) in targets.iter().enumerate() {
                        if let Some(c) = tgt {
                            g[t * v + c] = g[t * v + c] - dy[0];
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if self.nodes[a.0].needs_grad {
                    let g = Self::ensure(ws, a, dy.len());
                    for ((gv, &d), &k) in g.iter_mut().zip(dy).zip(&mask) {
                        *gv = *gv + d * k;
                    }
                }
            }
        }
    }
}

/// Raw accumulating row-major matmul: `out[m,n] += a[m,k] @ b[k,n]`.
/// Same kernel the graph ops use, exposed for tape-free evaluation paths.
pub fn raw_matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    mm_nn(a, b, m, k, n, out)
}

/// Raw accumulating matmul against a transposed right operand:
/// `out[m,n] += a[m,k] @ b[n,k]^T`.
pub fn raw_matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    mm_nt(a, b, m, k, n, out)
}

/// GELU (tanh approximation), matching the graph op.
pub fn raw_gelu<S: Scalar>(x: S) -> S {
    gelu_fwd(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = lit::<S>(GELU_C);
    let a = lit::<S>(GELU_A);
    let half = lit::<S>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

#[inline]
fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = lit::<S>(GELU_C);
    let a = lit::<S>(GELU_A);
    let half = lit::<S>(0.5);
    let three = lit::<S>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + three * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}
