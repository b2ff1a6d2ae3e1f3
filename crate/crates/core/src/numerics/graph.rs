//! Reverse-mode autodiff over a dynamic tape with a fixed primitive set.
//!
//! A [`Graph`] is built eagerly: inserting an operation computes its value
//! immediately and records what is needed for the backward sweep. One
//! training step owns one graph; [`Graph::backward`] replays the tape in
//! reverse and accumulates gradients for every `param` leaf.
//!
//! The primitive set is deliberately small: matmuls, elementwise maps, the
//! documented row/column broadcasts, reductions, row gather/slice/concat,
//! depthwise causal convolution, layer norm, causal softmax, L2 row
//! normalization, fused causal linear attention, the fused selective scan,
//! and a masked softmax cross-entropy head. Sequence-level recurrences with
//! closed-form adjoints (scan, linear attention) are primitives so backward
//! memory stays linear in sequence length.

use std::sync::Arc;

use super::alloc::{self};
use super::array::{Array, Scalar};
use super::kernels;
use super::NumError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Which algorithm evaluates the selective-scan recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    /// Sequential left-to-right recurrence; O(L) time, O(1) extra state.
    Recurrent,
    /// Work-efficient associative (Blelloch) scan; same result up to
    /// roundoff, O(L) work with O(log L) dependency depth.
    Parallel,
}

impl ScanMode {
    pub fn name(self) -> &'static str {
        match self {
            ScanMode::Recurrent => "recurrent",
            ScanMode::Parallel => "parallel",
        }
    }

    pub fn parse(s: &str) -> Option<ScanMode> {
        match s {
            "recurrent" => Some(ScanMode::Recurrent),
            "parallel" => Some(ScanMode::Parallel),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Silu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op<T: Scalar> {
    Leaf {
        requires_grad: bool,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// `A[m,k] · B[n,k]^T`
    MatmulNT {
        a: NodeId,
        b: NodeId,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: BinaryKind,
    },
    Unary {
        x: NodeId,
        kind: UnaryKind,
    },
    Affine {
        x: NodeId,
        mul: T,
        add: T,
    },
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    MulRow {
        x: NodeId,
        row: NodeId,
    },
    BroadcastCol {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    RowDot {
        a: NodeId,
        b: NodeId,
    },
    GatherRows {
        table: NodeId,
        ids: Arc<Vec<u32>>,
    },
    SliceRows {
        x: NodeId,
        r0: usize,
    },
    SliceCols {
        x: NodeId,
        c0: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    Conv1dCausal {
        x: NodeId,
        kernel: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: Option<NodeId>,
        eps: T,
    },
    CausalSoftmax {
        scores: NodeId,
        valid: Arc<Vec<bool>>,
    },
    L2NormalizeRows {
        x: NodeId,
        eps: T,
    },
    LinearAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        eps: T,
    },
    SelectiveScan {
        a: NodeId,
        delta: NodeId,
        b: NodeId,
        c: NodeId,
        x: NodeId,
        mode: ScanMode,
    },
    MaskedSoftmaxXent {
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        mask: Arc<Vec<bool>>,
    },
}

enum Saved<T: Scalar> {
    None,
    LayerNorm { mean: Vec<T>, rstd: Vec<T> },
    RowNorms(Vec<T>),
    LinAttn { den: Vec<T>, s_final: Vec<T>, z_final: Vec<T> },
    Scan { h: Array<T> },
    Xent { lse: Vec<T>, count: usize },
}

struct Node<T: Scalar> {
    value: Array<T>,
    op: Op<T>,
    saved: Saved<T>,
}

/// Gradient buffer registered with the allocation tracker, so backward
/// working memory shows up in the peak-bytes measure.
struct GradBuf<T> {
    data: Vec<T>,
    bytes: usize,
}

impl<T: Scalar> GradBuf<T> {
    fn zeros(len: usize) -> Result<Self, NumError> {
        let bytes = len * std::mem::size_of::<T>();
        alloc::register(bytes)?;
        Ok(GradBuf {
            data: vec![T::zero(); len],
            bytes,
        })
    }
}

impl<T> Drop for GradBuf<T> {
    fn drop(&mut self) {
        alloc::release(self.bytes);
    }
}

/// RAII registration for large scratch buffers inside fused ops.
struct Scratch {
    bytes: usize,
}

impl Scratch {
    fn new(bytes: usize) -> Result<Self, NumError> {
        alloc::register(bytes)?;
        Ok(Scratch { bytes })
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        alloc::release(self.bytes);
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf node id.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Takes the gradient for `id`; `None` if the node did not influence the
    /// objective (its gradient is identically zero).
    pub fn take(&mut self, id: NodeId) -> Option<Array<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    pub fn get(&self, id: NodeId) -> Option<&Array<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Dynamic reverse-mode tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

macro_rules! shape_err {
    ($op:expr, $left:expr, $right:expr) => {
        Err(NumError::ShapeMismatch {
            op: $op,
            left: $left.to_vec(),
            right: $right.to_vec(),
        })
    };
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, saved: Saved<T>) -> NodeId {
        self.nodes.push(Node { value, op, saved });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-learnable leaf (data, masks).
    pub fn input(&mut self, value: Array<T>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        Saved::None)
    }

    /// Learnable leaf; backward will produce a gradient for it.
    pub fn param(&mut self, value: Array<T>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        Saved::None)
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    /// Errors with the given stage name if the node holds any NaN/Inf.
    pub fn ensure_finite(&self, id: NodeId, stage: &str) -> Result<(), NumError> {
        if self.nodes[id.0].value.is_all_finite() {
            Ok(())
        } else {
            Err(NumError::NonFinite {
                stage: stage.to_string(),
            })
        }
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return shape_err!("matmul", self.value(a).shape(), self.value(b).shape());
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(
            self.value(a).as_slice(),
            self.value(b).as_slice(),
            m,
            k,
            n,
            &mut out,
            false,
        );
        let value = Array::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }, Saved::None))
    }

    /// `A[m,k] · B[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return shape_err!("matmul_nt", self.value(a).shape(), self.value(b).shape());
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(
            self.value(a).as_slice(),
            self.value(b).as_slice(),
            m,
            k,
            n,
            &mut out,
            false,
        );
        let value = Array::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatmulNT { a, b }, Saved::None))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: BinaryKind) -> Result<NodeId, NumError> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err!("elementwise", self.value(a).shape(), self.value(b).shape());
        }
        let (va, vb) = (self.value(a).as_slice(), self.value(b).as_slice());
        let out: Vec<T> = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let value = Array::from_vec(self.value(a).shape(), out)?;
        Ok(self.push(value, Op::Binary { a, b, kind }, Saved::None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn unary(&mut self, x: NodeId, kind: UnaryKind) -> Result<NodeId, NumError> {
        let out: Vec<T> = self
            .value(x)
            .as_slice()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Silu => v * kernels::sigmoid_scalar(v),
                UnaryKind::Sigmoid => kernels::sigmoid_scalar(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Softplus => kernels::softplus_scalar(v),
                UnaryKind::Exp => v.exp(),
            })
            .collect();
        let value = Array::from_vec(self.value(x).shape(), out)?;
        Ok(self.push(value, Op::Unary { x, kind }, Saved::None))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.unary(x, UnaryKind::Exp)
    }

    /// Elementwise `mul·x + add`.
    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> Result<NodeId, NumError> {
        let out: Vec<T> = self
            .value(x)
            .as_slice()
            .iter()
            .map(|&v| mul * v + add)
            .collect();
        let value = Array::from_vec(self.value(x).shape(), out)?;
        Ok(self.push(value, Op::Affine { x, mul, add }, Saved::None))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.affine(x, -T::one(), T::zero())
    }

    /// `[R,C] + [C]` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, NumError> {
        let (r, c) = self.dims2(x);
        if self.value(row).len() != c {
            return shape_err!("add_row", self.value(x).shape(), self.value(row).shape());
        }
        let xs = self.value(x).as_slice();
        let rs = self.value(row).as_slice();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xs[i * c + j] + rs[j]);
            }
        }
        let value = Array::from_vec(self.value(x).shape(), out)?;
        Ok(self.push(value, Op::AddRow { x, row }, Saved::None))
    }

    /// `[R,C] ⊙ [C]` broadcast over rows.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, NumError> {
        let (r, c) = self.dims2(x);
        if self.value(row).len() != c {
            return shape_err!("mul_row", self.value(x).shape(), self.value(row).shape());
        }
        let xs = self.value(x).as_slice();
        let rs = self.value(row).as_slice();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xs[i * c + j] * rs[j]);
            }
        }
        let value = Array::from_vec(self.value(x).shape(), out)?;
        Ok(self.push(value, Op::MulRow { x, row }, Saved::None))
    }

    /// `[R,1] -> [R,cols]` column broadcast.
    pub fn broadcast_col(&mut self, x: NodeId, cols: usize) -> Result<NodeId, NumError> {
        let (r, c) = self.dims2(x);
        if c != 1 {
            return shape_err!("broadcast_col", self.value(x).shape(), [r, cols]);
        }
        let xs = self.value(x).as_slice();
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for _ in 0..cols {
                out.push(xs[i]);
            }
        }
        let value = Array::from_vec(&[r, cols], out)?;
        Ok(self.push(value, Op::BroadcastCol { x }, Saved::None))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let s: T = self.value(x).as_slice().iter().copied().sum();
        let value = Array::scalar(s)?;
        Ok(self.push(value, Op::SumAll { x }, Saved::None))
    }

    /// Row-wise dot product of two `[R,C]` arrays -> `[R,1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err!("row_dot", self.value(a).shape(), self.value(b).shape());
        }
        let (r, c) = self.dims2(a);
        let (va, vb) = (self.value(a).as_slice(), self.value(b).as_slice());
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let mut s = T::zero();
            for j in 0..c {
                s += va[i * c + j] * vb[i * c + j];
            }
            out.push(s);
        }
        let value = Array::from_vec(&[r, 1], out)?;
        Ok(self.push(value, Op::RowDot { a, b }, Saved::None))
    }

    /// Row gather: `out[i,:] = table[ids[i],:]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, NumError> {
        let (v, d) = self.dims2(table);
        for &id in ids {
            if id as usize >= v {
                return Err(NumError::InvalidParam(format!(
                    "gather id {} out of range for table with {} rows",
                    id, v
                )));
            }
        }
        let ts = self.value(table).as_slice();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&ts[id as usize * d..(id as usize + 1) * d]);
        }
        let value = Array::from_vec(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: Arc::new(ids.to_vec()),
            },
            Saved::None,
        ))
    }

    /// Contiguous row slice `x[r0..r1, :]`.
    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> Result<NodeId, NumError> {
        let (r, c) = self.dims2(x);
        if r0 >= r1 || r1 > r {
            return shape_err!("slice_rows", self.value(x).shape(), [r0, r1]);
        }
        let xs = self.value(x).as_slice();
        let value = Array::from_vec(&[r1 - r0, c], xs[r0 * c..r1 * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, r0 }, Saved::None))
    }

    /// Contiguous column slice `x[:, c0..c1]`.
    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> Result<NodeId, NumError> {
        let (r, c) = self.dims2(x);
        if c0 >= c1 || c1 > c {
            return shape_err!("slice_cols", self.value(x).shape(), [c0, c1]);
        }
        let xs = self.value(x).as_slice();
        let w = c1 - c0;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + c0..i * c + c1]);
        }
        let value = Array::from_vec(&[r, w], out)?;
        Ok(self.push(value, Op::SliceCols { x, c0 }, Saved::None))
    }

    /// Vertical concatenation of 2-D nodes with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumError> {
        if parts.is_empty() {
            return Err(NumError::InvalidParam("concat_rows of nothing".into()));
        }
        let c = self.dims2(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p);
            if pc != c {
                return shape_err!("concat_rows", self.value(parts[0]).shape(), self.value(p).shape());
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).as_slice());
        }
        let value = Array::from_vec(&[rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, Saved::None))
    }

    /// Depthwise causal 1-D convolution of `x [L,D]` with `kernel [D,W]`;
    /// positions before the sequence start read zero. No bias.
    pub fn conv1d_causal(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId, NumError> {
        let (l, d) = self.dims2(x);
        let (dk, w) = self.dims2(kernel);
        if dk != d {
            return shape_err!("conv1d_causal", self.value(x).shape(), self.value(kernel).shape());
        }
        let mut out = vec![T::zero(); l * d];
        kernels::conv1d_causal(
            self.value(x).as_slice(),
            self.value(kernel).as_slice(),
            l,
            d,
            w,
            &mut out,
        );
        let value = Array::from_vec(&[l, d], out)?;
        Ok(self.push(value, Op::Conv1dCausal { x, kernel }, Saved::None))
    }

    /// Row-wise layer normalization with scale `gamma [C]` and optional
    /// offset `beta [C]`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: Option<NodeId>,
        eps: T,
    ) -> Result<NodeId, NumError> {
        let (r, c) = self.dims2(x);
        if self.value(gamma).len() != c {
            return shape_err!("layer_norm", self.value(x).shape(), self.value(gamma).shape());
        }
        if let Some(b) = beta {
            if self.value(b).len() != c {
                return shape_err!("layer_norm", self.value(x).shape(), self.value(b).shape());
            }
        }
        let xs = self.value(x).as_slice();
        let gs = self.value(gamma).as_slice().to_vec();
        let bs = beta.map(|b| self.value(b).as_slice().to_vec());
        let cn = T::from_usize(c).unwrap();
        let mut out = Vec::with_capacity(r * c);
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rstd = T::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for j in 0..c {
                let xhat = (row[j] - mean) * rstd;
                let mut y = gs[j] * xhat;
                if let Some(ref bvec) = bs {
                    y += bvec[j];
                }
                out.push(y);
            }
        }
        let value = Array::from_vec(&[r, c], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x, gamma, beta, eps },
            Saved::LayerNorm { mean: means, rstd: rstds },
        ))
    }

    /// Causal row-softmax over `scores [L,L]`: entry `(i,j)` participates iff
    /// `j <= i` and `valid[j]`. Rows with no participating entries are all
    /// zero.
    pub fn causal_softmax(&mut self, scores: NodeId, valid: &[bool]) -> Result<NodeId, NumError> {
        let (l, l2) = self.dims2(scores);
        if l != l2 || valid.len() != l {
            return shape_err!("causal_softmax", self.value(scores).shape(), [valid.len()]);
        }
        let ss = self.value(scores).as_slice();
        let mut out = vec![T::zero(); l * l];
        for i in 0..l {
            let row = &ss[i * l..(i + 1) * l];
            let mut mx = T::neg_infinity();
            for j in 0..=i {
                if valid[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == T::neg_infinity() {
                continue; // empty row
            }
            let mut sum = T::zero();
            for j in 0..=i {
                if valid[j] {
                    let e = (row[j] - mx).exp();
                    out[i * l + j] = e;
                    sum += e;
                }
            }
            for j in 0..=i {
                if valid[j] {
                    out[i * l + j] = out[i * l + j] / sum;
                }
            }
        }
        let value = Array::from_vec(&[l, l], out)?;
        Ok(self.push(
            value,
            Op::CausalSoftmax {
                scores,
                valid: Arc::new(valid.to_vec()),
            },
            Saved::None,
        ))
    }

    /// Row-wise L2 normalization: `y = x / max(‖x‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: T) -> Result<NodeId, NumError> {
        let (r, c) = self.dims2(x);
        let xs = self.value(x).as_slice();
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let n = kernels::l2_norm(row);
            norms.push(n);
            let denom = n.max(eps);
            for &v in row {
                out.push(v / denom);
            }
        }
        let value = Array::from_vec(&[r, c], out)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, eps }, Saved::RowNorms(norms)))
    }

    /// Fused causal linear attention over pre-normalized queries/keys.
    ///
    /// With running prefix sums `S_t = Σ_{j≤t} k_j v_j^T` and
    /// `z_t = Σ_{j≤t} k_j`, computes `out_t = (q_t S_t) / max(q_t·z_t, eps)`
    /// in O(L·d²) time and O(d²) state. Backward re-derives `S_t`/`z_t` by
    /// reverse downdating, so nothing quadratic in `L` is stored.
    pub fn linear_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        eps: T,
    ) -> Result<NodeId, NumError> {
        let (l, d) = self.dims2(q);
        if self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            return shape_err!("linear_attention", self.value(q).shape(), self.value(v).shape());
        }
        let (qs, ks, vs) = (
            self.value(q).as_slice(),
            self.value(k).as_slice(),
            self.value(v).as_slice(),
        );
        let mut s = vec![T::zero(); d * d];
        let mut z = vec![T::zero(); d];
        let mut out = vec![T::zero(); l * d];
        let mut dens = Vec::with_capacity(l);
        for t in 0..l {
            let (qr, kr, vr) = (
                &qs[t * d..(t + 1) * d],
                &ks[t * d..(t + 1) * d],
                &vs[t * d..(t + 1) * d],
            );
            for f in 0..d {
                let kf = kr[f];
                let srow = &mut s[f * d..(f + 1) * d];
                for (se, &ve) in srow.iter_mut().zip(vr) {
                    *se += kf * ve;
                }
                z[f] += kf;
            }
            let mut den = T::zero();
            for f in 0..d {
                den += qr[f] * z[f];
            }
            dens.push(den);
            let dclamp = den.max(eps);
            let orow = &mut out[t * d..(t + 1) * d];
            for f in 0..d {
                let qf = qr[f];
                let srow = &s[f * d..(f + 1) * d];
                for (o, &se) in orow.iter_mut().zip(srow) {
                    *o += qf * se;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / dclamp;
            }
        }
        let value = Array::from_vec(&[l, d], out)?;
        Ok(self.push(
            value,
            Op::LinearAttention { q, k, v, eps },
            Saved::LinAttn {
                den: dens,
                s_final: s,
                z_final: z,
            },
        ))
    }

    /// Fused selective scan.
    ///
    /// Inputs: continuous transition `a [D,N]` (strictly negative), step
    /// sizes `delta [L,D]` (positive), input map `b [L,N]`, readout `c [L,N]`
    /// and stream `x [L,D]`. Per timestep the zero-order-hold discretization
    /// is applied on the fly — `ā = exp(δ·a)`, `b̄x = δ·b·x` — and the state
    /// recurrence `h_t = ā_t ⊙ h_{t-1} + b̄x_t` is evaluated with the chosen
    /// algorithm. Output `y[t,d] = Σ_n c[t,n]·h[t,d,n]`.
    ///
    /// The states `h [L,D,N]` are kept for backward; gradients are computed
    /// by a reverse scan with the same associative operator, so memory stays
    /// O(L·D·N).
    pub fn selective_scan(
        &mut self,
        a: NodeId,
        delta: NodeId,
        b: NodeId,
        c: NodeId,
        x: NodeId,
        mode: ScanMode,
    ) -> Result<NodeId, NumError> {
        let (d, n) = self.dims2(a);
        let (l, dd) = self.dims2(delta);
        let (lb, nb) = self.dims2(b);
        let (lc, nc) = self.dims2(c);
        let (lx, dx) = self.dims2(x);
        if dd != d || dx != d || nb != n || nc != n || lb != l || lc != l || lx != l {
            return shape_err!("selective_scan", self.value(delta).shape(), self.value(a).shape());
        }
        let avs = self.value(a).as_slice();
        for &av in avs {
            if av >= T::zero() {
                return Err(NumError::InvalidParam(
                    "selective_scan requires strictly negative transition entries".into(),
                ));
            }
        }
        let (dels, bs, cs, xs) = (
            self.value(delta).as_slice(),
            self.value(b).as_slice(),
            self.value(c).as_slice(),
            self.value(x).as_slice(),
        );
        let mut h = vec![T::zero(); l * d * n];
        match mode {
            ScanMode::Recurrent => {
                for t in 0..l {
                    for di in 0..d {
                        let dt = dels[t * d + di];
                        let xv = xs[t * d + di];
                        let arow = &avs[di * n..(di + 1) * n];
                        let base = (t * d + di) * n;
                        let prev_base = base.wrapping_sub(d * n);
                        for ni in 0..n {
                            let abar = (dt * arow[ni]).exp();
                            let prev = if t > 0 { h[prev_base + ni] } else { T::zero() };
                            h[base + ni] = abar * prev + dt * bs[t * n + ni] * xv;
                        }
                    }
                }
            }
            ScanMode::Parallel => {
                let lanes = d * n;
                let scratch_bytes =
                    (2 * l + 2 * l.next_power_of_two()) * lanes * std::mem::size_of::<T>();
                let _guard = Scratch::new(scratch_bytes)?;
                let mut abar = vec![T::zero(); l * lanes];
                let mut bx = vec![T::zero(); l * lanes];
                for t in 0..l {
                    for di in 0..d {
                        let dt = dels[t * d + di];
                        let xv = xs[t * d + di];
                        let arow = &avs[di * n..(di + 1) * n];
                        let base = (t * d + di) * n;
                        for ni in 0..n {
                            abar[base + ni] = (dt * arow[ni]).exp();
                            bx[base + ni] = dt * bs[t * n + ni] * xv;
                        }
                    }
                }
                kernels::scan_blelloch_lanes(&abar, &bx, l, lanes, &mut h);
            }
        }
        let mut y = vec![T::zero(); l * d];
        for t in 0..l {
            let crow = &cs[t * n..(t + 1) * n];
            for di in 0..d {
                let hrow = &h[(t * d + di) * n..(t * d + di + 1) * n];
                let mut s = T::zero();
                for (hv, &cv) in hrow.iter().zip(crow) {
                    s += *hv * cv;
                }
                y[t * d + di] = s;
            }
        }
        let h = Array::from_vec(&[l, d, n], h)?;
        let value = Array::from_vec(&[l, d], y)?;
        Ok(self.push(
            value,
            Op::SelectiveScan { a, delta, b, c, x, mode },
            Saved::Scan { h },
        ))
    }

    /// Masked mean softmax cross-entropy over rows of `logits [R,C]`.
    /// `targets[r]` is the column index of the positive class; rows with
    /// `mask[r] == false` are ignored. Errors if the mask covers nothing.
    pub fn masked_softmax_xent(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId, NumError> {
        let (r, c) = self.dims2(logits);
        if targets.len() != r || mask.len() != r {
            return shape_err!("masked_softmax_xent", self.value(logits).shape(), [targets.len()]);
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumError::InvalidParam(
                "masked loss has no unmasked positions".into(),
            ));
        }
        let ls = self.value(logits).as_slice();
        let mut lses = vec![T::zero(); r];
        let mut total = T::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &ls[i * c..(i + 1) * c];
            let t = targets[i] as usize;
            if t >= c {
                return Err(NumError::InvalidParam(format!(
                    "target column {} out of range {}",
                    t, c
                )));
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            lses[i] = lse;
            total += lse - row[t];
        }
        let value = Array::scalar(total / T::from_usize(count).unwrap())?;
        Ok(self.push(
            value,
            Op::MaskedSoftmaxXent {
                logits,
                targets: Arc::new(targets.to_vec()),
                mask: Arc::new(mask.to_vec()),
            },
            Saved::Xent { lse: lses, count },
        ))
    }

    fn grad_slot<'s>(
        grads: &'s mut [Option<GradBuf<T>>],
        id: NodeId,
        len: usize,
    ) -> Result<&'s mut [T], NumError> {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(GradBuf::zeros(len)?);
        }
        Ok(&mut slot.as_mut().unwrap().data)
    }

    /// Reverse sweep from a scalar objective. Returns gradients for every
    /// `param` leaf that influenced it; unused parameters simply have no
    /// entry (their gradient is zero).
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<T>, NumError> {
        if self.value(root).len() != 1 {
            return Err(NumError::InvalidParam(format!(
                "backward requires a scalar objective, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<GradBuf<T>>> = Vec::with_capacity(n_nodes);
        grads.resize_with(n_nodes, || None);
        {
            let slot = Self::grad_slot(&mut grads, root, 1)?;
            slot[0] = T::one();
        }

        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue; // leaf grads stay for collection
            }
            let Some(gy_buf) = grads[i].take() else {
                continue;
            };
            let gy = &gy_buf.data;
            self.backward_node(i, gy, &mut grads)?;
        }

        let mut out: Vec<Option<Array<T>>> = Vec::with_capacity(n_nodes);
        for (i, slot) in grads.into_iter().enumerate() {
            match (&self.nodes[i].op, slot) {
                (
                    Op::Leaf {
                        requires_grad: true,
                    },
                    Some(buf),
                ) => {
                    let arr = Array::from_vec(self.nodes[i].value.shape(), buf.data.clone())?;
                    out.push(Some(arr));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(
        &self,
        i: usize,
        gy: &[T],
        grads: &mut [Option<GradBuf<T>>],
    ) -> Result<(), NumError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                {
                    let ga = Self::grad_slot(grads, *a, m * k)?;
                    kernels::gemm_nt(gy, self.value(*b).as_slice(), m, n, k, ga, true);
                }
                {
                    let gb = Self::grad_slot(grads, *b, k * n)?;
                    kernels::gemm_tn(self.value(*a).as_slice(), gy, m, k, n, gb, true);
                }
            }
            Op::MatmulNT { a, b } => {
                // Y = A·Bᵀ: dA = dY·B, dB = dYᵀ·A
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).0;
                {
                    let ga = Self::grad_slot(grads, *a, m * k)?;
                    kernels::gemm_nn(gy, self.value(*b).as_slice(), m, n, k, ga, true);
                }
                {
                    let gb = Self::grad_slot(grads, *b, n * k)?;
                    kernels::gemm_tn(gy, self.value(*a).as_slice(), m, n, k, gb, true);
                }
            }
            Op::Binary { a, b, kind } => match kind {
                BinaryKind::Add => {
                    let ga = Self::grad_slot(grads, *a, gy.len())?;
                    for (g, &v) in ga.iter_mut().zip(gy) {
                        *g += v;
                    }
                    let gb = Self::grad_slot(grads, *b, gy.len())?;
                    for (g, &v) in gb.iter_mut().zip(gy) {
                        *g += v;
                    }
                }
                BinaryKind::Sub => {
                    let ga = Self::grad_slot(grads, *a, gy.len())?;
                    for (g, &v) in ga.iter_mut().zip(gy) {
                        *g += v;
                    }
                    let gb = Self::grad_slot(grads, *b, gy.len())?;
                    for (g, &v) in gb.iter_mut().zip(gy) {
                        *g -= v;
                    }
                }
                BinaryKind::Mul => {
                    {
                        let vb = self.value(*b).as_slice();
                        let ga = Self::grad_slot(grads, *a, gy.len())?;
                        for j in 0..gy.len() {
                            ga[j] += gy[j] * vb[j];
                        }
                    }
                    {
                        let va = self.value(*a).as_slice();
                        let gb = Self::grad_slot(grads, *b, gy.len())?;
                        for j in 0..gy.len() {
                            gb[j] += gy[j] * va[j];
                        }
                    }
                }
            },
            Op::Unary { x, kind } => {
                let xs = self.value(*x).as_slice();
                let ys = node.value.as_slice();
                let gx = Self::grad_slot(grads, *x, gy.len())?;
                match kind {
                    UnaryKind::Silu => {
                        for j in 0..gy.len() {
                            let s = kernels::sigmoid_scalar(xs[j]);
                            gx[j] += gy[j] * (s * (T::one() + xs[j] * (T::one() - s)));
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] * ys[j] * (T::one() - ys[j]);
                        }
                    }
                    UnaryKind::Tanh => {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] * (T::one() - ys[j] * ys[j]);
                        }
                    }
                    UnaryKind::Softplus => {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] * kernels::sigmoid_scalar(xs[j]);
                        }
                    }
                    UnaryKind::Exp => {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] * ys[j];
                        }
                    }
                }
            }
            Op::Affine { x, mul, .. } => {
                let gx = Self::grad_slot(grads, *x, gy.len())?;
                for (g, &v) in gx.iter_mut().zip(gy) {
                    *g += *mul * v;
                }
            }
            Op::AddRow { x, row } => {
                let (r, c) = self.dims2(*x);
                {
                    let gx = Self::grad_slot(grads, *x, r * c)?;
                    for (g, &v) in gx.iter_mut().zip(gy) {
                        *g += v;
                    }
                }
                {
                    let grow = Self::grad_slot(grads, *row, c)?;
                    for i in 0..r {
                        for j in 0..c {
                            grow[j] += gy[i * c + j];
                        }
                    }
                }
            }
            Op::MulRow { x, row } => {
                let (r, c) = self.dims2(*x);
                {
                    let rs = self.value(*row).as_slice();
                    let gx = Self::grad_slot(grads, *x, r * c)?;
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gy[i * c + j] * rs[j];
                        }
                    }
                }
                {
                    let xs = self.value(*x).as_slice();
                    let grow = Self::grad_slot(grads, *row, c)?;
                    for i in 0..r {
                        for j in 0..c {
                            grow[j] += gy[i * c + j] * xs[i * c + j];
                        }
                    }
                }
            }
            Op::BroadcastCol { x } => {
                let r = self.dims2(*x).0;
                let cols = node.value.cols();
                let gx = Self::grad_slot(grads, *x, r)?;
                for i in 0..r {
                    let mut s = T::zero();
                    for j in 0..cols {
                        s += gy[i * cols + j];
                    }
                    gx[i] += s;
                }
            }
            Op::SumAll { x } => {
                let len = self.value(*x).len();
                let gx = Self::grad_slot(grads, *x, len)?;
                for g in gx.iter_mut() {
                    *g += gy[0];
                }
            }
            Op::RowDot { a, b } => {
                let (r, c) = self.dims2(*a);
                {
                    let vb = self.value(*b).as_slice();
                    let ga = Self::grad_slot(grads, *a, r * c)?;
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gy[i] * vb[i * c + j];
                        }
                    }
                }
                {
                    let va = self.value(*a).as_slice();
                    let gb = Self::grad_slot(grads, *b, r * c)?;
                    for i in 0..r {
                        for j in 0..c {
                            gb[i * c + j] += gy[i] * va[i * c + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let (v, d) = self.dims2(*table);
                let gt = Self::grad_slot(grads, *table, v * d)?;
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    let src = &gy[i * d..(i + 1) * d];
                    for (g, &s) in dst.iter_mut().zip(src) {
                        *g += s;
                    }
                }
            }
            Op::SliceRows { x, r0 } => {
                let (r, c) = self.dims2(*x);
                let gx = Self::grad_slot(grads, *x, r * c)?;
                for (g, &v) in gx[r0 * c..r0 * c + gy.len()].iter_mut().zip(gy) {
                    *g += v;
                }
            }
            Op::SliceCols { x, c0 } => {
                let (r, c) = self.dims2(*x);
                let w = node.value.cols();
                let gx = Self::grad_slot(grads, *x, r * c)?;
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + c0 + j] += gy[i * w + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let c = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.dims2(p).0;
                    let gp = Self::grad_slot(grads, p, pr * c)?;
                    for (g, &v) in gp.iter_mut().zip(&gy[offset..offset + pr * c]) {
                        *g += v;
                    }
                    offset += pr * c;
                }
            }
            Op::Conv1dCausal { x, kernel } => {
                let (l, d) = self.dims2(*x);
                let w = self.dims2(*kernel).1;
                {
                    let ks = self.value(*kernel).as_slice();
                    let gx = Self::grad_slot(grads, *x, l * d)?;
                    kernels::conv1d_causal_grad_x(gy, ks, l, d, w, gx);
                }
                {
                    let xs = self.value(*x).as_slice();
                    let gk = Self::grad_slot(grads, *kernel, d * w)?;
                    kernels::conv1d_causal_grad_k(gy, xs, l, d, w, gk);
                }
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let (r, c) = self.dims2(*x);
                let Saved::LayerNorm { mean, rstd } = &node.saved else {
                    unreachable!()
                };
                let xs = self.value(*x).as_slice();
                let gs = self.value(*gamma).as_slice();
                let cn = T::from_usize(c).unwrap();
                {
                    let ggamma = Self::grad_slot(grads, *gamma, c)?;
                    for i in 0..r {
                        for j in 0..c {
                            let xhat = (xs[i * c + j] - mean[i]) * rstd[i];
                            ggamma[j] += gy[i * c + j] * xhat;
                        }
                    }
                }
                if let Some(bid) = beta {
                    let gbeta = Self::grad_slot(grads, *bid, c)?;
                    for i in 0..r {
                        for j in 0..c {
                            gbeta[j] += gy[i * c + j];
                        }
                    }
                }
                {
                    let gx = Self::grad_slot(grads, *x, r * c)?;
                    for i in 0..r {
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..c {
                            let dxhat = gy[i * c + j] * gs[j];
                            let xhat = (xs[i * c + j] - mean[i]) * rstd[i];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat = mean_dxhat / cn;
                        mean_dxhat_xhat = mean_dxhat_xhat / cn;
                        for j in 0..c {
                            let dxhat = gy[i * c + j] * gs[j];
                            let xhat = (xs[i * c + j] - mean[i]) * rstd[i];
                            gx[i * c + j] +=
                                rstd[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::CausalSoftmax { scores, valid } => {
                let l = self.dims2(*scores).0;
                let ys = node.value.as_slice();
                let gx = Self::grad_slot(grads, *scores, l * l)?;
                for i in 0..l {
                    let mut dot = T::zero();
                    for j in 0..=i {
                        if valid[j] {
                            dot += gy[i * l + j] * ys[i * l + j];
                        }
                    }
                    for j in 0..=i {
                        if valid[j] {
                            gx[i * l + j] += ys[i * l + j] * (gy[i * l + j] - dot);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                let (r, c) = self.dims2(*x);
                let Saved::RowNorms(norms) = &node.saved else {
                    unreachable!()
                };
                let ys = node.value.as_slice();
                let gx = Self::grad_slot(grads, *x, r * c)?;
                for i in 0..r {
                    let denom = norms[i].max(*eps);
                    if norms[i] > *eps {
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot += gy[i * c + j] * ys[i * c + j];
                        }
                        for j in 0..c {
                            gx[i * c + j] += (gy[i * c + j] - ys[i * c + j] * dot) / denom;
                        }
                    } else {
                        for j in 0..c {
                            gx[i * c + j] += gy[i * c + j] / denom;
                        }
                    }
                }
            }
            Op::LinearAttention { q, k, v, eps } => {
                let (l, d) = self.dims2(*q);
                let Saved::LinAttn { den, s_final, z_final } = &node.saved else {
                    unreachable!()
                };
                let (qs, ks, vs) = (
                    self.value(*q).as_slice(),
                    self.value(*k).as_slice(),
                    self.value(*v).as_slice(),
                );
                let ys = node.value.as_slice();
                let mut s = s_final.clone();
                let mut z = z_final.clone();
                let mut rr = vec![T::zero(); d * d]; // Σ_{τ≥t} q_τ ⊗ dnum_τ
                let mut rv = vec![T::zero(); d]; // Σ_{τ≥t} dden_τ · q_τ
                let mut dnum = vec![T::zero(); d];
                // grads are written per row, so borrow slots up front
                let mut gq_buf = vec![T::zero(); l * d];
                let mut gk_buf = vec![T::zero(); l * d];
                let mut gv_buf = vec![T::zero(); l * d];
                for t in (0..l).rev() {
                    let qr = &qs[t * d..(t + 1) * d];
                    let kr = &ks[t * d..(t + 1) * d];
                    let vr = &vs[t * d..(t + 1) * d];
                    let yr = &ys[t * d..(t + 1) * d];
                    let gr = &gy[t * d..(t + 1) * d];
                    let dclamp = den[t].max(*eps);
                    for e in 0..d {
                        dnum[e] = gr[e] / dclamp;
                    }
                    let dden = if den[t] > *eps {
                        let mut dy_out = T::zero();
                        for e in 0..d {
                            dy_out += gr[e] * yr[e];
                        }
                        -dy_out / dclamp
                    } else {
                        T::zero()
                    };
                    // dq_t = S_t · dnum + dden · z_t
                    for f in 0..d {
                        let srow = &s[f * d..(f + 1) * d];
                        let mut acc = T::zero();
                        for e in 0..d {
                            acc += srow[e] * dnum[e];
                        }
                        gq_buf[t * d + f] = acc + dden * z[f];
                    }
                    // fold τ = t into the reverse sums
                    for f in 0..d {
                        let qf = qr[f];
                        let rrow = &mut rr[f * d..(f + 1) * d];
                        for e in 0..d {
                            rrow[e] += qf * dnum[e];
                        }
                        rv[f] += dden * qf;
                    }
                    // dk_t = R · v_t + r ; dv_t = Rᵀ · k_t
                    for f in 0..d {
                        let rrow = &rr[f * d..(f + 1) * d];
                        let mut acc = T::zero();
                        for e in 0..d {
                            acc += rrow[e] * vr[e];
                        }
                        gk_buf[t * d + f] = acc + rv[f];
                    }
                    for e in 0..d {
                        let mut acc = T::zero();
                        for f in 0..d {
                            acc += kr[f] * rr[f * d + e];
                        }
                        gv_buf[t * d + e] = acc;
                    }
                    // downdate prefix state to t-1
                    for f in 0..d {
                        let kf = kr[f];
                        let srow = &mut s[f * d..(f + 1) * d];
                        for (se, &ve) in srow.iter_mut().zip(vr) {
                            *se -= kf * ve;
                        }
                        z[f] -= kf;
                    }
                }
                {
                    let gq = Self::grad_slot(grads, *q, l * d)?;
                    for (g, &v2) in gq.iter_mut().zip(&gq_buf) {
                        *g += v2;
                    }
                }
                {
                    let gk = Self::grad_slot(grads, *k, l * d)?;
                    for (g, &v2) in gk.iter_mut().zip(&gk_buf) {
                        *g += v2;
                    }
                }
                {
                    let gv = Self::grad_slot(grads, *v, l * d)?;
                    for (g, &v2) in gv.iter_mut().zip(&gv_buf) {
                        *g += v2;
                    }
                }
            }
            Op::SelectiveScan { a, delta, b, c, x, mode } => {
                self.backward_scan(node, *a, *delta, *b, *c, *x, *mode, gy, grads)?;
            }
            Op::MaskedSoftmaxXent { logits, targets, mask } => {
                let (r, c) = self.dims2(*logits);
                let Saved::Xent { lse, count } = &node.saved else {
                    unreachable!()
                };
                let ls = self.value(*logits).as_slice();
                let scale = gy[0] / T::from_usize(*count).unwrap();
                let gl = Self::grad_slot(grads, *logits, r * c)?;
                for i in 0..r {
                    if !mask[i] {
                        continue;
                    }
                    let row = &ls[i * c..(i + 1) * c];
                    for j in 0..c {
                        let p = (row[j] - lse[i]).exp();
                        gl[i * c + j] += scale * p;
                    }
                    gl[i * c + targets[i] as usize] -= scale;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_scan(
        &self,
        node: &Node<T>,
        a: NodeId,
        delta: NodeId,
        b: NodeId,
        c: NodeId,
        x: NodeId,
        mode: ScanMode,
        gy: &[T],
        grads: &mut [Option<GradBuf<T>>],
    ) -> Result<(), NumError> {
        let (d, n) = self.dims2(a);
        let l = self.dims2(delta).0;
        let Saved::Scan { h } = &node.saved else {
            unreachable!()
        };
        let hs = h.as_slice();
        let (avs, dels, bs, cs, xs) = (
            self.value(a).as_slice(),
            self.value(delta).as_slice(),
            self.value(b).as_slice(),
            self.value(c).as_slice(),
            self.value(x).as_slice(),
        );

        let mut da = vec![T::zero(); d * n];
        let mut ddelta = vec![T::zero(); l * d];
        let mut db = vec![T::zero(); l * n];
        let mut dc = vec![T::zero(); l * n];
        let mut dx = vec![T::zero(); l * d];

        match mode {
            ScanMode::Recurrent => {
                // carry[d,n] = ā_{t+1} ⊙ g_{t+1}, folded right to left
                let mut carry = vec![T::zero(); d * n];
                for t in (0..l).rev() {
                    for di in 0..d {
                        let dt = dels[t * d + di];
                        let xv = xs[t * d + di];
                        let arow = &avs[di * n..(di + 1) * n];
                        let base = (t * d + di) * n;
                        let gyv = gy[t * d + di];
                        let mut ddt = T::zero();
                        let mut dxv = T::zero();
                        for ni in 0..n {
                            let g = cs[t * n + ni] * gyv + carry[di * n + ni];
                            let abar = (dt * arow[ni]).exp();
                            let hprev = if t > 0 { hs[base - d * n + ni] } else { T::zero() };
                            da[di * n + ni] += g * abar * dt * hprev;
                            ddt += g * (arow[ni] * abar * hprev + bs[t * n + ni] * xv);
                            db[t * n + ni] += g * dt * xv;
                            dxv += g * dt * bs[t * n + ni];
                            dc[t * n + ni] += gyv * hs[base + ni];
                            carry[di * n + ni] = abar * g;
                        }
                        ddelta[t * d + di] = ddt;
                        dx[t * d + di] = dxv;
                    }
                }
            }
            ScanMode::Parallel => {
                // Reverse scan with the same associative operator: for
                // q_t = c_t·dy_t the adjoint satisfies
                // g_t = q_t + ā_{t+1} ⊙ g_{t+1}.
                let lanes = d * n;
                let scratch_bytes =
                    (4 * l + 2 * l.next_power_of_two()) * lanes * std::mem::size_of::<T>();
                let _guard = Scratch::new(scratch_bytes)?;
                let mut abar = vec![T::zero(); l * lanes];
                for t in 0..l {
                    for di in 0..d {
                        let dt = dels[t * d + di];
                        let arow = &avs[di * n..(di + 1) * n];
                        let base = (t * d + di) * n;
                        for ni in 0..n {
                            abar[base + ni] = (dt * arow[ni]).exp();
                        }
                    }
                }
                let mut acoef = vec![T::one(); l * lanes];
                let mut qrev = vec![T::zero(); l * lanes];
                for s in 0..l {
                    let t = l - 1 - s;
                    if s > 0 {
                        acoef[s * lanes..(s + 1) * lanes]
                            .copy_from_slice(&abar[(t + 1) * lanes..(t + 2) * lanes]);
                    }
                    for di in 0..d {
                        let gyv = gy[t * d + di];
                        for ni in 0..n {
                            qrev[s * lanes + di * n + ni] = cs[t * n + ni] * gyv;
                        }
                    }
                }
                let mut grev = vec![T::zero(); l * lanes];
                kernels::scan_blelloch_lanes(&acoef, &qrev, l, lanes, &mut grev);
                for t in 0..l {
                    let g_t = &grev[(l - 1 - t) * lanes..(l - t) * lanes];
                    for di in 0..d {
                        let dt = dels[t * d + di];
                        let xv = xs[t * d + di];
                        let arow = &avs[di * n..(di + 1) * n];
                        let base = (t * d + di) * n;
                        let gyv = gy[t * d + di];
                        let mut ddt = T::zero();
                        let mut dxv = T::zero();
                        for ni in 0..n {
                            let g = g_t[di * n + ni];
                            let ab = abar[base + ni];
                            let hprev = if t > 0 { hs[base - d * n + ni] } else { T::zero() };
                            da[di * n + ni] += g * ab * dt * hprev;
                            ddt += g * (arow[ni] * ab * hprev + bs[t * n + ni] * xv);
                            db[t * n + ni] += g * dt * xv;
                            dxv += g * dt * bs[t * n + ni];
                            dc[t * n + ni] += gyv * hs[base + ni];
                        }
                        ddelta[t * d + di] = ddt;
                        dx[t * d + di] = dxv;
                    }
                }
            }
        }

        let pairs: [(NodeId, &[T]); 5] = [
            (a, &da),
            (delta, &ddelta),
            (b, &db),
            (c, &dc),
            (x, &dx),
        ];
        for (id, src) in pairs {
            let g = Self::grad_slot(grads, id, src.len())?;
            for (gslot, &v) in g.iter_mut().zip(src) {
                *gslot += v;
            }
        }
        Ok(())
    }
}
