//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so index order is already a
//! topological order and the backward sweep is a single reverse pass. One
//! tape corresponds to one forward evaluation; training builds a fresh tape
//! per epoch with parameters registered as leaves.

use super::matmul::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on the active tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Largest argument for which `exp` stays finite in f64.
const EXP_MAX: f64 = 709.0;
/// Predecessor of 1.0; sigmoid outputs are clamped into (0, 1) strictly.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid_stable(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

/// softplus(y) = ln(1 + e^y), stable for any finite y.
fn softplus(y: f64) -> f64 {
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// A · Bᵀ with both operands in row-major layout.
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddScalar { a: NodeId, offset: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    SoftmaxRows { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    MeanAxis { a: NodeId, axis: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    GatherRows { a: NodeId, indices: Vec<usize> },
    SegmentMeanRows {
        a: NodeId,
        segments: Vec<usize>,
        counts: Vec<usize>,
    },
    SliceRows { a: NodeId, start: usize },
    Reshape { a: NodeId },
    Transpose { a: NodeId },
    /// Strict upper-triangle vector expanded to a symmetric matrix with zero
    /// diagonal.
    SymExpand { a: NodeId, n: usize },
    AddBiasRow { a: NodeId, bias: NodeId },
    /// Weighted binary cross-entropy from logits against a constant target,
    /// reduced to a scalar. `(1 + (pw-1)·t)·softplus(-x) + (1-t)·x` per
    /// element.
    BceLogits {
        logits: NodeId,
        target: Vec<f64>,
        pos_weight: f64,
        mean: bool,
    },
    /// Per-row cross-entropy of a row-softmax against constant class indices.
    CeSoftmaxRows { logits: NodeId, classes: Vec<usize> },
}

struct Node {
    op: Op,
    tensor: Tensor,
    needs_grad: bool,
}

/// Ordered record of operations with per-node gradient buffers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a constant (no gradient tracked).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Register a trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Gradient of the last `backward` root w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, tensor: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            tensor,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn t(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn broadcast_shapes(&self, a: NodeId, b: NodeId, op: &str) -> Result<Vec<usize>> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.shape() == tb.shape() {
            Ok(ta.shape().to_vec())
        } else if tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} are not equal and neither is scalar",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let shape = self.broadcast_shapes(a, b, name)?;
        let (ta, tb) = (self.t(a), self.t(b));
        let vals = if ta.shape() == tb.shape() {
            ta.values()
                .iter()
                .zip(tb.values())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else if tb.is_scalar() {
            let y = tb.values()[0];
            ta.values().iter().map(|&x| f(x, y)).collect()
        } else {
            let x = ta.values()[0];
            tb.values().iter().map(|&y| f(x, y)).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, Tensor::new(shape, vals)?, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let vals = self.t(a).values().iter().map(|&x| x * factor).collect();
        let t = Tensor::new(self.t(a).shape().to_vec(), vals).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Scale { a, factor }, t, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        let vals = self.t(a).values().iter().map(|&x| x + offset).collect();
        let t = Tensor::new(self.t(a).shape().to_vec(), vals).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::AddScalar { a, offset }, t, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let vals = self.t(a).values().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.t(a).shape().to_vec(), vals).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Relu { a }, t, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let vals = self.t(a).values().iter().map(|&x| sigmoid_stable(x)).collect();
        let t = Tensor::new(self.t(a).shape().to_vec(), vals).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Sigmoid { a }, t, needs)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.t(a).values().iter().find(|v| **v > EXP_MAX || !v.is_finite()) {
            return Err(Error::Domain(format!("exp of {bad} would overflow")));
        }
        let vals = self.t(a).values().iter().map(|&x| x.exp()).collect();
        let t = Tensor::new(self.t(a).shape().to_vec(), vals)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Exp { a }, t, needs))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.t(a).values().iter().find(|v| **v <= 0.0 || !v.is_finite()) {
            return Err(Error::Domain(format!("log of {bad} is undefined")));
        }
        let vals = self.t(a).values().iter().map(|&x| x.ln()).collect();
        let t = Tensor::new(self.t(a).shape().to_vec(), vals)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Log { a }, t, needs))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let vals = self.t(a).values().iter().map(|&x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(self.t(a).shape().to_vec(), vals).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Clamp { a, lo, hi }, t, needs)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let vals = matmul_nn(ta.values(), tb.values(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], vals)?, needs))
    }

    /// A · Bᵀ; `b` is given row-major as an n×k matrix.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::Dimension(format!(
                "matmul_nt expects m×k and n×k, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[0];
        let vals = matmul_nt(ta.values(), tb.values(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNT { a, b }, Tensor::new(vec![m, n], vals)?, needs))
    }

    /// Same values, new shape (element count must match).
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.t(a).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} to {shape:?}",
                self.t(a).shape()
            )));
        }
        let t = Tensor::new(shape, self.t(a).values().to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape { a }, t, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        if ta.rank() != 2 {
            return Err(Error::Dimension(format!(
                "transpose expects a matrix, got {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut vals = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                vals[j * r + i] = ta.values()[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose { a }, Tensor::new(vec![c, r], vals)?, needs))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        if self.t(a).is_empty() {
            return Err(Error::EmptyAggregation("sum over zero elements".into()));
        }
        let s: f64 = self.t(a).values().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Op::SumAll { a }, Tensor::scalar(s), needs))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        if self.t(a).is_empty() {
            return Err(Error::EmptyAggregation("mean over zero elements".into()));
        }
        let s: f64 = self.t(a).values().iter().sum();
        let n = self.t(a).len() as f64;
        let needs = self.needs(a);
        Ok(self.push(Op::MeanAll { a }, Tensor::scalar(s / n), needs))
    }

    fn axis_reduce_parts(&self, a: NodeId, axis: usize) -> Result<(usize, usize)> {
        let ta = self.t(a);
        if axis >= ta.rank() {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for shape {:?}",
                ta.shape()
            )));
        }
        if ta.rank() != 2 {
            return Err(Error::Dimension(
                "axis reductions support matrices only".into(),
            ));
        }
        Ok((ta.shape()[0], ta.shape()[1]))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (r, c) = self.axis_reduce_parts(a, axis)?;
        if (axis == 0 && r == 0) || (axis == 1 && c == 0) {
            return Err(Error::EmptyAggregation("sum over empty axis".into()));
        }
        let vals = self.t(a).values();
        let out = if axis == 0 {
            let mut o = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    o[j] += vals[i * c + j];
                }
            }
            Tensor::new(vec![c], o)?
        } else {
            let mut o = vec![0.0; r];
            for i in 0..r {
                o[i] = vals[i * c..(i + 1) * c].iter().sum();
            }
            Tensor::new(vec![r], o)?
        };
        let needs = self.needs(a);
        Ok(self.push(Op::SumAxis { a, axis }, out, needs))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (r, c) = self.axis_reduce_parts(a, axis)?;
        if (axis == 0 && r == 0) || (axis == 1 && c == 0) {
            return Err(Error::EmptyAggregation("mean over empty axis".into()));
        }
        let vals = self.t(a).values();
        let out = if axis == 0 {
            let mut o = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    o[j] += vals[i * c + j];
                }
            }
            for v in &mut o {
                *v /= r as f64;
            }
            Tensor::new(vec![c], o)?
        } else {
            let mut o = vec![0.0; r];
            for i in 0..r {
                o[i] = vals[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
            }
            Tensor::new(vec![r], o)?
        };
        let needs = self.needs(a);
        Ok(self.push(Op::MeanAxis { a, axis }, out, needs))
    }

    // ── Structure ───────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let rank = self.t(parts[0]).rank();
        if axis >= rank {
            return Err(Error::Dimension(format!("concat axis {axis} out of range")));
        }
        if rank == 1 {
            // Vectors concatenate along axis 0 only.
            if axis != 0 {
                return Err(Error::Dimension("vector concat must use axis 0".into()));
            }
            let mut vals = Vec::new();
            for &p in parts {
                if self.t(p).rank() != 1 {
                    return Err(Error::Dimension("concat parts must share rank".into()));
                }
                vals.extend_from_slice(self.t(p).values());
            }
            let n = vals.len();
            let needs = parts.iter().any(|&p| self.needs(p));
            return Ok(self.push(
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                },
                Tensor::new(vec![n], vals)?,
                needs,
            ));
        }
        // Matrices.
        let (r0, c0) = (self.t(parts[0]).shape()[0], self.t(parts[0]).shape()[1]);
        if axis == 0 {
            let mut vals = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let tp = self.t(p);
                if tp.rank() != 2 || tp.shape()[1] != c0 {
                    return Err(Error::Dimension(format!(
                        "concat axis 0: column counts differ ({:?} vs {c0})",
                        tp.shape()
                    )));
                }
                rows += tp.shape()[0];
                vals.extend_from_slice(tp.values());
            }
            let needs = parts.iter().any(|&p| self.needs(p));
            Ok(self.push(
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                },
                Tensor::new(vec![rows, c0], vals)?,
                needs,
            ))
        } else {
            let mut cols = 0;
            for &p in parts {
                let tp = self.t(p);
                if tp.rank() != 2 || tp.shape()[0] != r0 {
                    return Err(Error::Dimension(format!(
                        "concat axis 1: row counts differ ({:?} vs {r0})",
                        tp.shape()
                    )));
                }
                cols += tp.shape()[1];
            }
            let mut vals = vec![0.0; r0 * cols];
            let mut offset = 0;
            for &p in parts {
                let tp = self.t(p);
                let pc = tp.shape()[1];
                for i in 0..r0 {
                    vals[i * cols + offset..i * cols + offset + pc]
                        .copy_from_slice(&tp.values()[i * pc..(i + 1) * pc]);
                }
                offset += pc;
            }
            let needs = parts.iter().any(|&p| self.needs(p));
            Ok(self.push(
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                },
                Tensor::new(vec![r0, cols], vals)?,
                needs,
            ))
        }
    }

    /// Rows of `a` at the given indices, in order (duplicates allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let ta = self.t(a);
        if ta.rank() != 2 {
            return Err(Error::Dimension("gather_rows expects a matrix".into()));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let mut vals = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            vals.extend_from_slice(&ta.values()[i * c..(i + 1) * c]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            Tensor::new(vec![indices.len(), c], vals)?,
            needs,
        ))
    }

    /// Mean of the rows of `a` grouped by segment id. Rows are accumulated in
    /// input order, so the result does not depend on any adjacency-list
    /// ordering. Empty segments yield zero rows.
    pub fn segment_mean_rows(
        &mut self,
        a: NodeId,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<NodeId> {
        let ta = self.t(a);
        if ta.rank() != 2 || ta.shape()[0] != segments.len() {
            return Err(Error::Dimension(format!(
                "segment_mean_rows: {} segment ids for shape {:?}",
                segments.len(),
                ta.shape()
            )));
        }
        let c = ta.shape()[1];
        let mut counts = vec![0usize; n_segments];
        let mut sums = vec![0.0; n_segments * c];
        for (row, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::Dimension(format!(
                    "segment id {s} out of range ({n_segments} segments)"
                )));
            }
            counts[s] += 1;
            let src = &ta.values()[row * c..(row + 1) * c];
            let dst = &mut sums[s * c..(s + 1) * c];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += x;
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = 1.0 / cnt as f64;
                for v in &mut sums[s * c..(s + 1) * c] {
                    *v *= inv;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SegmentMeanRows {
                a,
                segments: segments.to_vec(),
                counts,
            },
            Tensor::new(vec![n_segments, c], sums)?,
            needs,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.t(a);
        if ta.rank() != 2 {
            return Err(Error::Dimension("slice_rows expects a matrix".into()));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        if start + len > r {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let vals = ta.values()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Op::SliceRows { a, start },
            Tensor::new(vec![len, c], vals)?,
            needs,
        ))
    }

    /// Symmetric n×n matrix (zero diagonal) from its strict upper triangle,
    /// stored row-major: `k(i,j) = i·n − i(i+1)/2 + (j − i − 1)` for `i < j`.
    pub fn sym_expand(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let ta = self.t(a);
        let expect = n * (n - 1) / 2;
        if ta.len() != expect {
            return Err(Error::Dimension(format!(
                "sym_expand: need {expect} entries for n={n}, got {}",
                ta.len()
            )));
        }
        let mut vals = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let v = ta.values()[k];
                vals[i * n + j] = v;
                vals[j * n + i] = v;
                k += 1;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SymExpand { a, n }, Tensor::new(vec![n, n], vals)?, needs))
    }

    /// Adds a bias row to every row of a matrix.
    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.t(a), self.t(bias));
        if ta.rank() != 2 || tb.len() != ta.shape()[1] {
            return Err(Error::Dimension(format!(
                "add_bias_row: bias of {} entries vs matrix {:?}",
                tb.len(),
                ta.shape()
            )));
        }
        let c = ta.shape()[1];
        let mut vals = ta.values().to_vec();
        for row in vals.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.values()) {
                *v += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), vals)?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBiasRow { a, bias }, t, needs))
    }

    // ── Softmax and losses ──────────────────────────────────────────

    /// Row-wise softmax with max subtraction; each row sums to 1.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        if ta.rank() != 2 {
            return Err(Error::Dimension("softmax_rows expects a matrix".into()));
        }
        if !ta.all_finite() {
            return Err(Error::Domain("softmax_rows requires finite entries".into()));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut vals = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.values()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut vals[i * c..(i + 1) * c];
            let mut s = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o /= s;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxRows { a }, Tensor::new(vec![r, c], vals)?, needs))
    }

    /// Scalar weighted binary cross-entropy between `logits` and a constant
    /// target, computed in logit space so saturated probabilities cannot
    /// overflow.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        target: &[f64],
        pos_weight: f64,
        mean: bool,
    ) -> Result<NodeId> {
        if pos_weight <= 0.0 {
            return Err(Error::Config(format!(
                "pos_weight must be positive, got {pos_weight}"
            )));
        }
        let tl = self.t(logits);
        if tl.len() != target.len() {
            return Err(Error::Dimension(format!(
                "bce_with_logits: {} logits vs {} targets",
                tl.len(),
                target.len()
            )));
        }
        if tl.is_empty() {
            return Err(Error::EmptyAggregation("bce over zero elements".into()));
        }
        let mut total = 0.0;
        for (&x, &t) in tl.values().iter().zip(target) {
            let coeff = 1.0 + (pos_weight - 1.0) * t;
            total += coeff * softplus(-x) + (1.0 - t) * x;
        }
        if mean {
            total /= tl.len() as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::BceLogits {
                logits,
                target: target.to_vec(),
                pos_weight,
                mean,
            },
            Tensor::scalar(total),
            needs,
        ))
    }

    /// Per-row cross-entropy `logsumexp(row) − row[class]` against constant
    /// class indices; returns a vector of length `rows`.
    pub fn ce_softmax_rows(&mut self, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
        let tl = self.t(logits);
        if tl.rank() != 2 || tl.shape()[0] != classes.len() {
            return Err(Error::Dimension(format!(
                "ce_softmax_rows: {} classes for shape {:?}",
                classes.len(),
                tl.shape()
            )));
        }
        let (r, c) = (tl.shape()[0], tl.shape()[1]);
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::Dimension(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let mut vals = vec![0.0; r];
        for i in 0..r {
            let row = &tl.values()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            vals[i] = lse - row[classes[i]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CeSoftmaxRows {
                logits,
                classes: classes.to_vec(),
            },
            Tensor::new(vec![r], vals)?,
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulates gradients of the scalar `root` into every tracked node.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.t(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.t(root).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.propagate(NodeId(id), &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, into: NodeId, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[into.0].needs_grad {
            return;
        }
        let len = self.nodes[into.0].tensor.len();
        let buf = self.grads[into.0].get_or_insert_with(|| vec![0.0; len]);
        contribution(buf);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, id: NodeId, g: &[f64]) {
        // Ops hold only node ids, so reading inputs while writing gradient
        // buffers never aliases.
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.t(a).shape()[0], self.t(a).shape()[1]);
                let n = self.t(b).shape()[1];
                if self.needs(a) {
                    let da = matmul_nt(g, self.t(b).values(), m, n, k);
                    self.acc(a, |buf| add_into(buf, &da));
                }
                if self.needs(b) {
                    let db = matmul_tn(self.t(a).values(), g, k, m, n);
                    self.acc(b, |buf| add_into(buf, &db));
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.t(a).shape()[0], self.t(a).shape()[1]);
                let n = self.t(b).shape()[0];
                if self.needs(a) {
                    // dA = G · B  (m×n · n×k)
                    let da = matmul_nn(g, self.t(b).values(), m, n, k);
                    self.acc(a, |buf| add_into(buf, &da));
                }
                if self.needs(b) {
                    // dB = Gᵀ · A  (n×m · m×k)
                    let db = matmul_tn(g, self.t(a).values(), n, m, k);
                    self.acc(b, |buf| add_into(buf, &db));
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.binary_backward(a, b, g, |_, _| 1.0, |_, _| 1.0);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.binary_backward(a, b, g, |_, _| 1.0, |_, _| -1.0);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                self.binary_backward(a, b, g, |_, y| y, |x, _| x);
            }
            Op::Scale { a, factor } => {
                let (a, f) = (*a, *factor);
                self.acc(a, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(g) {
                        *bi += f * gi;
                    }
                });
            }
            Op::AddScalar { a, .. } => {
                let a = *a;
                self.acc(a, |buf| add_into(buf, g));
            }
            Op::Relu { a } => {
                let a = *a;
                let mask: Vec<f64> = self
                    .t(a)
                    .values()
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                self.acc(a, |buf| {
                    for ((bi, gi), mi) in buf.iter_mut().zip(g).zip(&mask) {
                        *bi += gi * mi;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let y = self.nodes[id.0].tensor.values().to_vec();
                self.acc(a, |buf| {
                    for ((bi, gi), yi) in buf.iter_mut().zip(g).zip(&y) {
                        *bi += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Exp { a } => {
                let a = *a;
                let y = self.nodes[id.0].tensor.values().to_vec();
                self.acc(a, |buf| {
                    for ((bi, gi), yi) in buf.iter_mut().zip(g).zip(&y) {
                        *bi += gi * yi;
                    }
                });
            }
            Op::Log { a } => {
                let a = *a;
                let x = self.t(a).values().to_vec();
                self.acc(a, |buf| {
                    for ((bi, gi), xi) in buf.iter_mut().zip(g).zip(&x) {
                        *bi += gi / xi;
                    }
                });
            }
            Op::Clamp { a, lo, hi } => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let pass: Vec<f64> = self
                    .t(a)
                    .values()
                    .iter()
                    .map(|&x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
                    .collect();
                self.acc(a, |buf| {
                    for ((bi, gi), pi) in buf.iter_mut().zip(g).zip(&pass) {
                        *bi += gi * pi;
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                let y = self.nodes[id.0].tensor.values().to_vec();
                let c = self.nodes[id.0].tensor.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (row, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..c {
                        dx[row * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(a, |buf| add_into(buf, &dx));
            }
            Op::SumAll { a } => {
                let a = *a;
                let g0 = g[0];
                self.acc(a, |buf| {
                    for bi in buf.iter_mut() {
                        *bi += g0;
                    }
                });
            }
            Op::MeanAll { a } => {
                let a = *a;
                let n = self.t(a).len() as f64;
                let g0 = g[0] / n;
                self.acc(a, |buf| {
                    for bi in buf.iter_mut() {
                        *bi += g0;
                    }
                });
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let a = *a;
                let axis = *axis;
                let (r, c) = (self.t(a).shape()[0], self.t(a).shape()[1]);
                let scale = match &self.nodes[id.0].op {
                    Op::MeanAxis { .. } => {
                        if axis == 0 {
                            1.0 / r as f64
                        } else {
                            1.0 / c as f64
                        }
                    }
                    _ => 1.0,
                };
                self.acc(a, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            let gi = if axis == 0 { g[j] } else { g[i] };
                            buf[i * c + j] += gi * scale;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                if axis == 0 || self.t(parts[0]).rank() == 1 {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.t(p).len();
                        let slice = g[offset..offset + len].to_vec();
                        self.acc(p, |buf| add_into(buf, &slice));
                        offset += len;
                    }
                } else {
                    let rows = self.t(parts[0]).shape()[0];
                    let total_cols: usize = parts.iter().map(|&p| self.t(p).shape()[1]).sum();
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.t(p).shape()[1];
                        let mut dp = vec![0.0; rows * pc];
                        for i in 0..rows {
                            dp[i * pc..(i + 1) * pc].copy_from_slice(
                                &g[i * total_cols + offset..i * total_cols + offset + pc],
                            );
                        }
                        self.acc(p, |buf| add_into(buf, &dp));
                        offset += pc;
                    }
                }
            }
            Op::GatherRows { a, indices } => {
                let a = *a;
                let indices = indices.clone();
                let c = self.t(a).shape()[1];
                self.acc(a, |buf| {
                    for (row, &i) in indices.iter().enumerate() {
                        let src = &g[row * c..(row + 1) * c];
                        let dst = &mut buf[i * c..(i + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SegmentMeanRows {
                a,
                segments,
                counts,
            } => {
                let a = *a;
                let segments = segments.clone();
                let counts = counts.clone();
                let c = self.t(a).shape()[1];
                self.acc(a, |buf| {
                    for (row, &s) in segments.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        let src = &g[s * c..(s + 1) * c];
                        let dst = &mut buf[row * c..(row + 1) * c];
                        for (d, x) in dst.iter_mut().zip(src) {
                            *d += x * inv;
                        }
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let a = *a;
                let start = *start;
                let c = self.t(a).shape()[1];
                self.acc(a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[start * c + i] += gi;
                    }
                });
            }
            Op::Reshape { a } => {
                let a = *a;
                self.acc(a, |buf| add_into(buf, g));
            }
            Op::Transpose { a } => {
                let a = *a;
                let (r, c) = (self.t(a).shape()[0], self.t(a).shape()[1]);
                self.acc(a, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SymExpand { a, n } => {
                let (a, n) = (*a, *n);
                self.acc(a, |buf| {
                    let mut k = 0;
                    for i in 0..n {
                        for j in i + 1..n {
                            buf[k] += g[i * n + j] + g[j * n + i];
                            k += 1;
                        }
                    }
                });
            }
            Op::AddBiasRow { a, bias } => {
                let (a, bias) = (*a, *bias);
                let c = self.t(a).shape()[1];
                self.acc(a, |buf| add_into(buf, g));
                self.acc(bias, |buf| {
                    for row in g.chunks(c) {
                        for (b, x) in buf.iter_mut().zip(row) {
                            *b += x;
                        }
                    }
                });
            }
            Op::BceLogits {
                logits,
                target,
                pos_weight,
                mean,
            } => {
                let logits = *logits;
                let (pw, mean) = (*pos_weight, *mean);
                let target = target.clone();
                let x = self.t(logits).values().to_vec();
                let scale = if mean { g[0] / x.len() as f64 } else { g[0] };
                self.acc(logits, |buf| {
                    for ((bi, &xi), &ti) in buf.iter_mut().zip(&x).zip(&target) {
                        let coeff = 1.0 + (pw - 1.0) * ti;
                        let s = sigmoid_stable(xi);
                        *bi += scale * (coeff * s - pw * ti);
                    }
                });
            }
            Op::CeSoftmaxRows { logits, classes } => {
                let logits = *logits;
                let classes = classes.clone();
                let (r, c) = (self.t(logits).shape()[0], self.t(logits).shape()[1]);
                let x = self.t(logits).values().to_vec();
                self.acc(logits, |buf| {
                    for i in 0..r {
                        let row = &x[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - m).exp() / denom;
                            let ind = if j == classes[i] { 1.0 } else { 0.0 };
                            buf[i * c + j] += g[i] * (p - ind);
                        }
                    }
                });
            }
        }
    }

    fn binary_backward(
        &mut self,
        a: NodeId,
        b: NodeId,
        g: &[f64],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) {
        let xa = self.t(a).values().to_vec();
        let xb = self.t(b).values().to_vec();
        let a_scalar = xa.len() == 1 && g.len() > 1;
        let b_scalar = xb.len() == 1 && g.len() > 1;
        if self.needs(a) {
            if a_scalar {
                let mut s = 0.0;
                for (i, gi) in g.iter().enumerate() {
                    s += gi * da(xa[0], xb[i]);
                }
                self.acc(a, |buf| buf[0] += s);
            } else {
                let contrib: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * da(xa[i], if b_scalar { xb[0] } else { xb[i] }))
                    .collect();
                self.acc(a, |buf| add_into(buf, &contrib));
            }
        }
        if self.needs(b) {
            if b_scalar {
                let mut s = 0.0;
                for (i, gi) in g.iter().enumerate() {
                    s += gi * db(xa[i], xb[0]);
                }
                self.acc(b, |buf| buf[0] += s);
            } else {
                let contrib: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * db(if a_scalar { xa[0] } else { xa[i] }, xb[i]))
                    .collect();
                self.acc(b, |buf| add_into(buf, &contrib));
            }
        }
    }

    /// Text listing of the tape: node id, op kind, shape.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let kind = match &node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        "leaf(param)"
                    } else {
                        "leaf(const)"
                    }
                }
                Op::Matmul { .. } => "matmul",
                Op::MatmulNT { .. } => "matmul_nt",
                Op::Add { .. } => "add",
                Op::Sub { .. } => "sub",
                Op::Mul { .. } => "mul",
                Op::Scale { .. } => "scale",
                Op::AddScalar { .. } => "add_scalar",
                Op::Relu { .. } => "relu",
                Op::Sigmoid { .. } => "sigmoid",
                Op::Exp { .. } => "exp",
                Op::Log { .. } => "log",
                Op::Clamp { .. } => "clamp",
                Op::SoftmaxRows { .. } => "softmax_rows",
                Op::SumAll { .. } => "sum",
                Op::MeanAll { .. } => "mean",
                Op::SumAxis { .. } => "sum_axis",
                Op::MeanAxis { .. } => "mean_axis",
                Op::Concat { .. } => "concat",
                Op::GatherRows { .. } => "gather_rows",
                Op::SegmentMeanRows { .. } => "segment_mean_rows",
                Op::SliceRows { .. } => "slice_rows",
                Op::Reshape { .. } => "reshape",
                Op::Transpose { .. } => "transpose",
                Op::SymExpand { .. } => "sym_expand",
                Op::AddBiasRow { .. } => "add_bias_row",
                Op::BceLogits { .. } => "bce_with_logits",
                Op::CeSoftmaxRows { .. } => "ce_softmax_rows",
            };
            let _ = writeln!(out, "{i:6}  {kind:18} {:?}", node.tensor.shape());
        }
        out
    }
}

fn add_into(buf: &mut [f64], src: &[f64]) {
    debug_assert_eq!(buf.len(), src.len());
    for (b, s) in buf.iter_mut().zip(src) {
        *b += s;
    }
}
