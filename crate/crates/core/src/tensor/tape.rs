//! Wengert-list tape: primitive op recording and reverse-mode backprop.
//!
//! Every primitive validates operand shapes, computes its forward value,
//! checks the result for NaN/Inf (surfaced as [`TensorError::NonFinite`]),
//! and appends one node to the tape. [`Tape::backprop`] seeds the scalar
//! loss with 1 and replays the nodes in reverse, accumulating vector-Jacobian
//! products into per-node gradient slots.
//!
//! Tensors that are not attached to the tape participate as constants: they
//! are lifted to non-differentiable leaf nodes on first use. Parameters must
//! be attached explicitly with [`Tape::param`] so their gradients are kept.

use std::sync::Arc;

use super::{NodeRef, Tensor, TensorError};

// ── Op records ──────────────────────────────────────────────────────────────

/// One recorded primitive. Operand fields are node indices on the same tape.
#[derive(Debug, Clone)]
enum Op {
    /// Leaf value (parameter or lifted constant); nothing to backprop.
    Leaf,
    /// `out[m,n] = a[m,k] · b[k,n]`, or `aᵀ·b` with `a[k,m]` when `transpose_a`.
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize, transpose_a: bool },
    /// Elementwise sum; with `broadcast_b`, `b` is `[C]` added to every column of `a[C,T]`.
    Add { a: usize, b: usize, broadcast_b: bool },
    /// Elementwise product; with `broadcast_b`, `b` is `[C]` scaling every column of `a[C,T]`.
    Hadamard { a: usize, b: usize, broadcast_b: bool },
    Sigmoid { x: usize },
    Tanh { x: usize },
    /// Row-wise (channel) concatenation of rank-2 tensors with equal column counts.
    ConcatChannels { parts: Vec<usize>, rows: Vec<usize>, cols: usize },
    /// Rows `start..start+len` of a rank-2 tensor.
    SliceChannels { x: usize, start: usize, len: usize, cols: usize },
    /// Mean cross-entropy of column-wise softmax over active target positions.
    SoftmaxCrossEntropy { logits: usize, targets: Vec<Option<usize>>, classes: usize, positions: usize, active: usize },
    Scale { x: usize, c: f64 },
    /// Sum of all elements, producing a `[1]` scalar.
    Sum { x: usize },
    /// Causal dilated 1-D convolution over time. `pad` supplies the
    /// `(taps-1)*dilation` history columns immediately before t=0 (zeros when absent).
    CausalConv { x: usize, kernel: usize, pad: Option<usize>, dilation: usize, taps: usize, in_ch: usize, out_ch: usize, t_len: usize },
    /// `out[:,t] = x[:,t-shift]`; the first `shift` columns come from `pad` (zeros when absent).
    ShiftTime { x: usize, pad: Option<usize>, shift: usize, ch: usize, t_len: usize },
    /// Per-row weight normalization: `out[i,:] = g[i] * v[i,:] / ||v[i,:]||₂`.
    WeightNorm { v: usize, g: usize, rows: usize, cols: usize },
}

struct Node {
    op: Op,
    value: Arc<Vec<f64>>,
    /// True for parameters and anything downstream of one; gradients are
    /// only propagated where this is set.
    requires_grad: bool,
}

// ── Tape ────────────────────────────────────────────────────────────────────

fn next_tape_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// Records primitive ops for one forward pass. Confined to a single thread of
/// use; independent tapes are fully independent.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: next_tape_id(), nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, name: &'static str) -> Result<Tensor, TensorError> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let value = Arc::new(value);
        let index = self.nodes.len();
        self.nodes.push(Node { op, value: Arc::clone(&value), requires_grad });
        Ok(Tensor::from_arc(shape, value, Some(NodeRef { tape_id: self.id, index })))
    }

    /// Attaches a tensor as a differentiable leaf (a parameter). Gradients
    /// from a later [`Tape::backprop`] are looked up through the returned
    /// attached copy.
    pub fn param(&mut self, t: &Tensor) -> Tensor {
        self.leaf(t, true)
    }

    /// Attaches a tensor as a non-differentiable constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        let value = t.data_arc();
        let index = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, value: Arc::clone(&value), requires_grad });
        Tensor::from_arc(t.shape().to_vec(), value, Some(NodeRef { tape_id: self.id, index }))
    }

    /// Resolves a tensor to a node index, lifting detached tensors to
    /// constant leaves. Errors if the tensor belongs to another tape.
    fn lift(&mut self, t: &Tensor, op: &'static str) -> Result<usize, TensorError> {
        match t.node {
            Some(NodeRef { tape_id, index }) if tape_id == self.id => Ok(index),
            Some(_) => Err(TensorError::ForeignTape { op }),
            None => Ok(self.leaf(t, false).node.unwrap().index),
        }
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn value(&self, idx: usize) -> &[f64] {
        &self.nodes[idx].value
    }

    // ── Primitive ops: forward ──────────────────────────────────────────────

    /// Matrix product `a[m,k] · b[k,n] → [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// Transposed-left matrix product `aᵀ · b` with `a[k,m]`, `b[k,n] → [m,n]`.
    /// Lets a kernel be shared between an embedding and a tied decoder
    /// without materializing the transpose.
    pub fn matmul_tn(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: &Tensor, b: &Tensor, transpose_a: bool) -> Result<Tensor, TensorError> {
        let name: &'static str = if transpose_a { "matmul_tn" } else { "matmul" };
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(shape_err(name, format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape())));
        }
        let (m, k) = if transpose_a { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
        let n = b.shape()[1];
        if b.shape()[0] != k {
            return Err(shape_err(name, format!("inner dims disagree: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let ai = self.lift(a, name)?;
        let bi = self.lift(b, name)?;
        let av = a.data();
        let bv = b.data();
        let mut out = vec![0.0; m * n];
        if transpose_a {
            // a is [k,m]: a[l,i] at l*m + i.
            for l in 0..k {
                let brow = &bv[l * n..(l + 1) * n];
                for i in 0..m {
                    let ali = av[l * m + i];
                    if ali == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bb) in orow.iter_mut().zip(brow.iter()) {
                        *o += ali * bb;
                    }
                }
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for l in 0..k {
                    let ail = av[i * k + l];
                    if ail == 0.0 {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    for (o, bb) in orow.iter_mut().zip(brow.iter()) {
                        *o += ail * bb;
                    }
                }
            }
        }
        let req = self.requires(ai) || self.requires(bi);
        self.push(Op::Matmul { a: ai, b: bi, m, k, n, transpose_a }, vec![m, n], out, req, name)
    }

    /// Elementwise sum. Shapes must match exactly, except that a rank-1 `[C]`
    /// right operand broadcasts across the columns of a rank-2 `[C,T]` left
    /// operand (the channel-bias case).
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, false)
    }

    /// Elementwise (Hadamard) product, with the same `[C,T] ∘ [C]` column
    /// broadcast rule as [`Tape::add`].
    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(a, b, "hadamard", |x, y| x * y, true)
    }

    fn binary_elementwise(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        is_mul: bool,
    ) -> Result<Tensor, TensorError> {
        let broadcast_b = a.shape().len() == 2 && b.shape().len() == 1 && b.shape()[0] == a.shape()[0];
        if !broadcast_b && a.shape() != b.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let ai = self.lift(a, name)?;
        let bi = self.lift(b, name)?;
        let av = a.data();
        let bv = b.data();
        let out: Vec<f64> = if broadcast_b {
            let (c, t) = (a.shape()[0], a.shape()[1]);
            let mut o = Vec::with_capacity(c * t);
            for ch in 0..c {
                let bvc = bv[ch];
                o.extend(av[ch * t..(ch + 1) * t].iter().map(|&x| f(x, bvc)));
            }
            o
        } else {
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let req = self.requires(ai) || self.requires(bi);
        let op = if is_mul {
            Op::Hadamard { a: ai, b: bi, broadcast_b }
        } else {
            Op::Add { a: ai, b: bi, broadcast_b }
        };
        self.push(op, a.shape().to_vec(), out, req, name)
    }

    /// Elementwise logistic sigmoid `1 / (1 + e^{-x})`.
    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let xi = self.lift(x, "sigmoid")?;
        let out = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let req = self.requires(xi);
        self.push(Op::Sigmoid { x: xi }, x.shape().to_vec(), out, req, "sigmoid")
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let xi = self.lift(x, "tanh")?;
        let out = x.data().iter().map(|&v| v.tanh()).collect();
        let req = self.requires(xi);
        self.push(Op::Tanh { x: xi }, x.shape().to_vec(), out, req, "tanh")
    }

    /// Stacks rank-2 tensors along the channel axis; all parts must share a
    /// column count.
    pub fn concat_channels(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        const NAME: &str = "concat_channels";
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { op: NAME, detail: "no parts".into() });
        }
        for p in parts {
            if p.shape().len() != 2 {
                return Err(shape_err(NAME, format!("expected rank-2 parts, got {:?}", p.shape())));
            }
        }
        let cols = parts[0].shape()[1];
        if parts.iter().any(|p| p.shape()[1] != cols) {
            return Err(shape_err(NAME, "parts disagree on column count".into()));
        }
        let mut idxs = Vec::with_capacity(parts.len());
        for p in parts {
            idxs.push(self.lift(p, NAME)?);
        }
        let rows: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        let total: usize = rows.iter().sum();
        let mut out = Vec::with_capacity(total * cols);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let req = idxs.iter().any(|&i| self.requires(i));
        self.push(Op::ConcatChannels { parts: idxs, rows, cols }, vec![total, cols], out, req, NAME)
    }

    /// Rows `start..start+len` of a rank-2 tensor, all columns.
    pub fn slice_channels(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
        const NAME: &str = "slice_channels";
        if x.shape().len() != 2 {
            return Err(shape_err(NAME, format!("expected rank-2 input, got {:?}", x.shape())));
        }
        let (in_rows, cols) = (x.shape()[0], x.shape()[1]);
        if start + len > in_rows || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: NAME,
                detail: format!("rows {}..{} out of range for {} rows", start, start + len, in_rows),
            });
        }
        let xi = self.lift(x, NAME)?;
        let out = x.data()[start * cols..(start + len) * cols].to_vec();
        let req = self.requires(xi);
        self.push(Op::SliceChannels { x: xi, start, len, cols }, vec![len, cols], out, req, NAME)
    }

    /// Column-wise softmax cross-entropy, averaged over positions with a
    /// target. `targets[t] = None` excludes position `t` from the mean
    /// (used for loss chopping and single-position classification).
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, targets: &[Option<usize>]) -> Result<Tensor, TensorError> {
        const NAME: &str = "softmax_cross_entropy";
        if logits.shape().len() != 2 {
            return Err(shape_err(NAME, format!("expected rank-2 logits, got {:?}", logits.shape())));
        }
        let (classes, positions) = (logits.shape()[0], logits.shape()[1]);
        if targets.len() != positions {
            return Err(shape_err(NAME, format!("{} targets for {} positions", targets.len(), positions)));
        }
        for (t, tgt) in targets.iter().enumerate() {
            if let Some(y) = tgt {
                if *y >= classes {
                    return Err(TensorError::InvalidArgument {
                        op: NAME,
                        detail: format!("target {} at position {} out of range for {} classes", y, t, classes),
                    });
                }
            }
        }
        let active = targets.iter().filter(|t| t.is_some()).count();
        if active == 0 {
            return Err(TensorError::NoActiveTargets);
        }
        let li = self.lift(logits, NAME)?;
        let lv = logits.data();
        let mut total = 0.0;
        for (t, tgt) in targets.iter().enumerate() {
            if let Some(y) = tgt {
                total += col_logsumexp(lv, classes, positions, t) - lv[y * positions + t];
            }
        }
        let req = self.requires(li);
        self.push(
            Op::SoftmaxCrossEntropy { logits: li, targets: targets.to_vec(), classes, positions, active },
            vec![1],
            vec![total / active as f64],
            req,
            NAME,
        )
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let xi = self.lift(x, "scale")?;
        let out = x.data().iter().map(|&v| c * v).collect();
        let req = self.requires(xi);
        self.push(Op::Scale { x: xi, c }, x.shape().to_vec(), out, req, "scale")
    }

    /// Sums all elements into a `[1]` scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let xi = self.lift(x, "sum")?;
        let total: f64 = x.data().iter().sum();
        let req = self.requires(xi);
        self.push(Op::Sum { x: xi }, vec![1], vec![total], req, "sum")
    }

    /// Causal dilated 1-D convolution over the time axis.
    ///
    /// `x` is `[in_ch, T]`, `kernel` is `[out_ch, in_ch, taps]` with tap
    /// index increasing toward the present:
    ///
    /// `out[:,t] = Σ_j kernel[:,:,j] · x̂[:, t - (taps-1-j)·dilation]`
    ///
    /// where `x̂` extends `x` to the left by the `(taps-1)·dilation` columns
    /// of `left_pad` (zeros when `None`). The pad supplies sequence history
    /// at t<0, ordered oldest first.
    pub fn causal_conv1d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        dilation: usize,
        left_pad: Option<&Tensor>,
    ) -> Result<Tensor, TensorError> {
        const NAME: &str = "causal_conv1d";
        if x.shape().len() != 2 || kernel.shape().len() != 3 {
            return Err(shape_err(NAME, format!("expected x rank-2 and kernel rank-3, got {:?} and {:?}", x.shape(), kernel.shape())));
        }
        if dilation == 0 {
            return Err(TensorError::InvalidArgument { op: NAME, detail: "dilation must be >= 1".into() });
        }
        let (in_ch, t_len) = (x.shape()[0], x.shape()[1]);
        let (out_ch, k_in, taps) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        if k_in != in_ch {
            return Err(shape_err(NAME, format!("kernel expects {} input channels, x has {}", k_in, in_ch)));
        }
        if taps == 0 {
            return Err(TensorError::InvalidArgument { op: NAME, detail: "kernel needs at least one tap".into() });
        }
        let pad_cols = (taps - 1) * dilation;
        if let Some(p) = left_pad {
            if p.shape() != [in_ch, pad_cols] {
                return Err(shape_err(NAME, format!("left_pad must be [{}, {}], got {:?}", in_ch, pad_cols, p.shape())));
            }
        }
        let xi = self.lift(x, NAME)?;
        let ki = self.lift(kernel, NAME)?;
        let pi = match left_pad {
            Some(p) => Some(self.lift(p, NAME)?),
            None => None,
        };
        let xv = x.data();
        let kv = kernel.data();
        let pv = left_pad.map(|p| p.data());
        let mut out = vec![0.0; out_ch * t_len];
        for o in 0..out_ch {
            let orow = &mut out[o * t_len..(o + 1) * t_len];
            for c in 0..in_ch {
                let xrow = &xv[c * t_len..(c + 1) * t_len];
                for j in 0..taps {
                    let w = kv[(o * in_ch + c) * taps + j];
                    if w == 0.0 {
                        continue;
                    }
                    let back = (taps - 1 - j) * dilation;
                    // In-range part: t >= back reads x[c, t-back].
                    for t in back..t_len {
                        orow[t] += w * xrow[t - back];
                    }
                    // Left-padded part: t < back reads pad[c, t-back+pad_cols].
                    if let Some(pv) = pv {
                        for (t, ot) in orow.iter_mut().enumerate().take(back.min(t_len)) {
                            *ot += w * pv[c * pad_cols + (t + pad_cols - back)];
                        }
                    }
                }
            }
        }
        let req = self.requires(xi) || self.requires(ki) || pi.map(|i| self.requires(i)).unwrap_or(false);
        self.push(
            Op::CausalConv { x: xi, kernel: ki, pad: pi, dilation, taps, in_ch, out_ch, t_len },
            vec![out_ch, t_len],
            out,
            req,
            NAME,
        )
    }

    /// Delays a `[C,T]` tensor by `shift` steps: `out[:,t] = x[:,t-shift]`.
    /// The vacated first `shift` columns come from `pad` (`[C, shift]`,
    /// oldest first) or are zero.
    pub fn shift_time(&mut self, x: &Tensor, shift: usize, pad: Option<&Tensor>) -> Result<Tensor, TensorError> {
        const NAME: &str = "shift_time";
        if x.shape().len() != 2 {
            return Err(shape_err(NAME, format!("expected rank-2 input, got {:?}", x.shape())));
        }
        let (ch, t_len) = (x.shape()[0], x.shape()[1]);
        if let Some(p) = pad {
            if p.shape() != [ch, shift] {
                return Err(shape_err(NAME, format!("pad must be [{}, {}], got {:?}", ch, shift, p.shape())));
            }
        }
        let xi = self.lift(x, NAME)?;
        let pi = match pad {
            Some(p) => Some(self.lift(p, NAME)?),
            None => None,
        };
        let xv = x.data();
        let pv = pad.map(|p| p.data());
        let mut out = vec![0.0; ch * t_len];
        let lead = shift.min(t_len);
        for c in 0..ch {
            let orow = &mut out[c * t_len..(c + 1) * t_len];
            if let Some(pv) = pv {
                orow[..lead].copy_from_slice(&pv[c * shift..c * shift + lead]);
            }
            orow[lead..].copy_from_slice(&xv[c * t_len..c * t_len + t_len - lead]);
        }
        let req = self.requires(xi) || pi.map(|i| self.requires(i)).unwrap_or(false);
        self.push(Op::ShiftTime { x: xi, pad: pi, shift, ch, t_len }, vec![ch, t_len], out, req, NAME)
    }

    /// Per-row weight normalization: `out[i,:] = g[i] · v[i,:] / ‖v[i,:]‖₂`.
    /// `v` may be any rank ≥ 2; rows are the leading axis, and the norm runs
    /// over everything else. Errors on a zero-norm row.
    pub fn weight_norm(&mut self, v: &Tensor, g: &Tensor) -> Result<Tensor, TensorError> {
        const NAME: &str = "weight_norm";
        if v.shape().is_empty() || g.shape().len() != 1 {
            return Err(shape_err(NAME, format!("expected v rank>=2 and g rank-1, got {:?} and {:?}", v.shape(), g.shape())));
        }
        let rows = v.shape()[0];
        let cols: usize = v.shape()[1..].iter().product();
        if g.shape()[0] != rows {
            return Err(shape_err(NAME, format!("{} gains for {} rows", g.shape()[0], rows)));
        }
        let vi = self.lift(v, NAME)?;
        let gi = self.lift(g, NAME)?;
        let vv = v.data();
        let gv = g.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &vv[i * cols..(i + 1) * cols];
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(TensorError::InvalidArgument { op: NAME, detail: format!("row {} of v has zero norm", i) });
            }
            let s = gv[i] / norm;
            for (o, &x) in out[i * cols..(i + 1) * cols].iter_mut().zip(row.iter()) {
                *o = s * x;
            }
        }
        let req = self.requires(vi) || self.requires(gi);
        self.push(Op::WeightNorm { v: vi, g: gi, rows, cols }, v.shape().to_vec(), out, req, NAME)
    }

    // ── Backprop ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss recorded on this tape. Returns one
    /// gradient slot per node; parameters that never reached the loss get
    /// explicit zeros rather than an error.
    pub fn backprop(&self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let loss_idx = match loss.node {
            Some(NodeRef { tape_id, index }) if tape_id == self.id => index,
            _ => return Err(TensorError::BadLoss),
        };
        if self.nodes[loss_idx].value.len() != 1 {
            return Err(TensorError::BadLoss);
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        slots[loss_idx] = Some(vec![1.0]);

        for idx in (0..=loss_idx).rev() {
            if slots[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = slots[idx].take().unwrap();
            self.backward_op(idx, &grad, &mut slots);
            slots[idx] = Some(grad);
        }

        // Parameters off the loss path get zeros; check everything we hand
        // back for non-finite values (a diverged loss shows up here first).
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match &slots[idx] {
                    Some(g) => {
                        if !g.iter().all(|v| v.is_finite()) {
                            return Err(TensorError::NonFinite { op: "backprop" });
                        }
                    }
                    None => slots[idx] = Some(vec![0.0; node.value.len()]),
                }
            }
        }
        Ok(Gradients { tape_id: self.id, slots })
    }

    fn backward_op(&self, idx: usize, grad: &[f64], slots: &mut [Option<Vec<f64>>]) {
        // Accumulates `add` into the slot of `parent` if that parent wants a
        // gradient; allocates the slot on first touch.
        macro_rules! accum {
            ($parent:expr, $f:expr) => {{
                let p: usize = $parent;
                if self.nodes[p].requires_grad {
                    let slot = slots[p].get_or_insert_with(|| vec![0.0; self.nodes[p].value.len()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(slot.as_mut_slice());
                }
            }};
        }

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n, transpose_a } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                if *transpose_a {
                    // out = aᵀ·b with a[k,m]: da[l,i] += Σ_j b[l,j]·g[i,j]; db[l,j] += Σ_i a[l,i]·g[i,j].
                    accum!(*a, |da: &mut [f64]| {
                        for l in 0..k {
                            for i in 0..m {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += bv[l * n + j] * grad[i * n + j];
                                }
                                da[l * m + i] += s;
                            }
                        }
                    });
                    accum!(*b, |db: &mut [f64]| {
                        for l in 0..k {
                            for i in 0..m {
                                let ali = av[l * m + i];
                                if ali == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[l * n + j] += ali * grad[i * n + j];
                                }
                            }
                        }
                    });
                } else {
                    // da = g·bᵀ; db = aᵀ·g.
                    accum!(*a, |da: &mut [f64]| {
                        for i in 0..m {
                            for l in 0..k {
                                let mut s = 0.0;
                                let brow = &bv[l * n..(l + 1) * n];
                                let grow = &grad[i * n..(i + 1) * n];
                                for (bb, gg) in brow.iter().zip(grow.iter()) {
                                    s += bb * gg;
                                }
                                da[i * k + l] += s;
                            }
                        }
                    });
                    accum!(*b, |db: &mut [f64]| {
                        for i in 0..m {
                            let grow = &grad[i * n..(i + 1) * n];
                            for l in 0..k {
                                let ail = av[i * k + l];
                                if ail == 0.0 {
                                    continue;
                                }
                                let brow = &mut db[l * n..(l + 1) * n];
                                for (bb, gg) in brow.iter_mut().zip(grow.iter()) {
                                    *bb += ail * gg;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add { a, b, broadcast_b } => {
                accum!(*a, |da: &mut [f64]| {
                    for (d, g) in da.iter_mut().zip(grad.iter()) {
                        *d += g;
                    }
                });
                if *broadcast_b {
                    let c = self.nodes[*b].value.len();
                    let t = grad.len() / c;
                    accum!(*b, |db: &mut [f64]| {
                        for (ch, d) in db.iter_mut().enumerate() {
                            *d += grad[ch * t..(ch + 1) * t].iter().sum::<f64>();
                        }
                    });
                } else {
                    accum!(*b, |db: &mut [f64]| {
                        for (d, g) in db.iter_mut().zip(grad.iter()) {
                            *d += g;
                        }
                    });
                }
            }
            Op::Hadamard { a, b, broadcast_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if *broadcast_b {
                    let c = bv.len();
                    let t = grad.len() / c;
                    accum!(*a, |da: &mut [f64]| {
                        for ch in 0..c {
                            let bvc = bv[ch];
                            for tt in 0..t {
                                da[ch * t + tt] += grad[ch * t + tt] * bvc;
                            }
                        }
                    });
                    accum!(*b, |db: &mut [f64]| {
                        for (ch, d) in db.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for tt in 0..t {
                                s += grad[ch * t + tt] * av[ch * t + tt];
                            }
                            *d += s;
                        }
                    });
                } else {
                    accum!(*a, |da: &mut [f64]| {
                        for ((d, g), y) in da.iter_mut().zip(grad.iter()).zip(bv.iter()) {
                            *d += g * y;
                        }
                    });
                    accum!(*b, |db: &mut [f64]| {
                        for ((d, g), x) in db.iter_mut().zip(grad.iter()).zip(av.iter()) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Sigmoid { x } => {
                let yv = self.value(idx);
                accum!(*x, |dx: &mut [f64]| {
                    for ((d, g), y) in dx.iter_mut().zip(grad.iter()).zip(yv.iter()) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh { x } => {
                let yv = self.value(idx);
                accum!(*x, |dx: &mut [f64]| {
                    for ((d, g), y) in dx.iter_mut().zip(grad.iter()).zip(yv.iter()) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::ConcatChannels { parts, rows, cols } => {
                let mut offset = 0;
                for (p, r) in parts.iter().zip(rows.iter()) {
                    let r = *r;
                    let lo = offset * cols;
                    accum!(*p, |dp: &mut [f64]| {
                        for (d, g) in dp.iter_mut().zip(grad[lo..lo + r * cols].iter()) {
                            *d += g;
                        }
                    });
                    offset += r;
                }
            }
            Op::SliceChannels { x, start, len, cols, .. } => {
                let lo = start * cols;
                accum!(*x, |dx: &mut [f64]| {
                    for (d, g) in dx[lo..lo + len * cols].iter_mut().zip(grad.iter()) {
                        *d += g;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets, classes, positions, active } => {
                let lv = self.value(*logits);
                let g = grad[0] / *active as f64;
                let (classes, positions) = (*classes, *positions);
                accum!(*logits, |dl: &mut [f64]| {
                    for (t, tgt) in targets.iter().enumerate() {
                        if let Some(y) = tgt {
                            let lse = col_logsumexp(lv, classes, positions, t);
                            for v in 0..classes {
                                let p = (lv[v * positions + t] - lse).exp();
                                let ind = if v == *y { 1.0 } else { 0.0 };
                                dl[v * positions + t] += g * (p - ind);
                            }
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                accum!(*x, |dx: &mut [f64]| {
                    for (d, g) in dx.iter_mut().zip(grad.iter()) {
                        *d += c * g;
                    }
                });
            }
            Op::Sum { x } => {
                let g = grad[0];
                accum!(*x, |dx: &mut [f64]| {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::CausalConv { x, kernel, pad, dilation, taps, in_ch, out_ch, t_len } => {
                let (dilation, taps, in_ch, out_ch, t_len) = (*dilation, *taps, *in_ch, *out_ch, *t_len);
                let pad_cols = (taps - 1) * dilation;
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let pv = pad.map(|p| self.value(p));
                accum!(*x, |dx: &mut [f64]| {
                    for o in 0..out_ch {
                        let grow = &grad[o * t_len..(o + 1) * t_len];
                        for c in 0..in_ch {
                            let dxrow = &mut dx[c * t_len..(c + 1) * t_len];
                            for j in 0..taps {
                                let w = kv[(o * in_ch + c) * taps + j];
                                if w == 0.0 {
                                    continue;
                                }
                                let back = (taps - 1 - j) * dilation;
                                for t in back..t_len {
                                    dxrow[t - back] += w * grow[t];
                                }
                            }
                        }
                    }
                });
                accum!(*kernel, |dk: &mut [f64]| {
                    for o in 0..out_ch {
                        let grow = &grad[o * t_len..(o + 1) * t_len];
                        for c in 0..in_ch {
                            let xrow = &xv[c * t_len..(c + 1) * t_len];
                            for j in 0..taps {
                                let back = (taps - 1 - j) * dilation;
                                let mut s = 0.0;
                                for t in back..t_len {
                                    s += grow[t] * xrow[t - back];
                                }
                                if let Some(pv) = pv {
                                    for (t, &g) in grow.iter().enumerate().take(back.min(t_len)) {
                                        s += g * pv[c * pad_cols + (t + pad_cols - back)];
                                    }
                                }
                                dk[(o * in_ch + c) * taps + j] += s;
                            }
                        }
                    }
                });
                if let Some(p) = pad {
                    accum!(*p, |dp: &mut [f64]| {
                        for o in 0..out_ch {
                            let grow = &grad[o * t_len..(o + 1) * t_len];
                            for c in 0..in_ch {
                                for j in 0..taps {
                                    let w = kv[(o * in_ch + c) * taps + j];
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let back = (taps - 1 - j) * dilation;
                                    for (t, &g) in grow.iter().enumerate().take(back.min(t_len)) {
                                        dp[c * pad_cols + (t + pad_cols - back)] += w * g;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::ShiftTime { x, pad, shift, ch, t_len } => {
                let (shift, ch, t_len) = (*shift, *ch, *t_len);
                let lead = shift.min(t_len);
                accum!(*x, |dx: &mut [f64]| {
                    for c in 0..ch {
                        for t in shift..t_len {
                            dx[c * t_len + (t - shift)] += grad[c * t_len + t];
                        }
                    }
                });
                if let Some(p) = pad {
                    accum!(*p, |dp: &mut [f64]| {
                        for c in 0..ch {
                            for t in 0..lead {
                                dp[c * shift + t] += grad[c * t_len + t];
                            }
                        }
                    });
                }
            }
            Op::WeightNorm { v, g, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let vv = self.value(*v);
                let gv = self.value(*g);
                // Per row: n = ‖v‖, e = g·v/n.
                // dv = (g/n)·(d − (d·v)/n² · v);  dg = (d·v)/n.
                accum!(*v, |dv: &mut [f64]| {
                    for i in 0..rows {
                        let row = &vv[i * cols..(i + 1) * cols];
                        let drow = &grad[i * cols..(i + 1) * cols];
                        let n = l2_norm(row);
                        let dot: f64 = drow.iter().zip(row.iter()).map(|(d, x)| d * x).sum();
                        let s = gv[i] / n;
                        let proj = dot / (n * n);
                        for ((o, &d), &x) in dv[i * cols..(i + 1) * cols].iter_mut().zip(drow.iter()).zip(row.iter()) {
                            *o += s * (d - proj * x);
                        }
                    }
                });
                accum!(*g, |dg: &mut [f64]| {
                    for (i, d) in dg.iter_mut().enumerate() {
                        let row = &vv[i * cols..(i + 1) * cols];
                        let drow = &grad[i * cols..(i + 1) * cols];
                        let n = l2_norm(row);
                        let dot: f64 = drow.iter().zip(row.iter()).map(|(d, x)| d * x).sum();
                        *d += dot / n;
                    }
                });
            }
        }
    }
}

/// Gradient slots produced by [`Tape::backprop`], looked up by the attached
/// tensor that [`Tape::param`] returned.
pub struct Gradients {
    tape_id: u64,
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. `None` when `t` is not a
    /// node of the tape this came from; parameters always have a slot (zeros
    /// if unused).
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        match t.node {
            Some(NodeRef { tape_id, index }) if tape_id == self.tape_id => {
                self.slots.get(index).and_then(|s| s.as_deref())
            }
            _ => None,
        }
    }
}

// ── Helpers ─────────────────────────────────────────────────────────────────

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Numerically-stable log-sum-exp of column `t` of a row-major `[classes, positions]` matrix.
fn col_logsumexp(lv: &[f64], classes: usize, positions: usize, t: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for v in 0..classes {
        m = m.max(lv[v * positions + t]);
    }
    let mut s = 0.0;
    for v in 0..classes {
        s += (lv[v * positions + t] - m).exp();
    }
    m + s.ln()
}
