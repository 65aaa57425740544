//! Reverse-mode automatic differentiation over a dynamically built tape.
//!
//! Forward values are computed eagerly as nodes are appended; `backward` walks
//! the tape in reverse and produces exact gradients of a scalar loss w.r.t.
//! every reachable node. The tape is single-owner: data parallelism builds one
//! tape per sample and sums gradients in fixed sample order.
//!
//! Elementwise binary primitives (add/sub/mul/div) accept either two equal shapes
//! or one single-element operand, which is broadcast; the gradient on the
//! broadcast side is the sum over the other side.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{DanError, Result};
use crate::tensor::{axis_split, Tensor};

pub type NodeId = usize;

/// Precomputed routing table for the local 3×3×4 transition-kernel primitive.
///
/// States are flattened as `((y*n + x)*4 + th)`. Kernel entries are flattened
/// as `((df+1)*3 + (dl+1))*4 + dth` where `df` is the displacement along the
/// heading, `dl` the displacement to the robot's left, and `th' = (th+dth)%4`.
/// `targets[th*36 + k][y*n + x]` holds the destination state for a source at
/// `(x, y, th)`; moves into occupied or out-of-grid cells are redirected to the
/// source state itself (collision = stay).
#[derive(Debug)]
pub struct KernelTable {
    pub n: usize,
    pub targets: Vec<Vec<u32>>,
}

pub const KERNEL_ENTRIES: usize = 36;

/// Heading unit vector (dx, dy) per orientation N, E, S, W; y grows downward.
pub const HEADING: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

impl KernelTable {
    /// Build the routing table for an `n`×`n` grid whose occupancy is given by
    /// `occupied(x, y)`. Out-of-grid counts as occupied.
    pub fn build(n: usize, occupied: impl Fn(usize, usize) -> bool) -> Self {
        let mut targets = Vec::with_capacity(4 * KERNEL_ENTRIES);
        for th in 0..4usize {
            let fwd = HEADING[th];
            let left = HEADING[(th + 3) % 4];
            for df in -1i64..=1 {
                for dl in -1i64..=1 {
                    for dth in 0..4usize {
                        let mut map = Vec::with_capacity(n * n);
                        for y in 0..n as i64 {
                            for x in 0..n as i64 {
                                let tx = x + df * fwd.0 + dl * left.0;
                                let ty = y + df * fwd.1 + dl * left.1;
                                let src = ((y as usize * n + x as usize) * 4 + th) as u32;
                                let blocked = tx < 0
                                    || ty < 0
                                    || tx >= n as i64
                                    || ty >= n as i64
                                    || occupied(tx as usize, ty as usize);
                                let t = if blocked {
                                    src
                                } else {
                                    ((ty as usize * n + tx as usize) * 4 + (th + dth) % 4) as u32
                                };
                                map.push(t);
                            }
                        }
                        targets.push(map);
                    }
                }
            }
        }
        KernelTable { n, targets }
    }

    #[inline]
    pub fn table(&self, th: usize, k: usize) -> &[u32] {
        &self.targets[th * KERNEL_ENTRIES + k]
    }
}

/// How the kernel node of a `TransKernel` op is laid out and indexed.
#[derive(Clone, Copy, Debug)]
pub enum KernelKind {
    /// Kernel node shaped (|A|, 36): one shared kernel per action.
    Homogeneous { action: usize },
    /// Kernel node shaped (4·|A|·36, N, N): per-cell kernels, conv-output
    /// layout; channel of (th, a, k) is `(th*n_actions + a)*36 + k`.
    Heterogeneous { action: usize, n_actions: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId> },
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    LogSumExp { x: NodeId, axis: usize },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Sum { x: NodeId, axis: Option<usize> },
    Mean { x: NodeId, axis: Option<usize> },
    Max { x: NodeId, argmax: Vec<u32> },
    Concat { xs: Vec<NodeId>, axis: usize },
    Reshape(NodeId),
    Gather { x: NodeId, idx: Arc<Vec<u32>> },
    Scale { x: NodeId, c: f64 },
    ClampMin { x: NodeId, c: f64 },
    StopGrad,
    TransKernel {
        kernel: NodeId,
        input: NodeId,
        table: Arc<KernelTable>,
        kind: KernelKind,
        transpose: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients per node id, produced by [`Tape::backward`].
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

fn shape_err(primitive: &'static str, detail: String) -> DanError {
    DanError::Shape { primitive, detail }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Append a constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Append a named parameter leaf and remember its id for gradient extraction.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push_unchecked(value, Op::Leaf);
        self.params.push((name.to_string(), id));
        id
    }

    /// Insert every tensor of `params` as a parameter leaf, in map order.
    pub fn params_from(&mut self, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, NodeId> {
        params
            .iter()
            .map(|(name, t)| (name.clone(), self.param(name, t.clone())))
            .collect()
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn push(&mut self, primitive: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(DanError::NonFinite { primitive });
        }
        Ok(self.push_unchecked(value, op))
    }

    // ── Elementwise binary primitives (scalar broadcast allowed) ──────────

    fn ew_shapes(&self, primitive: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(a).is_scalar() {
            Ok(sb.to_vec())
        } else if self.value(b).is_scalar() {
            Ok(sa.to_vec())
        } else {
            Err(shape_err(primitive, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn ew_apply(&self, a: NodeId, b: NodeId, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let len: usize = shape.iter().product();
        let data = match (va.is_scalar() && va.len() != len, vb.is_scalar() && vb.len() != len) {
            (true, _) => {
                let s = va.data()[0];
                vb.data().iter().map(|&y| f(s, y)).collect()
            }
            (_, true) => {
                let s = vb.data()[0];
                va.data().iter().map(|&x| f(x, s)).collect()
            }
            _ => va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        };
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ew_shapes("add", a, b)?;
        let v = self.ew_apply(a, b, shape, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ew_shapes("sub", a, b)?;
        let v = self.ew_apply(a, b, shape, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ew_shapes("mul", a, b)?;
        let v = self.ew_apply(a, b, shape, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ew_shapes("div", a, b)?;
        let v = self.ew_apply(a, b, shape, |x, y| x / y);
        self.push("div", v, Op::Div(a, b))
    }

    // ── Matmul / conv ──────────────────────────────────────────────────────

    /// 2-D matrix product (m,k)·(k,n) → (m,n), dgemm-backed.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        dgemm_rowmajor(
            m, k, n,
            1.0,
            self.value(a).data(), k as isize, 1,
            self.value(b).data(), n as isize, 1,
            0.0,
            &mut out,
        );
        self.push("matmul", Tensor::new(vec![m, n], out), Op::Matmul { a, b, m, k, n })
    }

    /// 2-D convolution, stride 1, zero "same" padding, odd square kernel.
    /// x: (B, C, H, W), w: (O, C, kh, kw), bias: optional (O).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("need 4-D input/kernel, got {sx:?}, {sw:?}")));
        }
        let (bsz, c, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, cw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cw != c || kh != kw || kh % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel {sw:?} incompatible with input {sx:?}")));
        }
        if let Some(bn) = bias {
            let sb = self.value(bn).shape();
            if sb != [o] {
                return Err(shape_err("conv2d", format!("bias {sb:?} vs {o} filters")));
            }
        }
        let ckk = c * kh * kw;
        let hw = h * wid;
        let mut out = vec![0.0; bsz * o * hw];
        let mut col = vec![0.0; ckk * hw];
        for bi in 0..bsz {
            let xs = &self.value(x).data()[bi * c * hw..(bi + 1) * c * hw];
            im2col(xs, c, h, wid, kh, &mut col);
            dgemm_rowmajor(
                o, ckk, hw,
                1.0,
                self.value(w).data(), ckk as isize, 1,
                &col, hw as isize, 1,
                0.0,
                &mut out[bi * o * hw..(bi + 1) * o * hw],
            );
            if let Some(bn) = bias {
                let bv = self.value(bn).data().to_vec();
                let dst = &mut out[bi * o * hw..(bi + 1) * o * hw];
                for (oi, bval) in bv.iter().enumerate() {
                    for v in &mut dst[oi * hw..(oi + 1) * hw] {
                        *v += bval;
                    }
                }
            }
        }
        self.push("conv2d", Tensor::new(vec![bsz, o, h, wid], out), Op::Conv2d { x, w, bias })
    }

    // ── Axis primitives ────────────────────────────────────────────────────

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = softmax_forward(self.value(x), axis, false)?;
        self.push("softmax", v, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = softmax_forward(self.value(x), axis, true)?;
        self.push("log_softmax", v, Op::LogSoftmax { x, axis })
    }

    /// Log-sum-exp along `axis`; the axis is removed from the output shape.
    pub fn logsumexp(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(shape_err("logsumexp", format!("axis {axis} for {:?}", xv.shape())));
        }
        let (outer, nax, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for oi in 0..outer {
            for ii in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for j in 0..nax {
                    m = m.max(xv.data()[(oi * nax + j) * inner + ii]);
                }
                let mut s = 0.0;
                for j in 0..nax {
                    s += (xv.data()[(oi * nax + j) * inner + ii] - m).exp();
                }
                out[oi * inner + ii] = m + s.ln();
            }
        }
        let shape = reduced_shape(xv.shape(), axis);
        self.push("logsumexp", Tensor::new(shape, out), Op::LogSumExp { x, axis })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { 0.0 });
        self.push("relu", v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid_scalar);
        self.push("sigmoid", v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(x))
    }

    /// Natural log; defined for strictly positive inputs (non-finite output errors).
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::ln);
        self.push("log", v, Op::Log(x))
    }

    /// Sum along `axis` (removed from the shape), or over all entries (`None` → scalar).
    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let v = reduce_forward(self.value(x), axis, false)?;
        self.push("sum", v, Op::Sum { x, axis })
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let v = reduce_forward(self.value(x), axis, true)?;
        self.push("mean", v, Op::Mean { x, axis })
    }

    /// Hard max along `axis` (removed from the shape). Ties route the gradient
    /// to the smallest index; the subgradient at kinks is 0 elsewhere.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(shape_err("max", format!("axis {axis} for {:?}", xv.shape())));
        }
        let (outer, nax, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for oi in 0..outer {
            for ii in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut bj = 0usize;
                for j in 0..nax {
                    let v = xv.data()[(oi * nax + j) * inner + ii];
                    if v > best {
                        best = v;
                        bj = j;
                    }
                }
                out[oi * inner + ii] = best;
                argmax[oi * inner + ii] = ((oi * nax + bj) * inner + ii) as u32;
            }
        }
        let shape = reduced_shape(xv.shape(), axis);
        self.push("max", Tensor::new(shape, out), Op::Max { x, argmax })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} along {axis}")));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * axis_total * inner];
        for oi in 0..outer {
            let mut off = 0;
            for &x in xs {
                let xv = self.value(x);
                let nax = xv.shape()[axis];
                let src = &xv.data()[oi * nax * inner..(oi + 1) * nax * inner];
                out[(oi * axis_total + off) * inner..(oi * axis_total + off + nax) * inner]
                    .copy_from_slice(src);
                off += nax;
            }
        }
        self.push("concat", Tensor::new(shape, out), Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if len != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} to {shape:?}", self.value(x).shape())));
        }
        let v = self.value(x).clone().reshaped(shape);
        self.push("reshape", v, Op::Reshape(x))
    }

    /// out[i] = x.flat[idx[i]] with the given output shape. Covers slicing,
    /// axis permutation, one-hot selection, and index shifts; backward is
    /// scatter-add.
    pub fn gather(&mut self, x: NodeId, idx: Arc<Vec<u32>>, shape: Vec<usize>) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if len != idx.len() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", idx.len())));
        }
        let xv = self.value(x);
        let xl = xv.len() as u32;
        if idx.iter().any(|&i| i >= xl) {
            return Err(shape_err("gather", format!("index out of range for input of {xl}")));
        }
        let data: Vec<f64> = idx.iter().map(|&i| xv.data()[i as usize]).collect();
        self.push("gather", Tensor::new(shape, data), Op::Gather { x, idx })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| c * t);
        self.push("scale", v, Op::Scale { x, c })
    }

    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| t.max(c));
        self.push("clamp_min", v, Op::ClampMin { x, c })
    }

    /// Identity forward, zero backward (truncated BPTT boundaries, HF-ml).
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        self.push("stop_grad", v, Op::StopGrad)
    }

    /// Local transition-kernel application on a (N, N, 4) tensor.
    ///
    /// Forward mode (`transpose = false`, filter predict):
    ///   out[t] = Σ_{s,k: target(s,k)=t} K(s,a,k) · input[s]
    /// Transposed mode (VI expectation):
    ///   out[s] = Σ_k K(s,a,k) · input[target(s,k)]
    /// Blocked moves are redirected to the source state by the table.
    pub fn trans_kernel(
        &mut self,
        kernel: NodeId,
        input: NodeId,
        table: Arc<KernelTable>,
        kind: KernelKind,
        transpose: bool,
    ) -> Result<NodeId> {
        let n = table.n;
        let si = self.value(input).shape();
        if si != [n, n, 4] {
            return Err(shape_err("trans_kernel", format!("input {si:?}, table n={n}")));
        }
        let sk = self.value(kernel).shape().to_vec();
        match kind {
            KernelKind::Homogeneous { action } => {
                if sk.len() != 2 || sk[1] != KERNEL_ENTRIES || action >= sk[0] {
                    return Err(shape_err("trans_kernel", format!("homogeneous kernel {sk:?}")));
                }
            }
            KernelKind::Heterogeneous { action, n_actions } => {
                if sk != [4 * n_actions * KERNEL_ENTRIES, n, n] || action >= n_actions {
                    return Err(shape_err("trans_kernel", format!("heterogeneous kernel {sk:?}")));
                }
            }
        }
        let inp = self.value(input).data();
        let ker = self.value(kernel).data();
        let mut out = vec![0.0; n * n * 4];
        let cells = n * n;
        for th in 0..4 {
            for k in 0..KERNEL_ENTRIES {
                let tgt = table.table(th, k);
                match kind {
                    KernelKind::Homogeneous { action } => {
                        let w = ker[action * KERNEL_ENTRIES + k];
                        if w == 0.0 {
                            continue;
                        }
                        if transpose {
                            for ci in 0..cells {
                                out[ci * 4 + th] += w * inp[tgt[ci] as usize];
                            }
                        } else {
                            for ci in 0..cells {
                                out[tgt[ci] as usize] += w * inp[ci * 4 + th];
                            }
                        }
                    }
                    KernelKind::Heterogeneous { action, n_actions } => {
                        let ch = (th * n_actions + action) * KERNEL_ENTRIES + k;
                        let wrow = &ker[ch * cells..(ch + 1) * cells];
                        if transpose {
                            for ci in 0..cells {
                                out[ci * 4 + th] += wrow[ci] * inp[tgt[ci] as usize];
                            }
                        } else {
                            for ci in 0..cells {
                                out[tgt[ci] as usize] += wrow[ci] * inp[ci * 4 + th];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            "trans_kernel",
            Tensor::new(vec![n, n, 4], out),
            Op::TransKernel { kernel, input, table, kind, transpose },
        )
    }

    // ── Backward ───────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss node. Exact gradients; nodes not
    /// on a path to the loss have no entry (parameter extraction fills zeros).
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        if !self.value(loss).is_scalar() {
            return Err(DanError::NonScalarLoss(loss));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn accumulate_inputs(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        // Adds g-projected contributions onto each input of node `id`.
        let add_into = |grads: &mut [Option<Tensor>], target: NodeId, contrib_shape: &[usize], add: &dyn Fn(&mut [f64])| {
            let slot = grads[target].get_or_insert_with(|| Tensor::zeros(contrib_shape.to_vec()));
            add(slot.data_mut());
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let neg = matches!(self.nodes[id].op, Op::Sub(_, _));
                for (node, sign) in [(a, 1.0), (b, if neg { -1.0 } else { 1.0 })] {
                    let shape = self.value(node).shape().to_vec();
                    let scalar_side = self.value(node).is_scalar() && g.len() != 1;
                    add_into(grads, node, &shape, &|dst: &mut [f64]| {
                        if scalar_side {
                            dst[0] += sign * g.data().iter().sum::<f64>();
                        } else {
                            for (d, &gv) in dst.iter_mut().zip(g.data()) {
                                *d += sign * gv;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let division = matches!(self.nodes[id].op, Op::Div(_, _));
                let (va, vb) = (self.value(a), self.value(b));
                let out_len = g.len();
                let fetch = |t: &Tensor, i: usize| {
                    if t.is_scalar() && t.len() != out_len { t.data()[0] } else { t.data()[i] }
                };
                // d/da
                {
                    let shape = va.shape().to_vec();
                    let scalar_side = va.is_scalar() && out_len != 1;
                    add_into(grads, a, &shape, &|dst: &mut [f64]| {
                        for i in 0..out_len {
                            let gb = fetch(vb, i);
                            let contrib = if division { g.data()[i] / gb } else { g.data()[i] * gb };
                            if scalar_side {
                                dst[0] += contrib;
                            } else {
                                dst[i] += contrib;
                            }
                        }
                    });
                }
                // d/db
                {
                    let shape = vb.shape().to_vec();
                    let scalar_side = vb.is_scalar() && out_len != 1;
                    add_into(grads, b, &shape, &|dst: &mut [f64]| {
                        for i in 0..out_len {
                            let xa = fetch(va, i);
                            let xb = fetch(vb, i);
                            let contrib = if division {
                                -g.data()[i] * xa / (xb * xb)
                            } else {
                                g.data()[i] * xa
                            };
                            if scalar_side {
                                dst[0] += contrib;
                            } else {
                                dst[i] += contrib;
                            }
                        }
                    });
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                // dA = dC · Bᵀ  — Bᵀ via strides
                {
                    let bv = self.value(b).data().to_vec();
                    add_into(grads, a, &[m, k], &|dst: &mut [f64]| {
                        dgemm_rowmajor(m, n, k, 1.0, g.data(), n as isize, 1, &bv, 1, n as isize, 1.0, dst);
                    });
                }
                // dB = Aᵀ · dC
                {
                    let av = self.value(a).data().to_vec();
                    add_into(grads, b, &[k, n], &|dst: &mut [f64]| {
                        dgemm_rowmajor(k, m, n, 1.0, &av, 1, k as isize, g.data(), n as isize, 1, 1.0, dst);
                    });
                }
            }
            Op::Conv2d { x, w, bias } => {
                let (x, w, bias) = (*x, *w, *bias);
                let sx = self.value(x).shape().to_vec();
                let sw = self.value(w).shape().to_vec();
                let (bsz, c, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh) = (sw[0], sw[2]);
                let ckk = c * kh * kh;
                let hw = h * wid;
                let xv = self.value(x).data().to_vec();
                let wv = self.value(w).data().to_vec();
                // dW = Σ_b dY_b · col_bᵀ
                add_into(grads, w, &sw, &|dst: &mut [f64]| {
                    let mut col = vec![0.0; ckk * hw];
                    for bi in 0..bsz {
                        im2col(&xv[bi * c * hw..(bi + 1) * c * hw], c, h, wid, kh, &mut col);
                        dgemm_rowmajor(
                            o, hw, ckk,
                            1.0,
                            &g.data()[bi * o * hw..(bi + 1) * o * hw], hw as isize, 1,
                            &col, 1, hw as isize,
                            1.0,
                            dst,
                        );
                    }
                });
                // dX_b = fold(Wᵀ · dY_b)
                add_into(grads, x, &sx, &|dst: &mut [f64]| {
                    let mut dcol = vec![0.0; ckk * hw];
                    for bi in 0..bsz {
                        dgemm_rowmajor(
                            ckk, o, hw,
                            1.0,
                            &wv, 1, ckk as isize,
                            &g.data()[bi * o * hw..(bi + 1) * o * hw], hw as isize, 1,
                            0.0,
                            &mut dcol,
                        );
                        col2im_add(&dcol, c, h, wid, kh, &mut dst[bi * c * hw..(bi + 1) * c * hw]);
                    }
                });
                if let Some(bn) = bias {
                    add_into(grads, bn, &[o], &|dst: &mut [f64]| {
                        for bi in 0..bsz {
                            for oi in 0..o {
                                let s: f64 = g.data()[(bi * o + oi) * hw..(bi * o + oi + 1) * hw].iter().sum();
                                dst[oi] += s;
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = self.value(id);
                let shape = self.value(x).shape().to_vec();
                let (outer, nax, inner) = axis_split(&shape, axis);
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for oi in 0..outer {
                        for ii in 0..inner {
                            let mut dot = 0.0;
                            for j in 0..nax {
                                let o = (oi * nax + j) * inner + ii;
                                dot += g.data()[o] * y.data()[o];
                            }
                            for j in 0..nax {
                                let o = (oi * nax + j) * inner + ii;
                                dst[o] += y.data()[o] * (g.data()[o] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = self.value(id); // log-probabilities
                let shape = self.value(x).shape().to_vec();
                let (outer, nax, inner) = axis_split(&shape, axis);
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for oi in 0..outer {
                        for ii in 0..inner {
                            let mut gsum = 0.0;
                            for j in 0..nax {
                                gsum += g.data()[(oi * nax + j) * inner + ii];
                            }
                            for j in 0..nax {
                                let o = (oi * nax + j) * inner + ii;
                                dst[o] += g.data()[o] - y.data()[o].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { x, axis } => {
                let (x, axis) = (*x, *axis);
                let xv = self.value(x);
                let lse = self.value(id);
                let shape = xv.shape().to_vec();
                let (outer, nax, inner) = axis_split(&shape, axis);
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for oi in 0..outer {
                        for ii in 0..inner {
                            let gv = g.data()[oi * inner + ii];
                            let l = lse.data()[oi * inner + ii];
                            for j in 0..nax {
                                let o = (oi * nax + j) * inner + ii;
                                dst[o] += gv * (xv.data()[o] - l).exp();
                            }
                        }
                    }
                });
            }
            Op::Relu(x) | Op::ClampMin { x, .. } => {
                let x = *x;
                let c = match &self.nodes[id].op {
                    Op::ClampMin { c, .. } => *c,
                    _ => 0.0,
                };
                let xv = self.value(x);
                let shape = xv.shape().to_vec();
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for (i, (&xi, &gi)) in xv.data().iter().zip(g.data()).enumerate() {
                        if xi > c {
                            dst[i] += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) | Op::Tanh(x) => {
                let x = *x;
                let y = self.value(id);
                let is_sig = matches!(self.nodes[id].op, Op::Sigmoid(_));
                let shape = self.value(x).shape().to_vec();
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for (i, (&yi, &gi)) in y.data().iter().zip(g.data()).enumerate() {
                        dst[i] += gi * if is_sig { yi * (1.0 - yi) } else { 1.0 - yi * yi };
                    }
                });
            }
            Op::Log(x) => {
                let x = *x;
                let xv = self.value(x);
                let shape = xv.shape().to_vec();
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for (i, (&xi, &gi)) in xv.data().iter().zip(g.data()).enumerate() {
                        dst[i] += gi / xi;
                    }
                });
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.value(x).shape().to_vec();
                let scale = match &self.nodes[id].op {
                    Op::Mean { .. } => {
                        1.0 / axis.map_or(self.value(x).len(), |ax| shape[ax]) as f64
                    }
                    _ => 1.0,
                };
                add_into(grads, x, &shape, &|dst: &mut [f64]| match axis {
                    None => {
                        let gv = g.data()[0] * scale;
                        dst.iter_mut().for_each(|d| *d += gv);
                    }
                    Some(ax) => {
                        let (outer, nax, inner) = axis_split(&shape, ax);
                        for oi in 0..outer {
                            for j in 0..nax {
                                for ii in 0..inner {
                                    dst[(oi * nax + j) * inner + ii] += g.data()[oi * inner + ii] * scale;
                                }
                            }
                        }
                    }
                });
            }
            Op::Max { x, argmax, .. } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for (i, &src) in argmax.iter().enumerate() {
                        dst[src as usize] += g.data()[i];
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let axis = *axis;
                let out_shape = self.value(id).shape().to_vec();
                let (outer, total, inner) = axis_split(&out_shape, axis);
                let mut off = 0;
                for &xn in xs {
                    let shape = self.value(xn).shape().to_vec();
                    let nax = shape[axis];
                    let start = off;
                    add_into(grads, xn, &shape, &|dst: &mut [f64]| {
                        for oi in 0..outer {
                            let src = &g.data()[(oi * total + start) * inner..(oi * total + start + nax) * inner];
                            for (d, &s) in dst[oi * nax * inner..(oi + 1) * nax * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    off += nax;
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for (d, &s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                });
            }
            Op::Gather { x, idx } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for (i, &src) in idx.iter().enumerate() {
                        dst[src as usize] += g.data()[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let shape = self.value(x).shape().to_vec();
                add_into(grads, x, &shape, &|dst: &mut [f64]| {
                    for (d, &s) in dst.iter_mut().zip(g.data()) {
                        *d += c * s;
                    }
                });
            }
            Op::StopGrad => {}
            Op::TransKernel { kernel, input, table, kind, transpose } => {
                let (kernel, input) = (*kernel, *input);
                let kind = *kind;
                let transpose = *transpose;
                let n = table.n;
                let cells = n * n;
                let inp = self.value(input).data().to_vec();
                let ker = self.value(kernel).data().to_vec();
                let in_shape = self.value(input).shape().to_vec();
                let k_shape = self.value(kernel).shape().to_vec();
                // d(input)
                {
                    let table = table.clone();
                    add_into(grads, input, &in_shape, &|dst: &mut [f64]| {
                        for th in 0..4 {
                            for k in 0..KERNEL_ENTRIES {
                                let tgt = table.table(th, k);
                                match kind {
                                    KernelKind::Homogeneous { action } => {
                                        let w = ker[action * KERNEL_ENTRIES + k];
                                        if w == 0.0 {
                                            continue;
                                        }
                                        if transpose {
                                            for ci in 0..cells {
                                                dst[tgt[ci] as usize] += w * g.data()[ci * 4 + th];
                                            }
                                        } else {
                                            for ci in 0..cells {
                                                dst[ci * 4 + th] += w * g.data()[tgt[ci] as usize];
                                            }
                                        }
                                    }
                                    KernelKind::Heterogeneous { action, n_actions } => {
                                        let ch = (th * n_actions + action) * KERNEL_ENTRIES + k;
                                        let wrow = &ker[ch * cells..(ch + 1) * cells];
                                        if transpose {
                                            for ci in 0..cells {
                                                dst[tgt[ci] as usize] += wrow[ci] * g.data()[ci * 4 + th];
                                            }
                                        } else {
                                            for ci in 0..cells {
                                                dst[ci * 4 + th] += wrow[ci] * g.data()[tgt[ci] as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                // d(kernel)
                {
                    let table = table.clone();
                    add_into(grads, kernel, &k_shape, &|dst: &mut [f64]| {
                        for th in 0..4 {
                            for k in 0..KERNEL_ENTRIES {
                                let tgt = table.table(th, k);
                                match kind {
                                    KernelKind::Homogeneous { action } => {
                                        let mut acc = 0.0;
                                        if transpose {
                                            for ci in 0..cells {
                                                acc += inp[tgt[ci] as usize] * g.data()[ci * 4 + th];
                                            }
                                        } else {
                                            for ci in 0..cells {
                                                acc += inp[ci * 4 + th] * g.data()[tgt[ci] as usize];
                                            }
                                        }
                                        dst[action * KERNEL_ENTRIES + k] += acc;
                                    }
                                    KernelKind::Heterogeneous { action, n_actions } => {
                                        let ch = (th * n_actions + action) * KERNEL_ENTRIES + k;
                                        let drow = &mut dst[ch * cells..(ch + 1) * cells];
                                        if transpose {
                                            for ci in 0..cells {
                                                drow[ci] += inp[tgt[ci] as usize] * g.data()[ci * 4 + th];
                                            }
                                        } else {
                                            for ci in 0..cells {
                                                drow[ci] += inp[ci * 4 + th] * g.data()[tgt[ci] as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
    }

    /// Gradients for every registered parameter, zeros where unreached.
    pub fn param_grads(&self, map: &GradientMap) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = map
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}

// ── Shared kernels ──────────────────────────────────────────────────────────

/// Row-major dgemm wrapper: C = alpha·A·B + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn dgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().copied().enumerate().filter(|&(i, _)| i != axis).map(|(_, d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(DanError::Shape {
            primitive: if log { "log_softmax" } else { "softmax" },
            detail: format!("axis {axis} for {:?}", x.shape()),
        });
    }
    let (outer, nax, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; x.len()];
    for oi in 0..outer {
        for ii in 0..inner {
            let mut m = f64::NEG_INFINITY;
            for j in 0..nax {
                m = m.max(x.data()[(oi * nax + j) * inner + ii]);
            }
            let mut s = 0.0;
            for j in 0..nax {
                s += (x.data()[(oi * nax + j) * inner + ii] - m).exp();
            }
            let lse = m + s.ln();
            for j in 0..nax {
                let o = (oi * nax + j) * inner + ii;
                out[o] = if log { x.data()[o] - lse } else { (x.data()[o] - lse).exp() };
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out))
}

fn reduce_forward(x: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    match axis {
        None => {
            let s: f64 = x.data().iter().sum();
            let v = if mean { s / x.len() as f64 } else { s };
            Ok(Tensor::scalar(v))
        }
        Some(ax) => {
            if ax >= x.shape().len() {
                return Err(DanError::Shape {
                    primitive: if mean { "mean" } else { "sum" },
                    detail: format!("axis {ax} for {:?}", x.shape()),
                });
            }
            let (outer, nax, inner) = axis_split(x.shape(), ax);
            let mut out = vec![0.0; outer * inner];
            for oi in 0..outer {
                for j in 0..nax {
                    for ii in 0..inner {
                        out[oi * inner + ii] += x.data()[(oi * nax + j) * inner + ii];
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= nax as f64);
            }
            Ok(Tensor::new(reduced_shape(x.shape(), ax), out))
        }
    }
}

/// Unfold a (C, H, W) image into a (C·kh·kh, H·W) column matrix with zero
/// "same" padding and stride 1.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, col: &mut [f64]) {
    let pad = kh / 2;
    let hw = h * w;
    debug_assert_eq!(col.len(), c * kh * kh * hw);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kh {
                let row = (ci * kh + ky) * kh + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as i64 + ky as i64 - pad as i64;
                    if sy < 0 || sy >= h as i64 {
                        dst[y * w..(y + 1) * w].iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    for x_ in 0..w {
                        let sx = x_ as i64 + kx as i64 - pad as i64;
                        dst[y * w + x_] = if sx < 0 || sx >= w as i64 {
                            0.0
                        } else {
                            x[(ci * h + sy as usize) * w + sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter a column-matrix gradient back onto the (C, H, W) image (adds).
fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, kh: usize, x: &mut [f64]) {
    let pad = kh / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kh {
                let row = (ci * kh + ky) * kh + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as i64 + ky as i64 - pad as i64;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for x_ in 0..w {
                        let sx = x_ as i64 + kx as i64 - pad as i64;
                        if sx >= 0 && sx < w as i64 {
                            x[(ci * h + sy as usize) * w + sx as usize] += src[y * w + x_];
                        }
                    }
                }
            }
        }
    }
}

// ── Gradient checking ───────────────────────────────────────────────────────

/// Max over all scalar parameters of the relative disagreement between the
/// analytic gradient and a central finite difference:
/// |analytic − difference| / max(1, |analytic|, |difference|).
pub fn gradient_check<F>(f: &F, params: &BTreeMap<String, Tensor>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    if !(step > 1e-8 && step < 1e-3) {
        return Err(DanError::BadStep(step));
    }
    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = tape.params_from(p);
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(DanError::NonFinite { primitive: "gradient_check" });
        }
        Ok(v)
    };
    // Analytic pass.
    let mut tape = Tape::new();
    let ids = tape.params_from(params);
    let loss = f(&mut tape, &ids)?;
    let gm = tape.backward(loss)?;
    let analytic = tape.param_grads(&gm);

    let mut worst = 0.0f64;
    for (name, tensor) in params {
        let ga = &analytic[name];
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= step;
            let d = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = ga.data()[i];
            let rel = (a - d).abs() / 1.0f64.max(a.abs()).max(d.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
