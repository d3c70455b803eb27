//! Computation graph: op recording, forward evaluation, reverse-mode backward.

use std::mem::size_of;
use std::sync::Arc;

use super::{BoolMask, IndexMatrix, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Relu,
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the smaller operand of a binary op maps onto the larger one.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// `a` is a single element.
    ScalarLhs,
    /// `b` is a single element.
    ScalarRhs,
    /// `a.shape` is a suffix of `b.shape`; `a` repeats along leading dims.
    SuffixLhs,
    /// `b.shape` is a suffix of `a.shape`; `b` repeats along leading dims.
    SuffixRhs,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: TensorId,
        b: TensorId,
        bc: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        x: TensorId,
    },
    Scale {
        x: TensorId,
        c: S,
    },
    AddConst {
        x: TensorId,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    GatherRows {
        src: TensorId,
        idx: Arc<IndexMatrix>,
    },
    MaskedMax {
        x: TensorId,
        /// Flat row index (`group * n + argmax`) per pooled output element.
        argmax: Vec<usize>,
    },
    SumAxis {
        x: TensorId,
        axis: usize,
    },
    SumAll {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    ConcatLast {
        a: TensorId,
        b: TensorId,
        a_last: usize,
        b_last: usize,
    },
    SliceLast {
        x: TensorId,
        start: usize,
        src_last: usize,
    },
    ConcatRows {
        a: TensorId,
        b: TensorId,
        a_rows: usize,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// A single-use computation graph. Nodes are appended in topological order,
/// so reverse insertion order is a valid reverse-topological traversal.
///
/// Gradient accumulation is additive: a second `backward` without
/// [`Graph::zero_grad`] doubles every populated gradient.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    live_bytes: usize,
    peak_bytes: usize,
}

type OpResult = Result<TensorId, TensorError>;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            live_bytes: 0,
            peak_bytes: 0,
        }
    }

    /// Register an input tensor. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A non-differentiable input (masks, encodings, targets).
    pub fn constant(&mut self, value: Tensor<S>) -> TensorId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> TensorId {
        self.live_bytes += value.numel() * size_of::<S>();
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a node, if any backward pass has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Sum of all live value and gradient buffer bytes ever held at once.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn accum_grad(&mut self, id: TensorId, contrib: &[S]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + *ci;
                }
            }
            None => {
                self.live_bytes += std::mem::size_of_val(contrib);
                self.peak_bytes = self.peak_bytes.max(self.live_bytes);
                node.grad = Some(contrib.to_vec());
            }
        }
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Populates `grad` on every
    /// reachable node with `requires_grad`, adding to whatever is there.
    pub fn backward(&mut self, root: TensorId) -> Result<(), TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        // Transient per-node adjoints for this sweep only; merged into the
        // persistent grads at the end so repeated sweeps stay additive.
        let n = root.0 + 1;
        let mut adj: Vec<Option<Vec<S>>> = Vec::new();
        adj.resize_with(n, || None);
        adj[root.0] = Some(vec![S::one()]);

        for id in (0..n).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.route(id, &g, &mut adj);
            self.accum_grad(TensorId(id), &g);
        }
        Ok(())
    }

    /// Distribute the adjoint `g` of node `id` onto its parents.
    fn route(&self, id: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let send = |pid: TensorId, contrib: Vec<S>, adj: &mut [Option<Vec<S>>]| {
            if !self.nodes[pid.0].requires_grad {
                return;
            }
            match &mut adj[pid.0] {
                Some(buf) => {
                    for (bi, ci) in buf.iter_mut().zip(&contrib) {
                        *bi = *bi + *ci;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bc } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let (ga, gb) = binary_backward(*kind, *bc, av, bv, g);
                send(*a, ga, adj);
                send(*b, gb, adj);
            }
            Op::Unary { kind, x } => {
                let xv = self.nodes[x.0].value.data();
                let yv = self.nodes[id].value.data();
                let gx = match kind {
                    UnaryKind::Relu => xv
                        .iter()
                        .zip(g)
                        .map(|(&x, &gi)| if x > S::zero() { gi } else { S::zero() })
                        .collect(),
                    UnaryKind::Sin => xv.iter().zip(g).map(|(&x, &gi)| gi * x.cos()).collect(),
                    UnaryKind::Cos => xv.iter().zip(g).map(|(&x, &gi)| -gi * x.sin()).collect(),
                    UnaryKind::Exp => yv.iter().zip(g).map(|(&y, &gi)| gi * y).collect(),
                    UnaryKind::Log => xv.iter().zip(g).map(|(&x, &gi)| gi / x).collect(),
                    UnaryKind::Tanh => yv
                        .iter()
                        .zip(g)
                        .map(|(&y, &gi)| gi * (S::one() - y * y))
                        .collect(),
                };
                send(*x, gx, adj);
            }
            Op::Scale { x, c } => {
                send(*x, g.iter().map(|&gi| gi * *c).collect(), adj);
            }
            Op::AddConst { x } => {
                send(*x, g.to_vec(), adj);
            }
            Op::Matmul { a, b } => {
                let (ga, gb) = self.matmul_backward(*a, *b, id, g);
                send(*a, ga, adj);
                send(*b, gb, adj);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yv = y.data();
                let mut gx = vec![S::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = S::zero();
                        for k in 0..len {
                            dot = dot + g[at(k)] * yv[at(k)];
                        }
                        for k in 0..len {
                            gx[at(k)] = yv[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(*x, gx, adj);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gain.0].value.data();
                let d = gv.len();
                let rows = xv.len() / d;
                let mut gx = vec![S::zero(); xv.len()];
                let mut ggain = vec![S::zero(); d];
                let mut gbias = vec![S::zero(); d];
                let inv_d = S::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, rstd) = (mean[r], inv_std[r]);
                    // dxhat and its row statistics
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rstd;
                        let dxhat = gr[j] * gv[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        ggain[j] = ggain[j] + gr[j] * xhat;
                        gbias[j] = gbias[j] + gr[j];
                    }
                    let m1 = sum_dxhat * inv_d;
                    let m2 = sum_dxhat_xhat * inv_d;
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rstd;
                        let dxhat = gr[j] * gv[j];
                        gx[r * d + j] = rstd * (dxhat - m1 - xhat * m2);
                    }
                }
                send(*x, gx, adj);
                send(*gain, ggain, adj);
                send(*bias, gbias, adj);
            }
            Op::GatherRows { src, idx } => {
                let d = self.nodes[src.0].value.shape()[1];
                let mut gsrc = vec![S::zero(); self.nodes[src.0].value.numel()];
                for (pair, row) in idx.idx.iter().enumerate() {
                    let gs = &g[pair * d..(pair + 1) * d];
                    let dst = &mut gsrc[row * d..(row + 1) * d];
                    for (dj, gj) in dst.iter_mut().zip(gs) {
                        *dj = *dj + *gj;
                    }
                }
                send(*src, gsrc, adj);
            }
            Op::MaskedMax { x, argmax } => {
                let xs = self.nodes[x.0].value.shape();
                let d = *xs.last().unwrap();
                let mut gx = vec![S::zero(); self.nodes[x.0].value.numel()];
                for (out_i, &row) in argmax.iter().enumerate() {
                    let (grp, col) = (out_i / d, out_i % d);
                    let _ = grp;
                    gx[row * d + col] = gx[row * d + col] + g[out_i];
                }
                send(*x, gx, adj);
            }
            Op::SumAxis { x, axis } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, len, inner) = axis_split(xs, *axis);
                let mut gx = vec![S::zero(); self.nodes[x.0].value.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                send(*x, gx, adj);
            }
            Op::SumAll { x } => {
                send(*x, vec![g[0]; self.nodes[x.0].value.numel()], adj);
            }
            Op::Reshape { x } => {
                send(*x, g.to_vec(), adj);
            }
            Op::ConcatLast {
                a,
                b,
                a_last,
                b_last,
            } => {
                let rows = self.nodes[id].value.numel() / (a_last + b_last);
                let mut ga = vec![S::zero(); rows * a_last];
                let mut gb = vec![S::zero(); rows * b_last];
                let w = a_last + b_last;
                for r in 0..rows {
                    ga[r * a_last..(r + 1) * a_last].copy_from_slice(&g[r * w..r * w + a_last]);
                    gb[r * b_last..(r + 1) * b_last]
                        .copy_from_slice(&g[r * w + a_last..(r + 1) * w]);
                }
                send(*a, ga, adj);
                send(*b, gb, adj);
            }
            Op::SliceLast { x, start, src_last } => {
                let len = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.numel() / len;
                let mut gx = vec![S::zero(); self.nodes[x.0].value.numel()];
                for r in 0..rows {
                    let dst = &mut gx[r * src_last + start..r * src_last + start + len];
                    dst.copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(*x, gx, adj);
            }
            Op::ConcatRows { a, b, a_rows } => {
                let d = *self.nodes[id].value.shape().last().unwrap();
                let split = a_rows * d;
                send(*a, g[..split].to_vec(), adj);
                send(*b, g[split..].to_vec(), adj);
            }
        }
    }

    fn matmul_backward(&self, a: TensorId, b: TensorId, out: usize, g: &[S]) -> (Vec<S>, Vec<S>) {
        let ashape = self.nodes[a.0].value.shape();
        let bshape = self.nodes[b.0].value.shape();
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let n = bshape[bshape.len() - 1];
        let batch = self.nodes[out].value.numel() / (m * n);
        let a_batched = ashape.len() > 2;
        let b_batched = bshape.len() > 2;
        let mut ga = vec![S::zero(); av.len()];
        let mut gb = vec![S::zero(); bv.len()];
        for t in 0..batch {
            let gs = &g[t * m * n..(t + 1) * m * n];
            let at = if a_batched {
                &av[t * m * k..(t + 1) * m * k]
            } else {
                av
            };
            let bt = if b_batched {
                &bv[t * k * n..(t + 1) * k * n]
            } else {
                bv
            };
            let gat = if a_batched {
                &mut ga[t * m * k..(t + 1) * m * k]
            } else {
                &mut ga[..]
            };
            // dA += dC · B^T
            mm_nt_acc(gs, bt, m, n, k, gat);
            let gbt = if b_batched {
                &mut gb[t * k * n..(t + 1) * k * n]
            } else {
                &mut gb[..]
            };
            // dB += A^T · dC
            mm_tn_acc(at, gs, m, k, n, gbt);
        }
        (ga, gb)
    }

    // ------------------------------------------------------------------
    // Op recording (forward computation happens eagerly)
    // ------------------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> OpResult {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bc = classify_broadcast(&ash, &bsh).ok_or(TensorError::ShapeMismatch {
            op: match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let out_shape = if av.len() >= bv.len() { ash } else { bsh };
        let n = av.len().max(bv.len());
        let mut out = Vec::with_capacity(n);
        let f = |x: S, y: S| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        match bc {
            Broadcast::Same => out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y))),
            Broadcast::ScalarLhs => out.extend(bv.iter().map(|&y| f(av[0], y))),
            Broadcast::ScalarRhs => out.extend(av.iter().map(|&x| f(x, bv[0]))),
            Broadcast::SuffixLhs => {
                for chunk in bv.chunks(av.len()) {
                    out.extend(av.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
            }
            Broadcast::SuffixRhs => {
                for chunk in av.chunks(bv.len()) {
                    out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Binary { kind, a, b, bc },
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> OpResult {
        let xv = self.nodes[x.0].value.data();
        if matches!(kind, UnaryKind::Log) {
            if let Some(&bad) = xv.iter().find(|v| **v <= S::zero()) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let out: Vec<S> = xv
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => {
                    if v > S::zero() {
                        v
                    } else {
                        S::zero()
                    }
                }
                UnaryKind::Sin => v.sin(),
                UnaryKind::Cos => v.cos(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Tanh => v.tanh(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Unary { kind, x }))
    }

    pub fn relu(&mut self, x: TensorId) -> OpResult {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sin(&mut self, x: TensorId) -> OpResult {
        self.unary(UnaryKind::Sin, x)
    }
    pub fn cos(&mut self, x: TensorId) -> OpResult {
        self.unary(UnaryKind::Cos, x)
    }
    pub fn exp(&mut self, x: TensorId) -> OpResult {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: TensorId) -> OpResult {
        self.unary(UnaryKind::Log, x)
    }
    pub fn tanh(&mut self, x: TensorId) -> OpResult {
        self.unary(UnaryKind::Tanh, x)
    }

    /// Multiply by a compile-time constant (not a graph node).
    pub fn scale(&mut self, x: TensorId, c: f64) -> OpResult {
        let c = S::from_f64(c);
        let out: Vec<S> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| v * c)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Scale { x, c }))
    }

    /// Add a compile-time constant to every element.
    pub fn add_const(&mut self, x: TensorId, c: f64) -> OpResult {
        let c = S::from_f64(c);
        let out: Vec<S> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| v + c)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddConst { x }))
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    /// Leading dims must match, or one operand may omit them entirely.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> OpResult {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        let a_lead = &ash[..ash.len() - 2];
        let b_lead = &bsh[..bsh.len() - 2];
        let lead: Vec<usize> = if a_lead == b_lead {
            a_lead.to_vec()
        } else if a_lead.is_empty() {
            b_lead.to_vec()
        } else if b_lead.is_empty() {
            a_lead.to_vec()
        } else {
            return Err(mismatch());
        };
        let batch: usize = lead.iter().product();
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            let at = if a_lead.is_empty() {
                av
            } else {
                &av[t * m * ka..(t + 1) * m * ka]
            };
            let bt = if b_lead.is_empty() {
                bv
            } else {
                &bv[t * ka * n..(t + 1) * ka * n]
            };
            mm_acc(at, bt, m, ka, n, &mut out[t * m * n..(t + 1) * m * n]);
        }
        let mut shape = lead;
        shape.push(m);
        shape.push(n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Matmul { a, b }))
    }

    /// Numerically stable softmax along `axis` (max subtraction). Slices that
    /// mix `-inf` sentinels with at least one finite entry are handled; a
    /// fully `-inf` slice is a caller contract violation.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = xv[at(0)];
                for k in 1..len {
                    if xv[at(k)] > mx {
                        mx = xv[at(k)];
                    }
                }
                let mut sum = S::zero();
                for k in 0..len {
                    let e = (xv[at(k)] - mx).exp();
                    out[at(k)] = e;
                    sum = sum + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> OpResult {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let rows = xv.len() / d;
        let inv_d = S::from_f64(1.0 / d as f64);
        let eps = S::from_f64(eps);
        let mut out = vec![S::zero(); xv.len()];
        let mut mean = vec![S::zero(); rows];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            let mu = xr.iter().copied().sum::<S>() * inv_d;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_d;
            let rstd = S::one() / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = rstd;
            for j in 0..d {
                out[r * d + j] = (xr[j] - mu) * rstd * gv[j] + bv[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
        ))
    }

    /// `out[m, k, :] = src[idx[m, k], :]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, src: TensorId, idx: Arc<IndexMatrix>) -> OpResult {
        let sshape = self.shape(src).to_vec();
        if sshape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: sshape,
                rhs: vec![idx.rows, idx.cols],
            });
        }
        let (rows, d) = (sshape[0], sshape[1]);
        if let Some(&bad) = idx.idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, rows });
        }
        let sv = self.nodes[src.0].value.data();
        let mut out = Vec::with_capacity(idx.idx.len() * d);
        for &row in &idx.idx {
            out.extend_from_slice(&sv[row * d..(row + 1) * d]);
        }
        let shape = vec![idx.rows, idx.cols, d];
        let rg = self.requires_grad(src);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::GatherRows { src, idx }))
    }

    /// Max over the second-to-last axis restricted to `mask`-valid rows.
    /// `x: [.., N, D]`, `mask: [.., N]` -> `[.., D]`.
    pub fn masked_max(&mut self, x: TensorId, mask: &BoolMask) -> OpResult {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || mask.shape != shape[..shape.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_max",
                lhs: shape,
                rhs: mask.shape.clone(),
            });
        }
        let d = shape[shape.len() - 1];
        let n = shape[shape.len() - 2];
        let groups = mask.mask.len() / n;
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(groups * d);
        let mut argmax = Vec::with_capacity(groups * d);
        for grp in 0..groups {
            let valid: Vec<usize> = (0..n).filter(|&j| mask.mask[grp * n + j]).collect();
            if valid.is_empty() {
                return Err(TensorError::EmptyGroup { group: grp });
            }
            for col in 0..d {
                let mut best_row = grp * n + valid[0];
                let mut best = xv[best_row * d + col];
                for &j in &valid[1..] {
                    let row = grp * n + j;
                    if xv[row * d + col] > best {
                        best = xv[row * d + col];
                        best_row = row;
                    }
                }
                out.push(best);
                argmax.push(best_row);
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(d);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::MaskedMax { x, argmax },
        ))
    }

    /// Sum-reduce one axis away.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xv[(o * len + k) * inner + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::SumAxis { x, axis }))
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum_all(&mut self, x: TensorId) -> OpResult {
        let s: S = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::SumAll { x }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> OpResult {
        let v = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(v, rg, Op::Reshape { x }))
    }

    /// Concatenate along the last axis; leading dims must match.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> OpResult {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() != bsh.len() || ash.is_empty() || ash[..ash.len() - 1] != bsh[..bsh.len() - 1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat_last",
                lhs: ash,
                rhs: bsh,
            });
        }
        let a_last = ash[ash.len() - 1];
        let b_last = bsh[bsh.len() - 1];
        let rows: usize = ash[..ash.len() - 1].iter().product();
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(rows * (a_last + b_last));
        for r in 0..rows {
            out.extend_from_slice(&av[r * a_last..(r + 1) * a_last]);
            out.extend_from_slice(&bv[r * b_last..(r + 1) * b_last]);
        }
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(a_last + b_last);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::ConcatLast {
                a,
                b,
                a_last,
                b_last,
            },
        ))
    }

    /// Stack two 2-D tensors vertically: `[A, D]` and `[B, D]` -> `[A+B, D]`.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> OpResult {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: ash,
                rhs: bsh,
            });
        }
        let mut out = Vec::with_capacity((ash[0] + bsh[0]) * ash[1]);
        out.extend_from_slice(self.nodes[a.0].value.data());
        out.extend_from_slice(self.nodes[b.0].value.data());
        let shape = vec![ash[0] + bsh[0], ash[1]];
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::ConcatRows {
                a,
                b,
                a_rows: ash[0],
            },
        ))
    }

    /// Select `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: TensorId, start: usize, len: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        let src_last = *shape.last().unwrap();
        if start + len > src_last {
            return Err(TensorError::InvalidAxis {
                op: "slice_last",
                axis: start + len,
                rank: src_last,
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * src_last + start..r * src_last + start + len]);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(len);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::SliceLast { x, start, src_last },
        ))
    }
}

/// Split a shape at `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn classify_broadcast(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if an == 1 {
        return Some(Broadcast::ScalarLhs);
    }
    if bn == 1 {
        return Some(Broadcast::ScalarRhs);
    }
    if a.len() < b.len() && b[b.len() - a.len()..] == *a {
        return Some(Broadcast::SuffixLhs);
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        return Some(Broadcast::SuffixRhs);
    }
    None
}

fn binary_backward<S: Scalar>(
    kind: BinaryKind,
    bc: Broadcast,
    av: &[S],
    bv: &[S],
    g: &[S],
) -> (Vec<S>, Vec<S>) {
    // Full-size adjoints first, then reduce onto the broadcast operand.
    let n = g.len();
    let a_at = |i: usize| match bc {
        Broadcast::ScalarLhs => av[0],
        Broadcast::SuffixLhs => av[i % av.len()],
        _ => av[i],
    };
    let b_at = |i: usize| match bc {
        Broadcast::ScalarRhs => bv[0],
        Broadcast::SuffixRhs => bv[i % bv.len()],
        _ => bv[i],
    };
    let mut ga_full = Vec::with_capacity(n);
    let mut gb_full = Vec::with_capacity(n);
    for (i, &gi) in g.iter().enumerate() {
        match kind {
            BinaryKind::Add => {
                ga_full.push(gi);
                gb_full.push(gi);
            }
            BinaryKind::Sub => {
                ga_full.push(gi);
                gb_full.push(-gi);
            }
            BinaryKind::Mul => {
                ga_full.push(gi * b_at(i));
                gb_full.push(gi * a_at(i));
            }
        }
    }
    let reduce = |full: Vec<S>, target_len: usize| -> Vec<S> {
        if full.len() == target_len {
            return full;
        }
        let mut red = vec![S::zero(); target_len];
        for (i, v) in full.into_iter().enumerate() {
            let j = i % target_len;
            red[j] = red[j] + v;
        }
        red
    };
    (reduce(ga_full, av.len()), reduce(gb_full, bv.len()))
}

/// `out += a[m,k] . b[k,n]`, ikj order so the inner loop streams rows.
fn mm_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a[m,n] . b[n_rows=k, n]^T`, i.e. `out[i,j] += sum_p a[i,p] b[j,p]`.
fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * k + j] = out[i * k + j] + s;
        }
    }
}

/// `out += a[m,k]^T . b[m,n]`, i.e. `out[p,j] += sum_i a[i,p] b[i,j]`.
fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}
