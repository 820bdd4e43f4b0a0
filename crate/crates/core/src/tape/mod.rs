//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Nodes live in an arena owned by the [`Tape`]; a [`NodeId`] is an index
//! stamped with the owning tape's identity so cross-tape mixups fail loudly
//! instead of silently reading the wrong buffer.
//!
//! [`Tape::backward`] walks the recorded graph in reverse and **emits the
//! gradient computation as new nodes on the same tape**. A gradient is
//! therefore itself a differentiable graph: call [`Tape::grad_as_node`] to
//! get an input gradient as a node, build more loss on top of it, and call
//! `backward` again for second-order derivatives. This double-backward path
//! is what the gradient-disalignment penalty stands on.

pub mod kernels;
pub mod maps;
mod op;
mod vjp;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

pub use op::Op;

use crate::error::{Result, TriqError};
use crate::tensor::Tensor;

static TAPE_COUNTER: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u32,
    idx: u32,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

/// One recorded operation: the op, its operand nodes, and the cached
/// forward value.
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    /// True when some path from this node reaches a gradient-requiring
    /// leaf; backward skips everything else.
    pub requires_grad: bool,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

/// Result of a backward pass: cotangent node per reachable node index.
/// Leaves the loss does not reach simply have no entry; their gradient is
/// a zero tensor by definition.
pub struct Gradients {
    tape: u32,
    by_idx: Vec<Option<NodeId>>,
}

impl Gradients {
    /// The gradient of the loss w.r.t. `id`, as a node, when the loss
    /// reaches `id` at all.
    pub fn node(&self, id: NodeId) -> Option<NodeId> {
        assert_eq!(self.tape, id.tape, "gradient lookup across tapes");
        self.by_idx.get(id.index()).copied().flatten()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether `id` names a node recorded on this tape.
    pub fn owns(&self, id: NodeId) -> bool {
        id.tape == self.id && id.index() < self.nodes.len()
    }

    fn check_owned(&self, id: NodeId, what: &str) -> Result<()> {
        if id.tape != self.id || id.index() >= self.nodes.len() {
            return Err(TriqError::InvalidArg(format!(
                "{what}: node is not on this tape"
            )));
        }
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> &Node {
        assert_eq!(id.tape, self.id, "node id from a different tape");
        &self.nodes[id.index()]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.node(id).value
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId { tape: self.id, idx }
    }

    /// Records an input tensor. Only leaves may require gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    /// A leaf that never takes gradients: fixed kernels, masks, labels.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Applies `op` to operand nodes, computing the forward value
    /// immediately. This is the single entry point all helpers go through.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check_owned(i, op.name())?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.index()].value).collect();
        let value = op.eval(&values)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.index()].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    // ── Elementwise and scalar helpers ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::AddScalar(c), &[x])
    }
    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::MulScalar(c), &[x])
    }
    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.mul_scalar(x, -1.0)
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt, &[x])
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }
    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clip { lo, hi }, &[x])
    }
    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Atan2, &[y, x])
    }
    pub fn angle_wrap(&mut self, x: NodeId, period: f64) -> Result<NodeId> {
        self.apply(Op::AngleWrap { period }, &[x])
    }
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.mul(x, x)
    }

    // ── Linear algebra and convolution ──────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d { pad }, &[x, w])
    }

    pub fn conv2d_input_grad(
        &mut self,
        gy: NodeId,
        w: NodeId,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<NodeId> {
        self.apply(Op::Conv2dInputGrad { pad, in_h, in_w }, &[gy, w])
    }

    pub fn conv2d_weight_grad(
        &mut self,
        x: NodeId,
        gy: NodeId,
        pad: usize,
        kh: usize,
        kw: usize,
    ) -> Result<NodeId> {
        self.apply(Op::Conv2dWeightGrad { pad, kh, kw }, &[x, gy])
    }

    // ── Data movement ───────────────────────────────────────────────────

    pub fn gather(&mut self, x: NodeId, map: Arc<Vec<i64>>, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Gather { map, shape }, &[x])
    }

    pub fn scatter_add(
        &mut self,
        x: NodeId,
        map: Arc<Vec<i64>>,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        self.apply(Op::ScatterAdd { map, shape }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    /// Transpose of a rank-2 node.
    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 2 {
            return Err(TriqError::InvalidOp {
                op: "transpose",
                msg: format!("wants rank 2, got {s:?}"),
            });
        }
        let map = Arc::new(maps::transpose2(s[0], s[1]));
        self.gather(x, map, vec![s[1], s[0]])
    }

    /// Concatenation of same-shaped nodes along a fresh leading axis,
    /// assembled from scatter-adds into the stacked output.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TriqError::InvalidArg("stack of zero nodes".into()));
        }
        let s0 = self.shape_of(parts[0]).to_vec();
        let n: usize = s0.iter().product();
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&s0);
        let mut acc: Option<NodeId> = None;
        for (k, &p) in parts.iter().enumerate() {
            let sp = self.shape_of(p);
            if sp != s0.as_slice() {
                return Err(TriqError::ShapeMismatch {
                    op: "stack",
                    lhs: s0.clone(),
                    rhs: sp.to_vec(),
                });
            }
            let map: Vec<i64> = (0..n).map(|i| (k * n + i) as i64).collect();
            let part = self.scatter_add(p, Arc::new(map), out_shape.clone())?;
            acc = Some(match acc {
                None => part,
                Some(a) => self.add(a, part)?,
            });
        }
        Ok(acc.unwrap())
    }

    // ── Reductions and broadcasts ───────────────────────────────────────

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let map = Arc::new(maps::row_sum(1, n));
        let flat = self.reshape(x, &[n])?;
        let s = self.scatter_add(flat, map, vec![1])?;
        self.reshape(s, &[])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Row sums of an `[n,k]` node as an `[n]` vector.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 2 {
            return Err(TriqError::InvalidOp {
                op: "row_sum",
                msg: format!("wants rank 2, got {s:?}"),
            });
        }
        let map = Arc::new(maps::row_sum(s[0], s[1]));
        self.scatter_add(x, map, vec![s[0]])
    }

    /// Broadcast of an `[n]` vector across `k` columns to `[n,k]`.
    pub fn row_broadcast(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 1 {
            return Err(TriqError::InvalidOp {
                op: "row_broadcast",
                msg: format!("wants rank 1, got {s:?}"),
            });
        }
        let map = Arc::new(maps::row_broadcast(s[0], k));
        self.gather(x, map, vec![s[0], k])
    }

    /// Broadcast of a scalar node to an arbitrary shape.
    pub fn broadcast_scalar(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !self.value(x).is_scalar() {
            return Err(TriqError::InvalidOp {
                op: "broadcast_scalar",
                msg: format!("wants a scalar, got {:?}", self.shape_of(x)),
            });
        }
        let n: usize = shape.iter().product();
        let flat = self.reshape(x, &[1])?;
        let map = Arc::new(maps::broadcast_scalar(n));
        self.gather(flat, map, shape.to_vec())
    }

    /// Mean over the channel axis: `[n,c,h,w] -> [n,h,w]`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 {
            return Err(TriqError::InvalidOp {
                op: "channel_mean",
                msg: format!("wants [n,c,h,w], got {s:?}"),
            });
        }
        let map = Arc::new(maps::channel_sum(s[0], s[1], s[2], s[3]));
        let sum = self.scatter_add(x, map, vec![s[0], s[2], s[3]])?;
        self.mul_scalar(sum, 1.0 / s[1] as f64)
    }

    /// 2x2 stride-2 max pooling of `[n,c,h,w]`. The argmax selection is
    /// computed from the forward values and then frozen, so the gradient
    /// routes to the selected element only.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(TriqError::InvalidOp {
                op: "max_pool2",
                msg: format!("wants [n,c,h>=2,w>=2], got {s:?}"),
            });
        }
        let (map, shape) = maps::maxpool2_argmax(self.value(x));
        self.gather(x, Arc::new(map), shape)
    }

    /// Global average pooling: `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 {
            return Err(TriqError::InvalidOp {
                op: "global_avg_pool",
                msg: format!("wants [n,c,h,w], got {s:?}"),
            });
        }
        let hw = s[2] * s[3];
        let map = Arc::new(maps::row_sum(s[0] * s[1], hw));
        let flat = self.reshape(x, &[s[0] * s[1], hw])?;
        let sum = self.scatter_add(flat, map, vec![s[0] * s[1]])?;
        let mean = self.mul_scalar(sum, 1.0 / hw as f64)?;
        self.reshape(mean, &[s[0], s[1]])
    }

    /// Adds a per-channel bias `[c]` to a `[n,c,h,w]` node.
    pub fn bias_add_channel(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        let sb = self.shape_of(b).to_vec();
        if s.len() != 4 || sb != [s[1]] {
            return Err(TriqError::ShapeMismatch {
                op: "bias_add_channel",
                lhs: s,
                rhs: sb,
            });
        }
        let hw = s[2] * s[3];
        let mut map = vec![0i64; s[0] * s[1] * hw];
        for n in 0..s[0] {
            for c in 0..s[1] {
                for t in 0..hw {
                    map[(n * s[1] + c) * hw + t] = c as i64;
                }
            }
        }
        let bb = self.gather(b, Arc::new(map), s.clone())?;
        self.add(x, bb)
    }

    /// Adds a per-feature bias `[k]` to a `[n,k]` node.
    pub fn bias_add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        let sb = self.shape_of(b).to_vec();
        if s.len() != 2 || sb != [s[1]] {
            return Err(TriqError::ShapeMismatch {
                op: "bias_add_row",
                lhs: s,
                rhs: sb,
            });
        }
        let mut map = vec![0i64; s[0] * s[1]];
        for n in 0..s[0] {
            for k in 0..s[1] {
                map[n * s[1] + k] = k as i64;
            }
        }
        let bb = self.gather(b, Arc::new(map), s.clone())?;
        self.add(x, bb)
    }

    // ── Classification heads ────────────────────────────────────────────

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(
            Op::SoftmaxCrossEntropy {
                labels: Arc::new(labels.to_vec()),
            },
            &[logits],
        )
    }

    // ── Differentiation ─────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Emits the gradient computation as
    /// nodes and returns a cotangent handle per reachable node. Leaves the
    /// loss does not reach get zero gradients (no node is materialized for
    /// them; [`Tape::grad_tensor`] hands back zeros).
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let by_idx = self.backward_impl(loss, None)?;
        Ok(Gradients {
            tape: self.id,
            by_idx,
        })
    }

    /// The gradient of `loss` w.r.t. `wrt` as a node on this tape, ready
    /// to be built upon and differentiated again. `wrt` may be a leaf or
    /// any intermediate node. Returns a zero-valued constant when `loss`
    /// does not depend on `wrt`.
    pub fn grad_as_node(&mut self, loss: NodeId, wrt: NodeId) -> Result<NodeId> {
        self.check_owned(wrt, "grad_as_node")?;
        let by_idx = self.backward_impl(loss, Some(wrt))?;
        match by_idx.get(wrt.index()).copied().flatten() {
            Some(g) => Ok(g),
            None => {
                let z = Tensor::zeros(self.shape_of(wrt));
                Ok(self.constant(z))
            }
        }
    }

    /// Gradient value for a node as a tensor: zeros when unreachable.
    pub fn grad_tensor(&self, grads: &Gradients, id: NodeId) -> Tensor {
        match grads.node(id) {
            Some(g) => self.value(g).clone(),
            None => Tensor::zeros(self.shape_of(id)),
        }
    }

    /// Shared reverse traversal. With `target: None` cotangents flow into
    /// every gradient-requiring node; with `Some(t)` the walk is pruned to
    /// nodes through which `t` can influence the loss, which keeps
    /// first-of-two backward passes (input gradients) lean.
    fn backward_impl(&mut self, loss: NodeId, target: Option<NodeId>) -> Result<Vec<Option<NodeId>>> {
        self.check_owned(loss, "backward")?;
        if !self.value(loss).is_scalar() {
            return Err(TriqError::InvalidOp {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape_of(loss)),
            });
        }
        let top = loss.index();

        // need[i]: must a cotangent be produced for node i?
        let need: Vec<bool> = match target {
            None => self.nodes[..=top].iter().map(|n| n.requires_grad).collect(),
            Some(t) => {
                let mut dep = vec![false; top + 1];
                if t.index() <= top {
                    dep[t.index()] = true;
                    for i in t.index() + 1..=top {
                        dep[i] = self.nodes[i]
                            .inputs
                            .iter()
                            .any(|inp| dep[inp.index()]);
                    }
                }
                dep
            }
        };

        let mut by_idx: Vec<Option<NodeId>> = vec![None; top + 1];
        if !need[top] {
            return Ok(by_idx); // loss is constant w.r.t. everything asked for
        }
        by_idx[top] = Some(self.scalar(1.0));

        for idx in (0..=top).rev() {
            let Some(cot) = by_idx[idx] else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let inputs = self.nodes[idx].inputs.clone();
            let want: Vec<bool> = inputs.iter().map(|i| need[i.index()]).collect();
            if !want.iter().any(|&w| w) {
                continue;
            }
            let contribs = vjp::build(self, idx, cot, &want)?;
            for (inp, contrib) in inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                by_idx[inp.index()] = Some(match by_idx[inp.index()] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }
        Ok(by_idx)
    }

    /// Re-executes every recorded op from the leaves and returns the
    /// recomputed values. Because construction and replay share
    /// `Op::eval`, the results are bit-identical to the cached values;
    /// tests assert exactly that.
    pub fn replay_values(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let ins: Vec<&Tensor> =
                        node.inputs.iter().map(|i| &vals[i.index()]).collect();
                    node.op.eval(&ins)?
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Replays the whole tape and reports whether every recomputed value —
    /// forward nodes and any emitted gradient nodes alike — is
    /// bit-identical to the cached one.
    pub fn replay_is_bit_identical(&self) -> Result<bool> {
        let replayed = self.replay_values()?;
        Ok(replayed
            .iter()
            .zip(&self.nodes)
            .all(|(r, n)| r.shape() == n.value.shape() && r.data() == n.value.data()))
    }

    pub(crate) fn node_id_at(&self, idx: usize) -> NodeId {
        NodeId {
            tape: self.id,
            idx: idx as u32,
        }
    }
}
