//! Vector-Jacobian products, one rule per op.
//!
//! Every rule expresses its result **with tape ops**, so the emitted
//! gradient graph is differentiable again. Rules may reference the forward
//! output (`sqrt`, `sigmoid`, `div`) or freeze data-dependent masks as
//! constants (`relu`, `abs`, `clip`), which matches the usual convention
//! that the mask is locally constant.

use super::maps;
use super::op::Op;
use super::{NodeId, Tape};
use crate::error::Result;
use crate::tensor::Tensor;

/// Builds cotangent nodes for the operands of node `idx` given the
/// cotangent `cot` of its output. `want[i]` masks operands whose gradient
/// nobody needs; the corresponding slot stays `None`.
pub(super) fn build(
    tape: &mut Tape,
    idx: usize,
    cot: NodeId,
    want: &[bool],
) -> Result<Vec<Option<NodeId>>> {
    let id = tape.node_id_at(idx);
    let op = tape.node(id).op.clone();
    let inputs = tape.node(id).inputs.clone();

    match op {
        Op::Leaf => Ok(vec![]),

        Op::Add => Ok(vec![
            if want[0] { Some(cot) } else { None },
            if want[1] { Some(cot) } else { None },
        ]),

        Op::Sub => Ok(vec![
            if want[0] { Some(cot) } else { None },
            if want[1] { Some(tape.neg(cot)?) } else { None },
        ]),

        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            Ok(vec![
                if want[0] { Some(tape.mul(cot, b)?) } else { None },
                if want[1] { Some(tape.mul(cot, a)?) } else { None },
            ])
        }

        Op::Div => {
            // y = a / b: da = g / b, db = -g * y / b
            let b = inputs[1];
            let da = if want[0] { Some(tape.div(cot, b)?) } else { None };
            let db = if want[1] {
                let yb = tape.div(id, b)?;
                let g = tape.mul(cot, yb)?;
                Some(tape.neg(g)?)
            } else {
                None
            };
            Ok(vec![da, db])
        }

        Op::AddScalar(_) => Ok(vec![Some(cot)]),
        Op::MulScalar(c) => Ok(vec![Some(tape.mul_scalar(cot, c)?)]),

        Op::Relu => {
            // relu'(0) = 0 by convention: strict comparison below.
            let mask = value_mask(tape, inputs[0], |v| v > 0.0);
            let m = tape.constant(mask);
            Ok(vec![Some(tape.mul(cot, m)?)])
        }

        Op::Sigmoid => {
            // y(1-y), built from the forward output node
            let yy = tape.mul(id, id)?;
            let d = tape.sub(id, yy)?;
            Ok(vec![Some(tape.mul(cot, d)?)])
        }

        Op::Sqrt => {
            let two_y = tape.mul_scalar(id, 2.0)?;
            Ok(vec![Some(tape.div(cot, two_y)?)])
        }

        Op::Abs => {
            let sign = value_map(tape, inputs[0], |v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            let s = tape.constant(sign);
            Ok(vec![Some(tape.mul(cot, s)?)])
        }

        Op::Exp => Ok(vec![Some(tape.mul(cot, id)?)]),

        Op::Log => Ok(vec![Some(tape.div(cot, inputs[0])?)]),

        Op::Clip { lo, hi } => {
            let mask = value_mask(tape, inputs[0], |v| v >= lo && v <= hi);
            let m = tape.constant(mask);
            Ok(vec![Some(tape.mul(cot, m)?)])
        }

        Op::Atan2 => {
            // d atan2(y,x) = (x dy - y dx) / (x^2 + y^2); the tiny epsilon
            // keeps the zero-gradient origin finite instead of NaN.
            let (y, x) = (inputs[0], inputs[1]);
            let xx = tape.mul(x, x)?;
            let yy = tape.mul(y, y)?;
            let d0 = tape.add(xx, yy)?;
            let d = tape.add_scalar(d0, 1e-12)?;
            let gy = if want[0] {
                let t = tape.div(x, d)?;
                Some(tape.mul(cot, t)?)
            } else {
                None
            };
            let gx = if want[1] {
                let t = tape.div(y, d)?;
                let m = tape.mul(cot, t)?;
                Some(tape.neg(m)?)
            } else {
                None
            };
            Ok(vec![gy, gx])
        }

        Op::AngleWrap { .. } => Ok(vec![Some(cot)]),

        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = if want[0] {
                let bt = tape.transpose2(b)?;
                Some(tape.matmul(cot, bt)?)
            } else {
                None
            };
            let db = if want[1] {
                let at = tape.transpose2(a)?;
                Some(tape.matmul(at, cot)?)
            } else {
                None
            };
            Ok(vec![da, db])
        }

        Op::Conv2d { pad } => {
            let (x, w) = (inputs[0], inputs[1]);
            let sx = tape.shape_of(x).to_vec();
            let sw = tape.shape_of(w).to_vec();
            let dx = if want[0] {
                Some(tape.conv2d_input_grad(cot, w, pad, sx[2], sx[3])?)
            } else {
                None
            };
            let dw = if want[1] {
                Some(tape.conv2d_weight_grad(x, cot, pad, sw[2], sw[3])?)
            } else {
                None
            };
            Ok(vec![dx, dw])
        }

        Op::Conv2dInputGrad { pad, .. } => {
            // A(gy, w) is bilinear; with cotangent u:
            //   d/dgy -> conv2d(u, w),  d/dw -> weight_grad(u, gy)
            let (gy, w) = (inputs[0], inputs[1]);
            let sw = tape.shape_of(w).to_vec();
            let dgy = if want[0] {
                Some(tape.conv2d(cot, w, pad)?)
            } else {
                None
            };
            let dw = if want[1] {
                Some(tape.conv2d_weight_grad(cot, gy, pad, sw[2], sw[3])?)
            } else {
                None
            };
            Ok(vec![dgy, dw])
        }

        Op::Conv2dWeightGrad { pad, .. } => {
            // B(x, gy) is bilinear; with cotangent v:
            //   d/dx -> input_grad(gy, v),  d/dgy -> conv2d(x, v)
            let (x, gy) = (inputs[0], inputs[1]);
            let sx = tape.shape_of(x).to_vec();
            let dx = if want[0] {
                Some(tape.conv2d_input_grad(gy, cot, pad, sx[2], sx[3])?)
            } else {
                None
            };
            let dgy = if want[1] { Some(tape.conv2d(x, cot, pad)?) } else { None };
            Ok(vec![dx, dgy])
        }

        Op::Gather { map, .. } => {
            let in_shape = tape.shape_of(inputs[0]).to_vec();
            Ok(vec![Some(tape.scatter_add(cot, map, in_shape)?)])
        }

        Op::ScatterAdd { map, .. } => {
            let in_shape = tape.shape_of(inputs[0]).to_vec();
            Ok(vec![Some(tape.gather(cot, map, in_shape)?)])
        }

        Op::Reshape { .. } => {
            let in_shape = tape.shape_of(inputs[0]).to_vec();
            Ok(vec![Some(tape.reshape(cot, &in_shape)?)])
        }

        Op::Softmax => {
            // ds = s * (g - rowsum(g * s))
            let s = id;
            let k = tape.shape_of(s)[1];
            let gs = tape.mul(cot, s)?;
            let rs = tape.row_sum(gs)?;
            let rb = tape.row_broadcast(rs, k)?;
            let inner = tape.sub(cot, rb)?;
            Ok(vec![Some(tape.mul(s, inner)?)])
        }

        Op::SoftmaxCrossEntropy { labels } => {
            // d/dlogits mean-CE = (softmax - onehot) / n, scaled by the
            // scalar cotangent. Softmax is emitted as a node so the rule
            // itself stays differentiable.
            let logits = inputs[0];
            let shape = tape.shape_of(logits).to_vec();
            let n = shape[0];
            let sm = tape.softmax(logits)?;
            let oh = tape.constant(maps::one_hot(&labels, shape[1]));
            let diff = tape.sub(sm, oh)?;
            let gb = tape.broadcast_scalar(cot, &shape)?;
            let prod = tape.mul(diff, gb)?;
            Ok(vec![Some(tape.mul_scalar(prod, 1.0 / n as f64)?)])
        }
    }
}

/// 0/1 mask over a node's forward values, frozen as a constant tensor.
fn value_mask(tape: &Tape, x: NodeId, pred: impl Fn(f64) -> bool) -> Tensor {
    value_map(tape, x, |v| if pred(v) { 1.0 } else { 0.0 })
}

fn value_map(tape: &Tape, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
    let v = tape.value(x);
    Tensor::from_raw(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
}
