//! The tape's operator set: forward evaluation plus shape validation.
//!
//! `Op::eval` is the single source of truth for forward values — node
//! construction and tape replay both go through it, which is what makes
//! replay bit-identical by construction.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use crate::error::{Result, TriqError};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Op {
    /// Input node; holds a caller-provided value. Never re-evaluated.
    Leaf,
    /// Elementwise on same-shaped operands.
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    /// max(x, 0). Backward uses the convention relu'(0) = 0.
    Relu,
    Sigmoid,
    Sqrt,
    Abs,
    Exp,
    Log,
    Clip { lo: f64, hi: f64 },
    /// atan2(y, x), elementwise on same-shaped operands.
    Atan2,
    /// x - period * round(x / period): wraps into [-period/2, period/2).
    /// Gradient passes straight through (the staircase term is constant
    /// almost everywhere).
    AngleWrap { period: f64 },
    /// [n,k] @ [k,m].
    MatMul,
    /// Stride-1 zero-padded cross-correlation of [n,ci,h,w] by [co,ci,kh,kw].
    Conv2d { pad: usize },
    /// Adjoint of Conv2d w.r.t. its input; operands (gy, kernel).
    Conv2dInputGrad { pad: usize, in_h: usize, in_w: usize },
    /// Adjoint of Conv2d w.r.t. its kernel; operands (x, gy).
    Conv2dWeightGrad { pad: usize, kh: usize, kw: usize },
    /// out[i] = x[map[i]], with map entry -1 producing 0. Covers
    /// transposes, broadcasts, slicing, pooling selections, padding.
    Gather { map: Arc<Vec<i64>>, shape: Vec<usize> },
    /// out[map[i]] += x[i], with map entry -1 dropping the element.
    /// Adjoint of Gather under the same map; covers reductions.
    ScatterAdd { map: Arc<Vec<i64>>, shape: Vec<usize> },
    Reshape { shape: Vec<usize> },
    /// Row-wise softmax of [n,k].
    Softmax,
    /// Mean softmax cross-entropy of [n,k] logits against class labels,
    /// fused through log-sum-exp. Produces a scalar.
    SoftmaxCrossEntropy { labels: Arc<Vec<usize>> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Clip { .. } => "clip",
            Op::Atan2 => "atan2",
            Op::AngleWrap { .. } => "angle_wrap",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Reshape { .. } => "reshape",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Atan2 | Op::MatMul => 2,
            Op::Conv2d { .. } | Op::Conv2dInputGrad { .. } | Op::Conv2dWeightGrad { .. } => 2,
            _ => 1,
        }
    }

    /// Computes the output tensor, validating operand shapes.
    pub fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.arity() {
            return Err(TriqError::InvalidOp {
                op: self.name(),
                msg: format!("expected {} operands, got {}", self.arity(), inputs.len()),
            });
        }
        match self {
            Op::Leaf => Err(TriqError::InvalidOp {
                op: "leaf",
                msg: "leaf nodes are never re-evaluated from operands".into(),
            }),

            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Atan2 => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(TriqError::ShapeMismatch {
                        op: self.name(),
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let f: fn(f64, f64) -> f64 = match self {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    Op::Mul => |x, y| x * y,
                    Op::Div => |x, y| x / y,
                    Op::Atan2 => |y, x| y.atan2(x),
                    _ => unreachable!(),
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Ok(Tensor::from_raw(a.shape().to_vec(), data))
            }

            Op::AddScalar(c) => Ok(unary(inputs[0], |v| v + c)),
            Op::MulScalar(c) => Ok(unary(inputs[0], |v| v * c)),
            Op::Relu => Ok(unary(inputs[0], |v| if v > 0.0 { v } else { 0.0 })),
            Op::Sigmoid => Ok(unary(inputs[0], |v| 1.0 / (1.0 + (-v).exp()))),
            Op::Sqrt => Ok(unary(inputs[0], f64::sqrt)),
            Op::Abs => Ok(unary(inputs[0], f64::abs)),
            Op::Exp => Ok(unary(inputs[0], f64::exp)),
            Op::Log => Ok(unary(inputs[0], f64::ln)),
            Op::Clip { lo, hi } => {
                if lo > hi {
                    return Err(TriqError::InvalidOp {
                        op: "clip",
                        msg: format!("empty range [{lo}, {hi}]"),
                    });
                }
                let (lo, hi) = (*lo, *hi);
                Ok(unary(inputs[0], move |v| v.clamp(lo, hi)))
            }
            Op::AngleWrap { period } => {
                if *period <= 0.0 {
                    return Err(TriqError::InvalidOp {
                        op: "angle_wrap",
                        msg: format!("period must be positive, got {period}"),
                    });
                }
                let p = *period;
                Ok(unary(inputs[0], move |v| v - p * (v / p).round()))
            }

            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (a.shape(), b.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(TriqError::ShapeMismatch {
                        op: "matmul",
                        lhs: sa.to_vec(),
                        rhs: sb.to_vec(),
                    });
                }
                let data = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
                Ok(Tensor::from_raw(vec![sa[0], sb[1]], data))
            }

            Op::Conv2d { pad } => {
                let g = conv_geom(inputs[0].shape(), inputs[1].shape(), *pad, "conv2d")?;
                let data = kernels::conv2d(inputs[0].data(), inputs[1].data(), g);
                Ok(Tensor::from_raw(vec![g.n, g.co, g.out_h(), g.out_w()], data))
            }

            Op::Conv2dInputGrad { pad, in_h, in_w } => {
                let (gy, w) = (inputs[0], inputs[1]);
                let (sg, sw) = (gy.shape(), w.shape());
                if sg.len() != 4 || sw.len() != 4 || sg[1] != sw[0] {
                    return Err(TriqError::ShapeMismatch {
                        op: "conv2d_input_grad",
                        lhs: sg.to_vec(),
                        rhs: sw.to_vec(),
                    });
                }
                let g = ConvGeom {
                    n: sg[0],
                    ci: sw[1],
                    h: *in_h,
                    w: *in_w,
                    co: sw[0],
                    kh: sw[2],
                    kw: sw[3],
                    pad: *pad,
                };
                if g.out_h() != sg[2] || g.out_w() != sg[3] {
                    return Err(TriqError::InvalidOp {
                        op: "conv2d_input_grad",
                        msg: format!(
                            "cotangent spatial dims {:?} inconsistent with input {}x{} kernel {}x{} pad {}",
                            &sg[2..], in_h, in_w, sw[2], sw[3], pad
                        ),
                    });
                }
                let data = kernels::conv2d_input_grad(gy.data(), w.data(), g);
                Ok(Tensor::from_raw(vec![g.n, g.ci, g.h, g.w], data))
            }

            Op::Conv2dWeightGrad { pad, kh, kw } => {
                let (x, gy) = (inputs[0], inputs[1]);
                let (sx, sg) = (x.shape(), gy.shape());
                if sx.len() != 4 || sg.len() != 4 || sx[0] != sg[0] {
                    return Err(TriqError::ShapeMismatch {
                        op: "conv2d_weight_grad",
                        lhs: sx.to_vec(),
                        rhs: sg.to_vec(),
                    });
                }
                let g = ConvGeom {
                    n: sx[0],
                    ci: sx[1],
                    h: sx[2],
                    w: sx[3],
                    co: sg[1],
                    kh: *kh,
                    kw: *kw,
                    pad: *pad,
                };
                if g.out_h() != sg[2] || g.out_w() != sg[3] {
                    return Err(TriqError::InvalidOp {
                        op: "conv2d_weight_grad",
                        msg: format!(
                            "cotangent spatial dims {:?} inconsistent with input {:?} kernel {}x{} pad {}",
                            &sg[2..], &sx[2..], kh, kw, pad
                        ),
                    });
                }
                let data = kernels::conv2d_weight_grad(x.data(), gy.data(), g);
                Ok(Tensor::from_raw(vec![g.co, g.ci, g.kh, g.kw], data))
            }

            Op::Gather { map, shape } => {
                let x = inputs[0].data();
                let n: usize = shape.iter().product();
                if map.len() != n {
                    return Err(TriqError::InvalidOp {
                        op: "gather",
                        msg: format!("map length {} != output elements {}", map.len(), n),
                    });
                }
                let mut out = vec![0.0; n];
                for (o, &src) in out.iter_mut().zip(map.iter()) {
                    if src >= 0 {
                        debug_assert!((src as usize) < x.len(), "gather map out of range");
                        *o = x[src as usize];
                    }
                }
                Ok(Tensor::from_raw(shape.clone(), out))
            }

            Op::ScatterAdd { map, shape } => {
                let x = inputs[0].data();
                if map.len() != x.len() {
                    return Err(TriqError::InvalidOp {
                        op: "scatter_add",
                        msg: format!("map length {} != input elements {}", map.len(), x.len()),
                    });
                }
                let n: usize = shape.iter().product();
                let mut out = vec![0.0; n];
                for (&v, &dst) in x.iter().zip(map.iter()) {
                    if dst >= 0 {
                        debug_assert!((dst as usize) < n, "scatter map out of range");
                        out[dst as usize] += v;
                    }
                }
                Ok(Tensor::from_raw(shape.clone(), out))
            }

            Op::Reshape { shape } => inputs[0].reshaped(shape),

            Op::Softmax => {
                let x = inputs[0];
                let s = x.shape();
                if s.len() != 2 {
                    return Err(TriqError::InvalidOp {
                        op: "softmax",
                        msg: format!("wants [n,k], got {s:?}"),
                    });
                }
                let data = kernels::softmax_rows(x.data(), s[0], s[1]);
                Ok(Tensor::from_raw(s.to_vec(), data))
            }

            Op::SoftmaxCrossEntropy { labels } => {
                let x = inputs[0];
                let s = x.shape();
                if s.len() != 2 || s[0] == 0 {
                    return Err(TriqError::InvalidOp {
                        op: "softmax_cross_entropy",
                        msg: format!("wants non-empty [n,k], got {s:?}"),
                    });
                }
                if labels.len() != s[0] {
                    return Err(TriqError::InvalidOp {
                        op: "softmax_cross_entropy",
                        msg: format!("{} labels for {} rows", labels.len(), s[0]),
                    });
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
                    return Err(TriqError::InvalidOp {
                        op: "softmax_cross_entropy",
                        msg: format!("label {bad} out of range for {} classes", s[1]),
                    });
                }
                let v = kernels::softmax_xent_mean(x.data(), labels, s[0], s[1]);
                Ok(Tensor::scalar(v))
            }
        }
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn conv_geom(sx: &[usize], sw: &[usize], pad: usize, op: &'static str) -> Result<ConvGeom> {
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
        return Err(TriqError::ShapeMismatch {
            op,
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        });
    }
    let g = ConvGeom {
        n: sx[0],
        ci: sx[1],
        h: sx[2],
        w: sx[3],
        co: sw[0],
        kh: sw[2],
        kw: sw[3],
        pad,
    };
    if g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw {
        return Err(TriqError::InvalidOp {
            op,
            msg: format!(
                "kernel {}x{} larger than padded input {}x{}",
                g.kh,
                g.kw,
                g.h + 2 * pad,
                g.w + 2 * pad
            ),
        });
    }
    Ok(g)
}
