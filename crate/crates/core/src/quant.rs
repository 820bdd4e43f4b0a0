//! Symmetric per-tensor fake quantization with a clipped straight-through
//! estimator, expressed as tape ops so the quantized forward pass stays
//! differentiable (to second order) through the surrogate.
//!
//! A width of 32 means "leave the tensor alone": the helpers return the
//! input node unchanged, so a full-precision variant is bit-identical to
//! running without any quantization at all.

use crate::error::{Result, TriqError};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Bit widths a variant may use: 2..=8, or 32 for full precision.
pub const FULL_PRECISION_BITS: u8 = 32;

/// Frozen parameters of one symmetric per-tensor quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub bits: u8,
    /// Positive step size; codes are `round(x / scale)` clipped to the
    /// signed range. A scale of 1.0 is substituted when calibration sees
    /// an all-zero tensor.
    pub scale: f64,
}

impl QuantSpec {
    /// Largest representable code magnitude, `2^(bits-1) - 1`.
    pub fn qmax(&self) -> f64 {
        ((1u32 << (self.bits - 1)) - 1) as f64
    }

    /// Clip bound in real units.
    pub fn clip_bound(&self) -> f64 {
        self.qmax() * self.scale
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == FULL_PRECISION_BITS || (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(TriqError::InvalidArg(format!(
            "unsupported bit width {bits}: expected 2..=8 or 32"
        )))
    }
}

/// Calibrates a quantizer for `values`: scale = max|x| / qmax, with 1.0
/// substituted for an all-zero tensor so the quantizer stays well-defined.
pub fn calibrate(values: &Tensor, bits: u8) -> Result<QuantSpec> {
    check_bits(bits)?;
    if bits == FULL_PRECISION_BITS {
        return Ok(QuantSpec { bits, scale: 1.0 });
    }
    let qmax = ((1u32 << (bits - 1)) - 1) as f64;
    let m = values.max_abs();
    let scale = if m == 0.0 { 1.0 } else { m / qmax };
    Ok(QuantSpec { bits, scale })
}

/// Calibrates from a running maximum of |x| rather than one tensor.
pub fn calibrate_from_max_abs(max_abs: f64, bits: u8) -> Result<QuantSpec> {
    check_bits(bits)?;
    if bits == FULL_PRECISION_BITS {
        return Ok(QuantSpec { bits, scale: 1.0 });
    }
    let qmax = ((1u32 << (bits - 1)) - 1) as f64;
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / qmax };
    Ok(QuantSpec { bits, scale })
}

/// The dequantized value of `x` under `spec`, computed outside any tape.
/// Rounding is half-away-from-zero.
pub fn quantize_values(x: &Tensor, spec: &QuantSpec) -> Tensor {
    if spec.bits == FULL_PRECISION_BITS {
        return x.clone();
    }
    let qmax = spec.qmax();
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| (v / spec.scale).round().clamp(-qmax, qmax) * spec.scale)
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Emits the fake-quantized value of node `x` with a clipped
/// straight-through estimator.
///
/// The result is the composite `x * m + c` where `m` is a frozen 0/1 mask
/// (1 where |x| lies inside the clip range) and `c = Q(x) - x * m` is a
/// frozen constant. Its value equals the dequantized `Q(x)` exactly, and
/// its derivative with respect to `x` is exactly `m`: 1 inside the
/// clipping range, 0 outside. For bits = 32 the input node is returned
/// unchanged.
pub fn fake_quantize(tape: &mut Tape, x: NodeId, spec: &QuantSpec) -> Result<NodeId> {
    check_bits(spec.bits)?;
    if spec.bits == FULL_PRECISION_BITS {
        return Ok(x);
    }
    if spec.scale <= 0.0 || !spec.scale.is_finite() {
        return Err(TriqError::InvalidArg(format!(
            "quantizer scale must be positive and finite, got {}",
            spec.scale
        )));
    }
    let v = tape.value(x).clone();
    let q = quantize_values(&v, spec);
    let bound = spec.clip_bound();
    let shape = v.shape().to_vec();
    let mask: Vec<f64> = v
        .data()
        .iter()
        .map(|&a| if a.abs() <= bound { 1.0 } else { 0.0 })
        .collect();
    let offset: Vec<f64> = q
        .data()
        .iter()
        .zip(v.data())
        .zip(&mask)
        .map(|((&qv, &xv), &m)| qv - xv * m)
        .collect();
    let m = tape.constant(Tensor::new(shape.clone(), mask).unwrap());
    let c = tape.constant(Tensor::new(shape, offset).unwrap());
    let xm = tape.mul(x, m)?;
    tape.add(xm, c)
}

// ── tests ──────────────────────────────────────────────────────────────
