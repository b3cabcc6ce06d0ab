//! Per-tensor asymmetric affine quantization.
//!
//! A range `[min, max]` (always widened to include zero) maps onto integer
//! codes `0..=2^bits-1`:
//!
//! ```text
//! scale      = (max - min) / (2^bits - 1)        (1 when max == min)
//! zero_point = clamp(round(-min / scale), 0, 2^bits - 1)
//! code(v)    = clamp(round(v / scale) + zero_point, 0, 2^bits - 1)
//! v_hat      = scale * (code - zero_point)
//! ```
//!
//! Rounding is half-away-from-zero.

use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: u8,
}

impl QuantParams {
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(DivaError::InvalidArgument(format!(
                "quantization scale must be positive, got {}",
                self.scale
            )));
        }
        if self.zero_point < 0 || self.zero_point as u32 > self.max_code() {
            return Err(DivaError::InvalidArgument(format!(
                "zero point {} outside [0, {}]",
                self.zero_point,
                self.max_code()
            )));
        }
        Ok(())
    }

    pub fn dequantize_code(&self, code: u8) -> f32 {
        (code as i32 - self.zero_point) as f32 * self.scale
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(DivaError::InvalidArgument(format!(
            "bit width must be in [2, 8], got {bits}"
        )));
    }
    Ok(())
}

/// A real interval containing zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRange {
    pub min: f32,
    pub max: f32,
}

impl QuantRange {
    pub fn new(min: f32, max: f32) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() || min > max {
            return Err(DivaError::Numerical(format!(
                "invalid quantization range [{min}, {max}]"
            )));
        }
        Ok(QuantRange {
            min: min.min(0.0),
            max: max.max(0.0),
        })
    }

    /// Range of the given values, widened to include zero.
    pub fn of(values: &[f32]) -> Result<Self> {
        let mut lo = 0.0f32;
        let mut hi = 0.0f32;
        for &v in values {
            if !v.is_finite() {
                return Err(DivaError::Numerical(
                    "cannot quantize non-finite values".into(),
                ));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok(QuantRange { min: lo, max: hi })
    }

    pub fn quantizer(&self, bits: u8) -> Quantizer {
        let levels = ((1u32 << bits) - 1) as f64;
        let span = self.max as f64 - self.min as f64;
        let (scale, inv_scale) = if span == 0.0 {
            (1.0f32, 1.0f64)
        } else {
            ((span / levels) as f32, levels / span)
        };
        let zero_point = round_half_away(-(self.min as f64) * inv_scale).clamp(0.0, levels) as i32;
        Quantizer {
            params: QuantParams {
                scale,
                zero_point,
                bits,
            },
            inv_scale,
            range: *self,
        }
    }
}

fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half away from zero
    v.round()
}

/// Quantize/dequantize operator for one tensor or activation site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantizer {
    params: QuantParams,
    inv_scale: f64,
    range: QuantRange,
}

impl Quantizer {
    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn range(&self) -> QuantRange {
        self.range
    }

    pub fn code(&self, v: f32) -> u8 {
        let levels = self.params.max_code() as f64;
        let c = round_half_away(v as f64 * self.inv_scale) + self.params.zero_point as f64;
        c.clamp(0.0, levels) as u8
    }

    /// `dequantize(quantize(v))`.
    pub fn fake(&self, v: f32) -> f32 {
        self.params.dequantize_code(self.code(v))
    }

    /// Straight-through estimator gate: gradients pass only inside the range.
    pub fn passes_gradient(&self, v: f32) -> bool {
        v >= self.range.min && v <= self.range.max
    }
}

/// Integer codes for one tensor together with their affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
    pub params: QuantParams,
}

/// Quantizes a tensor with per-tensor affine parameters.
pub fn quantize_tensor(t: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let q = QuantRange::of(t.data())?.quantizer(bits);
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        codes: t.data().iter().map(|&v| q.code(v)).collect(),
        params: q.params(),
    })
}

/// `scale * (code - zero_point)` for every code.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    q.params.validate()?;
    let max = q.params.max_code();
    if let Some(bad) = q.codes.iter().find(|&&c| c as u32 > max) {
        return Err(DivaError::InvalidArgument(format!(
            "code {bad} outside [0, {max}] for {} bits",
            q.params.bits
        )));
    }
    Tensor::new(
        q.shape.clone(),
        q.codes.iter().map(|&c| q.params.dequantize_code(c)).collect(),
    )
}

/// `dequantize(quantize(t))` in one pass.
pub fn fake_quantize(t: &Tensor, bits: u8) -> Result<Tensor> {
    let q = QuantRange::of(t.data())?.quantizer(bits);
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|&v| q.fake(v)).collect(),
    )
}
