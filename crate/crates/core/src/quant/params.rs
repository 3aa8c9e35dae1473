use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::nn::Tensor;
use crate::scalar::Real;

/// Saturation bound; -128 is never produced.
pub const QMAX: i32 = 127;
/// Finest scale handed out by [`choose_scale`].
pub const MAX_FRAC_BITS: i32 = 15;

/// Scale `2^-frac_bits`, signed 8-bit, zero point 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantParams {
    pub frac_bits: i32,
}

impl QuantParams {
    pub fn new(frac_bits: i32) -> Self {
        Self { frac_bits }
    }

    pub fn scale(&self) -> f64 {
        pow2(-self.frac_bits)
    }

    /// Largest representable magnitude.
    pub fn range(&self) -> f64 {
        QMAX as f64 * self.scale()
    }
}

pub(crate) fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Largest `f <= 15` with `max_abs <= 127 * 2^-f`.
pub fn choose_scale(max_abs: f64) -> Result<QuantParams> {
    if !max_abs.is_finite() || max_abs < 0.0 {
        return Err(domain(format!("cannot choose a scale for max |x| = {max_abs}")));
    }
    if max_abs == 0.0 {
        return Ok(QuantParams::new(MAX_FRAC_BITS));
    }
    let fits = |f: i32| max_abs <= QMAX as f64 * pow2(-f);
    let mut f = ((QMAX as f64 / max_abs).log2().floor() as i32).min(MAX_FRAC_BITS);
    while !fits(f) {
        f -= 1;
    }
    while f < MAX_FRAC_BITS && fits(f + 1) {
        f += 1;
    }
    Ok(QuantParams::new(f))
}

pub fn quantize_value(x: f64, p: QuantParams) -> i8 {
    (x * pow2(p.frac_bits)).round_ties_even().clamp(-(QMAX as f64), QMAX as f64) as i8
}

/// Int8 tensor with its scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    pub params: QuantParams,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i8>, params: QuantParams) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(crate::error::shape(format!("{} values for shape {shape:?}", values.len())));
        }
        if values.iter().any(|&v| v == i8::MIN) {
            return Err(domain("int8 tensors must stay within [-127, 127]"));
        }
        Ok(Self { shape, values, params })
    }
}

pub fn quantize_tensor<T: Real>(t: &Tensor<T>, p: QuantParams) -> QuantTensor {
    QuantTensor {
        shape: t.shape().to_vec(),
        values: t.data().iter().map(|x| quantize_value(x.as_f64(), p)).collect(),
        params: p,
    }
}

pub fn dequantize_tensor<T: Real>(q: &QuantTensor) -> Tensor<T> {
    let s = q.params.scale();
    let data = q.values.iter().map(|&v| T::from_f64_lossy(v as f64 * s)).collect();
    Tensor::new(q.shape.clone(), data).expect("quantized tensors keep a consistent shape")
}

/// Integer right shift rounding half to even, for `shift >= 0`.
pub fn round_shift_half_even(acc: i64, shift: u32) -> i64 {
    if shift == 0 {
        return acc;
    }
    if shift >= 62 {
        return 0;
    }
    let q = acc >> shift;
    let r = acc - (q << shift);
    let half = 1i64 << (shift - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Quantize-dequantize in place; returns the pass-through mask (true where
/// the scaled value lies inside the clamp range).
pub fn fake_quant_slice<T: Real>(v: &mut [T], frac_bits: i32) -> Vec<bool> {
    let up = pow2(frac_bits);
    let down = pow2(-frac_bits);
    v.iter_mut()
        .map(|x| {
            let s = x.as_f64() * up;
            let inside = s.abs() <= QMAX as f64;
            *x = T::from_f64_lossy(s.round_ties_even().clamp(-(QMAX as f64), QMAX as f64) * down);
            inside
        })
        .collect()
}

/// Rounds biases onto the 32-bit accumulator grid `2^-frac_bits`.
pub fn fake_quant_bias<T: Real>(b: &[T], frac_bits: i32) -> Vec<T> {
    let up = pow2(frac_bits);
    let down = pow2(-frac_bits);
    b.iter()
        .map(|x| {
            let q = (x.as_f64() * up).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64);
            T::from_f64_lossy(q * down)
        })
        .collect()
}

/// Scales of one weighted layer. `out_frac` is `None` for the final layer,
/// whose accumulator is dequantized directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerScales {
    pub weight_frac: i32,
    pub in_frac: i32,
    pub out_frac: Option<i32>,
}

impl LayerScales {
    pub fn accumulator_frac(&self) -> i32 {
        self.in_frac + self.weight_frac
    }

    /// Requantization right shift.
    pub fn shift(&self) -> Option<i32> {
        self.out_frac.map(|o| self.accumulator_frac() - o)
    }
}

/// Every scale of a quantized network: the input plus one entry per weighted
/// layer (conv blocks, hidden dense, output dense).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScales {
    pub input_frac: i32,
    pub layers: Vec<LayerScales>,
}

impl QuantScales {
    pub(crate) fn check_layers(&self, expected: usize) -> Result<()> {
        if self.layers.len() != expected {
            return Err(shape(format!("{} layer scales for {expected} layers", self.layers.len())));
        }
        let mut in_frac = self.input_frac;
        for (i, l) in self.layers.iter().enumerate() {
            let last = i + 1 == expected;
            if l.in_frac != in_frac || l.out_frac.is_some() == last {
                return Err(Error::Quantization {
                    layer: format!("layer {}", i + 1),
                    msg: "scale chain is inconsistent".into(),
                });
            }
            if let Some(s) = l.shift() {
                if s < 0 {
                    return Err(Error::Quantization {
                        layer: format!("layer {}", i + 1),
                        msg: format!("negative requantization shift {s}"),
                    });
                }
            }
            in_frac = l.out_frac.unwrap_or(in_frac);
        }
        Ok(())
    }
}
