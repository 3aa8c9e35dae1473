//! Symmetric int8 quantization with power-of-two scales.
//!
//! A value `x` at `frac_bits = f` is stored as
//! `q = clamp(round_half_even(x * 2^f), -127, 127)`, so every rescale between
//! layers is a rounding right shift. Weights and activations are per-tensor;
//! biases are 32-bit at the accumulator scale `2^-(f_in + f_w)`.
//!
//! Pipeline: [`fold_batchnorm`] → [`calibrate`] → [`quantize_model`] →
//! [`qmodel_forward`], with [`fine_tune_quantized`] as an optional
//! straight-through-estimator pass at frozen scales.

mod calibrate;
mod engine;
mod finetune;
mod fold;
mod params;

pub use calibrate::{calibrate, CalibrationProfile};
pub use engine::{
    qconv2d, qdense, qdense_accumulate, qmodel_forward, quantize_input, quantize_model, quantize_with_scales,
    QConvLayer, QDenseLayer, QuantEngine, QuantModel, ACCUMULATOR_BOUND,
};
pub use finetune::{fine_tune_quantized, FineTuneConfig};
pub use fold::fold_batchnorm;
pub use params::{
    choose_scale, dequantize_tensor, fake_quant_bias, fake_quant_slice, quantize_tensor,
    quantize_value, round_shift_half_even, LayerScales, QuantParams, QuantScales, QuantTensor,
    MAX_FRAC_BITS, QMAX,
};
