use crate::error::{Error, Result};
use crate::nn::{CnnModel, ConvBlock};
use crate::scalar::Real;

/// Absorbs each block's inference-mode batch norm into its convolution:
/// `w' = w * g / sqrt(var + eps)` per output channel and
/// `b' = (b - mean) * g / sqrt(var + eps) + beta`.
pub fn fold_batchnorm<T: Real>(model: &CnnModel<T>) -> Result<CnnModel<T>> {
    let mut blocks = Vec::with_capacity(model.blocks().len());
    for (i, block) in model.blocks().iter().enumerate() {
        let mut conv = block.conv.clone();
        if let Some(bn) = &block.bn {
            let per_out = conv.kernel_len();
            for o in 0..conv.out_channels {
                let denom = bn.running_var[o] + bn.eps;
                if !(denom > T::zero()) || !denom.is_finite() {
                    return Err(Error::Numeric(format!(
                        "bn{} channel {o}: running_var + eps = {denom} is not positive",
                        i + 1
                    )));
                }
                let s = bn.gamma[o] / denom.sqrt();
                for w in &mut conv.weight[o * per_out..(o + 1) * per_out] {
                    *w *= s;
                }
                conv.bias[o] = (conv.bias[o] - bn.running_mean[o]) * s + bn.beta[o];
            }
        }
        blocks.push(ConvBlock { conv, bn: None });
    }
    CnnModel::from_parts(
        model.arch().clone(),
        blocks,
        model.dense1().clone(),
        model.dense2().clone(),
    )
}
