//! Naive integer references for the quantized kernels.

use canids::quant::{QConvLayer, QDenseLayer, QuantTensor};

/// Rescales an accumulator by `2^-shift` in f64 (exact for |acc| < 2^53),
/// rounds half to even, then applies ReLU and the int8 ceiling.
pub fn requant(acc: i64, shift: i32) -> i8 {
    let v = (acc as f64 / 2f64.powi(shift)).round_ties_even();
    v.clamp(0.0, 127.0) as i8
}

pub fn conv_acc(input: &QuantTensor, layer: &QConvLayer) -> Vec<i64> {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let mut out = vec![0i64; layer.out_channels * h * w];
    for o in 0..layer.out_channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = layer.bias[o] as i64;
                for i in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            let wv = layer.weight[((o * c + i) * 3 + ky) * 3 + kx] as i64;
                            acc += wv * input.values[(i * h + yy as usize) * w + xx as usize] as i64;
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    out
}

pub fn conv(input: &QuantTensor, layer: &QConvLayer) -> Vec<i8> {
    let shift = layer.scales.in_frac + layer.scales.weight_frac - layer.scales.out_frac.unwrap();
    conv_acc(input, layer).into_iter().map(|a| requant(a, shift)).collect()
}

pub fn dense_acc(input: &[i8], layer: &QDenseLayer) -> Vec<i64> {
    (0..layer.out_dim)
        .map(|o| {
            let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
            layer.bias[o] as i64 + row.iter().zip(input).map(|(&w, &x)| w as i64 * x as i64).sum::<i64>()
        })
        .collect()
}

pub fn dense(input: &[i8], layer: &QDenseLayer) -> Vec<i8> {
    let shift = layer.scales.in_frac + layer.scales.weight_frac - layer.scales.out_frac.unwrap();
    dense_acc(input, layer).into_iter().map(|a| requant(a, shift)).collect()
}
