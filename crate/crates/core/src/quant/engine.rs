use sha2::{Digest, Sha256};

use super::calibrate::CalibrationProfile;
use super::params::{choose_scale, pow2, quantize_value, round_shift_half_even, LayerScales, QuantParams, QuantScales, QuantTensor, QMAX};
use crate::error::{shape, Error, Result};
use crate::features::InputTensor;
use crate::nn::{sigmoid, ArchConfig, CnnModel};
use crate::scalar::Real;

/// Bound on both `|bias|` and `kernel_len * 127^2`, so the 32-bit
/// accumulator can never overflow. The largest default layer (dense1,
/// 4400 inputs) stays below `7.1e7`.
pub const ACCUMULATOR_BOUND: i64 = 1 << 30;

/// Finest input scale at which binary features stay exact.
const INPUT_FRAC_CAP: i32 = 6;

/// Integer 3x3 same-padding convolution followed by ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`.
    pub weight: Vec<i8>,
    pub bias: Vec<i32>,
    pub scales: LayerScales,
}

impl QConvLayer {
    pub fn kernel_len(&self) -> usize {
        self.in_channels * 9
    }
}

/// Integer fully connected layer. Hidden layers requantize and apply ReLU;
/// the output layer exposes its raw accumulator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QDenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out][in]`.
    pub weight: Vec<i8>,
    pub bias: Vec<i32>,
    pub scales: LayerScales,
}

/// Batch-norm-folded network with int8 weights and activations.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    arch: ArchConfig,
    input_frac: i32,
    convs: Vec<QConvLayer>,
    dense1: QDenseLayer,
    dense2: QDenseLayer,
    /// Weights widened to i16 for the inner loops, in layer order.
    wide: Vec<Vec<i16>>,
}

fn layer_err(name: &str, msg: impl Into<String>) -> Error {
    Error::Quantization {
        layer: name.to_string(),
        msg: msg.into(),
    }
}

fn check_layer(name: &str, fan_in: usize, weight: &[i8], bias: &[i32], expect_w: usize, expect_b: usize) -> Result<()> {
    if weight.len() != expect_w || bias.len() != expect_b {
        return Err(shape(format!(
            "{name}: {} weights / {} biases, expected {expect_w} / {expect_b}",
            weight.len(),
            bias.len()
        )));
    }
    if weight.contains(&i8::MIN) {
        return Err(layer_err(name, "weight -128 outside the symmetric range"));
    }
    if fan_in as i64 * (QMAX * QMAX) as i64 > ACCUMULATOR_BOUND {
        return Err(layer_err(name, format!("fan-in {fan_in} can overflow the accumulator")));
    }
    if bias.iter().any(|&b| (b as i64).abs() > ACCUMULATOR_BOUND) {
        return Err(layer_err(name, "bias exceeds the accumulator bound"));
    }
    Ok(())
}

impl QuantModel {
    /// Assembles a quantized model, validating shapes, the int8 range, the
    /// accumulator bound and the scale chain.
    pub fn from_parts(
        arch: ArchConfig,
        input_frac: i32,
        convs: Vec<QConvLayer>,
        dense1: QDenseLayer,
        dense2: QDenseLayer,
    ) -> Result<Self> {
        arch.validate()?;
        if convs.len() != arch.conv_channels.len() {
            return Err(shape(format!("{} conv layers for a {}-block architecture", convs.len(), arch.conv_channels.len())));
        }
        let mut in_ch = arch.input_shape[0];
        for (i, (c, &oc)) in convs.iter().zip(&arch.conv_channels).enumerate() {
            let name = format!("conv{}", i + 1);
            if c.in_channels != in_ch || c.out_channels != oc {
                return Err(shape(format!("{name} does not map {in_ch}->{oc} channels")));
            }
            check_layer(&name, c.kernel_len(), &c.weight, &c.bias, oc * in_ch * 9, oc)?;
            in_ch = oc;
        }
        let (f, u) = (arch.flatten_len(), arch.dense_units);
        if dense1.in_dim != f || dense1.out_dim != u {
            return Err(shape(format!("dense1 must map {f}->{u}")));
        }
        if dense2.in_dim != u || dense2.out_dim != 1 {
            return Err(shape(format!("dense2 must map {u}->1")));
        }
        check_layer("dense1", f, &dense1.weight, &dense1.bias, f * u, u)?;
        check_layer("dense2", u, &dense2.weight, &dense2.bias, u, 1)?;
        let mut wide: Vec<Vec<i16>> = convs.iter().map(|c| widen(&c.weight)).collect();
        wide.push(widen(&dense1.weight));
        wide.push(widen(&dense2.weight));
        let qm = Self {
            arch,
            input_frac,
            convs,
            dense1,
            dense2,
            wide,
        };
        qm.scales().check_layers(qm.convs.len() + 2)?;
        Ok(qm)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn input_frac(&self) -> i32 {
        self.input_frac
    }

    pub fn convs(&self) -> &[QConvLayer] {
        &self.convs
    }

    pub fn dense1(&self) -> &QDenseLayer {
        &self.dense1
    }

    pub fn dense2(&self) -> &QDenseLayer {
        &self.dense2
    }

    pub fn scales(&self) -> QuantScales {
        let mut layers: Vec<LayerScales> = self.convs.iter().map(|c| c.scales).collect();
        layers.push(self.dense1.scales);
        layers.push(self.dense2.scales);
        QuantScales {
            input_frac: self.input_frac,
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum::<usize>()
            + self.dense1.weight.len()
            + self.dense1.bias.len()
            + self.dense2.weight.len()
            + self.dense2.bias.len()
    }

    /// SHA-256 over every integer tensor and scale.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.input_frac.to_le_bytes());
        let mut feed = |w: &[i8], b: &[i32], s: &LayerScales| {
            h.update(w.iter().map(|&v| v as u8).collect::<Vec<u8>>());
            for v in b {
                h.update(v.to_le_bytes());
            }
            h.update(s.weight_frac.to_le_bytes());
            h.update(s.in_frac.to_le_bytes());
            h.update(s.out_frac.unwrap_or(i32::MIN).to_le_bytes());
        };
        for c in &self.convs {
            feed(&c.weight, &c.bias, &c.scales);
        }
        feed(&self.dense1.weight, &self.dense1.bias, &self.dense1.scales);
        feed(&self.dense2.weight, &self.dense2.bias, &self.dense2.scales);
        hex::encode(h.finalize())
    }
}

fn max_abs<T: Real>(v: &[T]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
}

/// Scale selection for a folded model: per-tensor weight scales from the
/// weight max-abs, activation scales from the profile, each output scale
/// capped at the accumulator scale so every shift is non-negative. A weight
/// scale is coarsened when the bias would not fit the accumulator bound.
pub(crate) fn derive_scales<T: Real>(folded: &CnnModel<T>, profile: &CalibrationProfile) -> Result<QuantScales> {
    let nb = folded.blocks().len();
    if profile.sites.conv.len() != nb {
        return Err(shape(format!("profile covers {} conv sites, model has {nb}", profile.sites.conv.len())));
    }
    let input_frac = choose_scale(profile.sites.input)?.frac_bits.min(INPUT_FRAC_CAP);
    let mut tensors: Vec<(&[T], &[T], Option<f64>)> = folded
        .blocks()
        .iter()
        .zip(&profile.sites.conv)
        .map(|(b, &site)| (&b.conv.weight[..], &b.conv.bias[..], Some(site)))
        .collect();
    tensors.push((&folded.dense1().weight, &folded.dense1().bias, Some(profile.sites.dense1)));
    tensors.push((&folded.dense2().weight, &folded.dense2().bias, None));

    let mut in_frac = input_frac;
    let mut layers = Vec::with_capacity(tensors.len());
    for (w, b, site) in tensors {
        let mut weight_frac = choose_scale(max_abs(w))?.frac_bits;
        let bmax = max_abs(b);
        while bmax * pow2(in_frac + weight_frac) > ACCUMULATOR_BOUND as f64 {
            weight_frac -= 1;
        }
        let out_frac = match site {
            Some(m) => Some(choose_scale(m)?.frac_bits.min(in_frac + weight_frac)),
            None => None,
        };
        layers.push(LayerScales {
            weight_frac,
            in_frac,
            out_frac,
        });
        in_frac = out_frac.unwrap_or(in_frac);
    }
    Ok(QuantScales { input_frac, layers })
}

/// Post-training quantization of a batch-norm-folded model.
pub fn quantize_model<T: Real>(folded: &CnnModel<T>, profile: &CalibrationProfile) -> Result<QuantModel> {
    if !folded.is_folded() {
        return Err(Error::Usage("quantize_model needs a batch-norm-folded model".into()));
    }
    let scales = derive_scales(folded, profile)?;
    quantize_with_scales(folded, &scales)
}

fn quantize_weights<T: Real>(w: &[T], frac: i32) -> Vec<i8> {
    let p = QuantParams::new(frac);
    w.iter().map(|x| quantize_value(x.as_f64(), p)).collect()
}

fn quantize_bias<T: Real>(name: &str, b: &[T], frac: i32) -> Result<Vec<i32>> {
    let up = pow2(frac);
    b.iter()
        .map(|x| {
            let q = (x.as_f64() * up).round_ties_even();
            if q.abs() > ACCUMULATOR_BOUND as f64 {
                Err(layer_err(name, format!("bias {x} overflows at 2^-{frac}")))
            } else {
                Ok(q as i32)
            }
        })
        .collect()
}

/// Quantizes a folded model at fixed scales.
pub fn quantize_with_scales<T: Real>(folded: &CnnModel<T>, scales: &QuantScales) -> Result<QuantModel> {
    if !folded.is_folded() {
        return Err(Error::Usage("quantization needs a batch-norm-folded model".into()));
    }
    let nb = folded.blocks().len();
    scales.check_layers(nb + 2)?;
    let mut convs = Vec::with_capacity(nb);
    for (i, (b, s)) in folded.blocks().iter().zip(&scales.layers).enumerate() {
        convs.push(QConvLayer {
            in_channels: b.conv.in_channels,
            out_channels: b.conv.out_channels,
            weight: quantize_weights(&b.conv.weight, s.weight_frac),
            bias: quantize_bias(&format!("conv{}", i + 1), &b.conv.bias, s.accumulator_frac())?,
            scales: *s,
        });
    }
    let dense = |name: &str, d: &crate::nn::Dense<T>, s: &LayerScales| -> Result<QDenseLayer> {
        Ok(QDenseLayer {
            in_dim: d.in_dim,
            out_dim: d.out_dim,
            weight: quantize_weights(&d.weight, s.weight_frac),
            bias: quantize_bias(name, &d.bias, s.accumulator_frac())?,
            scales: *s,
        })
    };
    let dense1 = dense("dense1", folded.dense1(), &scales.layers[nb])?;
    let dense2 = dense("dense2", folded.dense2(), &scales.layers[nb + 1])?;
    QuantModel::from_parts(folded.arch().clone(), scales.input_frac, convs, dense1, dense2)
}

fn requant_relu(acc: i32, shift: u32) -> i8 {
    round_shift_half_even(acc as i64, shift).clamp(0, QMAX as i64) as i8
}

fn widen(v: &[i8]) -> Vec<i16> {
    v.iter().map(|&x| x as i16).collect()
}

/// Wrapping arithmetic; accumulators stay within `ACCUMULATOR_BOUND`.
#[inline(always)]
fn dot(a: &[i16], b: &[i16]) -> i32 {
    a.iter().zip(b).fold(0i32, |s, (&x, &y)| s.wrapping_add((x as i32).wrapping_mul(y as i32)))
}

/// `colt[p][(c, dy, dx)]` patches of a `[C][H][W]` int8 map, zero padded.
fn im2col_t(x: &[i8], channels: usize, h: usize, w: usize, colt: &mut Vec<i16>) {
    let k = channels * 9;
    colt.clear();
    colt.resize(h * w * k, 0);
    for y in 0..h {
        for xx in 0..w {
            let row = &mut colt[(y * w + xx) * k..][..k];
            for c in 0..channels {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for dy in 0..3 {
                    let yy = y + dy;
                    if yy == 0 || yy > h {
                        continue;
                    }
                    for dx in 0..3 {
                        let xs = xx + dx;
                        if xs == 0 || xs > w {
                            continue;
                        }
                        row[c * 9 + dy * 3 + dx] = plane[(yy - 1) * w + xs - 1] as i16;
                    }
                }
            }
        }
    }
}

/// Borrowed view of one integer layer with widened weights.
#[derive(Clone, Copy)]
struct Kernel<'a> {
    weight: &'a [i16],
    bias: &'a [i32],
    fan_in: usize,
}

#[inline(always)]
fn requant_rows(k: Kernel<'_>, cols: &[i16], rows: usize, shift: u32, out: &mut [i8]) {
    for ((wo, &b), dst) in k.weight.chunks_exact(k.fan_in).zip(k.bias).zip(out.chunks_exact_mut(rows)) {
        for (v, patch) in dst.iter_mut().zip(cols.chunks_exact(k.fan_in)) {
            *v = requant_relu(dot(wo, patch).wrapping_add(b), shift);
        }
    }
}

#[inline(always)]
fn accumulate(k: Kernel<'_>, x: &[i16], out: &mut [i32]) {
    for ((wo, &b), o) in k.weight.chunks_exact(k.fan_in).zip(k.bias).zip(out.iter_mut()) {
        *o = dot(wo, x).wrapping_add(b);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn requant_rows_avx2(k: Kernel<'_>, cols: &[i16], rows: usize, shift: u32, out: &mut [i8]) {
    requant_rows(k, cols, rows, shift, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn accumulate_avx2(k: Kernel<'_>, x: &[i16], out: &mut [i32]) {
    accumulate(k, x, out)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `out[o][r] = requant_relu(bias[o] + w[o] . cols[r])`. Integer results do
/// not depend on which instruction set runs the loop.
fn dispatch_rows(k: Kernel<'_>, cols: &[i16], rows: usize, shift: u32, out: &mut [i8]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked at runtime.
        return unsafe { requant_rows_avx2(k, cols, rows, shift, out) };
    }
    requant_rows(k, cols, rows, shift, out)
}

fn dispatch_acc(k: Kernel<'_>, x: &[i16], out: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked at runtime.
        return unsafe { accumulate_avx2(k, x, out) };
    }
    accumulate(k, x, out)
}

fn conv_kernel(x: &[i8], layer: &QConvLayer, weight: &[i16], h: usize, w: usize, colt: &mut Vec<i16>, out: &mut Vec<i8>) {
    let p = h * w;
    im2col_t(x, layer.in_channels, h, w, colt);
    out.clear();
    out.resize(layer.out_channels * p, 0);
    let k = Kernel {
        weight,
        bias: &layer.bias,
        fan_in: layer.kernel_len(),
    };
    dispatch_rows(k, colt, p, layer.scales.shift().unwrap_or(0) as u32, out);
}

fn dense_acc(x: &[i16], layer: &QDenseLayer, weight: &[i16], out: &mut Vec<i32>) {
    out.clear();
    out.resize(layer.out_dim, 0);
    let k = Kernel {
        weight,
        bias: &layer.bias,
        fan_in: layer.in_dim,
    };
    dispatch_acc(k, x, out);
}

fn check_input(q: &QuantTensor, len: usize, frac: i32, what: &str) -> Result<()> {
    if q.values.len() != len {
        return Err(shape(format!("{what}: {} input values, expected {len}", q.values.len())));
    }
    if q.params.frac_bits != frac {
        return Err(shape(format!("{what}: input at 2^-{}, layer expects 2^-{frac}", q.params.frac_bits)));
    }
    Ok(())
}

/// Integer convolution + ReLU on a `(C, H, W)` tensor.
pub fn qconv2d(input: &QuantTensor, layer: &QConvLayer) -> Result<QuantTensor> {
    if input.shape.len() != 3 || input.shape[0] != layer.in_channels {
        return Err(shape(format!("qconv2d expects ({}, H, W), got {:?}", layer.in_channels, input.shape)));
    }
    let out_frac = layer
        .scales
        .out_frac
        .ok_or_else(|| shape("conv layer has no output scale"))?;
    check_input(input, input.values.len(), layer.scales.in_frac, "qconv2d")?;
    let (h, w) = (input.shape[1], input.shape[2]);
    let (mut colt, mut out) = (Vec::new(), Vec::new());
    conv_kernel(&input.values, layer, &widen(&layer.weight), h, w, &mut colt, &mut out);
    QuantTensor::new(vec![layer.out_channels, h, w], out, QuantParams::new(out_frac))
}

/// Hidden dense layer: integer matvec, requantization, ReLU.
pub fn qdense(input: &QuantTensor, layer: &QDenseLayer) -> Result<QuantTensor> {
    let out_frac = layer
        .scales
        .out_frac
        .ok_or_else(|| shape("output dense layer has no activation scale; use qdense_accumulate"))?;
    let acc = qdense_accumulate(input, layer)?;
    let shift = (layer.scales.accumulator_frac() - out_frac) as u32;
    let values = acc.into_iter().map(|a| requant_relu(a, shift)).collect();
    QuantTensor::new(vec![layer.out_dim], values, QuantParams::new(out_frac))
}

/// Raw 32-bit accumulators (bias included) at scale `2^-(f_in + f_w)`.
pub fn qdense_accumulate(input: &QuantTensor, layer: &QDenseLayer) -> Result<Vec<i32>> {
    check_input(input, layer.in_dim, layer.scales.in_frac, "qdense")?;
    let mut out = Vec::new();
    dense_acc(&widen(&input.values), layer, &widen(&layer.weight), &mut out);
    Ok(out)
}

/// Reusable buffers for per-frame integer inference.
#[derive(Debug, Default)]
pub struct QuantEngine {
    x: Vec<i8>,
    y: Vec<i8>,
    col: Vec<i16>,
    hidden: Vec<i16>,
    acc: Vec<i32>,
    capacity: usize,
    growth_events: usize,
}

impl QuantEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// How many passes had to grow a buffer.
    pub fn growth_events(&self) -> usize {
        self.growth_events
    }

    /// Dequantized output logit.
    pub fn logit(&mut self, qm: &QuantModel, input: &InputTensor) -> f64 {
        let [_, h, w] = qm.arch.input_shape;
        let one = quantize_value(1.0, QuantParams::new(qm.input_frac));
        let widest = qm.convs.iter().map(|c| c.out_channels).max().unwrap_or(0).max(qm.arch.input_shape[0]) * h * w;
        for buf in [&mut self.x, &mut self.y] {
            buf.reserve(widest.saturating_sub(buf.len()));
        }
        self.x.clear();
        self.x.extend(input.bits().iter().map(|&b| if b == 1 { one } else { 0 }));
        let nb = qm.convs.len();
        for (layer, wide) in qm.convs.iter().zip(&qm.wide) {
            conv_kernel(&self.x, layer, wide, h, w, &mut self.col, &mut self.y);
            std::mem::swap(&mut self.x, &mut self.y);
        }
        self.hidden.clear();
        self.hidden.extend(self.x.iter().map(|&v| v as i16));
        dense_acc(&self.hidden, &qm.dense1, &qm.wide[nb], &mut self.acc);
        let shift = qm.dense1.scales.shift().unwrap_or(0) as u32;
        self.hidden.clear();
        self.hidden.extend(self.acc.iter().map(|&a| requant_relu(a, shift) as i16));
        dense_acc(&self.hidden, &qm.dense2, &qm.wide[nb + 1], &mut self.acc);
        let logit = self.acc[0] as f64 * pow2(-qm.dense2.scales.accumulator_frac());
        let cap = self.x.capacity() + self.y.capacity() + self.col.capacity() + self.hidden.capacity() + self.acc.capacity();
        if cap != self.capacity {
            self.capacity = cap;
            self.growth_events += 1;
        }
        logit
    }

    pub fn forward(&mut self, qm: &QuantModel, input: &InputTensor) -> f64 {
        sigmoid(self.logit(qm, input))
    }
}

/// Probability for one window; integer layers, float sigmoid on the
/// dequantized output.
pub fn qmodel_forward(qm: &QuantModel, input: &InputTensor) -> f64 {
    QuantEngine::new().forward(qm, input)
}

/// Input tensor quantized at the model's input scale.
pub fn quantize_input(qm: &QuantModel, input: &InputTensor) -> QuantTensor {
    let p = QuantParams::new(qm.input_frac);
    let values = input.bits().iter().map(|&b| quantize_value(b as f64, p)).collect();
    QuantTensor {
        shape: InputTensor::SHAPE.to_vec(),
        values,
        params: p,
    }
}
