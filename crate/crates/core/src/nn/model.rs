use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    bce_loss, bn_backward, bn_infer, bn_train, conv_backward, conv_gemm, dense_backward, dense_rows,
    dropout_mask, im2col, sigmoid, transpose_outer, BatchNorm, BnCache, Conv2d, Dense, Dims,
};
use super::tensor::Tensor;
use crate::error::{domain, shape, Error, Result};
use crate::features::InputTensor;
use crate::quant::{fake_quant_bias, fake_quant_slice, QuantScales};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Network shape and regularization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// `(channels, height, width)` of one input.
    pub input_shape: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_shape: InputTensor::SHAPE,
            conv_channels: vec![40, 80, 120, 160, 200],
            dense_units: 32,
            dropout_rate: 0.25,
            bn_eps: 1e-3,
            bn_momentum: 0.99,
        }
    }
}

impl ArchConfig {
    /// Default hyperparameters with a different convolution stack.
    pub fn with_channels(channels: &[usize]) -> Self {
        Self {
            conv_channels: channels.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(shape(format!("input shape {:?} has an empty axis", self.input_shape)));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(shape(format!("bad conv channel list {:?}", self.conv_channels)));
        }
        if self.dense_units == 0 {
            return Err(shape("dense layer needs at least one unit"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(domain(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(domain("batch norm needs eps > 0 and momentum in (0, 1)"));
        }
        Ok(())
    }

    pub fn plane(&self) -> usize {
        self.input_shape[1] * self.input_shape[2]
    }

    pub fn flatten_len(&self) -> usize {
        self.plane() * self.conv_channels.last().copied().unwrap_or(0)
    }

    /// Number of activation sites (input, each conv block, dense hidden).
    pub fn site_count(&self) -> usize {
        self.conv_channels.len() + 2
    }
}

/// Convolution followed by optional batch norm, ReLU and dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    /// `None` once folded into the convolution.
    pub bn: Option<BatchNorm<T>>,
}

/// Five conv blocks, flatten, dense + ReLU, dense + sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel<T> {
    arch: ArchConfig,
    blocks: Vec<ConvBlock<T>>,
    dense1: Dense<T>,
    dense2: Dense<T>,
}

/// Largest absolute activation seen at each quantization site.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteMaxima {
    pub input: f64,
    /// Post-ReLU output of each conv block.
    pub conv: Vec<f64>,
    /// Post-ReLU output of the hidden dense layer.
    pub dense1: f64,
}

impl SiteMaxima {
    pub fn new(blocks: usize) -> Self {
        Self {
            input: 0.0,
            conv: vec![0.0; blocks],
            dense1: 0.0,
        }
    }

    fn observe(slot: &mut f64, values: &[impl Real]) {
        for v in values {
            let a = v.as_f64().abs();
            if a > *slot {
                *slot = a;
            }
        }
    }
}

/// Parameter gradients in [`CnnModel::param_names`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

struct BlockCache<T> {
    col: Vec<T>,
    bn: Option<BnCache<T>>,
    relu: Vec<bool>,
    act_ste: Option<Vec<bool>>,
    dropout: Option<Vec<T>>,
    /// Fake-quantized weights and their pass-through mask.
    weight_fq: Option<(Vec<T>, Vec<bool>)>,
}

struct Cache<T> {
    n: usize,
    blocks: Vec<BlockCache<T>>,
    flat: Vec<T>,
    z1_relu: Vec<bool>,
    h1: Vec<T>,
    h1_ste: Option<Vec<bool>>,
    dense1_fq: Option<(Vec<T>, Vec<bool>)>,
    dense2_fq: Option<(Vec<T>, Vec<bool>)>,
}

/// Result of [`CnnModel::forward`]; train-mode passes keep what backprop needs.
pub struct ForwardPass<T> {
    pub probs: Vec<T>,
    pub logits: Vec<T>,
    cache: Option<Cache<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn retains_state(&self) -> bool {
        self.cache.is_some()
    }

    pub fn loss(&self, labels: &[T]) -> Result<T> {
        Ok(bce_loss(&self.probs, labels)?.0)
    }
}

/// Reusable buffers for allocation-free repeated inference.
#[derive(Debug, Default)]
pub struct Workspace<T> {
    x: Vec<T>,
    col: Vec<T>,
    y: Vec<T>,
    flat: Vec<T>,
    h1: Vec<T>,
    logits: Vec<T>,
    probs: Vec<T>,
    capacity: usize,
    growth_events: usize,
}

impl<T: Real> Workspace<T> {
    pub fn new() -> Self {
        Self {
            x: Vec::new(),
            col: Vec::new(),
            y: Vec::new(),
            flat: Vec::new(),
            h1: Vec::new(),
            logits: Vec::new(),
            probs: Vec::new(),
            capacity: 0,
            growth_events: 0,
        }
    }

    /// How many passes had to grow a buffer.
    pub fn growth_events(&self) -> usize {
        self.growth_events
    }

    fn settle(&mut self) {
        let cap = self.x.capacity()
            + self.col.capacity()
            + self.y.capacity()
            + self.flat.capacity()
            + self.h1.capacity()
            + self.logits.capacity()
            + self.probs.capacity();
        if cap != self.capacity {
            self.capacity = cap;
            self.growth_events += 1;
        }
    }
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit))).collect()
}

fn relu_in_place<T: Real>(v: &mut [T]) -> Vec<bool> {
    v.iter_mut()
        .map(|x| {
            let on = *x > T::zero();
            if !on {
                *x = T::zero();
            }
            on
        })
        .collect()
}

fn relu_fast<T: Real>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

fn apply_mask<T: Real>(g: &mut [T], mask: &[bool]) {
    for (v, &m) in g.iter_mut().zip(mask) {
        if !m {
            *v = T::zero();
        }
    }
}

impl<T: Real> CnnModel<T> {
    /// Glorot-uniform weights from a seeded ChaCha8 stream, zero biases,
    /// identity batch norm.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = arch.input_shape[0];
        let mut blocks = Vec::with_capacity(arch.conv_channels.len());
        for &out_ch in &arch.conv_channels {
            let weight = glorot(&mut rng, out_ch * in_ch * 9, in_ch * 9, out_ch * 9);
            blocks.push(ConvBlock {
                conv: Conv2d::new(in_ch, out_ch, weight, vec![T::zero(); out_ch])?,
                bn: Some(Self::fresh_bn(&arch, out_ch)),
            });
            in_ch = out_ch;
        }
        let (f, u) = (arch.flatten_len(), arch.dense_units);
        let dense1 = Dense::new(f, u, glorot(&mut rng, f * u, f, u), vec![T::zero(); u])?;
        let dense2 = Dense::new(u, 1, glorot(&mut rng, u, u, 1), vec![T::zero(); 1])?;
        Ok(Self {
            arch,
            blocks,
            dense1,
            dense2,
        })
    }

    /// All weights and biases zero, identity batch norm.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut in_ch = arch.input_shape[0];
        let mut blocks = Vec::new();
        for &out_ch in &arch.conv_channels {
            blocks.push(ConvBlock {
                conv: Conv2d::zeros(in_ch, out_ch),
                bn: Some(Self::fresh_bn(&arch, out_ch)),
            });
            in_ch = out_ch;
        }
        let dense1 = Dense::zeros(arch.flatten_len(), arch.dense_units);
        let dense2 = Dense::zeros(arch.dense_units, 1);
        Ok(Self {
            arch,
            blocks,
            dense1,
            dense2,
        })
    }

    fn fresh_bn(arch: &ArchConfig, channels: usize) -> BatchNorm<T> {
        BatchNorm::identity(
            channels,
            T::from_f64_lossy(arch.bn_eps),
            T::from_f64_lossy(arch.bn_momentum),
        )
    }

    /// Assembles a model from parts, checking every shape against `arch`.
    pub fn from_parts(arch: ArchConfig, blocks: Vec<ConvBlock<T>>, dense1: Dense<T>, dense2: Dense<T>) -> Result<Self> {
        arch.validate()?;
        if blocks.len() != arch.conv_channels.len() {
            return Err(shape(format!(
                "{} conv blocks for a {}-block architecture",
                blocks.len(),
                arch.conv_channels.len()
            )));
        }
        let mut in_ch = arch.input_shape[0];
        for (i, (b, &oc)) in blocks.iter().zip(&arch.conv_channels).enumerate() {
            if b.conv.in_channels != in_ch
                || b.conv.out_channels != oc
                || b.conv.weight.len() != oc * in_ch * 9
                || b.conv.bias.len() != oc
            {
                return Err(shape(format!("conv{} does not map {in_ch}->{oc} channels", i + 1)));
            }
            if let Some(bn) = &b.bn {
                let lens = [bn.gamma.len(), bn.beta.len(), bn.running_mean.len(), bn.running_var.len()];
                if lens.iter().any(|&l| l != oc) {
                    return Err(shape(format!("bn{} is not {oc}-channel", i + 1)));
                }
            }
            in_ch = oc;
        }
        let (f, u) = (arch.flatten_len(), arch.dense_units);
        if dense1.in_dim != f || dense1.out_dim != u || dense1.weight.len() != f * u || dense1.bias.len() != u {
            return Err(shape(format!("dense1 must map {f}->{u}")));
        }
        if dense2.in_dim != u || dense2.out_dim != 1 || dense2.weight.len() != u || dense2.bias.len() != 1 {
            return Err(shape(format!("dense2 must map {u}->1")));
        }
        Ok(Self {
            arch,
            blocks,
            dense1,
            dense2,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn blocks(&self) -> &[ConvBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ConvBlock<T>] {
        &mut self.blocks
    }

    pub fn dense1(&self) -> &Dense<T> {
        &self.dense1
    }

    pub fn dense2(&self) -> &Dense<T> {
        &self.dense2
    }

    pub fn dense1_mut(&mut self) -> &mut Dense<T> {
        &mut self.dense1
    }

    pub fn dense2_mut(&mut self) -> &mut Dense<T> {
        &mut self.dense2
    }

    /// True when no block carries batch norm.
    pub fn is_folded(&self) -> bool {
        self.blocks.iter().all(|b| b.bn.is_none())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            names.push(format!("conv{}.weight", i + 1));
            names.push(format!("conv{}.bias", i + 1));
            if b.bn.is_some() {
                names.push(format!("bn{}.gamma", i + 1));
                names.push(format!("bn{}.beta", i + 1));
            }
        }
        for d in ["dense1", "dense2"] {
            names.push(format!("{d}.weight"));
            names.push(format!("{d}.bias"));
        }
        names
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            v.push(&b.conv.weight);
            v.push(&b.conv.bias);
            if let Some(bn) = &b.bn {
                v.push(&bn.gamma);
                v.push(&bn.beta);
            }
        }
        v.extend([&self.dense1.weight[..], &self.dense1.bias, &self.dense2.weight, &self.dense2.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.conv.weight);
            v.push(&mut b.conv.bias);
            if let Some(bn) = &mut b.bn {
                v.push(&mut bn.gamma);
                v.push(&mut bn.beta);
            }
        }
        v.push(&mut self.dense1.weight);
        v.push(&mut self.dense1.bias);
        v.push(&mut self.dense2.weight);
        v.push(&mut self.dense2.bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// SHA-256 over every parameter and batch-norm statistic.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |name: &str, vals: &[T]| {
            h.update(name.as_bytes());
            for v in vals {
                h.update(v.as_f64().to_le_bytes());
            }
        };
        for (name, p) in self.param_names().iter().zip(self.params()) {
            feed(name, p);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(bn) = &b.bn {
                feed(&format!("bn{}.running_mean", i + 1), &bn.running_mean);
                feed(&format!("bn{}.running_var", i + 1), &bn.running_var);
            }
        }
        hex::encode(h.finalize())
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Real>(&self) -> CnnModel<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        let conv_dense = |d: &Dense<T>| Dense {
            in_dim: d.in_dim,
            out_dim: d.out_dim,
            weight: c(&d.weight),
            bias: c(&d.bias),
        };
        CnnModel {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    conv: Conv2d {
                        in_channels: b.conv.in_channels,
                        out_channels: b.conv.out_channels,
                        weight: c(&b.conv.weight),
                        bias: c(&b.conv.bias),
                    },
                    bn: b.bn.as_ref().map(|bn| BatchNorm {
                        gamma: c(&bn.gamma),
                        beta: c(&bn.beta),
                        running_mean: c(&bn.running_mean),
                        running_var: c(&bn.running_var),
                        eps: U::from_f64_lossy(bn.eps.as_f64()),
                        momentum: U::from_f64_lossy(bn.momentum.as_f64()),
                    }),
                })
                .collect(),
            dense1: conv_dense(&self.dense1),
            dense2: conv_dense(&self.dense2),
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.arch.input_shape {
            return Err(shape(format!(
                "expected batch (N, {}, {}, {}), got {s:?}",
                self.arch.input_shape[0], self.arch.input_shape[1], self.arch.input_shape[2]
            )));
        }
        Ok(s[0])
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<ForwardPass<T>> {
        self.forward_with(batch, mode, rng, None)
    }

    /// Forward pass, optionally fake-quantizing weights, biases and
    /// activations at fixed scales. Train mode normalizes with batch
    /// statistics, updates running statistics, samples dropout masks from
    /// `rng`, and keeps the state needed by [`CnnModel::backward`].
    pub fn forward_with<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
        scales: Option<&QuantScales>,
    ) -> Result<ForwardPass<T>> {
        let n = self.check_batch(batch)?;
        if let Some(s) = scales {
            if !self.is_folded() {
                return Err(Error::Usage("fake quantization needs a batch-norm-folded model".into()));
            }
            s.check_layers(self.blocks.len() + 2)?;
        }
        let [c0, h, w] = self.arch.input_shape;
        let d = Dims { n, h, w };
        let np = d.per_channel();
        let train = mode == Mode::Train;
        let rate = self.arch.dropout_rate;

        let mut x = Vec::new();
        transpose_outer(batch.data(), n, c0, d.plane(), &mut x);
        if let Some(s) = scales {
            fake_quant_slice(&mut x, s.input_frac);
        }

        let mut block_caches = Vec::new();
        let mut in_ch = c0;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let oc = block.conv.out_channels;
            let (weight, bias, weight_fq) = match scales {
                Some(s) => {
                    let ls = &s.layers[i];
                    let mut wq = block.conv.weight.clone();
                    let mask = fake_quant_slice(&mut wq, ls.weight_frac);
                    let bq = fake_quant_bias(&block.conv.bias, ls.in_frac + ls.weight_frac);
                    (Cow::Owned(wq.clone()), Cow::Owned(bq), Some((wq, mask)))
                }
                None => (Cow::Borrowed(&block.conv.weight[..]), Cow::Borrowed(&block.conv.bias[..]), None),
            };
            let mut col = Vec::new();
            im2col(&x, in_ch, d, &mut col);
            let mut out = Vec::new();
            conv_gemm(&weight, &bias, oc, in_ch * 9, &col, np, &mut out);
            let bn = match &mut block.bn {
                Some(bn) if train => Some(bn_train(bn, &mut out, np)?),
                Some(bn) => {
                    bn_infer(bn, &mut out, np);
                    None
                }
                None => None,
            };
            let relu = relu_in_place(&mut out);
            let act_ste = scales.map(|s| fake_quant_slice(&mut out, s.layers[i].out_frac.unwrap_or(0)));
            let dropout = (train && rate > 0.0).then(|| {
                let mut mask = Vec::new();
                dropout_mask(out.len(), rate, rng, &mut mask);
                for (v, m) in out.iter_mut().zip(&mask) {
                    *v *= *m;
                }
                mask
            });
            if train {
                block_caches.push(BlockCache {
                    col,
                    bn,
                    relu,
                    act_ste,
                    dropout,
                    weight_fq,
                });
            }
            x = out;
            in_ch = oc;
        }

        let f = self.arch.flatten_len();
        let u = self.arch.dense_units;
        let mut flat = Vec::new();
        transpose_outer(&x, in_ch, n, d.plane(), &mut flat);

        let dense_fq = |layer: &Dense<T>, idx: usize| {
            scales.map(|s| {
                let ls = &s.layers[idx];
                let mut wq = layer.weight.clone();
                let mask = fake_quant_slice(&mut wq, ls.weight_frac);
                (wq, mask, fake_quant_bias(&layer.bias, ls.in_frac + ls.weight_frac))
            })
        };
        let nb = self.blocks.len();
        let d1 = dense_fq(&self.dense1, nb);
        let mut h1 = Vec::new();
        match &d1 {
            Some((wq, _, bq)) => dense_rows(wq, bq, f, u, &flat, n, &mut h1),
            None => dense_rows(&self.dense1.weight, &self.dense1.bias, f, u, &flat, n, &mut h1),
        }
        let z1_relu = relu_in_place(&mut h1);
        let h1_ste = scales.map(|s| fake_quant_slice(&mut h1, s.layers[nb].out_frac.unwrap_or(0)));

        let d2 = dense_fq(&self.dense2, nb + 1);
        let mut logits = Vec::new();
        match &d2 {
            Some((wq, _, bq)) => dense_rows(wq, bq, u, 1, &h1, n, &mut logits),
            None => dense_rows(&self.dense2.weight, &self.dense2.bias, u, 1, &h1, n, &mut logits),
        }
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();

        let cache = train.then(|| Cache {
            n,
            blocks: block_caches,
            flat,
            z1_relu,
            h1,
            h1_ste,
            dense1_fq: d1.map(|(w, m, _)| (w, m)),
            dense2_fq: d2.map(|(w, m, _)| (w, m)),
        });
        Ok(ForwardPass { probs, logits, cache })
    }

    /// Gradients of the mean binary cross-entropy of `pass` against `labels`.
    ///
    /// Fake-quantized passes use the straight-through estimator: rounding is
    /// treated as identity inside the clamp range and blocks the gradient
    /// outside it.
    pub fn backward(&self, pass: &ForwardPass<T>, labels: &[T]) -> Result<Gradients<T>> {
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("backward needs a train-mode forward pass".into()))?;
        let n = cache.n;
        if labels.len() != n {
            return Err(shape(format!("{n} predictions vs {} labels", labels.len())));
        }
        let (_, dp) = bce_loss(&pass.probs, labels)?;
        let dz2: Vec<T> = dp
            .iter()
            .zip(&pass.probs)
            .map(|(&g, &p)| g * p * (T::one() - p))
            .collect();

        let u = self.arch.dense_units;
        let f = self.arch.flatten_len();
        let w2 = cache.dense2_fq.as_ref().map_or(&self.dense2.weight[..], |(w, _)| w);
        let (mut dw2, db2, mut dh1) = dense_backward(w2, u, 1, &cache.h1, &dz2, n);
        if let Some((_, m)) = &cache.dense2_fq {
            apply_mask(&mut dw2, m);
        }
        if let Some(m) = &cache.h1_ste {
            apply_mask(&mut dh1, m);
        }
        apply_mask(&mut dh1, &cache.z1_relu);
        let w1 = cache.dense1_fq.as_ref().map_or(&self.dense1.weight[..], |(w, _)| w);
        let (mut dw1, db1, dflat) = dense_backward(w1, f, u, &cache.flat, &dh1, n);
        if let Some((_, m)) = &cache.dense1_fq {
            apply_mask(&mut dw1, m);
        }

        let [c0, h, w] = self.arch.input_shape;
        let d = Dims { n, h, w };
        let np = d.per_channel();
        let last = *self.arch.conv_channels.last().unwrap();
        let mut dact = Vec::new();
        transpose_outer(&dflat, n, last, d.plane(), &mut dact);

        let mut per_block = Vec::with_capacity(self.blocks.len());
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if let Some(m) = &bc.dropout {
                for (g, &k) in dact.iter_mut().zip(m) {
                    *g *= k;
                }
            }
            if let Some(m) = &bc.act_ste {
                apply_mask(&mut dact, m);
            }
            apply_mask(&mut dact, &bc.relu);
            let bn_grads = match (&block.bn, &bc.bn) {
                (Some(bn), Some(bcache)) => Some(bn_backward(bn, bcache, &mut dact, np)),
                _ => None,
            };
            let in_ch = if i == 0 { c0 } else { self.blocks[i - 1].conv.out_channels };
            let weight = bc.weight_fq.as_ref().map_or(&block.conv.weight[..], |(w, _)| w);
            let mut g = conv_backward(weight, in_ch, block.conv.out_channels, &bc.col, &dact, d, i > 0);
            if let Some((_, m)) = &bc.weight_fq {
                apply_mask(&mut g.weight, m);
            }
            per_block.push((g.weight, g.bias, bn_grads));
            dact = g.input.unwrap_or_default();
        }

        let mut values = Vec::new();
        for (dw, db, bn) in per_block.into_iter().rev() {
            values.push(dw);
            values.push(db);
            if let Some((dg, dbeta)) = bn {
                values.push(dg);
                values.push(dbeta);
            }
        }
        values.extend([dw1, db1, dw2, db2]);
        Ok(Gradients { values })
    }

    /// Inference on `(N, C, H, W)` values through a reusable workspace;
    /// returns the `N` probabilities. When `sites` is given, the largest
    /// absolute activation at every quantization site is folded into it.
    pub fn infer_with<'w>(
        &self,
        batch: &[T],
        n: usize,
        ws: &'w mut Workspace<T>,
        mut sites: Option<&mut SiteMaxima>,
    ) -> Result<&'w [T]> {
        let [c0, h, w] = self.arch.input_shape;
        if n == 0 || batch.len() != n * c0 * h * w {
            return Err(shape(format!("{} values do not form {n} inputs", batch.len())));
        }
        let d = Dims { n, h, w };
        let np = d.per_channel();
        let widest = self.arch.conv_channels.iter().copied().max().unwrap_or(0).max(c0) * np;
        for buf in [&mut ws.x, &mut ws.y] {
            buf.reserve(widest.saturating_sub(buf.len()));
        }
        transpose_outer(batch, n, c0, d.plane(), &mut ws.x);
        if let Some(s) = sites.as_deref_mut() {
            SiteMaxima::observe(&mut s.input, &ws.x);
        }
        let mut in_ch = c0;
        for (i, block) in self.blocks.iter().enumerate() {
            im2col(&ws.x, in_ch, d, &mut ws.col);
            let oc = block.conv.out_channels;
            conv_gemm(&block.conv.weight, &block.conv.bias, oc, in_ch * 9, &ws.col, np, &mut ws.y);
            if let Some(bn) = &block.bn {
                bn_infer(bn, &mut ws.y, np);
            }
            relu_fast(&mut ws.y);
            if let Some(s) = sites.as_deref_mut() {
                SiteMaxima::observe(&mut s.conv[i], &ws.y);
            }
            std::mem::swap(&mut ws.x, &mut ws.y);
            in_ch = oc;
        }
        transpose_outer(&ws.x, in_ch, n, d.plane(), &mut ws.flat);
        let (f, u) = (self.arch.flatten_len(), self.arch.dense_units);
        dense_rows(&self.dense1.weight, &self.dense1.bias, f, u, &ws.flat, n, &mut ws.h1);
        relu_fast(&mut ws.h1);
        if let Some(s) = sites.as_deref_mut() {
            SiteMaxima::observe(&mut s.dense1, &ws.h1);
        }
        dense_rows(&self.dense2.weight, &self.dense2.bias, u, 1, &ws.h1, n, &mut ws.logits);
        ws.probs.clear();
        ws.probs.extend(ws.logits.iter().map(|&z| sigmoid(z)));
        ws.settle();
        Ok(&ws.probs)
    }

    /// Deterministic infer-mode probabilities for a batch tensor.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let n = self.check_batch(batch)?;
        let mut ws = Workspace::new();
        Ok(self.infer_with(batch.data(), n, &mut ws, None)?.to_vec())
    }

    /// Probabilities for windows, evaluated in fixed chunks of 256.
    pub fn predict(&self, inputs: &[InputTensor]) -> Result<Vec<T>> {
        let mut ws = Workspace::new();
        let mut out = Vec::with_capacity(inputs.len());
        let mut buf = Vec::new();
        for chunk in inputs.chunks(256) {
            buf.clear();
            buf.resize(chunk.len() * crate::features::TENSOR_LEN, T::zero());
            for (dst, t) in buf.chunks_exact_mut(crate::features::TENSOR_LEN).zip(chunk) {
                t.write_real(dst);
            }
            out.extend_from_slice(self.infer_with(&buf, chunk.len(), &mut ws, None)?);
        }
        Ok(out)
    }
}
