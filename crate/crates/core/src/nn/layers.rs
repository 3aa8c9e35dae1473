use rand::Rng;

use super::model::Mode;
use super::tensor::Tensor;
use crate::error::{domain, shape, Result};
use crate::scalar::Real;

/// Probability clamp applied before taking logs in [`bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

/// Batch geometry of a channel-major activation `[C][N][H][W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel across the batch.
    pub fn per_channel(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Reorders `[N][C][P]` into `[C][N][P]` (and back, with the roles swapped).
pub(crate) fn transpose_outer<T: Copy>(src: &[T], outer: usize, inner: usize, plane: usize, dst: &mut Vec<T>) {
    dst.clear();
    dst.reserve(src.len());
    for i in 0..inner {
        for o in 0..outer {
            let at = (o * inner + i) * plane;
            dst.extend_from_slice(&src[at..at + plane]);
        }
    }
}

/// 3x3 convolution, stride 1, zero "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weight.len() != out_channels * in_channels * 9 || bias.len() != out_channels {
            return Err(shape(format!(
                "conv {in_channels}->{out_channels} needs {} weights and {out_channels} biases, got {} and {}",
                out_channels * in_channels * 9,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            weight,
            bias,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![T::zero(); out_channels * in_channels * 9],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.in_channels * 9
    }
}

/// Lays out 3x3 neighbourhoods as `col[(c, dy, dx)][n, y, x]`.
pub(crate) fn im2col<T: Real>(x: &[T], channels: usize, d: Dims, col: &mut Vec<T>) {
    let (p, np) = (d.plane(), d.per_channel());
    col.clear();
    col.resize(channels * 9 * np, T::zero());
    for c in 0..channels {
        let src = &x[c * np..(c + 1) * np];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut col[(c * 9 + dy * 3 + dx) * np..][..np];
                let x0 = 1usize.saturating_sub(dx);
                let x1 = (d.w + 1).saturating_sub(dx).min(d.w);
                if x0 >= x1 {
                    continue;
                }
                for n in 0..d.n {
                    for y in 0..d.h {
                        let yy = y + dy;
                        if yy == 0 || yy > d.h {
                            continue;
                        }
                        let yy = yy - 1;
                        let dst = n * p + y * d.w;
                        let from = n * p + yy * d.w + x0 + dx - 1;
                        row[dst + x0..dst + x1].copy_from_slice(&src[from..from + (x1 - x0)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the input grid.
pub(crate) fn col2im<T: Real>(col: &[T], channels: usize, d: Dims, dx_out: &mut [T]) {
    let (p, np) = (d.plane(), d.per_channel());
    for c in 0..channels {
        let dst = &mut dx_out[c * np..(c + 1) * np];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &col[(c * 9 + dy * 3 + dx) * np..][..np];
                let x0 = 1usize.saturating_sub(dx);
                let x1 = (d.w + 1).saturating_sub(dx).min(d.w);
                if x0 >= x1 {
                    continue;
                }
                for n in 0..d.n {
                    for y in 0..d.h {
                        let yy = y + dy;
                        if yy == 0 || yy > d.h {
                            continue;
                        }
                        let yy = yy - 1;
                        let src = n * p + y * d.w;
                        let to = n * p + yy * d.w + x0 + dx - 1;
                        for (o, &v) in dst[to..to + (x1 - x0)].iter_mut().zip(&row[src + x0..src + x1]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[o][np] = bias[o] + sum_k weight[o][k] * col[k][np]`.
pub(crate) fn conv_gemm<T: Real>(
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    kernel: usize,
    col: &[T],
    np: usize,
    out: &mut Vec<T>,
) {
    out.clear();
    out.resize(out_ch * np, T::zero());
    for (row, &b) in out.chunks_exact_mut(np).zip(bias) {
        row.fill(b);
    }
    T::gemm(
        out_ch,
        kernel,
        np,
        T::one(),
        (weight, kernel as isize, 1),
        (col, np as isize, 1),
        T::one(),
        (out, np as isize, 1),
    );
}

pub(crate) struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Real>(
    weight: &[T],
    in_ch: usize,
    out_ch: usize,
    col: &[T],
    dout: &[T],
    d: Dims,
    want_input: bool,
) -> ConvGrads<T> {
    let np = d.per_channel();
    let kernel = in_ch * 9;
    let mut dw = vec![T::zero(); out_ch * kernel];
    T::gemm(
        out_ch,
        np,
        kernel,
        T::one(),
        (dout, np as isize, 1),
        (col, 1, np as isize),
        T::zero(),
        (&mut dw, kernel as isize, 1),
    );
    let db = dout.chunks_exact(np).map(|r| r.iter().copied().sum()).collect();
    let input = want_input.then(|| {
        let mut dcol = vec![T::zero(); kernel * np];
        T::gemm(
            kernel,
            out_ch,
            np,
            T::one(),
            (weight, 1, kernel as isize),
            (dout, np as isize, 1),
            T::zero(),
            (&mut dcol, np as isize, 1),
        );
        let mut dx = vec![T::zero(); in_ch * np];
        col2im(&dcol, in_ch, d, &mut dx);
        dx
    });
    ConvGrads {
        weight: dw,
        bias: db,
        input,
    }
}

/// Single-sample convolution of a `(C_in, H, W)` tensor.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, layer: &Conv2d<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = input.shape() else {
        return Err(shape(format!("conv2d expects (C, H, W), got {:?}", input.shape())));
    };
    if c != layer.in_channels {
        return Err(shape(format!("conv2d expects {} channels, got {c}", layer.in_channels)));
    }
    let d = Dims { n: 1, h, w };
    let mut col = Vec::new();
    let mut out = Vec::new();
    im2col(input.data(), c, d, &mut col);
    conv_gemm(&layer.weight, &layer.bias, layer.out_channels, layer.kernel_len(), &col, d.per_channel(), &mut out);
    Tensor::new(vec![layer.out_channels, h, w], out)
}

/// Per-channel batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    /// Weight of the old running value in each update.
    pub momentum: T,
}

impl<T: Real> BatchNorm<T> {
    pub fn identity(channels: usize, eps: T, momentum: T) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Train-mode normalization in place; updates the running statistics.
pub(crate) fn bn_train<T: Real>(bn: &mut BatchNorm<T>, x: &mut [T], per_channel: usize) -> Result<BnCache<T>> {
    if per_channel < 2 {
        return Err(domain("batch norm needs at least two values per channel in train mode"));
    }
    let m = T::from_usize(per_channel).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(bn.channels());
    for (c, (row, hat)) in x
        .chunks_exact_mut(per_channel)
        .zip(xhat.chunks_exact_mut(per_channel))
        .enumerate()
    {
        let mean = row.iter().copied().sum::<T>() / m;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let istd = (var + bn.eps).sqrt().recip();
        let (g, b) = (bn.gamma[c], bn.beta[c]);
        for (v, h) in row.iter_mut().zip(hat.iter_mut()) {
            *h = (*v - mean) * istd;
            *v = g * *h + b;
        }
        let keep = bn.momentum;
        bn.running_mean[c] = keep * bn.running_mean[c] + (T::one() - keep) * mean;
        bn.running_var[c] = keep * bn.running_var[c] + (T::one() - keep) * var;
        inv_std.push(istd);
    }
    Ok(BnCache { xhat, inv_std })
}

pub(crate) fn bn_infer<T: Real>(bn: &BatchNorm<T>, x: &mut [T], per_channel: usize) {
    for (c, row) in x.chunks_exact_mut(per_channel).enumerate() {
        let scale = bn.gamma[c] / (bn.running_var[c] + bn.eps).sqrt();
        let shift = bn.beta[c] - bn.running_mean[c] * scale;
        for v in row {
            *v = *v * scale + shift;
        }
    }
}

/// Turns `dy` into `dx` in place and returns `(dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Real>(
    bn: &BatchNorm<T>,
    cache: &BnCache<T>,
    dy: &mut [T],
    per_channel: usize,
) -> (Vec<T>, Vec<T>) {
    let m = T::from_usize(per_channel).unwrap();
    let mut dgamma = Vec::with_capacity(bn.channels());
    let mut dbeta = Vec::with_capacity(bn.channels());
    for (c, (row, hat)) in dy
        .chunks_exact_mut(per_channel)
        .zip(cache.xhat.chunks_exact(per_channel))
        .enumerate()
    {
        let db: T = row.iter().copied().sum();
        let dg: T = row.iter().zip(hat).map(|(&g, &h)| g * h).sum();
        let k = bn.gamma[c] * cache.inv_std[c] / m;
        for (g, &h) in row.iter_mut().zip(hat) {
            *g = k * (m * *g - db - h * dg);
        }
        dgamma.push(dg);
        dbeta.push(db);
    }
    (dgamma, dbeta)
}

/// Batch norm over an `(N, C, H, W)` tensor.
pub fn batchnorm_forward<T: Real>(input: &Tensor<T>, layer: &mut BatchNorm<T>, mode: Mode) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input.shape() else {
        return Err(shape(format!("batch norm expects (N, C, H, W), got {:?}", input.shape())));
    };
    if c != layer.channels() {
        return Err(shape(format!("batch norm has {} channels, input has {c}", layer.channels())));
    }
    let p = h * w;
    let mut cm = Vec::new();
    transpose_outer(input.data(), n, c, p, &mut cm);
    match mode {
        Mode::Train => {
            bn_train(layer, &mut cm, n * p)?;
        }
        Mode::Infer => bn_infer(layer, &mut cm, n * p),
    }
    let mut out = Vec::new();
    transpose_outer(&cm, c, n, p, &mut out);
    Tensor::new(input.shape().to_vec(), out)
}

/// Fills `mask` with inverted-dropout multipliers: 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub(crate) fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R, mask: &mut Vec<T>) {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    mask.clear();
    mask.extend((0..len).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }));
}

/// Inverted dropout; returns the output and the multiplier mask.
pub fn dropout_forward<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), vec![T::one(); input.len()]));
    }
    let mut mask = Vec::new();
    dropout_mask(input.len(), rate, rng, &mut mask);
    let out = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::new(input.shape().to_vec(), out)?, mask))
}

/// Fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out][in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(shape(format!(
                "dense {in_dim}->{out_dim} needs {} weights and {out_dim} biases",
                in_dim * out_dim
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }
}

/// `out[n][o] = bias[o] + sum_d x[n][d] * weight[o][d]`.
pub(crate) fn dense_rows<T: Real>(weight: &[T], bias: &[T], in_dim: usize, out_dim: usize, x: &[T], n: usize, out: &mut Vec<T>) {
    out.clear();
    out.resize(n * out_dim, T::zero());
    for row in out.chunks_exact_mut(out_dim) {
        row.copy_from_slice(bias);
    }
    T::gemm(
        n,
        in_dim,
        out_dim,
        T::one(),
        (x, in_dim as isize, 1),
        (weight, 1, in_dim as isize),
        T::one(),
        (out, out_dim as isize, 1),
    );
}

/// Returns `(dweight, dbias, dx)`.
pub(crate) fn dense_backward<T: Real>(
    weight: &[T],
    in_dim: usize,
    out_dim: usize,
    x: &[T],
    dout: &[T],
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); out_dim * in_dim];
    T::gemm(
        out_dim,
        n,
        in_dim,
        T::one(),
        (dout, 1, out_dim as isize),
        (x, in_dim as isize, 1),
        T::zero(),
        (&mut dw, in_dim as isize, 1),
    );
    let mut db = vec![T::zero(); out_dim];
    for row in dout.chunks_exact(out_dim) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = vec![T::zero(); n * in_dim];
    T::gemm(
        n,
        out_dim,
        in_dim,
        T::one(),
        (dout, out_dim as isize, 1),
        (weight, in_dim as isize, 1),
        T::zero(),
        (&mut dx, in_dim as isize, 1),
    );
    (dw, db, dx)
}

pub fn dense_forward<T: Real>(input: &[T], layer: &Dense<T>) -> Result<Vec<T>> {
    if input.len() != layer.in_dim {
        return Err(shape(format!("dense expects {} inputs, got {}", layer.in_dim, input.len())));
    }
    let mut out = Vec::new();
    dense_rows(&layer.weight, &layer.bias, layer.in_dim, layer.out_dim, input, 1, &mut out);
    Ok(out)
}

pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Logistic function, evaluated so neither branch overflows.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy and its gradient with respect to `p`.
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the gradient is zero for
/// entries that hit the clamp.
pub fn bce_loss<T: Real>(p: &[T], y: &[T]) -> Result<(T, Vec<T>)> {
    if p.is_empty() {
        return Err(domain("binary cross-entropy of an empty batch"));
    }
    if p.len() != y.len() {
        return Err(shape(format!("{} probabilities vs {} labels", p.len(), y.len())));
    }
    let eps = T::from_f64_lossy(BCE_EPSILON);
    let (lo, hi) = (eps, T::one() - eps);
    let n = T::from_usize(p.len()).unwrap();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        let q = pi.max(lo).min(hi);
        loss -= yi * q.ln() + (T::one() - yi) * (T::one() - q).ln();
        let clamped = pi < lo || pi > hi;
        grad.push(if clamped {
            T::zero()
        } else {
            (-(yi / q) + (T::one() - yi) / (T::one() - q)) / n
        });
    }
    Ok((loss / n, grad))
}
