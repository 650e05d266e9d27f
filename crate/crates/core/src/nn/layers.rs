use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// How stochastic and batch-dependent layers behave in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout.
    Train,
    /// Batch statistics, dropout disabled.
    TrainNoDropout,
    /// Running statistics, no dropout. Deterministic.
    Eval,
}

impl Mode {
    pub fn batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::TrainNoDropout)
    }

    pub fn dropout(self) -> bool {
        self == Mode::Train
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub dims: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(dims: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { dims, value, grad }
    }

    fn uniform(dims: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = dims.iter().product();
        let value = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        Self::new(dims, value)
    }

    fn filled(dims: Vec<usize>, v: f64) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![T::of(v); n])
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    fn cast<U: Scalar>(&self) -> Param<U> {
        Param::new(self.dims.clone(), cast_vec(&self.value))
    }
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::of(x.f64())).collect()
}

/// Uniform fan-in initialisation bound, scaled for rectifiers.
fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// 2-D convolution with "same" padding: the output is `ceil(in / stride)` and
/// any odd padding goes to the trailing edge. Weights are `K x out`, with
/// `K = kh * kw * in` in `(ki, kj, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: (usize, usize), bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let k = kernel.0 * kernel.1 * in_channels;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::uniform(vec![k, out_channels], init_bound(k), rng),
            bias: bias.then(|| Param::filled(vec![out_channels], 0.0)),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride.0), w.div_ceil(self.stride.1))
    }

    fn leading_pad(&self, h: usize, w: usize) -> (isize, isize) {
        let (oh, ow) = self.out_hw(h, w);
        let total_h = ((oh - 1) * self.stride.0 + self.kernel.0).saturating_sub(h);
        let total_w = ((ow - 1) * self.stride.1 + self.kernel.1).saturating_sub(w);
        ((total_h / 2) as isize, (total_w / 2) as isize)
    }

    /// Visits `(row, col offset, input offset)` for every in-bounds tap.
    fn for_each_tap(&self, n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_hw(h, w);
        let (top, left) = self.leading_pad(h, w);
        let (kh, kw) = self.kernel;
        let c = self.in_channels;
        for b in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let row = (b * oh + y) * ow + x;
                    for ki in 0..kh {
                        let iy = (y * self.stride.0 + ki) as isize - top;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (x * self.stride.1 + kj) as isize - left;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * c;
                            f(row, (ki * kw + kj) * c, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.weight.dims[0];
        let c = self.in_channels;
        let mut cols = vec![T::zero(); n * oh * ow * k];
        self.for_each_tap(n, h, w, |row, off, src| {
            cols[row * k + off..row * k + off + c].copy_from_slice(&x[src..src + c]);
        });
        cols
    }

    fn col2im(&self, cols: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        let k = self.weight.dims[0];
        let c = self.in_channels;
        let mut dx = vec![T::zero(); n * h * w * c];
        self.for_each_tap(n, h, w, |row, off, src| {
            for t in 0..c {
                dx[src + t] = dx[src + t] + cols[row * k + off + t];
            }
        });
        dx
    }
}

/// Per-channel batch normalisation over every axis except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            channels,
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            eps,
        }
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

/// Fully connected layer over the flattened non-batch axes; weights `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::uniform(vec![in_features, out_features], init_bound(in_features), rng),
            bias: Param::filled(vec![out_features], 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Dropout(Dropout),
    /// Slope 0 gives a plain ReLU.
    LeakyRelu { slope: f64 },
    Dense(Dense<T>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) enum Cache<T> {
    #[default]
    Empty,
    Conv { cols: Vec<T>, in_dims: Vec<usize> },
    Norm { xhat: Vec<T>, inv_std: Vec<T>, batch: Option<(Vec<T>, Vec<T>, usize)> },
    Scale(Vec<T>),
    /// `x > 0` per element.
    Sign(Vec<bool>),
    Dense { input: Vec<T>, in_dims: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub kind: LayerKind<T>,
    pub(crate) cache: Cache<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(name: impl Into<String>, kind: LayerKind<T>) -> Self {
        Self {
            name: name.into(),
            kind,
            cache: Cache::Empty,
        }
    }

    /// Coarse layer family, used to stratify gradient checks.
    pub fn family(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv(_) => "conv",
            LayerKind::BatchNorm(_) => "batch_norm",
            LayerKind::Dropout(_) => "dropout",
            LayerKind::LeakyRelu { .. } => "activation",
            LayerKind::Dense(_) => "dense",
        }
    }

    fn mismatch(&self, expected: Vec<usize>, actual: &[usize]) -> Error {
        Error::ShapeMismatch {
            context: format!("layer `{}`", self.name),
            expected,
            actual: actual.to_vec(),
        }
    }

    /// Output dims for the given input dims (batch axis included).
    pub fn output_dims(&self, dims: &[usize]) -> Result<Vec<usize>> {
        match &self.kind {
            LayerKind::Conv(c) => {
                if dims.len() != 4 || dims[3] != c.in_channels {
                    return Err(self.mismatch(vec![dims.first().copied().unwrap_or(0), 0, 0, c.in_channels], dims));
                }
                let (oh, ow) = c.out_hw(dims[1], dims[2]);
                Ok(vec![dims[0], oh, ow, c.out_channels])
            }
            LayerKind::BatchNorm(b) => {
                if dims.last() != Some(&b.channels) {
                    return Err(self.mismatch(vec![b.channels], &dims[dims.len().saturating_sub(1)..]));
                }
                Ok(dims.to_vec())
            }
            LayerKind::Dense(d) => {
                let f: usize = dims.iter().skip(1).product();
                if dims.is_empty() || f != d.in_features {
                    return Err(self.mismatch(vec![dims.first().copied().unwrap_or(0), d.in_features], dims));
                }
                Ok(vec![dims[0], d.out_features])
            }
            LayerKind::Dropout(_) | LayerKind::LeakyRelu { .. } => Ok(dims.to_vec()),
        }
    }

    /// Pure forward pass. The returned cache is what [`Layer::backward`] needs.
    pub(crate) fn forward(&self, x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng, record: bool) -> Result<(Tensor<T>, Cache<T>)> {
        let out_dims = self.output_dims(x.dims())?;
        match &self.kind {
            LayerKind::Conv(c) => {
                let (n, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
                let cols = c.im2col(x.data(), n, h, w);
                let rows = out_dims[0] * out_dims[1] * out_dims[2];
                let k = c.weight.dims[0];
                let mut y = vec![T::zero(); rows * c.out_channels];
                T::gemm(false, false, rows, c.out_channels, k, T::one(), &cols, &c.weight.value, T::zero(), &mut y);
                if let Some(b) = &c.bias {
                    for r in y.chunks_exact_mut(c.out_channels) {
                        for (v, &bv) in r.iter_mut().zip(&b.value) {
                            *v = *v + bv;
                        }
                    }
                }
                let cache = if record {
                    Cache::Conv {
                        cols,
                        in_dims: x.dims().to_vec(),
                    }
                } else {
                    Cache::Empty
                };
                Ok((Tensor::new(out_dims, y)?, cache))
            }
            LayerKind::BatchNorm(bn) => {
                let c = bn.channels;
                let m = x.len() / c;
                let eps = T::of(bn.eps);
                let (mean, var, batch) = if mode.batch_stats() {
                    let mut mean = vec![T::zero(); c];
                    for r in x.data().chunks_exact(c) {
                        for (a, &v) in mean.iter_mut().zip(r) {
                            *a = *a + v;
                        }
                    }
                    let mf = T::of(m as f64);
                    mean.iter_mut().for_each(|a| *a = *a / mf);
                    let mut var = vec![T::zero(); c];
                    for r in x.data().chunks_exact(c) {
                        for ((a, &v), &mu) in var.iter_mut().zip(r).zip(&mean) {
                            *a = *a + (v - mu) * (v - mu);
                        }
                    }
                    var.iter_mut().for_each(|a| *a = *a / mf);
                    (mean.clone(), var.clone(), Some((mean, var, m)))
                } else {
                    (bn.running_mean.clone(), bn.running_var.clone(), None)
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = x.into_data();
                let mut y = vec![T::zero(); xhat.len()];
                for (xr, yr) in xhat.chunks_exact_mut(c).zip(y.chunks_exact_mut(c)) {
                    for j in 0..c {
                        xr[j] = (xr[j] - mean[j]) * inv_std[j];
                        yr[j] = bn.gamma.value[j] * xr[j] + bn.beta.value[j];
                    }
                }
                let cache = if record || batch.is_some() {
                    Cache::Norm { xhat, inv_std, batch }
                } else {
                    Cache::Empty
                };
                Ok((Tensor::new(out_dims, y)?, cache))
            }
            LayerKind::Dropout(d) => {
                if !mode.dropout() || d.rate == 0.0 {
                    return Ok((x, Cache::Empty));
                }
                let keep = T::of(1.0 / (1.0 - d.rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < d.rate { T::zero() } else { keep })
                    .collect();
                let mut x = x;
                for (v, &s) in x.data_mut().iter_mut().zip(&mask) {
                    *v = *v * s;
                }
                Ok((x, if record { Cache::Scale(mask) } else { Cache::Empty }))
            }
            LayerKind::LeakyRelu { slope } => {
                let slope = T::of(*slope);
                let mut x = x;
                let sign: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
                for (v, &pos) in x.data_mut().iter_mut().zip(&sign) {
                    if !pos {
                        *v = *v * slope;
                    }
                }
                Ok((x, if record { Cache::Sign(sign) } else { Cache::Empty }))
            }
            LayerKind::Dense(d) => {
                let n = out_dims[0];
                let mut y = vec![T::zero(); n * d.out_features];
                for r in y.chunks_exact_mut(d.out_features) {
                    r.copy_from_slice(&d.bias.value);
                }
                T::gemm(false, false, n, d.out_features, d.in_features, T::one(), x.data(), &d.weight.value, T::one(), &mut y);
                let cache = if record {
                    Cache::Dense {
                        in_dims: x.dims().to_vec(),
                        input: x.into_data(),
                    }
                } else {
                    Cache::Empty
                };
                Ok((Tensor::new(out_dims, y)?, cache))
            }
        }
    }

    /// Folds batch statistics from a training-mode cache into running stats.
    pub(crate) fn absorb(&mut self, cache: &Cache<T>) {
        if let (LayerKind::BatchNorm(bn), Cache::Norm { batch: Some((mean, var, m)), .. }) = (&mut self.kind, cache) {
            let mom = T::of(bn.momentum);
            let keep = T::one() - mom;
            let unbias = if *m > 1 { T::of(*m as f64 / (*m - 1) as f64) } else { T::one() };
            for j in 0..bn.channels {
                bn.running_mean[j] = keep * bn.running_mean[j] + mom * mean[j];
                bn.running_var[j] = keep * bn.running_var[j] + mom * var[j] * unbias;
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx`. Uses the cache stored by the last recorded forward pass.
    pub(crate) fn backward(&mut self, dy: Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let cache = std::mem::take(&mut self.cache);
        let name = self.name.clone();
        let missing = || Error::invalid(format!("layer `{name}`: backward without a recorded forward pass"));
        match (&mut self.kind, cache) {
            (LayerKind::Conv(c), Cache::Conv { cols, in_dims }) => {
                let k = c.weight.dims[0];
                let rows = dy.len() / c.out_channels;
                T::gemm(true, false, k, c.out_channels, rows, T::one(), &cols, dy.data(), T::one(), &mut c.weight.grad);
                if let Some(b) = &mut c.bias {
                    for r in dy.data().chunks_exact(c.out_channels) {
                        for (g, &v) in b.grad.iter_mut().zip(r) {
                            *g = *g + v;
                        }
                    }
                }
                if !need_dx {
                    return Ok(None);
                }
                let mut dcols = vec![T::zero(); rows * k];
                T::gemm(false, true, rows, k, c.out_channels, T::one(), dy.data(), &c.weight.value, T::zero(), &mut dcols);
                let dx = c.col2im(&dcols, in_dims[0], in_dims[1], in_dims[2]);
                Ok(Some(Tensor::new(in_dims, dx)?))
            }
            (LayerKind::BatchNorm(bn), Cache::Norm { xhat, inv_std, batch }) => {
                let c = bn.channels;
                let dims = dy.dims().to_vec();
                let dy = dy.into_data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (dr, xr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_dy[j] = sum_dy[j] + dr[j];
                        sum_dy_xhat[j] = sum_dy_xhat[j] + dr[j] * xr[j];
                    }
                }
                for j in 0..c {
                    bn.beta.grad[j] = bn.beta.grad[j] + sum_dy[j];
                    bn.gamma.grad[j] = bn.gamma.grad[j] + sum_dy_xhat[j];
                }
                if !need_dx {
                    return Ok(None);
                }
                let mut dx = dy;
                match batch {
                    Some((_, _, m)) => {
                        // dx = inv_std / m * (m dxhat - sum(dxhat) - xhat sum(dxhat xhat)), dxhat = gamma dy
                        let mf = T::of(m as f64);
                        for (dr, xr) in dx.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let g = bn.gamma.value[j];
                                dr[j] = g * inv_std[j] / mf * (mf * dr[j] - sum_dy[j] - xr[j] * sum_dy_xhat[j]);
                            }
                        }
                    }
                    None => {
                        for dr in dx.chunks_exact_mut(c) {
                            for j in 0..c {
                                dr[j] = dr[j] * bn.gamma.value[j] * inv_std[j];
                            }
                        }
                    }
                }
                Ok(Some(Tensor::new(dims, dx)?))
            }
            (LayerKind::Dropout(_), Cache::Scale(mask)) => {
                let mut dy = dy;
                for (v, &s) in dy.data_mut().iter_mut().zip(&mask) {
                    *v = *v * s;
                }
                Ok(need_dx.then_some(dy))
            }
            (LayerKind::Dropout(_), Cache::Empty) => Ok(need_dx.then_some(dy)),
            (LayerKind::LeakyRelu { slope }, Cache::Sign(sign)) => {
                let slope = T::of(*slope);
                let mut dy = dy;
                for (v, &pos) in dy.data_mut().iter_mut().zip(&sign) {
                    if !pos {
                        *v = *v * slope;
                    }
                }
                Ok(need_dx.then_some(dy))
            }
            (LayerKind::Dense(d), Cache::Dense { input, in_dims }) => {
                let n = in_dims[0];
                T::gemm(true, false, d.in_features, d.out_features, n, T::one(), &input, dy.data(), T::one(), &mut d.weight.grad);
                for r in dy.data().chunks_exact(d.out_features) {
                    for (g, &v) in d.bias.grad.iter_mut().zip(r) {
                        *g = *g + v;
                    }
                }
                if !need_dx {
                    return Ok(None);
                }
                let mut dx = vec![T::zero(); n * d.in_features];
                T::gemm(false, true, n, d.in_features, d.out_features, T::one(), dy.data(), &d.weight.value, T::zero(), &mut dx);
                Ok(Some(Tensor::new(in_dims, dx)?))
            }
            _ => Err(missing()),
        }
    }

    /// Trainable tensors as `(suffix, param)`.
    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match &self.kind {
            LayerKind::Conv(c) => {
                let mut v = vec![("weight", &c.weight)];
                if let Some(b) = &c.bias {
                    v.push(("bias", b));
                }
                v
            }
            LayerKind::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            LayerKind::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            LayerKind::Dropout(_) | LayerKind::LeakyRelu { .. } => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        match &mut self.kind {
            LayerKind::Conv(c) => {
                let mut v = vec![("weight", &mut c.weight)];
                if let Some(b) = &mut c.bias {
                    v.push(("bias", b));
                }
                v
            }
            LayerKind::BatchNorm(b) => vec![("gamma", &mut b.gamma), ("beta", &mut b.beta)],
            LayerKind::Dense(d) => vec![("weight", &mut d.weight), ("bias", &mut d.bias)],
            LayerKind::Dropout(_) | LayerKind::LeakyRelu { .. } => vec![],
        }
    }

    /// Non-trainable state saved with checkpoints.
    pub fn buffers(&self) -> Vec<(&'static str, &Vec<T>)> {
        match &self.kind {
            LayerKind::BatchNorm(b) => vec![("running_mean", &b.running_mean), ("running_var", &b.running_var)],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        match &mut self.kind {
            LayerKind::BatchNorm(b) => vec![("running_mean", &mut b.running_mean), ("running_var", &mut b.running_var)],
            _ => vec![],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let kind = match &self.kind {
            LayerKind::Conv(c) => LayerKind::Conv(Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                weight: c.weight.cast(),
                bias: c.bias.as_ref().map(Param::cast),
            }),
            LayerKind::BatchNorm(b) => LayerKind::BatchNorm(BatchNorm {
                channels: b.channels,
                gamma: b.gamma.cast(),
                beta: b.beta.cast(),
                running_mean: cast_vec(&b.running_mean),
                running_var: cast_vec(&b.running_var),
                momentum: b.momentum,
                eps: b.eps,
            }),
            LayerKind::Dropout(d) => LayerKind::Dropout(*d),
            LayerKind::LeakyRelu { slope } => LayerKind::LeakyRelu { slope: *slope },
            LayerKind::Dense(d) => LayerKind::Dense(Dense {
                in_features: d.in_features,
                out_features: d.out_features,
                weight: d.weight.cast(),
                bias: d.bias.cast(),
            }),
        };
        Layer::new(self.name.clone(), kind)
    }
}
