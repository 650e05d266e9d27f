use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Dense, Dropout, Layer, LayerKind};
use super::sequential::{Mode, Sequential};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Block outputs `(freq, time, channels)` for a `72 x 81 x 3` input.
pub const FEATURE_MAP_SHAPES: [[usize; 3]; 5] = [[36, 81, 16], [18, 27, 32], [6, 9, 64], [2, 3, 128], [1, 1, 256]];

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub n_bins: usize,
    /// Patch width in frames, `2n + 1`.
    pub width: usize,
    pub channels: usize,
    pub filters: Vec<usize>,
    /// `(freq, time)` stride per conv block.
    pub strides: Vec<(usize, usize)>,
    pub dense: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_bins: 72,
            width: 81,
            channels: 3,
            filters: vec![16, 32, 64, 128, 256],
            strides: vec![(2, 1), (2, 3), (3, 3), (3, 3), (2, 3)],
            dense: vec![64, 32],
            dropout: 0.3,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn input_dims(&self) -> [usize; 3] {
        [self.n_bins, self.width, self.channels]
    }

    pub fn input_len(&self) -> usize {
        self.n_bins * self.width * self.channels
    }

    pub fn describe(&self) -> String {
        let blocks: Vec<String> = self
            .filters
            .iter()
            .zip(&self.strides)
            .map(|(f, (sh, sw))| format!("{f}/{sh}x{sw}"))
            .collect();
        let dense: Vec<String> = self.dense.iter().map(usize::to_string).collect();
        format!(
            "conv3x3[{}]-bn-leaky({})-dense[{}]-sigmoid; input {}x{}x{}",
            blocks.join(","),
            self.leaky_slope,
            dense.join(","),
            self.n_bins,
            self.width,
            self.channels
        )
    }

    fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.len() != self.strides.len() {
            return Err(Error::invalid("filters and strides must be non-empty and equally long"));
        }
        if self.strides.iter().any(|&(a, b)| a == 0 || b == 0) || self.filters.contains(&0) || self.dense.contains(&0) {
            return Err(Error::invalid("strides, filters and dense widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if self.n_bins == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid("input dimensions must be positive"));
        }
        Ok(())
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-(z ln p + (1 - z) ln(1 - p))` with `p` clamped away from 0 and 1.
pub fn bce_loss<T: Scalar>(p: T, z: u8) -> T {
    let eps = T::of(BCE_EPS);
    let p = p.max(eps).min(T::one() - eps);
    if z == 1 {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// Derivative of [`bce_loss`]`(sigmoid(logit), z)` w.r.t. the logit; zero
/// where the clamp is active.
pub fn bce_grad<T: Scalar>(logit: T, z: u8) -> T {
    let p = sigmoid(logit);
    let eps = T::of(BCE_EPS);
    if p < eps || p > T::one() - eps {
        T::zero()
    } else {
        p - T::of(z as f64)
    }
}

/// The patch classifier: conv blocks, a dense head and one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDetector<T> {
    pub arch: ArchConfig,
    pub net: Sequential<T>,
}

impl<T: Scalar> ErrorDetector<T> {
    /// Builds the network with seeded fan-in initialisation. The layer shape
    /// chain is resolved here, so an inconsistent architecture fails at once.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaky = LayerKind::LeakyRelu { slope: arch.leaky_slope };
        let mut layers = Vec::new();
        let mut in_c = arch.channels;
        for (k, (&f, &stride)) in arch.filters.iter().zip(&arch.strides).enumerate() {
            let b = k + 1;
            let first = k == 0;
            layers.push(Layer::new(format!("conv{b}"), LayerKind::Conv(Conv2d::new(in_c, f, (3, 3), stride, first, &mut rng))));
            if !first {
                layers.push(Layer::new(format!("bn{b}"), LayerKind::BatchNorm(BatchNorm::new(f, arch.bn_momentum, arch.bn_eps))));
                layers.push(Layer::new(format!("drop{b}"), LayerKind::Dropout(Dropout { rate: arch.dropout })));
            }
            layers.push(Layer::new(format!("act{b}"), leaky.clone()));
            in_c = f;
        }
        let probe = Sequential::new(layers.clone()).shape_chain(&[1, arch.n_bins, arch.width, arch.channels])?;
        let mut features: usize = probe.last().expect("at least one block").1.iter().skip(1).product();
        for (k, &width) in arch.dense.iter().enumerate() {
            let b = k + 1;
            layers.push(Layer::new(format!("fc{b}"), LayerKind::Dense(Dense::new(features, width, &mut rng))));
            layers.push(Layer::new(format!("fc{b}_act"), LayerKind::LeakyRelu { slope: 0.0 }));
            layers.push(Layer::new(format!("fc{b}_drop"), LayerKind::Dropout(Dropout { rate: arch.dropout })));
            features = width;
        }
        layers.push(Layer::new("out", LayerKind::Dense(Dense::new(features, 1, &mut rng))));
        Ok(Self {
            arch,
            net: Sequential::new(layers),
        })
    }

    fn block_outputs(&self, chain: &[(String, Vec<usize>)]) -> Vec<[usize; 3]> {
        chain
            .iter()
            .filter(|(name, _)| name.starts_with("act"))
            .map(|(_, d)| [d[1], d[2], d[3]])
            .collect()
    }

    /// Block output shapes implied by the layer definitions.
    pub fn feature_map_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let chain = self.net.shape_chain(&[1, self.arch.n_bins, self.arch.width, self.arch.channels])?;
        Ok(self.block_outputs(&chain))
    }

    /// Block output shapes observed while running `x` through the network.
    pub fn traced_feature_maps(&self, x: Tensor<T>) -> Result<Vec<[usize; 3]>> {
        let chain = self.net.trace(x)?;
        Ok(self.block_outputs(&chain))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let d = x.dims();
        if d.len() != 4 || d[1..] != self.arch.input_dims() {
            return Err(Error::ShapeMismatch {
                context: "error detector input".into(),
                expected: vec![d.first().copied().unwrap_or(0), self.arch.n_bins, self.arch.width, self.arch.channels],
                actual: d.to_vec(),
            });
        }
        Ok(())
    }

    /// Eval-mode probabilities, one per batch item.
    pub fn predict(&self, x: Tensor<T>) -> Result<Vec<T>> {
        self.check_input(&x)?;
        Ok(self.net.predict(x)?.data().iter().map(|&l| sigmoid(l)).collect())
    }

    /// Probabilities in an arbitrary mode (dropout masks drawn from `rng`).
    pub fn forward(&self, x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
        self.check_input(&x)?;
        Ok(self.net.infer(x, mode, rng)?.data().iter().map(|&l| sigmoid(l)).collect())
    }

    /// Mean loss over the batch; every parameter's `grad` is overwritten
    /// with the gradient of that mean. Also returns the probabilities.
    pub fn backprop(&mut self, x: Tensor<T>, targets: &[u8], mode: Mode, rng: &mut ChaCha8Rng) -> Result<(T, Vec<T>)> {
        self.check_input(&x)?;
        if x.batch() != targets.len() || targets.is_empty() {
            return Err(Error::invalid(format!(
                "batch of {} inputs with {} targets",
                x.batch(),
                targets.len()
            )));
        }
        self.net.zero_grad();
        let logits = self.net.forward(x, mode, rng)?;
        let n = T::of(targets.len() as f64);
        let probs: Vec<T> = logits.data().iter().map(|&l| sigmoid(l)).collect();
        let loss = probs.iter().zip(targets).map(|(&p, &z)| bce_loss(p, z)).sum::<T>() / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite { layer: "loss".into() });
        }
        let dl: Vec<T> = logits.data().iter().zip(targets).map(|(&l, &z)| bce_grad(l, z) / n).collect();
        self.net.backward(Tensor::new(vec![targets.len(), 1], dl)?)?;
        Ok((loss, probs))
    }

    pub fn cast<U: Scalar>(&self) -> ErrorDetector<U> {
        ErrorDetector {
            arch: self.arch.clone(),
            net: self.net.cast(),
        }
    }
}
