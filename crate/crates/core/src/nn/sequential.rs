use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Layer, Param};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub use super::layers::Mode;

/// A chain of named layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    /// Stateless forward pass; nothing is cached and running statistics are
    /// left alone. Eval mode ignores `rng`.
    pub fn infer(&self, x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(x, mode, rng, false)?.0;
            check_finite(layer, &x)?;
        }
        Ok(x)
    }

    /// Eval-mode output; a pure function of the parameters and `x`.
    pub fn predict(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        self.infer(x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Forward pass that records what [`Sequential::backward`] needs. In
    /// [`Mode::Train`] batch-norm running statistics are updated.
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let mut x = x;
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(x, mode, rng, true)?;
            check_finite(layer, &y)?;
            if mode == Mode::Train {
                layer.absorb(&cache);
            }
            layer.cache = cache;
            x = y;
        }
        Ok(x)
    }

    /// Back-propagates `dy` (gradient of the loss w.r.t. the last output),
    /// accumulating into every parameter's `grad`.
    pub fn backward(&mut self, dy: Tensor<T>) -> Result<()> {
        let mut dy = Some(dy);
        let n = self.layers.len();
        for (k, layer) in self.layers.iter_mut().enumerate().rev() {
            let g = dy.take().expect("gradient present for every layer but the first");
            dy = layer.backward(g, k > 0)?;
        }
        debug_assert!(dy.is_none() || n == 0);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, p) in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    /// Output dims of every layer for a given input, computed without data.
    pub fn shape_chain(&self, input_dims: &[usize]) -> Result<Vec<(String, Vec<usize>)>> {
        let mut dims = input_dims.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            dims = layer.output_dims(&dims)?;
            out.push((layer.name.clone(), dims.clone()));
        }
        Ok(out)
    }

    /// Runs an eval-mode forward pass and reports each layer's actual output dims.
    pub fn trace(&self, x: Tensor<T>) -> Result<Vec<(String, Vec<usize>)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(x, Mode::Eval, &mut rng, false)?.0;
            out.push((layer.name.clone(), x.dims().to_vec()));
        }
        Ok(out)
    }

    /// Hash of every rectifier's input sign pattern from the last recorded
    /// forward pass.
    pub(crate) fn sign_signature(&self) -> u64 {
        use super::layers::Cache;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            if let Cache::Sign(s) = &layer.cache {
                for &b in s {
                    h ^= b as u64 + 1;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(move |(s, p)| (format!("{}.{s}", l.name), p)))
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let name = l.name.clone();
                l.params_mut().into_iter().map(move |(s, p)| (format!("{name}.{s}"), p))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential::new(self.layers.iter().map(Layer::cast).collect())
    }
}

fn check_finite<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>) -> Result<()> {
    if x.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: layer.name.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, net: &Sequential<T>) -> Self {
        let zeros: Vec<Vec<T>> = net.named_params().iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Self {
            cfg,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, net: &mut Sequential<T>) {
        self.step += 1;
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let one = T::one();
        let c1 = 1.0 - self.cfg.beta1.powi(self.step);
        let c2 = 1.0 - self.cfg.beta2.powi(self.step);
        let lr = T::of(self.cfg.learning_rate * c2.sqrt() / c1);
        let eps = T::of(self.cfg.eps * c2.sqrt());
        for (k, (_, p)) in net.named_params_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                p.value[i] = p.value[i] - lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::layers::{Dense, LayerKind};
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Sequential::<f64>::new(vec![Layer::new("fc", LayerKind::Dense(Dense::new(2, 1, &mut rng)))]);
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &net,
        );
        // fit y = 3a - 2b + 1 in least squares
        let xs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0], [-1.0, 0.5]];
        for _ in 0..2000 {
            net.zero_grad();
            let x = Tensor::new(vec![5, 2], xs.iter().flatten().copied().collect()).unwrap();
            let y = net.forward(x, Mode::Eval, &mut rng).unwrap();
            let dy: Vec<f64> = y.data().iter().zip(&xs).map(|(p, x)| 2.0 * (p - (3.0 * x[0] - 2.0 * x[1] + 1.0)) / 5.0).collect();
            net.backward(Tensor::new(vec![5, 1], dy).unwrap()).unwrap();
            opt.step(&mut net);
        }
        let LayerKind::Dense(d) = &net.layers[0].kind else { unreachable!() };
        assert!((d.weight.value[0] - 3.0).abs() < 1e-3);
        assert!((d.weight.value[1] + 2.0).abs() < 1e-3);
        assert!((d.bias.value[0] - 1.0).abs() < 1e-3);
    }
}
