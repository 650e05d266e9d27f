use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detector::{bce_grad, bce_loss, sigmoid, ArchConfig, ErrorDetector};
use super::layers::{Dense, Layer, LayerKind};
use super::sequential::{Mode, Sequential};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Parameters compared per layer family (conv, batch_norm, dense).
    pub samples_per_family: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples_per_family: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub family: String,
    pub checked: usize,
    /// Samples skipped because a perturbation flipped some rectifier input
    /// across zero, where the loss is not differentiable.
    pub excluded_kinks: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub families: Vec<KindReport>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn mean_loss(net: &mut Sequential<f64>, x: &Tensor<f64>, targets: &[u8], mode: Mode) -> Result<(f64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = net.forward(x.clone(), mode, &mut rng)?;
    let loss = logits.data().iter().zip(targets).map(|(&l, &z)| bce_loss(sigmoid(l), z)).sum::<f64>() / targets.len() as f64;
    Ok((loss, net.sign_signature()))
}

/// Compares back-propagated gradients of the mean BCE loss with central
/// differences on a random sample of parameters from each layer family.
pub fn check_sequential(net: &mut Sequential<f64>, x: &Tensor<f64>, targets: &[u8], mode: Mode, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if mode.dropout() {
        return Err(Error::invalid("gradient checks need a deterministic mode (no dropout)"));
    }
    if x.batch() != targets.len() || targets.is_empty() {
        return Err(Error::invalid("gradient check needs one target per input"));
    }
    net.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = net.forward(x.clone(), mode, &mut rng)?;
    let n = targets.len() as f64;
    let dl: Vec<f64> = logits.data().iter().zip(targets).map(|(&l, &z)| bce_grad(l, z) / n).collect();
    let base_signature = net.sign_signature();
    net.backward(Tensor::new(vec![targets.len(), 1], dl)?)?;

    // (family, layer, param slot, element) for every trainable scalar
    let mut families: BTreeMap<&'static str, Vec<(usize, usize, usize)>> = BTreeMap::new();
    let mut analytic: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (li, layer) in net.layers.iter().enumerate() {
        for (pi, (_, p)) in layer.params().into_iter().enumerate() {
            analytic.insert((li, pi), p.grad.clone());
            let fam = families.entry(layer.family()).or_default();
            fam.extend((0..p.value.len()).map(|e| (li, pi, e)));
        }
    }

    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.step;
    let mut reports = Vec::new();
    for (family, slots) in families {
        let candidates = index::sample(&mut sampler, slots.len(), slots.len()).into_vec();
        let mut report = KindReport {
            family: family.to_string(),
            checked: 0,
            excluded_kinks: 0,
            max_rel_error: 0.0,
            worst_param: String::new(),
        };
        // give up on a family whose samples almost all sit on kinks
        let max_attempts = cfg.samples_per_family.saturating_mul(10);
        for (attempt, k) in candidates.into_iter().enumerate() {
            if report.checked >= cfg.samples_per_family || attempt >= max_attempts {
                break;
            }
            let (li, pi, e) = slots[k];
            let set = |net: &mut Sequential<f64>, delta: f64| -> f64 {
                let p = net.layers[li].params_mut().swap_remove(pi).1;
                let old = p.value[e];
                p.value[e] = old + delta;
                old
            };
            let old = set(net, h);
            let (plus, sig_plus) = mean_loss(net, x, targets, mode)?;
            set(net, -2.0 * h);
            let (minus, sig_minus) = mean_loss(net, x, targets, mode)?;
            net.layers[li].params_mut().swap_remove(pi).1.value[e] = old;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.excluded_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[&(li, pi)][e];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || report.worst_param.is_empty() {
                let (suffix, _) = net.layers[li].params()[pi];
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = format!("{}.{suffix}[{e}]", net.layers[li].name);
            }
            report.checked += 1;
        }
        reports.push(report);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step: h,
        families: reports,
        max_rel_error,
    })
}

/// Gradient check of the full detector with batch norm frozen on its running
/// statistics and dropout off.
pub fn grad_check(model: &mut ErrorDetector<f64>, x: &Tensor<f64>, targets: &[u8], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    check_sequential(&mut model.net, x, targets, Mode::Eval, cfg)
}

/// Gradient check of a freshly initialised detector (seeded by `cfg.seed`) on
/// `batch` uniform random inputs in `[0, 1)` with alternating targets.
pub fn detector_grad_check(arch: &ArchConfig, batch: usize, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if batch == 0 {
        return Err(Error::invalid("gradient check needs a non-empty batch"));
    }
    let mut g = ErrorDetector::<f64>::new(arch.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let x = Tensor::new(
        [vec![batch], arch.input_dims().to_vec()].concat(),
        (0..batch * arch.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let targets: Vec<u8> = (0..batch).map(|i| (i % 2) as u8).collect();
    grad_check(&mut g, &x, &targets, cfg)
}

/// Gradient check of the dense head alone with its rectifiers removed, on a
/// random +-1 vector of 256 features: every layer is linear, so only the loss
/// itself is curved.
pub fn linear_head_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Sequential::<f64>::new(vec![
        Layer::new("fc1", LayerKind::Dense(Dense::new(256, 64, &mut rng))),
        Layer::new("fc2", LayerKind::Dense(Dense::new(64, 32, &mut rng))),
        Layer::new("out", LayerKind::Dense(Dense::new(32, 1, &mut rng))),
    ]);
    let x = Tensor::new(vec![1, 256], (0..256).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())?;
    let logit = net.predict(x.clone())?.data()[0];
    // target on the far side of the prediction keeps the loss gradient large
    let z = (logit < 0.0) as u8;
    check_sequential(&mut net, &x, &[z], Mode::Eval, cfg)
}
