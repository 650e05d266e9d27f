//! Weakly supervised choice of frames whose labels are probably right.
//!
//! Two sources: frames where the annotation agrees with a pitch-salience
//! estimate (`kappa_l` per frame, `kappa_p` its moving average), and frames
//! deep inside long unannotated, quiet stretches.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{interior_frames, PatchExample};
use crate::error::{Error, Result};
use crate::label::LabelMatrix;
use crate::ngmx::{NgmxArray, NgmxData};
use crate::spectral::SpectrogramStack;

/// Per-frame, per-bin pitch likelihood in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceMatrix {
    n_frames: usize,
    n_bins: usize,
    data: Vec<f32>,
}

impl SalienceMatrix {
    pub fn new(n_frames: usize, n_bins: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_frames * n_bins {
            return Err(Error::ShapeMismatch {
                context: "salience matrix".into(),
                expected: vec![n_frames, n_bins],
                actual: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("salience value {v} outside [0, 1]")));
        }
        Ok(Self { n_frames, n_bins, data })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    pub fn from_ngmx(a: NgmxArray) -> Result<Self> {
        match (a.dims.as_slice(), a.data) {
            (&[f, b], NgmxData::F32(v)) => Self::new(f, b, v),
            _ => Err(Error::format("NGMX", "salience must be a 2-D float32 array")),
        }
    }
}

impl From<&SalienceMatrix> for NgmxArray {
    fn from(s: &SalienceMatrix) -> Self {
        NgmxArray {
            dims: vec![s.n_frames, s.n_bins],
            data: NgmxData::F32(s.data.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Agreement high but short of perfect.
    Train,
    /// Near-perfect agreement.
    Test,
}

/// Half-open interval `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionThresholds {
    pub profile: Profile,
    pub local: Bounds,
    pub patch: Bounds,
    /// Moving-average width for `kappa_p`; odd.
    pub window_k: usize,
    /// Label-free window required around a silence positive, in frames.
    pub silence_window_v: usize,
    /// Frames at or below this quantile of the track's energy count as quiet.
    pub silence_quantile: f64,
}

impl SelectionThresholds {
    pub fn train() -> Self {
        Self {
            profile: Profile::Train,
            local: Bounds { lo: 0.9, hi: 0.999 },
            patch: Bounds { lo: 0.7, hi: 0.85 },
            window_k: 11,
            silence_window_v: 200,
            silence_quantile: 0.1,
        }
    }

    pub fn test() -> Self {
        Self {
            profile: Profile::Test,
            local: Bounds { lo: 0.999, hi: 1.0 },
            patch: Bounds { lo: 0.85, hi: 1.0 },
            ..Self::train()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Train => Self::train(),
            Profile::Test => Self::test(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_k == 0 || self.window_k.is_multiple_of(2) {
            return Err(Error::invalid(format!("window_k = {} must be odd and >= 1", self.window_k)));
        }
        if !(0.0..=1.0).contains(&self.silence_quantile) {
            return Err(Error::invalid("silence_quantile must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self::train()
    }
}

/// `max_j(y_j * s_j)`.
pub fn local_agreement(labels: &[u8], salience: &[f32]) -> Result<f64> {
    if labels.len() != salience.len() {
        return Err(Error::invalid(format!(
            "label row has {} bins, salience row {}",
            labels.len(),
            salience.len()
        )));
    }
    Ok(labels
        .iter()
        .zip(salience)
        .map(|(&y, &s)| y as f64 * s as f64)
        .fold(0.0, f64::max))
}

/// Centred `k`-point moving average; windows are truncated at the edges.
pub fn patch_agreement(kappa: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!("moving-average width {k} must be odd and >= 1")));
    }
    let half = k / 2;
    Ok((0..kappa.len())
        .map(|i| {
            let w = &kappa[i.saturating_sub(half)..(i + half + 1).min(kappa.len())];
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            // Rounding can push a mean of equal values one ulp past them.
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mean.clamp(lo, hi)
        })
        .collect())
}

/// `(kappa_l, kappa_p)` for every frame.
pub fn agreement(labels: &LabelMatrix, salience: &SalienceMatrix, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if labels.shape() != [salience.n_frames, salience.n_bins] {
        return Err(Error::ShapeMismatch {
            context: "label matrix vs salience".into(),
            expected: labels.shape().to_vec(),
            actual: vec![salience.n_frames, salience.n_bins],
        });
    }
    let local = (0..labels.n_frames())
        .map(|i| local_agreement(labels.row(i), salience.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let patch = patch_agreement(&local, k)?;
    Ok((local, patch))
}

/// Interior frames whose local and patch agreement both fall inside the
/// profile's bounds.
pub fn select_likely_correct(
    labels: &LabelMatrix,
    salience: &SalienceMatrix,
    th: &SelectionThresholds,
    context: usize,
) -> Result<Vec<usize>> {
    th.validate()?;
    let (local, patch) = agreement(labels, salience, th.window_k)?;
    Ok(interior_frames(labels.n_frames(), context)
        .filter(|&i| th.local.contains(local[i]) && th.patch.contains(patch[i]))
        .collect())
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Interior frames with no active label anywhere in `[i - v/2, i + v/2]`
/// (a window that must lie inside the track) and energy at or below the
/// track's `silence_quantile`.
pub fn select_silence_positives(
    labels: &LabelMatrix,
    energy: &[f64],
    th: &SelectionThresholds,
    context: usize,
) -> Result<Vec<usize>> {
    th.validate()?;
    let n = labels.n_frames();
    if energy.len() != n {
        return Err(Error::invalid(format!(
            "energy has {} frames, labels {n}",
            energy.len()
        )));
    }
    let v = th.silence_window_v;
    if n <= v {
        log::warn!("track of {n} frames is shorter than the silence window {v}; no silence positives");
        return Ok(Vec::new());
    }
    let Some(threshold) = quantile(energy, th.silence_quantile) else {
        return Ok(Vec::new());
    };
    // voiced_before[i] = number of voiced frames in [0, i)
    let mut voiced_before = vec![0usize; n + 1];
    for i in 0..n {
        voiced_before[i + 1] = voiced_before[i] + labels.is_voiced(i) as usize;
    }
    let half = v / 2;
    Ok(interior_frames(n, context)
        .filter(|&i| i >= half && i + half < n)
        .filter(|&i| voiced_before[i + half + 1] == voiced_before[i - half])
        .filter(|&i| energy[i] <= threshold)
        .collect())
}

/// Stand-in salience: the vocal channel, scaled so each frame's maximum is 1.
pub fn pseudo_salience(stack: &SpectrogramStack) -> SalienceMatrix {
    let channel = if stack.n_channels() > 1 { 1 } else { 0 };
    let n_bins = stack.n_bins();
    let mut data = Vec::with_capacity(stack.n_frames() * n_bins);
    for i in 0..stack.n_frames() {
        let frame = stack.frame(i);
        let row: Vec<f32> = (0..n_bins).map(|b| frame[b * stack.n_channels() + channel]).collect();
        let peak = row.iter().copied().fold(0.0f32, f32::max);
        if peak > 0.0 {
            data.extend(row.iter().map(|&x| (x / peak).min(1.0)));
        } else {
            data.extend(std::iter::repeat_n(0.0, n_bins));
        }
    }
    SalienceMatrix {
        n_frames: stack.n_frames(),
        n_bins,
        data,
    }
}

/// Anything that belongs to exactly one track.
pub trait TrackKeyed {
    fn track_key(&self) -> &str;
}

impl TrackKeyed for PatchExample {
    fn track_key(&self) -> &str {
        &self.track_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Fraction of tracks held out; at least one track lands on each side.
    pub holdout_fraction: f64,
    /// Positives kept per negative after down-sampling.
    pub balance_ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            balance_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeled<T> {
    pub item: T,
    pub z: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSplits<T> {
    pub train: Vec<Labeled<T>>,
    pub holdout: Vec<Labeled<T>>,
    pub holdout_tracks: Vec<String>,
}

/// Splits tracks into train and holdout, then down-samples the majority class
/// within each split to `balance_ratio`.
pub fn build_training_set<T: TrackKeyed>(
    positives: Vec<T>,
    negatives: Vec<T>,
    cfg: &SplitConfig,
) -> Result<TrainingSplits<T>> {
    if positives.is_empty() {
        return Err(Error::EmptyClass(
            "no positive examples: agreement and silence selection found no likely-correct frames".into(),
        ));
    }
    if negatives.is_empty() {
        return Err(Error::EmptyClass(
            "no negative examples: deformation sampling changed no interior frame".into(),
        ));
    }
    if !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) {
        return Err(Error::invalid("holdout_fraction must lie in (0, 1)"));
    }
    if !(cfg.balance_ratio > 0.0 && cfg.balance_ratio.is_finite()) {
        return Err(Error::invalid("balance_ratio must be positive"));
    }
    let tracks: BTreeSet<String> = positives
        .iter()
        .chain(&negatives)
        .map(|e| e.track_key().to_string())
        .collect();
    if tracks.len() < 2 {
        return Err(Error::invalid("a track-level split needs examples from at least two tracks"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<String> = tracks.into_iter().collect();
    order.shuffle(&mut rng);
    let n_hold = ((order.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, order.len() - 1);
    let mut holdout_tracks: Vec<String> = order[..n_hold].to_vec();
    holdout_tracks.sort();
    let side: BTreeMap<&str, bool> = order.iter().enumerate().map(|(k, t)| (t.as_str(), k < n_hold)).collect();

    let mut parts: [(Vec<T>, Vec<T>); 2] = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for p in positives {
        let h = side[p.track_key()] as usize;
        parts[h].0.push(p);
    }
    for n in negatives {
        let h = side[n.track_key()] as usize;
        parts[h].1.push(n);
    }
    let [(tp, tn), (hp, hn)] = parts;
    let train = balance(tp, tn, cfg.balance_ratio, &mut rng, "train")?;
    let holdout = balance(hp, hn, cfg.balance_ratio, &mut rng, "holdout")?;
    Ok(TrainingSplits {
        train,
        holdout,
        holdout_tracks,
    })
}

fn balance<T>(pos: Vec<T>, neg: Vec<T>, ratio: f64, rng: &mut ChaCha8Rng, split: &str) -> Result<Vec<Labeled<T>>> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyClass(format!(
            "{split} split has {} positive and {} negative examples",
            pos.len(),
            neg.len()
        )));
    }
    let want_pos = ((neg.len() as f64 * ratio).round() as usize).max(1);
    let (keep_pos, keep_neg) = if pos.len() > want_pos {
        (want_pos, neg.len())
    } else {
        (pos.len(), ((pos.len() as f64 / ratio).round() as usize).clamp(1, neg.len()))
    };
    let mut out = subsample(pos, keep_pos, rng, 0);
    out.extend(subsample(neg, keep_neg, rng, 1));
    Ok(out)
}

fn subsample<T>(items: Vec<T>, keep: usize, rng: &mut ChaCha8Rng, z: u8) -> Vec<Labeled<T>> {
    let mut chosen = vec![false; items.len()];
    if keep >= items.len() {
        chosen.fill(true);
    } else {
        for k in index::sample(rng, items.len(), keep) {
            chosen[k] = true;
        }
    }
    items
        .into_iter()
        .zip(chosen)
        .filter(|(_, c)| *c)
        .map(|(item, _)| Labeled { item, z })
        .collect()
}
