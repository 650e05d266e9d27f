//! Does cleansing help a model trained on the annotations? A small frame-level
//! pitch classifier is trained on all frames, on the filtered frames only and
//! on all frames weighted by `1 - g`, then evaluated on held-out tracks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FrequencyGrid;
use crate::label::LabelMatrix;
use crate::metrics::{oa, paired_t, rpa, FrameF0Sequence, PairedT};
use crate::nn::{Adam, AdamConfig, BatchNorm, Conv2d, Dense, Layer, LayerKind, Mode, Sequential, Tensor};
use crate::spectral::SpectrogramStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    /// Frames on each side of the classified frame.
    pub context: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub tolerance_cents: f64,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            context: 4,
            epochs: 6,
            batch_size: 64,
            learning_rate: 1e-3,
            threshold: 0.5,
            tolerance_cents: 50.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    All,
    Filtered,
    Weighted,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::All, Condition::Filtered, Condition::Weighted];

    pub fn name(self) -> &'static str {
        match self {
            Condition::All => "all",
            Condition::Filtered => "filtered",
            Condition::Weighted => "weighted",
        }
    }
}

/// A training track: its annotation and the detector's per-frame scores.
pub struct TrainingTrack<'a> {
    pub stack: &'a SpectrogramStack,
    pub labels: &'a LabelMatrix,
    pub scores: &'a [f32],
}

/// A held-out track with its reference annotation.
pub struct EvalTrack<'a> {
    pub track_id: &'a str,
    pub stack: &'a SpectrogramStack,
    pub reference: &'a LabelMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub track_id: String,
    pub rpa: Option<f64>,
    pub oa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub train_frames: usize,
    /// Set when training failed; the metric fields are then empty.
    pub failure: Option<String>,
    pub per_track: Vec<TrackMetrics>,
    pub mean_rpa: Option<f64>,
    pub mean_oa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: Condition,
    pub b: Condition,
    /// Paired t-test on per-track RPA, `a - b`.
    pub rpa: Option<PairedT>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub config: DownstreamConfig,
    pub conditions: Vec<ConditionReport>,
    pub comparisons: Vec<Comparison>,
}

impl DownstreamReport {
    pub fn condition(&self, c: Condition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|r| r.condition == c)
    }
}

/// Classes `0..n_bins` are pitches, `n_bins` is "no pitch".
pub fn pitch_classifier(n_bins: usize, channels: usize, context: usize, seed: u64) -> Sequential<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv2 = Conv2d::new(16, 32, (3, 3), (1, 3), false, &mut rng);
    let (_, w) = conv2.out_hw(n_bins, 2 * context + 1);
    Sequential::new(vec![
        Layer::new("conv1", LayerKind::Conv(Conv2d::new(channels, 16, (3, 3), (1, 1), true, &mut rng))),
        Layer::new("act1", LayerKind::LeakyRelu { slope: 0.01 }),
        Layer::new("conv2", LayerKind::Conv(conv2)),
        Layer::new("bn2", LayerKind::BatchNorm(BatchNorm::new(32, 0.1, 1e-5))),
        Layer::new("act2", LayerKind::LeakyRelu { slope: 0.01 }),
        Layer::new("out", LayerKind::Dense(Dense::new(n_bins * w * 32, n_bins + 1, &mut rng))),
    ])
}

fn write_frame_input(stack: &SpectrogramStack, center: usize, context: usize, out: &mut [f32]) {
    let (n_bins, ch, width) = (stack.n_bins(), stack.n_channels(), 2 * context + 1);
    out.fill(0.0);
    for col in 0..width {
        let Some(frame) = (center + col).checked_sub(context) else {
            continue;
        };
        if frame >= stack.n_frames() {
            break;
        }
        let spec = stack.frame(frame);
        for b in 0..n_bins {
            let dst = (b * width + col) * ch;
            out[dst..dst + ch].copy_from_slice(&spec[b * ch..(b + 1) * ch]);
        }
    }
}

fn target_class(labels: &LabelMatrix, frame: usize) -> usize {
    labels.active_bin(frame).unwrap_or(labels.n_bins())
}

fn softmax(row: &[f32]) -> Vec<f32> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = row.iter().map(|&x| (x - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// (track, frame, weight) for every training frame of `condition`.
fn training_frames(tracks: &[TrainingTrack], condition: Condition, threshold: f64) -> Vec<(usize, usize, f32)> {
    let mut out = Vec::new();
    for (t, tr) in tracks.iter().enumerate() {
        for (i, &g) in tr.scores.iter().enumerate() {
            match condition {
                Condition::All => out.push((t, i, 1.0)),
                Condition::Filtered if (g as f64) < threshold => out.push((t, i, 1.0)),
                Condition::Filtered => {}
                Condition::Weighted => out.push((t, i, 1.0 - g)),
            }
        }
    }
    out
}

fn fit(tracks: &[TrainingTrack], frames: &[(usize, usize, f32)], cfg: &DownstreamConfig) -> Result<Sequential<f32>> {
    let (n_bins, ch) = (tracks[0].stack.n_bins(), tracks[0].stack.n_channels());
    let width = 2 * cfg.context + 1;
    let len = n_bins * width * ch;
    let mut net = pitch_classifier(n_bins, ch, cfg.context, cfg.seed);
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &net,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0d0);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let classes = n_bins + 1;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut x = vec![0.0f32; chunk.len() * len];
            for (k, &j) in chunk.iter().enumerate() {
                let (t, i, _) = frames[j];
                write_frame_input(tracks[t].stack, i, cfg.context, &mut x[k * len..(k + 1) * len]);
            }
            net.zero_grad();
            let logits = net.forward(Tensor::new(vec![chunk.len(), n_bins, width, ch], x)?, Mode::Train, &mut rng)?;
            let mut dy = vec![0.0f32; chunk.len() * classes];
            let scale = 1.0 / chunk.len() as f32;
            for (k, &j) in chunk.iter().enumerate() {
                let (t, i, w) = frames[j];
                let p = softmax(&logits.data()[k * classes..(k + 1) * classes]);
                let target = target_class(tracks[t].labels, i);
                for c in 0..classes {
                    let onehot = (c == target) as u8 as f32;
                    dy[k * classes + c] = w * scale * (p[c] - onehot);
                }
            }
            net.backward(Tensor::new(vec![chunk.len(), classes], dy)?)?;
            opt.step(&mut net);
        }
    }
    Ok(net)
}

/// Estimated f0 (the most likely pitch class, always voiced) and continuous
/// voicing `1 - p(no pitch)` for every frame.
pub fn transcribe(net: &Sequential<f32>, stack: &SpectrogramStack, context: usize, fg: &FrequencyGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n_bins, ch, width) = (stack.n_bins(), stack.n_channels(), 2 * context + 1);
    let len = n_bins * width * ch;
    let classes = n_bins + 1;
    let (mut f0, mut voicing) = (Vec::new(), Vec::new());
    let frames: Vec<usize> = (0..stack.n_frames()).collect();
    for chunk in frames.chunks(128) {
        let mut x = vec![0.0f32; chunk.len() * len];
        for (k, &i) in chunk.iter().enumerate() {
            write_frame_input(stack, i, context, &mut x[k * len..(k + 1) * len]);
        }
        let logits = net.predict(Tensor::new(vec![chunk.len(), n_bins, width, ch], x)?)?;
        for k in 0..chunk.len() {
            let p = softmax(&logits.data()[k * classes..(k + 1) * classes]);
            let best = (0..n_bins).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
            f0.push(fg.center(best as i64));
            voicing.push((1.0 - p[n_bins] as f64).clamp(0.0, 1.0));
        }
    }
    Ok((f0, voicing))
}

pub fn reference_f0(labels: &LabelMatrix, fg: &FrequencyGrid) -> (Vec<f64>, Vec<f64>) {
    (0..labels.n_frames())
        .map(|i| match labels.active_bin(i) {
            Some(b) => (fg.center(b as i64), 1.0),
            None => (0.0, 0.0),
        })
        .unzip()
}

fn evaluate(net: &Sequential<f32>, test: &[EvalTrack], fg: &FrequencyGrid, cfg: &DownstreamConfig) -> Result<Vec<TrackMetrics>> {
    test.iter()
        .map(|t| {
            let (f0, voicing) = transcribe(net, t.stack, cfg.context, fg)?;
            let (rf, rv) = reference_f0(t.reference, fg);
            let times: Vec<f64> = (0..f0.len()).map(|i| i as f64).collect();
            let est = FrameF0Sequence::new(times.clone(), f0, voicing)?;
            let reference = FrameF0Sequence::new(times, rf, rv)?;
            Ok(TrackMetrics {
                track_id: t.track_id.to_string(),
                rpa: rpa(&reference, &est, cfg.tolerance_cents)?,
                oa: oa(&reference, &est, cfg.tolerance_cents)?,
            })
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn downstream_experiment(train: &[TrainingTrack], test: &[EvalTrack], fg: &FrequencyGrid, cfg: &DownstreamConfig) -> Result<DownstreamReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("the downstream experiment needs training and test tracks"));
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 || !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::invalid("downstream training needs batch size >= 2, epochs > 0 and a threshold in (0, 1)"));
    }
    let (n_bins, ch) = (train[0].stack.n_bins(), train[0].stack.n_channels());
    for t in train {
        if t.stack.n_bins() != n_bins || t.stack.n_channels() != ch {
            return Err(Error::invalid("all tracks must share one spectrogram layout"));
        }
        if t.labels.n_frames() != t.stack.n_frames() || t.scores.len() != t.stack.n_frames() {
            return Err(Error::invalid("labels, scores and spectrogram must have equal frame counts"));
        }
    }
    for t in test {
        if t.stack.n_bins() != n_bins || t.stack.n_channels() != ch || t.reference.n_frames() != t.stack.n_frames() {
            return Err(Error::invalid(format!("test track `{}` does not match the training layout", t.track_id)));
        }
    }

    let mut conditions = Vec::new();
    for c in Condition::ALL {
        let frames = training_frames(train, c, cfg.threshold);
        let result = if frames.len() < 2 {
            Err(Error::invalid("fewer than two training frames"))
        } else {
            fit(train, &frames, cfg).and_then(|net| evaluate(&net, test, fg, cfg))
        };
        let report = match result {
            Ok(per_track) => ConditionReport {
                condition: c,
                train_frames: frames.len(),
                failure: None,
                mean_rpa: mean(per_track.iter().filter_map(|m| m.rpa)),
                mean_oa: mean(per_track.iter().map(|m| m.oa)),
                per_track,
            },
            Err(e) => {
                log::warn!("condition `{}` failed: {e}", c.name());
                ConditionReport {
                    condition: c,
                    train_frames: frames.len(),
                    failure: Some(e.to_string()),
                    per_track: Vec::new(),
                    mean_rpa: None,
                    mean_oa: None,
                }
            }
        };
        log::info!("condition `{}`: mean RPA {:?}, mean OA {:?}", c.name(), report.mean_rpa, report.mean_oa);
        conditions.push(report);
    }

    let pairs = [(Condition::Filtered, Condition::All), (Condition::Weighted, Condition::All), (Condition::Weighted, Condition::Filtered)];
    let comparisons = pairs
        .iter()
        .map(|&(a, b)| {
            let (ra, rb) = (&conditions[a as usize], &conditions[b as usize]);
            let xs: Vec<(f64, f64)> = ra
                .per_track
                .iter()
                .zip(&rb.per_track)
                .filter_map(|(x, y)| Some((x.rpa?, y.rpa?)))
                .collect();
            match paired_t(&xs) {
                Ok(t) => Comparison { a, b, rpa: Some(t), note: None },
                Err(e) => Comparison {
                    a,
                    b,
                    rpa: None,
                    note: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(DownstreamReport {
        config: cfg.clone(),
        conditions,
        comparisons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone_track(n_frames: usize, bins: &[usize]) -> (SpectrogramStack, LabelMatrix) {
        let mut data = vec![0.0f32; n_frames * 72 * 2];
        let mut labels = LabelMatrix::zeros(n_frames, 72);
        for i in 0..n_frames {
            let b = bins[(i / 10) % bins.len()];
            if b < 72 {
                data[(i * 72 + b) * 2] = 1.0;
                data[(i * 72 + b) * 2 + 1] = 1.0;
                labels.set(i, b, true);
            }
        }
        (SpectrogramStack::new(n_frames, 72, 2, data, true).unwrap(), labels)
    }

    #[test]
    fn zero_scores_make_filtering_a_no_op() {
        let fg = FrequencyGrid::default();
        let (s1, l1) = tone_track(60, &[20, 99, 30, 40]);
        let (s2, l2) = tone_track(60, &[30, 25, 99, 20]);
        let zeros = vec![0.0f32; 60];
        let train = [TrainingTrack {
            stack: &s1,
            labels: &l1,
            scores: &zeros,
        }];
        let test = [
            EvalTrack {
                track_id: "a",
                stack: &s2,
                reference: &l2,
            },
            EvalTrack {
                track_id: "b",
                stack: &s1,
                reference: &l1,
            },
        ];
        let cfg = DownstreamConfig {
            epochs: 2,
            batch_size: 16,
            ..DownstreamConfig::default()
        };
        let r = downstream_experiment(&train, &test, &fg, &cfg).unwrap();
        let all = r.condition(Condition::All).unwrap();
        assert!(all.failure.is_none());
        for c in [Condition::Filtered, Condition::Weighted] {
            let other = r.condition(c).unwrap();
            assert_eq!(other.per_track, all.per_track);
        }
        assert!(r.comparisons[0].rpa.as_ref().unwrap().t.is_none());
    }

    #[test]
    fn all_flagged_training_fails_only_that_condition() {
        let fg = FrequencyGrid::default();
        let (s, l) = tone_track(40, &[20, 30]);
        let ones = vec![1.0f32; 40];
        let train = [TrainingTrack {
            stack: &s,
            labels: &l,
            scores: &ones,
        }];
        let test = [EvalTrack {
            track_id: "a",
            stack: &s,
            reference: &l,
        }];
        let cfg = DownstreamConfig {
            epochs: 1,
            batch_size: 8,
            ..DownstreamConfig::default()
        };
        let r = downstream_experiment(&train, &test, &fg, &cfg).unwrap();
        assert!(r.condition(Condition::Filtered).unwrap().failure.is_some());
        assert!(r.condition(Condition::All).unwrap().failure.is_none());
        assert!(r.comparisons[0].rpa.is_none());
    }

    #[test]
    fn reference_pitch_follows_labels() {
        let fg = FrequencyGrid::default();
        let (_, l) = tone_track(20, &[12, 99]);
        let (f0, v) = reference_f0(&l, &fg);
        assert_eq!(f0[0], fg.center(12));
        assert_eq!((f0[10], v[10]), (0.0, 0.0));
    }
}
