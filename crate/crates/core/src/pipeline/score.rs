use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{self, write_patch_input, LabelMatrix};
use crate::nn::{predict_source, ErrorDetector, PatchBatchSource};
use crate::spectral::SpectrogramStack;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Detector output for every frame of one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreTrack {
    pub track_id: String,
    /// Probability that the frame's label is wrong.
    pub scores: Vec<f32>,
    pub threshold: f64,
}

/// Every frame of a track, each as the centre of a zero-padded window.
struct DenseFrames<'a> {
    stack: &'a SpectrogramStack,
    labels: &'a LabelMatrix,
    context: usize,
}

impl PatchBatchSource for DenseFrames<'_> {
    fn len(&self) -> usize {
        self.stack.n_frames()
    }

    fn target(&self, _index: usize) -> u8 {
        0
    }

    fn write_input(&self, index: usize, out: &mut [f32]) {
        write_patch_input(self.stack, self.labels, index, self.context, out);
    }
}

/// Scores every frame, boundary frames included.
pub fn score_track(
    model: &ErrorDetector<f32>,
    track_id: &str,
    stack: &SpectrogramStack,
    labels: &LabelMatrix,
    context: usize,
) -> Result<FrameScoreTrack> {
    label::check_aligned(stack, labels)?;
    let arch = &model.arch;
    if arch.width != 2 * context + 1 || arch.n_bins != stack.n_bins() || arch.channels != stack.n_channels() + 1 {
        return Err(Error::invalid(format!(
            "model expects {}x{}x{} patches, track gives {}x{}x{} at context {context}",
            arch.n_bins,
            arch.width,
            arch.channels,
            stack.n_bins(),
            2 * context + 1,
            stack.n_channels() + 1
        )));
    }
    let scores = predict_source(model, &DenseFrames { stack, labels, context })?;
    Ok(FrameScoreTrack {
        track_id: track_id.to_string(),
        scores,
        threshold: DEFAULT_THRESHOLD,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanseResult {
    pub track_id: String,
    /// Frames judged correct (`g < threshold`), ascending.
    pub filtered_index: Vec<usize>,
    /// `1 - g` per frame.
    pub weights: Vec<f32>,
    /// Fraction of frames with `g >= threshold`.
    pub error_rate: f64,
    pub threshold: f64,
}

impl CleanseResult {
    /// Complement of the filtered index.
    pub fn flagged(&self) -> Vec<usize> {
        let mut keep = self.filtered_index.iter().peekable();
        (0..self.weights.len())
            .filter(|i| {
                if keep.peek() == Some(&i) {
                    keep.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }
}

pub fn cleanse(scores: &FrameScoreTrack, threshold: f64) -> Result<CleanseResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} must lie in (0, 1)")));
    }
    if let Some(bad) = scores.scores.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::invalid(format!("score {bad} outside [0, 1]")));
    }
    let filtered_index: Vec<usize> = (0..scores.scores.len()).filter(|&i| (scores.scores[i] as f64) < threshold).collect();
    let n = scores.scores.len();
    let error_rate = if n == 0 {
        0.0
    } else {
        (n - filtered_index.len()) as f64 / n as f64
    };
    Ok(CleanseResult {
        track_id: scores.track_id.clone(),
        filtered_index,
        weights: scores.scores.iter().map(|&g| 1.0 - g).collect(),
        error_rate,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRate {
    pub track_id: String,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Percent; bins are `[lo, hi)` except the last, which includes 100.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub per_track: Vec<TrackRate>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Vec<HistogramBin>,
    pub pearson_r: Option<f64>,
    /// Tracks whose error rate exceeds [`HIGH_ERROR_RATE`].
    pub high_error_tracks: Vec<String>,
}

pub const HISTOGRAM_BIN_PERCENT: f64 = 5.0;
pub const HIGH_ERROR_RATE: f64 = 0.7;

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn dataset_report(results: &[CleanseResult], external_scores: Option<&[f64]>) -> Result<DatasetReport> {
    if results.is_empty() {
        return Err(Error::invalid("a dataset report needs at least one track"));
    }
    let rates: Vec<f64> = results.iter().map(|r| r.error_rate).collect();
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let std = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();

    let n_bins = (100.0 / HISTOGRAM_BIN_PERCENT) as usize;
    let mut histogram: Vec<HistogramBin> = (0..n_bins)
        .map(|k| HistogramBin {
            lo: k as f64 * HISTOGRAM_BIN_PERCENT,
            hi: (k + 1) as f64 * HISTOGRAM_BIN_PERCENT,
            count: 0,
        })
        .collect();
    for &r in &rates {
        let k = ((r * 100.0 / HISTOGRAM_BIN_PERCENT).floor().max(0.0) as usize).min(n_bins - 1);
        histogram[k].count += 1;
    }

    let pearson_r = match external_scores {
        None => None,
        Some(ext) if ext.len() != rates.len() => {
            return Err(Error::invalid(format!(
                "{} external scores for {} tracks",
                ext.len(),
                rates.len()
            )))
        }
        Some(ext) => {
            let r = pearson(&rates, ext);
            if r.is_none() {
                log::warn!("correlation undefined: fewer than two tracks or constant values");
            }
            r
        }
    };
    Ok(DatasetReport {
        per_track: results
            .iter()
            .map(|r| TrackRate {
                track_id: r.track_id.clone(),
                error_rate: r.error_rate,
            })
            .collect(),
        mean,
        std,
        histogram,
        pearson_r,
        high_error_tracks: results.iter().filter(|r| r.error_rate > HIGH_ERROR_RATE).map(|r| r.track_id.clone()).collect(),
    })
}
