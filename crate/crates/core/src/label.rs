//! Binary time x frequency label matrices and context patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::notes::NoteTrack;
use crate::spectral::SpectrogramStack;

/// Binary `n_frames x n_bins` matrix, row-major by frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    n_frames: usize,
    n_bins: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn zeros(n_frames: usize, n_bins: usize) -> Self {
        Self {
            n_frames,
            n_bins,
            data: vec![0; n_frames * n_bins],
        }
    }

    pub fn from_vec(n_frames: usize, n_bins: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n_frames * n_bins {
            return Err(Error::ShapeMismatch {
                context: "label matrix".into(),
                expected: vec![n_frames, n_bins],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("label matrix entries must be 0 or 1"));
        }
        Ok(Self {
            n_frames,
            n_bins,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.n_frames, self.n_bins]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, frame: usize, bin: usize) -> u8 {
        self.data[frame * self.n_bins + bin]
    }

    pub fn set(&mut self, frame: usize, bin: usize, value: bool) {
        self.data[frame * self.n_bins + bin] = value as u8;
    }

    pub fn row(&self, frame: usize) -> &[u8] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    /// Whether any bin is active in `frame`.
    pub fn is_voiced(&self, frame: usize) -> bool {
        self.row(frame).iter().any(|&v| v != 0)
    }

    /// Lowest active bin in `frame`, if any.
    pub fn active_bin(&self, frame: usize) -> Option<usize> {
        self.row(frame).iter().position(|&v| v != 0)
    }
}

/// A note that could not be placed on the frequency grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutOfRangeNote {
    pub index: usize,
    pub freq_hz: f64,
}

#[derive(Debug, Clone)]
pub struct Rasterized {
    pub labels: LabelMatrix,
    pub skipped: Vec<OutOfRangeNote>,
}

/// Rasterizes note events: cell `(i, j)` is set when some note satisfies
/// `start <= r_i <= end` and `q_{j-1} < freq <= q_j`.
///
/// Notes whose frequency falls outside `(q_{-1}, q_{n_bins-1}]` are skipped and
/// reported in [`Rasterized::skipped`].
pub fn rasterize(
    track: &NoteTrack,
    tg: &TimeGrid,
    fg: &FrequencyGrid,
    n_frames: usize,
) -> Result<Rasterized> {
    if n_frames == 0 {
        return Err(Error::invalid("rasterize needs n_frames > 0"));
    }
    let mut labels = LabelMatrix::zeros(n_frames, fg.n_bins);
    let mut skipped = Vec::new();
    for (index, note) in track.notes().iter().enumerate() {
        let Some(bin) = fg.bin_of(note.freq_hz) else {
            skipped.push(OutOfRangeNote {
                index,
                freq_hz: note.freq_hz,
            });
            continue;
        };
        for frame in tg.frame_span(note.start_sec, note.end_sec, n_frames) {
            labels.set(frame, bin, true);
        }
    }
    if !skipped.is_empty() {
        log::warn!(
            "track `{}`: skipped {} note(s) outside the frequency grid",
            track.track_id,
            skipped.len()
        );
    }
    Ok(Rasterized { labels, skipped })
}

/// A `(2n+1)`-frame window of spectrogram channels and labels around a centre
/// frame. Frames outside the track are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub n_bins: usize,
    pub width: usize,
    pub channels: usize,
    /// `n_bins x width x channels`, row-major.
    pub features: Vec<f32>,
    /// `n_bins x width`, row-major.
    pub labels: Vec<u8>,
    pub center_index: usize,
}

impl Patch {
    pub fn feature(&self, bin: usize, col: usize, channel: usize) -> f32 {
        self.features[(bin * self.width + col) * self.channels + channel]
    }

    pub fn label(&self, bin: usize, col: usize) -> u8 {
        self.labels[bin * self.width + col]
    }

    /// Network input layout: `n_bins x width x (channels + 1)` with the label
    /// matrix as the last channel.
    pub fn to_input(&self) -> Vec<f32> {
        let c = self.channels + 1;
        let mut out = vec![0.0; self.n_bins * self.width * c];
        for b in 0..self.n_bins {
            for t in 0..self.width {
                let dst = (b * self.width + t) * c;
                let src = (b * self.width + t) * self.channels;
                out[dst..dst + self.channels].copy_from_slice(&self.features[src..src + self.channels]);
                out[dst + self.channels] = self.labels[b * self.width + t] as f32;
            }
        }
        out
    }
}

/// Writes the network input for the window centred at `center` straight into
/// `out` (`n_bins x (2n+1) x (channels + 1)`), zero-padding outside the track.
pub fn write_patch_input(
    stack: &SpectrogramStack,
    labels: &LabelMatrix,
    center: usize,
    context: usize,
    out: &mut [f32],
) {
    let n_bins = stack.n_bins();
    let ch = stack.n_channels();
    let c = ch + 1;
    let width = 2 * context + 1;
    debug_assert_eq!(out.len(), n_bins * width * c);
    out.fill(0.0);
    let n_frames = stack.n_frames();
    for col in 0..width {
        let Some(frame) = (center + col).checked_sub(context) else {
            continue;
        };
        if frame >= n_frames {
            break;
        }
        let spec = stack.frame(frame);
        let row = labels.row(frame);
        for b in 0..n_bins {
            let dst = (b * width + col) * c;
            out[dst..dst + ch].copy_from_slice(&spec[b * ch..(b + 1) * ch]);
            out[dst + ch] = row[b] as f32;
        }
    }
}

/// Extracts the context window `[i - n, i + n]` around frame `i`.
pub fn extract_patch(
    stack: &SpectrogramStack,
    labels: &LabelMatrix,
    center: usize,
    context: usize,
) -> Result<Patch> {
    if context == 0 {
        return Err(Error::invalid("patch context n must be positive"));
    }
    check_aligned(stack, labels)?;
    if center >= stack.n_frames() {
        return Err(Error::invalid(format!(
            "patch centre {center} outside track of {} frames",
            stack.n_frames()
        )));
    }
    let n_bins = stack.n_bins();
    let channels = stack.n_channels();
    let width = 2 * context + 1;
    let mut features = vec![0.0; n_bins * width * channels];
    let mut patch_labels = vec![0u8; n_bins * width];
    for col in 0..width {
        let Some(frame) = (center + col).checked_sub(context) else {
            continue;
        };
        if frame >= stack.n_frames() {
            break;
        }
        let spec = stack.frame(frame);
        for b in 0..n_bins {
            let dst = (b * width + col) * channels;
            features[dst..dst + channels].copy_from_slice(&spec[b * channels..(b + 1) * channels]);
            patch_labels[b * width + col] = labels.get(frame, b);
        }
    }
    Ok(Patch {
        n_bins,
        width,
        channels,
        features,
        labels: patch_labels,
        center_index: center,
    })
}

pub(crate) fn check_aligned(stack: &SpectrogramStack, labels: &LabelMatrix) -> Result<()> {
    if stack.n_frames() != labels.n_frames() || stack.n_bins() != labels.n_bins() {
        return Err(Error::ShapeMismatch {
            context: "spectrogram vs label matrix".into(),
            expected: vec![stack.n_frames(), stack.n_bins()],
            actual: labels.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notes::NoteEvent;

    fn track(notes: &[(f64, f64, f64)]) -> NoteTrack {
        NoteTrack::new(
            "t",
            notes
                .iter()
                .map(|&(a, b, f)| NoteEvent {
                    start_sec: a,
                    end_sec: b,
                    freq_hz: f,
                })
                .collect(),
        )
    }

    #[test]
    fn empty_track_rasterizes_to_zeros() {
        let r = rasterize(&track(&[]), &TimeGrid::default(), &FrequencyGrid::default(), 10).unwrap();
        assert!(r.labels.as_slice().iter().all(|&v| v == 0));
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn zero_frames_is_rejected() {
        assert!(rasterize(&track(&[]), &TimeGrid::default(), &FrequencyGrid::default(), 0).is_err());
    }

    #[test]
    fn short_low_note_follows_closed_interval() {
        // r_2 = 0.023220 > 0.0232, so frame 2 is outside the closed interval.
        let tg = TimeGrid::default();
        assert!(tg.time_of(2) > 0.0232);
        let r = rasterize(&track(&[(0.0, 0.0232, 65.406)]), &tg, &FrequencyGrid::default(), 4).unwrap();
        let active: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..72).map(move |j| (i, j)))
            .filter(|&(i, j)| r.labels.get(i, j) == 1)
            .collect();
        assert_eq!(active, vec![(0, 0), (1, 0)]);

        let r = rasterize(&track(&[(0.0, 0.0233, 65.406)]), &tg, &FrequencyGrid::default(), 4).unwrap();
        let frames: Vec<usize> = (0..4).filter(|&i| r.labels.get(i, 0) == 1).collect();
        assert_eq!(frames, vec![0, 1, 2]);
    }

    #[test]
    fn bin_boundary_is_inclusive_above() {
        let fg = FrequencyGrid::default();
        let tg = TimeGrid::default();
        let q5 = fg.center(5);
        let r = rasterize(&track(&[(0.0, 0.05, q5)]), &tg, &fg, 3).unwrap();
        assert_eq!(r.labels.active_bin(0), Some(5));
        let r = rasterize(&track(&[(0.0, 0.05, q5 * (1.0 + 1e-9))]), &tg, &fg, 3).unwrap();
        assert_eq!(r.labels.active_bin(0), Some(6));
    }

    #[test]
    fn out_of_range_notes_are_reported() {
        let r = rasterize(
            &track(&[(0.0, 0.1, 20.0), (0.2, 0.3, 440.0), (0.4, 0.5, 9000.0)]),
            &TimeGrid::default(),
            &FrequencyGrid::default(),
            60,
        )
        .unwrap();
        assert_eq!(r.skipped.len(), 2);
        assert_eq!(r.skipped[0].index, 0);
        assert_eq!(r.skipped[1].index, 2);
        assert!((0..60).any(|i| r.labels.is_voiced(i)));
    }

    fn ramp_stack(n_frames: usize, n_bins: usize) -> SpectrogramStack {
        let data = (0..n_frames * n_bins * 2).map(|k| (k % 97) as f32 / 97.0).collect();
        SpectrogramStack::new(n_frames, n_bins, 2, data, false).unwrap()
    }

    #[test]
    fn interior_patch_has_no_padding() {
        let stack = ramp_stack(200, 72);
        let labels = LabelMatrix::zeros(200, 72);
        let p = extract_patch(&stack, &labels, 40, 40).unwrap();
        assert_eq!(p.width, 81);
        for col in 0..81 {
            for b in 0..72 {
                assert_eq!(p.feature(b, col, 1), stack.get(col, b, 1));
            }
        }
    }

    #[test]
    fn edge_patches_are_zero_padded() {
        let stack = ramp_stack(120, 72);
        let mut labels = LabelMatrix::zeros(120, 72);
        for i in 0..120 {
            labels.set(i, 3, true);
        }
        let first = extract_patch(&stack, &labels, 0, 40).unwrap();
        for col in 0..40 {
            for b in 0..72 {
                assert_eq!(first.feature(b, col, 0), 0.0);
                assert_eq!(first.label(b, col), 0);
            }
        }
        assert_eq!(first.label(3, 40), 1);
        let last = extract_patch(&stack, &labels, 119, 40).unwrap();
        for col in 41..81 {
            for b in 0..72 {
                assert_eq!(last.feature(b, col, 1), 0.0);
                assert_eq!(last.label(b, col), 0);
            }
        }
    }

    #[test]
    fn patch_errors() {
        let stack = ramp_stack(50, 72);
        let labels = LabelMatrix::zeros(50, 72);
        assert!(extract_patch(&stack, &labels, 10, 0).is_err());
        assert!(extract_patch(&stack, &labels, 50, 4).is_err());
        assert!(extract_patch(&stack, &LabelMatrix::zeros(49, 72), 10, 4).is_err());
    }

    #[test]
    fn input_writer_matches_patch() {
        let stack = ramp_stack(60, 72);
        let mut labels = LabelMatrix::zeros(60, 72);
        labels.set(12, 7, true);
        labels.set(3, 1, true);
        for center in [0, 5, 30, 59] {
            let p = extract_patch(&stack, &labels, center, 8).unwrap();
            let mut buf = vec![1.0; 72 * 17 * 3];
            write_patch_input(&stack, &labels, center, 8, &mut buf);
            assert_eq!(buf, p.to_input());
        }
    }
}
