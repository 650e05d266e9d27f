//! Time and frequency sampling grids shared by the label rasterizer and the
//! spectral front end.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame timing: frame `i` sits at `r_i = i * hop / sample_rate` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeGrid {
    pub sample_rate: u32,
    pub hop: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            hop: 256,
        }
    }
}

impl TimeGrid {
    pub fn new(sample_rate: u32, hop: usize) -> Result<Self> {
        if sample_rate == 0 || hop == 0 {
            return Err(Error::invalid("sample rate and hop must be positive"));
        }
        Ok(Self { sample_rate, hop })
    }

    /// Seconds between consecutive frames.
    pub fn frame_period(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Timestamp of frame `i` in seconds.
    pub fn time_of(&self, i: usize) -> f64 {
        self.frame_period() * i as f64
    }

    /// Number of frames covering `n_samples` samples (`ceil(n / hop)`).
    pub fn frames_for_samples(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }

    /// Frames `i < n_frames` with `start <= r_i <= end`.
    ///
    /// The bounds are located arithmetically and then settled with the exact
    /// comparison used by [`TimeGrid::time_of`], so callers agree bit-for-bit
    /// with a per-frame scan.
    pub fn frame_span(&self, start: f64, end: f64, n_frames: usize) -> Range<usize> {
        if n_frames == 0 || end < start || end < 0.0 {
            return 0..0;
        }
        let period = self.frame_period();
        let mut lo = ((start / period).ceil().max(0.0) as usize).min(n_frames);
        while lo > 0 && self.time_of(lo - 1) >= start {
            lo -= 1;
        }
        while lo < n_frames && self.time_of(lo) < start {
            lo += 1;
        }
        let mut hi = ((end / period).floor().max(0.0) as usize + 1).min(n_frames);
        while hi < n_frames && self.time_of(hi) <= end {
            hi += 1;
        }
        while hi > lo && self.time_of(hi - 1) > end {
            hi -= 1;
        }
        lo..hi.max(lo)
    }
}

/// Geometrically spaced bin centres `q_j = fmin * 2^(j / bins_per_octave)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrequencyGrid {
    pub n_bins: usize,
    pub bins_per_octave: usize,
    pub fmin: f64,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        // C2 through B7: six octaves at one bin per semitone.
        Self {
            n_bins: 72,
            bins_per_octave: 12,
            fmin: 65.406,
        }
    }
}

impl FrequencyGrid {
    pub fn new(n_bins: usize, bins_per_octave: usize, fmin: f64) -> Result<Self> {
        if n_bins == 0 || bins_per_octave == 0 || !(fmin.is_finite() && fmin > 0.0) {
            return Err(Error::invalid(
                "frequency grid needs n_bins > 0, bins_per_octave > 0 and a positive fmin",
            ));
        }
        Ok(Self {
            n_bins,
            bins_per_octave,
            fmin,
        })
    }

    /// Centre frequency of bin `j`. Negative indices extrapolate below `fmin`;
    /// `center(-1)` is the lower edge of bin 0.
    pub fn center(&self, j: i64) -> f64 {
        self.fmin * 2f64.powf(j as f64 / self.bins_per_octave as f64)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins as i64).map(|j| self.center(j)).collect()
    }

    /// Bin `j` such that `q_{j-1} < freq <= q_j`, or `None` outside
    /// `(q_{-1}, q_{n_bins-1}]`.
    pub fn bin_of(&self, freq: f64) -> Option<usize> {
        if !(freq.is_finite() && freq > 0.0) {
            return None;
        }
        let guess = (self.bins_per_octave as f64 * (freq / self.fmin).log2()).ceil();
        let mut j = guess.clamp(-1.0, self.n_bins as f64) as i64;
        while j > -1 && freq <= self.center(j - 1) {
            j -= 1;
        }
        while j < self.n_bins as i64 && freq > self.center(j) {
            j += 1;
        }
        if j < 0 || j >= self.n_bins as i64 || freq <= self.center(j - 1) {
            return None;
        }
        Some(j as usize)
    }

    /// Pitch distance in (fractional) bins between two frequencies.
    pub fn bins_between(&self, from: f64, to: f64) -> f64 {
        self.bins_per_octave as f64 * (to / from).log2()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frame_period_is_about_11_6_ms() {
        let tg = TimeGrid::default();
        assert!((tg.frame_period() - 256.0 / 22050.0).abs() < 1e-15);
        assert!((tg.frame_period() - 0.011610).abs() < 1e-6);
    }

    #[test]
    fn default_grid_spans_six_octaves() {
        let fg = FrequencyGrid::default();
        assert_eq!(fg.n_bins, 72);
        let c = fg.centers();
        assert!(c.windows(2).all(|w| w[1] > w[0]));
        assert!((c[71] / c[0] - 2f64.powf(71.0 / 12.0)).abs() < 1e-9);
    }

    #[test]
    fn bin_boundaries_are_right_closed() {
        let fg = FrequencyGrid::default();
        assert_eq!(fg.bin_of(fg.center(5)), Some(5));
        assert_eq!(fg.bin_of(fg.center(5) * (1.0 + 1e-9)), Some(6));
        assert_eq!(fg.bin_of(fg.center(0)), Some(0));
        assert_eq!(fg.bin_of(fg.center(-1)), None);
        assert_eq!(fg.bin_of(fg.center(-1) * (1.0 + 1e-12)), Some(0));
        assert_eq!(fg.bin_of(fg.center(71)), Some(71));
        assert_eq!(fg.bin_of(fg.center(71) * 1.0001), None);
        assert_eq!(fg.bin_of(0.0), None);
        assert_eq!(fg.bin_of(f64::NAN), None);
    }

    #[test]
    fn frame_span_matches_scan() {
        let tg = TimeGrid::default();
        let n = 50;
        for &(a, b) in &[
            (0.0, 0.0232),
            (0.1, 0.2),
            (tg.time_of(3), tg.time_of(7)),
            (0.55, 0.9),
            (-1.0, 0.01),
            (0.3, 0.2),
        ] {
            let scan: Vec<usize> = (0..n)
                .filter(|&i| a <= tg.time_of(i) && tg.time_of(i) <= b)
                .collect();
            let span: Vec<usize> = tg.frame_span(a, b, n).collect();
            assert_eq!(scan, span, "interval ({a}, {b})");
        }
    }
}
