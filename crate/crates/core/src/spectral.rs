//! Constant-Q front end.
//!
//! The filterbank is evaluated directly in the time domain: bin `j` correlates
//! a Hann-windowed complex exponential at `q_j` whose length holds the quality
//! factor `Q = 1 / (2^(1/B) - 1)` constant across bins. Frame `i` is centred on
//! sample `i * hop`; samples outside the signal count as zero.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, TimeGrid};

/// Log compression gain applied to filterbank magnitudes.
pub const COMPRESSION_GAMMA: f64 = 1000.0;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono PCM or float WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::format(
                "WAV",
                format!("expected mono audio, found {} channels", spec.channels),
            ));
        }
        let samples = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        Ok(Self::new(samples, spec.sample_rate))
    }

    /// Writes a mono 32-bit float WAV file (lossless for our sample type).
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(s)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// A single-channel `n_frames x n_bins` magnitude matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn zeros(n_frames: usize, n_bins: usize) -> Self {
        Self {
            n_frames,
            n_bins,
            data: vec![0.0; n_frames * n_bins],
        }
    }

    pub fn get(&self, frame: usize, bin: usize) -> f32 {
        self.data[frame * self.n_bins + bin]
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    pub fn argmax(&self, frame: usize) -> usize {
        argmax(self.row(frame))
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}

struct BinKernel {
    half: usize,
    /// Window-weighted cosine/sine taps for offsets `-half..=half`.
    cos: Vec<f64>,
    sin: Vec<f64>,
}

/// Precomputed constant-Q filterbank for one grid configuration.
pub struct CqtKernel {
    fg: FrequencyGrid,
    tg: TimeGrid,
    bins: Vec<BinKernel>,
}

impl CqtKernel {
    pub fn new(fg: &FrequencyGrid, tg: &TimeGrid) -> Result<Self> {
        let sr = tg.sample_rate as f64;
        let q = quality_factor(fg);
        let mut bins = Vec::with_capacity(fg.n_bins);
        for j in 0..fg.n_bins {
            let f = fg.center(j as i64);
            if f >= sr / 2.0 {
                return Err(Error::invalid(format!(
                    "bin {j} at {f:.1} Hz is above Nyquist for {sr} Hz audio"
                )));
            }
            let half = ((q * sr / f) / 2.0).round().max(1.0) as usize;
            let omega = 2.0 * PI * f / sr;
            let window: Vec<f64> = (0..=2 * half)
                .map(|k| {
                    let m = k as f64 - half as f64;
                    0.5 * (1.0 + (PI * m / (half as f64 + 1.0)).cos())
                })
                .collect();
            // A sinusoid of amplitude A at q_j then measures A.
            let norm = 2.0 / window.iter().sum::<f64>();
            let (cos, sin) = window
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let phase = omega * (k as f64 - half as f64);
                    (w * norm * phase.cos(), w * norm * phase.sin())
                })
                .unzip();
            bins.push(BinKernel { half, cos, sin });
        }
        Ok(Self {
            fg: *fg,
            tg: *tg,
            bins,
        })
    }

    /// Largest kernel half-length in samples (the lowest bin's).
    pub fn max_half_width(&self) -> usize {
        self.bins.iter().map(|b| b.half).max().unwrap_or(0)
    }

    /// Frames whose every kernel lies entirely inside a signal of `n_samples`.
    pub fn interior_frames(&self, n_samples: usize) -> std::ops::Range<usize> {
        let half = self.max_half_width();
        let hop = self.tg.hop;
        let n_frames = self.tg.frames_for_samples(n_samples);
        let lo = half.div_ceil(hop);
        let hi = if n_samples > half {
            ((n_samples - 1 - half) / hop + 1).min(n_frames)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Raw (uncompressed) filterbank magnitudes.
    pub fn magnitudes(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.tg.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.tg.sample_rate,
                actual: w.sample_rate,
            });
        }
        if w.samples.is_empty() {
            return Err(Error::invalid("cqt needs a non-empty waveform"));
        }
        let x = &w.samples;
        let n = x.len() as isize;
        let n_frames = self.tg.frames_for_samples(x.len());
        let mut out = Spectrogram::zeros(n_frames, self.fg.n_bins);
        for i in 0..n_frames {
            let c = (i * self.tg.hop) as isize;
            for (j, k) in self.bins.iter().enumerate() {
                let start = c - k.half as isize;
                let lo = (-start).max(0) as usize;
                let hi = ((n - start) as usize).min(k.cos.len());
                let (mut re, mut im) = (0.0f64, 0.0f64);
                if lo < hi {
                    let seg = &x[(start + lo as isize) as usize..(start + hi as isize) as usize];
                    for ((&s, &kc), &ks) in seg.iter().zip(&k.cos[lo..hi]).zip(&k.sin[lo..hi]) {
                        let s = s as f64;
                        re += s * kc;
                        im -= s * ks;
                    }
                }
                out.data[i * self.fg.n_bins + j] = (re * re + im * im).sqrt() as f32;
            }
        }
        Ok(out)
    }

    /// Log-compressed magnitudes in `[0, 1]`.
    pub fn transform(&self, w: &Waveform) -> Result<Spectrogram> {
        let mut s = self.magnitudes(w)?;
        for v in &mut s.data {
            *v = compress(*v as f64) as f32;
        }
        Ok(s)
    }
}

/// `Q = 1 / (2^(1/bins_per_octave) - 1)`.
pub fn quality_factor(fg: &FrequencyGrid) -> f64 {
    1.0 / (2f64.powf(1.0 / fg.bins_per_octave as f64) - 1.0)
}

/// `log1p(gamma * m) / log1p(gamma)`, clipped to `[0, 1]`.
pub fn compress(magnitude: f64) -> f64 {
    ((COMPRESSION_GAMMA * magnitude).ln_1p() / COMPRESSION_GAMMA.ln_1p()).clamp(0.0, 1.0)
}

/// Constant-Q magnitude spectrogram, `ceil(len / hop)` frames by `n_bins`.
pub fn cqt(w: &Waveform, fg: &FrequencyGrid, tg: &TimeGrid) -> Result<Spectrogram> {
    if w.sample_rate != tg.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: tg.sample_rate,
            actual: w.sample_rate,
        });
    }
    CqtKernel::new(fg, tg)?.transform(w)
}

/// Model input channels for one track, `n_frames x n_bins x n_channels`.
/// Channel 0 is the mixture, channel 1 the vocal stem.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramStack {
    n_frames: usize,
    n_bins: usize,
    n_channels: usize,
    data: Vec<f32>,
    /// Channel 1 duplicates the mixture because no vocal stem was supplied.
    pub vocal_is_proxy: bool,
}

impl SpectrogramStack {
    pub fn new(
        n_frames: usize,
        n_bins: usize,
        n_channels: usize,
        data: Vec<f32>,
        vocal_is_proxy: bool,
    ) -> Result<Self> {
        if data.len() != n_frames * n_bins * n_channels {
            return Err(Error::ShapeMismatch {
                context: "spectrogram stack".into(),
                expected: vec![n_frames, n_bins, n_channels],
                actual: vec![data.len()],
            });
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::invalid(format!(
                "spectrogram values must be finite and in [0, 1], found {bad}"
            )));
        }
        Ok(Self {
            n_frames,
            n_bins,
            n_channels,
            data,
            vocal_is_proxy,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, frame: usize, bin: usize, channel: usize) -> f32 {
        self.data[(frame * self.n_bins + bin) * self.n_channels + channel]
    }

    /// All bins and channels of one frame, `n_bins x n_channels`.
    pub fn frame(&self, frame: usize) -> &[f32] {
        let w = self.n_bins * self.n_channels;
        &self.data[frame * w..(frame + 1) * w]
    }

    pub fn channel(&self, channel: usize) -> Result<Spectrogram> {
        if channel >= self.n_channels {
            return Err(Error::invalid(format!(
                "channel {channel} out of range for a {}-channel stack",
                self.n_channels
            )));
        }
        Ok(Spectrogram {
            n_frames: self.n_frames,
            n_bins: self.n_bins,
            data: self.data.iter().skip(channel).step_by(self.n_channels).copied().collect(),
        })
    }

    pub fn from_ngmx(array: crate::ngmx::NgmxArray, vocal_is_proxy: bool) -> Result<Self> {
        match (array.dims.as_slice(), array.data) {
            (&[f, b, c], crate::ngmx::NgmxData::F32(v)) => Self::new(f, b, c, v, vocal_is_proxy),
            _ => Err(Error::format("NGMX", "spectrogram stack must be a 3-D float32 array")),
        }
    }
}

/// Interleaves the mixture and vocal spectrograms into a two-channel stack.
/// Without a vocal stem the mixture is duplicated and the stack is flagged.
pub fn stack_channels(mix: &Spectrogram, vocal: Option<&Spectrogram>) -> Result<SpectrogramStack> {
    if let Some(v) = vocal {
        if v.n_frames != mix.n_frames || v.n_bins != mix.n_bins {
            return Err(Error::ShapeMismatch {
                context: "vocal vs mixture spectrogram".into(),
                expected: vec![mix.n_frames, mix.n_bins],
                actual: vec![v.n_frames, v.n_bins],
            });
        }
    }
    let second = vocal.unwrap_or(mix);
    let data = mix
        .data
        .iter()
        .zip(&second.data)
        .flat_map(|(&a, &b)| [a, b])
        .collect();
    SpectrogramStack::new(mix.n_frames, mix.n_bins, 2, data, vocal.is_none())
}

/// Per-frame sum over bins of one channel.
pub fn frame_energy(stack: &SpectrogramStack, channel: usize) -> Result<Vec<f64>> {
    if channel >= stack.n_channels() {
        return Err(Error::invalid(format!(
            "channel {channel} out of range for a {}-channel stack",
            stack.n_channels()
        )));
    }
    Ok((0..stack.n_frames())
        .map(|i| {
            stack
                .frame(i)
                .iter()
                .skip(channel)
                .step_by(stack.n_channels())
                .map(|&v| v as f64)
                .sum()
        })
        .collect())
}
