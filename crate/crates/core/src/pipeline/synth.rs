//! Planted-error corpora: pure-tone renditions of random melodies whose
//! annotations are corrupted by the deformation function, so every
//! annotation error is known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{deform_track, diff_frames, track_seed, DeformationConfig, DeformationRecord};
use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::label::rasterize;
use crate::notes::{NoteEvent, NoteTrack};
use crate::spectral::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoteGenConfig {
    pub min_bin: usize,
    pub max_bin: usize,
    pub duration_sec: [f64; 2],
    pub gap_sec: [f64; 2],
    /// Silence before the first note.
    pub lead_in_sec: [f64; 2],
    pub amplitude: f32,
    pub fade_sec: f64,
}

impl Default for NoteGenConfig {
    fn default() -> Self {
        Self {
            min_bin: 18,
            max_bin: 54,
            duration_sec: [0.15, 0.6],
            gap_sec: [0.05, 0.5],
            lead_in_sec: [0.05, 0.4],
            amplitude: 0.5,
            fade_sec: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_tracks: usize,
    pub track_sec: f64,
    pub notes: NoteGenConfig,
    pub deformation: DeformationConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tracks: 60,
            track_sec: 3.0,
            notes: NoteGenConfig::default(),
            deformation: DeformationConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTrack {
    pub track_id: String,
    pub waveform: Waveform,
    pub clean: NoteTrack,
    pub corrupted: NoteTrack,
    pub records: Vec<DeformationRecord>,
    /// Frames whose rasterized labels differ between clean and corrupted.
    pub mask: Vec<usize>,
    pub n_frames: usize,
}

pub fn synth_track_id(k: usize) -> String {
    format!("synth_{k:03}")
}

fn melody(track_id: &str, cfg: &SynthConfig, fg: &FrequencyGrid, rng: &mut ChaCha8Rng) -> Result<NoteTrack> {
    let g = &cfg.notes;
    let mut notes = Vec::new();
    let mut t = rng.gen_range(g.lead_in_sec[0]..=g.lead_in_sec[1]);
    loop {
        let end = t + rng.gen_range(g.duration_sec[0]..=g.duration_sec[1]);
        if end > cfg.track_sec - g.fade_sec {
            break;
        }
        let bin = rng.gen_range(g.min_bin..=g.max_bin);
        notes.push(NoteEvent::new(t, end, fg.center(bin as i64))?);
        t = end + rng.gen_range(g.gap_sec[0]..=g.gap_sec[1]);
    }
    Ok(NoteTrack::new(track_id, notes))
}

/// Sum of sines, one per note, with linear fades at note boundaries.
pub fn render(track: &NoteTrack, n_samples: usize, sample_rate: u32, amplitude: f32, fade_sec: f64) -> Waveform {
    let sr = sample_rate as f64;
    let mut samples = vec![0.0f32; n_samples];
    for note in track.notes() {
        let first = (note.start_sec * sr).ceil() as usize;
        let last = ((note.end_sec * sr).floor() as usize).min(n_samples.saturating_sub(1));
        let fade = (fade_sec * sr).max(1.0);
        for (n, s) in samples.iter_mut().enumerate().take(last + 1).skip(first) {
            let t = n as f64 / sr;
            let edge = ((t - note.start_sec) * sr).min((note.end_sec - t) * sr);
            let env = (edge / fade).clamp(0.0, 1.0);
            let phase = 2.0 * std::f64::consts::PI * note.freq_hz * (t - note.start_sec);
            *s += (amplitude as f64 * env * phase.sin()) as f32;
        }
    }
    Waveform::new(samples, sample_rate)
}

pub fn synth_dataset(cfg: &SynthConfig, tg: &TimeGrid, fg: &FrequencyGrid) -> Result<Vec<SynthTrack>> {
    if cfg.n_tracks == 0 || cfg.track_sec.is_nan() || cfg.track_sec <= 0.0 {
        return Err(Error::invalid("a corpus needs at least one track of positive length"));
    }
    let g = &cfg.notes;
    if g.min_bin > g.max_bin || g.max_bin >= fg.n_bins || g.duration_sec[0] <= 0.0 || g.duration_sec[0] > g.duration_sec[1] {
        return Err(Error::invalid("note generator needs min_bin <= max_bin < n_bins and positive durations"));
    }
    if g.gap_sec[0] < 0.0 || g.gap_sec[0] > g.gap_sec[1] || g.lead_in_sec[0] < 0.0 || g.lead_in_sec[0] > g.lead_in_sec[1] {
        return Err(Error::invalid("note generator gaps must be non-negative ranges"));
    }
    cfg.deformation.validate()?;
    let n_samples = (cfg.track_sec * tg.sample_rate as f64).round() as usize;
    let n_frames = tg.frames_for_samples(n_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_tracks);
    for k in 0..cfg.n_tracks {
        let track_id = synth_track_id(k);
        let clean = melody(&track_id, cfg, fg, &mut rng)?;
        let waveform = render(&clean, n_samples, tg.sample_rate, g.amplitude, g.fade_sec);
        let deformed = deform_track(&clean, &cfg.deformation.clone().with_seed(track_seed(cfg.seed ^ cfg.deformation.rng_seed, &track_id)))?;
        let mask = diff_frames(
            &rasterize(&clean, tg, fg, n_frames)?.labels,
            &rasterize(&deformed.track, tg, fg, n_frames)?.labels,
        )?;
        out.push(SynthTrack {
            track_id,
            waveform,
            clean,
            corrupted: deformed.track,
            records: deformed.records,
            mask,
            n_frames,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::cqt;

    fn small(n: usize, deformation: DeformationConfig) -> SynthConfig {
        SynthConfig {
            n_tracks: n,
            deformation,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn identity_deformation_leaves_no_errors() {
        let c = synth_dataset(&small(6, DeformationConfig::identity()), &TimeGrid::default(), &FrequencyGrid::default()).unwrap();
        assert!(c.iter().all(|t| t.mask.is_empty() && t.clean == t.corrupted));
    }

    #[test]
    fn deterministic_and_corrupted() {
        let (tg, fg) = (TimeGrid::default(), FrequencyGrid::default());
        let a = synth_dataset(&small(8, DeformationConfig::default()), &tg, &fg).unwrap();
        let b = synth_dataset(&small(8, DeformationConfig::default()), &tg, &fg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.waveform, y.waveform);
            assert_eq!(x.corrupted, y.corrupted);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.n_frames, 259);
        }
        assert!(a.iter().any(|t| !t.mask.is_empty()));
        let peak = a.iter().flat_map(|t| &t.waveform.samples).fold(0.0f32, |m, s| m.max(s.abs()));
        assert!(peak <= 0.5 + 1e-6);
    }

    #[test]
    fn tones_peak_at_their_annotated_bin() {
        let (tg, fg) = (TimeGrid::default(), FrequencyGrid::default());
        let corpus = synth_dataset(&small(3, DeformationConfig::identity()), &tg, &fg).unwrap();
        let (mut hits, mut voiced) = (0, 0);
        for t in &corpus {
            let spec = cqt(&t.waveform, &fg, &tg).unwrap();
            let labels = rasterize(&t.clean, &tg, &fg, t.n_frames).unwrap().labels;
            for i in 0..t.n_frames {
                if let Some(bin) = labels.active_bin(i) {
                    voiced += 1;
                    hits += (spec.argmax(i) == bin) as usize;
                }
            }
        }
        assert!(voiced > 0);
        assert!(hits as f64 >= 0.9 * voiced as f64, "{hits}/{voiced}");
    }
}
