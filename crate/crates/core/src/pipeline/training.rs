//! Training data for the error detector, kept as references into per-track
//! spectrograms and label matrices rather than as materialized patches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{sample_negatives, track_seed, DeformationConfig};
use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::label::{rasterize, write_patch_input, LabelMatrix};
use crate::nn::{train, ArchConfig, PatchBatchSource, TrainConfig, TrainOutcome};
use crate::notes::NoteTrack;
use crate::select::{
    build_training_set, pseudo_salience, select_likely_correct, select_silence_positives, Labeled, Profile, SalienceMatrix,
    SelectionThresholds, SplitConfig, TrackKeyed,
};
use crate::spectral::{cqt, frame_energy, stack_channels, SpectrogramStack, Waveform};

use super::score::FrameScoreTrack;

/// Model input channels for a waveform without a separate vocal stem.
pub fn track_features(w: &Waveform, tg: &TimeGrid, fg: &FrequencyGrid) -> Result<SpectrogramStack> {
    stack_channels(&cqt(w, fg, tg)?, None)
}

/// One track as the detector sees it.
#[derive(Debug, Clone)]
pub struct AnnotatedTrack {
    pub track_id: String,
    pub stack: SpectrogramStack,
    pub notes: NoteTrack,
    pub labels: LabelMatrix,
    /// External salience; the vocal channel stands in when absent.
    pub salience: Option<SalienceMatrix>,
}

impl AnnotatedTrack {
    pub fn new(stack: SpectrogramStack, notes: NoteTrack, tg: &TimeGrid, fg: &FrequencyGrid) -> Result<Self> {
        let labels = rasterize(&notes, tg, fg, stack.n_frames())?.labels;
        Ok(Self {
            track_id: notes.track_id.clone(),
            stack,
            notes,
            labels,
            salience: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExampleConfig {
    pub context: usize,
    /// Agreement profiles whose selections are pooled into the positives.
    pub profiles: Vec<Profile>,
    /// Moving-average and silence parameters; the bounds come from `profiles`.
    pub selection: SelectionThresholds,
    pub negatives_per_track: usize,
    pub deformation: DeformationConfig,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self {
            context: 40,
            profiles: vec![Profile::Train, Profile::Test],
            selection: SelectionThresholds::train(),
            negatives_per_track: 200,
            deformation: DeformationConfig {
                passes: 4,
                ..DeformationConfig::default()
            },
        }
    }
}

/// A frame of one track, labelled either by the annotation (`variant: None`)
/// or by one of the track's deformations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRef {
    pub track: usize,
    pub track_id: String,
    pub variant: Option<usize>,
    pub center: usize,
}

impl TrackKeyed for ExampleRef {
    fn track_key(&self) -> &str {
        &self.track_id
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackExampleCounts {
    pub track_id: String,
    pub agreement: usize,
    pub silence: usize,
    pub negatives: usize,
}

pub struct ExamplePool<'a> {
    tracks: &'a [AnnotatedTrack],
    variants: Vec<Vec<LabelMatrix>>,
    context: usize,
    pub positives: Vec<ExampleRef>,
    pub negatives: Vec<ExampleRef>,
    pub counts: Vec<TrackExampleCounts>,
}

struct TrackExamples {
    positives: Vec<usize>,
    variants: Vec<LabelMatrix>,
    negatives: Vec<(usize, usize)>,
    counts: TrackExampleCounts,
}

/// Frames of `t` that look correctly labelled: agreement selections pooled
/// over `cfg.profiles`, and silence selections. Both ascending.
pub fn select_positives(t: &AnnotatedTrack, cfg: &ExampleConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let salience = match &t.salience {
        Some(s) => s.clone(),
        None => pseudo_salience(&t.stack),
    };
    let mut agreement = Vec::new();
    for &p in &cfg.profiles {
        let base = SelectionThresholds::for_profile(p);
        let th = SelectionThresholds {
            profile: p,
            local: base.local,
            patch: base.patch,
            ..cfg.selection.clone()
        };
        agreement.extend(select_likely_correct(&t.labels, &salience, &th, cfg.context)?);
    }
    agreement.sort_unstable();
    agreement.dedup();
    let energy = frame_energy(&t.stack, 0)?;
    let silence = select_silence_positives(&t.labels, &energy, &cfg.selection, cfg.context)?;
    Ok((agreement, silence))
}

fn track_examples(t: &AnnotatedTrack, cfg: &ExampleConfig, tg: &TimeGrid, fg: &FrequencyGrid) -> Result<TrackExamples> {
    let (agreement, silence) = select_positives(t, cfg)?;
    let (n_agreement, n_silence) = (agreement.len(), silence.len());
    let mut positives = agreement;
    positives.extend(silence);
    positives.sort_unstable();
    positives.dedup();

    let deform = cfg.deformation.clone().with_seed(track_seed(cfg.deformation.rng_seed, &t.track_id));
    let neg = if t.stack.n_frames() > 2 * cfg.context + 1 {
        Some(sample_negatives(&t.stack, &t.notes, tg, fg, &deform, cfg.negatives_per_track, cfg.context)?)
    } else {
        None
    };
    let (variants, negatives) = match neg {
        Some(n) => (n.variants, n.examples.iter().map(|e| (e.variant, e.center)).collect()),
        None => (Vec::new(), Vec::new()),
    };
    Ok(TrackExamples {
        counts: TrackExampleCounts {
            track_id: t.track_id.clone(),
            agreement: n_agreement,
            silence: n_silence,
            negatives: negatives.len(),
        },
        positives,
        variants,
        negatives,
    })
}

/// Selects positives and samples negatives on every track.
pub fn collect_examples<'a>(tracks: &'a [AnnotatedTrack], cfg: &ExampleConfig, tg: &TimeGrid, fg: &FrequencyGrid) -> Result<ExamplePool<'a>> {
    if cfg.context == 0 {
        return Err(Error::invalid("patch context must be positive"));
    }
    let per_track: Vec<TrackExamples> = tracks.par_iter().map(|t| track_examples(t, cfg, tg, fg)).collect::<Result<_>>()?;
    let mut pool = ExamplePool {
        tracks,
        variants: Vec::with_capacity(tracks.len()),
        context: cfg.context,
        positives: Vec::new(),
        negatives: Vec::new(),
        counts: Vec::with_capacity(tracks.len()),
    };
    for (k, ex) in per_track.into_iter().enumerate() {
        let id = &tracks[k].track_id;
        pool.positives.extend(ex.positives.into_iter().map(|center| ExampleRef {
            track: k,
            track_id: id.clone(),
            variant: None,
            center,
        }));
        pool.negatives.extend(ex.negatives.into_iter().map(|(v, center)| ExampleRef {
            track: k,
            track_id: id.clone(),
            variant: Some(v),
            center,
        }));
        pool.variants.push(ex.variants);
        pool.counts.push(ex.counts);
    }
    Ok(pool)
}

impl<'a> ExamplePool<'a> {
    pub fn labels_of(&self, e: &ExampleRef) -> &LabelMatrix {
        match e.variant {
            None => &self.tracks[e.track].labels,
            Some(v) => &self.variants[e.track][v],
        }
    }

    pub fn input_len(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.stack.n_bins() * (2 * self.context + 1) * (t.stack.n_channels() + 1))
    }

    /// Track-level train/holdout split, balanced within each side.
    pub fn split(&self, cfg: &SplitConfig) -> Result<(ExampleSet<'_, 'a>, ExampleSet<'_, 'a>, Vec<String>)> {
        let s = build_training_set(self.positives.clone(), self.negatives.clone(), cfg)?;
        Ok((
            ExampleSet { pool: self, items: s.train },
            ExampleSet { pool: self, items: s.holdout },
            s.holdout_tracks,
        ))
    }
}

pub struct ExampleSet<'p, 'a> {
    pool: &'p ExamplePool<'a>,
    pub items: Vec<Labeled<ExampleRef>>,
}

impl PatchBatchSource for ExampleSet<'_, '_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn target(&self, index: usize) -> u8 {
        self.items[index].z
    }

    fn write_input(&self, index: usize, out: &mut [f32]) {
        let e = &self.items[index].item;
        write_patch_input(&self.pool.tracks[e.track].stack, self.pool.labels_of(e), e.center, self.pool.context, out);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub examples: ExampleConfig,
    pub split: SplitConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

pub struct DetectorRun {
    pub outcome: TrainOutcome,
    pub holdout_tracks: Vec<String>,
    pub n_train: usize,
    pub n_holdout: usize,
    pub counts: Vec<TrackExampleCounts>,
}

/// Builds the example pool, splits it by track and trains a detector.
pub fn train_detector(tracks: &[AnnotatedTrack], cfg: &DetectorConfig, tg: &TimeGrid, fg: &FrequencyGrid) -> Result<DetectorRun> {
    let pool = collect_examples(tracks, &cfg.examples, tg, fg)?;
    log::info!(
        "{} positive and {} negative candidate examples from {} tracks",
        pool.positives.len(),
        pool.negatives.len(),
        tracks.len()
    );
    let (train_set, holdout_set, holdout_tracks) = pool.split(&cfg.split)?;
    let arch = ArchConfig {
        width: 2 * cfg.examples.context + 1,
        n_bins: tracks[0].stack.n_bins(),
        channels: tracks[0].stack.n_channels() + 1,
        ..cfg.arch.clone()
    };
    let outcome = train(&train_set, &holdout_set, &arch, &cfg.train)?;
    Ok(DetectorRun {
        outcome,
        holdout_tracks,
        n_train: train_set.len(),
        n_holdout: holdout_set.len(),
        counts: pool.counts.clone(),
    })
}

/// Frame-level agreement between thresholded scores and known error frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl DetectionStats {
    pub fn add(&mut self, scores: &FrameScoreTrack, error_frames: &[usize], threshold: f64) -> Result<()> {
        let n = scores.scores.len();
        if error_frames.iter().any(|&i| i >= n) {
            return Err(Error::invalid(format!("error frame outside track of {n} frames")));
        }
        let mut is_error = vec![false; n];
        error_frames.iter().for_each(|&i| is_error[i] = true);
        for (g, e) in scores.scores.iter().zip(is_error) {
            match ((*g as f64) >= threshold, e) {
                (true, true) => self.true_positive += 1,
                (true, false) => self.false_positive += 1,
                (false, false) => self.true_negative += 1,
                (false, true) => self.false_negative += 1,
            }
        }
        Ok(())
    }

    /// Mean of the per-class recalls; a class with no frames is left out.
    pub fn balanced_accuracy(&self) -> f64 {
        let mut recalls = Vec::new();
        let pos = self.true_positive + self.false_negative;
        let neg = self.true_negative + self.false_positive;
        if pos > 0 {
            recalls.push(self.true_positive as f64 / pos as f64);
        }
        if neg > 0 {
            recalls.push(self.true_negative as f64 / neg as f64);
        }
        if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{synth_dataset, SynthConfig};

    fn tracks(n: usize) -> Vec<AnnotatedTrack> {
        let (tg, fg) = (TimeGrid::default(), FrequencyGrid::default());
        let cfg = SynthConfig {
            n_tracks: n,
            seed: 2,
            ..SynthConfig::default()
        };
        synth_dataset(&cfg, &tg, &fg)
            .unwrap()
            .into_iter()
            .map(|t| AnnotatedTrack::new(track_features(&t.waveform, &tg, &fg).unwrap(), t.corrupted, &tg, &fg).unwrap())
            .collect()
    }

    #[test]
    fn pool_refs_point_at_the_right_labels() {
        let (tg, fg) = (TimeGrid::default(), FrequencyGrid::default());
        let ts = tracks(3);
        let cfg = ExampleConfig {
            selection: SelectionThresholds {
                silence_window_v: 20,
                ..SelectionThresholds::train()
            },
            profiles: vec![Profile::Train, Profile::Test],
            ..ExampleConfig::default()
        };
        let pool = collect_examples(&ts, &cfg, &tg, &fg).unwrap();
        assert!(!pool.positives.is_empty() && !pool.negatives.is_empty());
        for n in &pool.negatives {
            assert_ne!(pool.labels_of(n).row(n.center), ts[n.track].labels.row(n.center));
        }
        let again = collect_examples(&ts, &cfg, &tg, &fg).unwrap();
        assert_eq!(again.positives, pool.positives);
        assert_eq!(again.negatives, pool.negatives);

        let (train_set, holdout, held) = pool.split(&SplitConfig::default()).unwrap();
        assert_eq!(held.len(), 1);
        assert!(holdout.items.iter().all(|e| held.contains(&e.item.track_id)));
        assert!(train_set.items.iter().all(|e| !held.contains(&e.item.track_id)));
        let mut buf = vec![0.0; pool.input_len()];
        train_set.write_input(0, &mut buf);
        assert!(buf.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn balanced_accuracy_of_counts() {
        let s = DetectionStats {
            true_positive: 3,
            false_negative: 1,
            true_negative: 5,
            false_positive: 5,
        };
        assert!((s.balanced_accuracy() - 0.625).abs() < 1e-12);
        let mut t = DetectionStats::default();
        let scores = FrameScoreTrack {
            track_id: "a".into(),
            scores: vec![0.9, 0.1, 0.6, 0.2],
            threshold: 0.5,
        };
        t.add(&scores, &[0, 1], 0.5).unwrap();
        assert_eq!((t.true_positive, t.false_negative, t.false_positive, t.true_negative), (1, 1, 1, 1));
        assert!(t.add(&scores, &[4], 0.5).is_err());
    }
}
