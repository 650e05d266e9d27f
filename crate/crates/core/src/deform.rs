//! Contextually realistic corruption of note annotations.
//!
//! [`deform_track`] perturbs notes the way crowd-sourced annotations tend to
//! go wrong (late or early boundaries, wrong pitch, missing or spurious notes)
//! while keeping the result a valid track. [`sample_negatives`] turns the
//! frames whose label row changed into `z = 1` training examples.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::label::{self, rasterize, LabelMatrix, Patch};
use crate::notes::{validate_notes, NoteEvent, NoteTrack};
use crate::spectral::SpectrogramStack;

/// Minimum spacing kept between a moved or inserted note and its neighbours,
/// so closed label intervals of distinct notes never share a frame.
const NEIGHBOUR_GAP_SEC: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationConfig {
    pub p_onset_shift: f64,
    pub p_offset_shift: f64,
    pub p_pitch_shift: f64,
    pub p_delete: f64,
    /// Per-gap probability of inserting a spurious note.
    pub p_insert: f64,
    /// Magnitude range of boundary shifts in seconds; the sign is random.
    pub shift_range_sec: [f64; 2],
    /// Magnitude range of pitch shifts in whole semitones; the sign is random.
    pub pitch_range_semitones: [u32; 2],
    pub min_duration_sec: f64,
    /// Independent deformation draws per track when sampling negatives.
    pub passes: usize,
    /// Redraws allowed per pass when a draw changes no interior frame.
    pub max_retries: usize,
    pub rng_seed: u64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            p_onset_shift: 0.15,
            p_offset_shift: 0.15,
            p_pitch_shift: 0.15,
            p_delete: 0.05,
            p_insert: 0.1,
            shift_range_sec: [0.05, 0.4],
            pitch_range_semitones: [1, 5],
            min_duration_sec: 0.1,
            passes: 1,
            max_retries: 10,
            rng_seed: 0,
        }
    }
}

impl DeformationConfig {
    /// A configuration that never changes anything.
    pub fn identity() -> Self {
        Self {
            p_onset_shift: 0.0,
            p_offset_shift: 0.0,
            p_pitch_shift: 0.0,
            p_delete: 0.0,
            p_insert: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_onset_shift", self.p_onset_shift),
            ("p_offset_shift", self.p_offset_shift),
            ("p_pitch_shift", self.p_pitch_shift),
            ("p_delete", self.p_delete),
            ("p_insert", self.p_insert),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} is not a probability")));
            }
        }
        let per_note = self.p_onset_shift + self.p_offset_shift + self.p_pitch_shift + self.p_delete;
        if per_note > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "per-note modification probabilities sum to {per_note} > 1"
            )));
        }
        let [lo, hi] = self.shift_range_sec;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("shift_range_sec must satisfy 0 < lo <= hi"));
        }
        let [lo, hi] = self.pitch_range_semitones;
        if !(lo >= 1 && hi >= lo) {
            return Err(Error::invalid("pitch_range_semitones must satisfy 1 <= lo <= hi"));
        }
        if !(self.min_duration_sec > 0.0 && self.min_duration_sec.is_finite()) {
            return Err(Error::invalid("min_duration_sec must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformationKind {
    Onset,
    Offset,
    Pitch,
    Delete,
    Insert,
}

/// Provenance of one modification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationRecord {
    pub kind: DeformationKind,
    /// Index into the original (sorted) track; `None` for insertions.
    pub note_index: Option<usize>,
    /// Realized magnitude: signed seconds for boundary shifts, signed
    /// semitones for pitch shifts, duration for insertions, 0 for deletions.
    pub magnitude: f64,
    pub before: Option<NoteEvent>,
    pub after: Option<NoteEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deformed {
    pub track: NoteTrack,
    pub records: Vec<DeformationRecord>,
}

/// Stable 64-bit FNV-1a hash, used to derive per-track seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `seed ^ hash(track_id)`.
pub fn track_seed(seed: u64, track_id: &str) -> u64 {
    seed ^ fnv1a64(track_id.as_bytes())
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Applies the modification function to a valid track.
///
/// Each original note receives at most one of onset shift, offset shift,
/// pitch shift or deletion. Afterwards every gap between occupied intervals
/// may receive one inserted note whose duration is resampled from the track's
/// own durations and whose pitch lies within the track's range +-2 semitones.
/// Shifts that would collide with a neighbour (original or modified) or shrink
/// a note below `min_duration_sec` are clamped to the largest feasible value.
pub fn deform_track(track: &NoteTrack, cfg: &DeformationConfig) -> Result<Deformed> {
    cfg.validate()?;
    let violations = validate_notes(track);
    if !violations.is_empty() {
        return Err(Error::invalid(format!(
            "cannot deform an invalid track ({} violation(s), first: {:?})",
            violations.len(),
            violations[0]
        )));
    }
    let original = track.notes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut current: Vec<Option<NoteEvent>> = original.iter().copied().map(Some).collect();
    let mut records = Vec::new();

    let cuts = [
        cfg.p_onset_shift,
        cfg.p_onset_shift + cfg.p_offset_shift,
        cfg.p_onset_shift + cfg.p_offset_shift + cfg.p_pitch_shift,
        cfg.p_onset_shift + cfg.p_offset_shift + cfg.p_pitch_shift + cfg.p_delete,
    ];
    for i in 0..original.len() {
        let u: f64 = rng.gen();
        let note = original[i];
        let min_dur = cfg.min_duration_sec.min(note.duration());
        if u < cuts[0] {
            let proposed = note.start_sec + signed(&mut rng, cfg.shift_range_sec);
            let (left, _) = neighbour_bounds(original, &current, i);
            let lo = left.map_or(0.0, |l| l + NEIGHBOUR_GAP_SEC).max(0.0).min(note.start_sec);
            let hi = (note.end_sec - min_dur).max(note.start_sec);
            let start = proposed.clamp(lo, hi);
            if start != note.start_sec {
                let after = NoteEvent { start_sec: start, ..note };
                current[i] = Some(after);
                records.push(record(DeformationKind::Onset, i, start - note.start_sec, note, Some(after)));
            }
        } else if u < cuts[1] {
            let proposed = note.end_sec + signed(&mut rng, cfg.shift_range_sec);
            let (_, right) = neighbour_bounds(original, &current, i);
            let lo = (note.start_sec + min_dur).min(note.end_sec);
            let hi = right.map_or(f64::INFINITY, |r| r - NEIGHBOUR_GAP_SEC).max(note.end_sec);
            let end = proposed.clamp(lo, hi);
            if end != note.end_sec {
                let after = NoteEvent { end_sec: end, ..note };
                current[i] = Some(after);
                records.push(record(DeformationKind::Offset, i, end - note.end_sec, note, Some(after)));
            }
        } else if u < cuts[2] {
            let [lo, hi] = cfg.pitch_range_semitones;
            let steps = rng.gen_range(lo..=hi) as i32 * if rng.gen::<bool>() { 1 } else { -1 };
            let after = NoteEvent {
                freq_hz: note.freq_hz * 2f64.powf(steps as f64 / 12.0),
                ..note
            };
            current[i] = Some(after);
            records.push(record(DeformationKind::Pitch, i, steps as f64, note, Some(after)));
        } else if u < cuts[3] {
            current[i] = None;
            records.push(record(DeformationKind::Delete, i, 0.0, note, None));
        }
    }

    let mut inserted = Vec::new();
    if cfg.p_insert > 0.0 && !original.is_empty() {
        let durations: Vec<f64> = original.iter().map(NoteEvent::duration).collect();
        let f_lo = original.iter().map(|n| n.freq_hz).fold(f64::INFINITY, f64::min);
        let f_hi = original.iter().map(|n| n.freq_hz).fold(0.0, f64::max);
        let span = (12.0 * (f_hi / f_lo).log2()).round() as i32;
        for (gap_lo, gap_hi) in free_gaps(original, &current) {
            if rng.gen::<f64>() >= cfg.p_insert {
                continue;
            }
            let dur = durations[rng.gen_range(0..durations.len())].max(cfg.min_duration_sec);
            let steps = rng.gen_range(-2..=span + 2);
            let first = gap_lo + NEIGHBOUR_GAP_SEC;
            let last = gap_hi - NEIGHBOUR_GAP_SEC - dur;
            if last < first {
                continue;
            }
            let start = if last > first { rng.gen_range(first..=last) } else { first };
            let note = NoteEvent {
                start_sec: start,
                end_sec: start + dur,
                freq_hz: f_lo * 2f64.powf(steps as f64 / 12.0),
            };
            inserted.push(note);
            records.push(DeformationRecord {
                kind: DeformationKind::Insert,
                note_index: None,
                magnitude: dur,
                before: None,
                after: Some(note),
            });
        }
    }

    let notes = current.into_iter().flatten().chain(inserted).collect();
    Ok(Deformed {
        track: NoteTrack::new(track.track_id.clone(), notes),
        records,
    })
}

fn signed(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    let m = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    if rng.gen::<bool>() {
        m
    } else {
        -m
    }
}

fn record(kind: DeformationKind, i: usize, magnitude: f64, before: NoteEvent, after: Option<NoteEvent>) -> DeformationRecord {
    DeformationRecord {
        kind,
        note_index: Some(i),
        magnitude,
        before: Some(before),
        after,
    }
}

/// Nearest occupied boundary to the left (an end) and right (a start) of note
/// `i`, over every other note in both its original and current form.
fn neighbour_bounds(original: &[NoteEvent], current: &[Option<NoteEvent>], i: usize) -> (Option<f64>, Option<f64>) {
    let me = original[i];
    let mut left: Option<f64> = None;
    let mut right: Option<f64> = None;
    for (j, (o, c)) in original.iter().zip(current).enumerate() {
        if j == i {
            continue;
        }
        for n in std::iter::once(o).chain(c.as_ref()) {
            if n.end_sec <= me.start_sec {
                left = Some(left.map_or(n.end_sec, |l| l.max(n.end_sec)));
            } else {
                right = Some(right.map_or(n.start_sec, |r| r.min(n.start_sec)));
            }
        }
    }
    (left, right)
}

/// Gaps between the union of original and current note intervals, including
/// the lead-in from time zero. The region after the last note is unbounded
/// (the track end is not known here) and is not offered.
fn free_gaps(original: &[NoteEvent], current: &[Option<NoteEvent>]) -> Vec<(f64, f64)> {
    let mut spans: Vec<(f64, f64)> = original
        .iter()
        .chain(current.iter().flatten())
        .map(|n| (n.start_sec, n.end_sec))
        .collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gaps = Vec::new();
    let mut cursor = 0.0f64;
    for (s, e) in spans {
        if s > cursor {
            gaps.push((cursor, s));
        }
        cursor = cursor.max(e);
    }
    gaps
}

/// Frames whose label row differs between `labels` and `modified`.
pub fn diff_frames(labels: &LabelMatrix, modified: &LabelMatrix) -> Result<Vec<usize>> {
    if labels.shape() != modified.shape() {
        return Err(Error::ShapeMismatch {
            context: "diff_frames".into(),
            expected: labels.shape().to_vec(),
            actual: modified.shape().to_vec(),
        });
    }
    Ok((0..labels.n_frames())
        .filter(|&i| labels.row(i) != modified.row(i))
        .collect())
}

/// Frame-level error mask reconstructed from deformation records alone: the
/// frames covered by the symmetric difference of each record's before/after
/// label cells.
pub fn error_mask_from_records(
    records: &[DeformationRecord],
    tg: &TimeGrid,
    fg: &FrequencyGrid,
    n_frames: usize,
) -> Vec<usize> {
    let cells = |n: &Option<NoteEvent>| -> BTreeSet<(usize, usize)> {
        match n.and_then(|n| fg.bin_of(n.freq_hz).map(|b| (n, b))) {
            Some((n, b)) => tg.frame_span(n.start_sec, n.end_sec, n_frames).map(|i| (i, b)).collect(),
            None => BTreeSet::new(),
        }
    };
    let mut frames = BTreeSet::new();
    for r in records {
        let before = cells(&r.before);
        let after = cells(&r.after);
        frames.extend(before.symmetric_difference(&after).map(|&(i, _)| i));
    }
    frames.into_iter().collect()
}

/// A sampled negative: frame `center` of deformation variant `variant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeRef {
    pub variant: usize,
    pub center: usize,
}

/// Output of [`sample_negatives`].
#[derive(Debug, Clone)]
pub struct NegativeSamples {
    /// Deformed label matrices; `NegativeRef::variant` indexes this list.
    pub variants: Vec<LabelMatrix>,
    pub records: Vec<Vec<DeformationRecord>>,
    pub examples: Vec<NegativeRef>,
    /// Passes that produced no differing interior frame within `max_retries`.
    pub starved_passes: usize,
}

/// One labelled training patch: `z = 1` when the centre label is wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchExample {
    pub track_id: String,
    pub patch: Patch,
    pub z: u8,
}

impl NegativeSamples {
    pub fn materialize(&self, track_id: &str, stack: &SpectrogramStack, context: usize) -> Result<Vec<PatchExample>> {
        self.examples
            .iter()
            .map(|e| {
                Ok(PatchExample {
                    track_id: track_id.to_string(),
                    patch: label::extract_patch(stack, &self.variants[e.variant], e.center, context)?,
                    z: 1,
                })
            })
            .collect()
    }
}

/// Frames whose `(2n+1)` window lies entirely inside the track.
pub fn interior_frames(n_frames: usize, context: usize) -> std::ops::Range<usize> {
    if n_frames <= 2 * context {
        0..0
    } else {
        context..n_frames - context
    }
}

/// Draws up to `n_samples` negative examples, without replacement, from the
/// interior frames where a deformation of `track` changes the label row.
pub fn sample_negatives(
    stack: &SpectrogramStack,
    track: &NoteTrack,
    tg: &TimeGrid,
    fg: &FrequencyGrid,
    cfg: &DeformationConfig,
    n_samples: usize,
    context: usize,
) -> Result<NegativeSamples> {
    let n_frames = stack.n_frames();
    if n_frames <= 2 * context + 1 {
        return Err(Error::invalid(format!(
            "track of {n_frames} frames is too short for context {context}"
        )));
    }
    let original = rasterize(track, tg, fg, n_frames)?.labels;
    label::check_aligned(stack, &original)?;
    let interior = interior_frames(n_frames, context);

    let mut out = NegativeSamples {
        variants: Vec::new(),
        records: Vec::new(),
        examples: Vec::new(),
        starved_passes: 0,
    };
    let mut candidates = Vec::new();
    for pass in 0..cfg.passes {
        let mut found = false;
        for attempt in 0..cfg.max_retries.max(1) {
            let draw = DeformationConfig {
                rng_seed: mix_seed(cfg.rng_seed, pass as u64, attempt as u64),
                ..cfg.clone()
            };
            let deformed = deform_track(track, &draw)?;
            let labels = rasterize(&deformed.track, tg, fg, n_frames)?.labels;
            let frames: Vec<usize> = diff_frames(&original, &labels)?
                .into_iter()
                .filter(|i| interior.contains(i))
                .collect();
            if frames.is_empty() {
                continue;
            }
            let variant = out.variants.len();
            candidates.extend(frames.into_iter().map(|center| NegativeRef { variant, center }));
            out.variants.push(labels);
            out.records.push(deformed.records);
            found = true;
            break;
        }
        if !found {
            out.starved_passes += 1;
        }
    }
    if out.starved_passes > 0 {
        log::warn!(
            "track `{}`: {} deformation pass(es) changed no interior frame",
            track.track_id,
            out.starved_passes
        );
    }
    let take = n_samples.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, u64::MAX, 0));
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), take).into_vec();
    picked.sort_unstable();
    out.examples = picked.into_iter().map(|k| candidates[k]).collect();
    Ok(out)
}
