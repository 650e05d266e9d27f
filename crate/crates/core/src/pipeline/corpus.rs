//! On-disk datasets: a `corpus.json` index next to per-track audio and note
//! files. Synthetic corpora also carry the clean notes and error masks.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::notes::NoteTrack;
use crate::spectral::Waveform;

use super::synth::{SynthConfig, SynthTrack};

pub const CORPUS_INDEX: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    #[serde(default)]
    pub time_grid: TimeGrid,
    #[serde(default)]
    pub frequency_grid: FrequencyGrid,
    /// Generator settings when the corpus is synthetic.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub tracks: Vec<CorpusEntry>,
}

/// File names are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub track_id: String,
    pub audio: String,
    /// The annotation under test.
    pub notes: String,
    #[serde(default)]
    pub clean_notes: Option<String>,
    /// JSON array of frames where `notes` and `clean_notes` disagree.
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedTrack {
    pub track_id: String,
    pub waveform: Waveform,
    pub notes: NoteTrack,
    pub clean: Option<NoteTrack>,
    pub mask: Option<Vec<usize>>,
}

/// Writes `<id>.wav`, `<id>.clean.csv`, `<id>.notes.csv` (the corrupted
/// annotation) and `<id>.mask.json` per track, plus the index.
pub fn write_corpus(dir: &Path, corpus: &[SynthTrack], cfg: &SynthConfig, tg: &TimeGrid, fg: &FrequencyGrid) -> Result<CorpusIndex> {
    fs::create_dir_all(dir)?;
    let mut tracks = Vec::with_capacity(corpus.len());
    for t in corpus {
        let e = CorpusEntry {
            track_id: t.track_id.clone(),
            audio: format!("{}.wav", t.track_id),
            notes: format!("{}.notes.csv", t.track_id),
            clean_notes: Some(format!("{}.clean.csv", t.track_id)),
            mask: Some(format!("{}.mask.json", t.track_id)),
        };
        t.waveform.write_wav(dir.join(&e.audio))?;
        t.corrupted.write_csv(dir.join(&e.notes))?;
        t.clean.write_csv(dir.join(e.clean_notes.as_ref().expect("set above")))?;
        fs::write(dir.join(e.mask.as_ref().expect("set above")), serde_json::to_vec(&t.mask)?)?;
        tracks.push(e);
    }
    let index = CorpusIndex {
        time_grid: *tg,
        frequency_grid: *fg,
        synth: Some(cfg.clone()),
        tracks,
    };
    fs::write(dir.join(CORPUS_INDEX), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn read_corpus_index(dir: &Path) -> Result<CorpusIndex> {
    let path = dir.join(CORPUS_INDEX);
    let bytes = fs::read(&path).map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let index: CorpusIndex = serde_json::from_slice(&bytes)?;
    if index.tracks.is_empty() {
        return Err(Error::invalid(format!("{} lists no tracks", path.display())));
    }
    Ok(index)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusIndex, Vec<LoadedTrack>)> {
    let index = read_corpus_index(dir)?;
    let tracks = index
        .tracks
        .iter()
        .map(|e| {
            let clean = e.clean_notes.as_ref().map(|f| NoteTrack::read_csv(&e.track_id, dir.join(f))).transpose()?;
            let mask = match &e.mask {
                Some(f) => Some(serde_json::from_slice(&fs::read(dir.join(f))?)?),
                None => None,
            };
            Ok(LoadedTrack {
                track_id: e.track_id.clone(),
                waveform: Waveform::read_wav(dir.join(&e.audio))?,
                notes: NoteTrack::read_csv(&e.track_id, dir.join(&e.notes))?,
                clean,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, tracks))
}

/// Seeded track-level split into `(train, test)` ids, each side non-empty.
pub fn split_track_ids(ids: &[String], test_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 2 {
        return Err(Error::invalid("a train/test split needs at least two tracks"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid("test fraction must lie in (0, 1)"));
    }
    let mut order = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut test = order.split_off(ids.len() - n_test);
    order.sort();
    test.sort();
    Ok((order, test))
}
