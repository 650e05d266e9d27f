//! Symbolic note annotations.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated note: active over `[start_sec, end_sec]` at `freq_hz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub start_sec: f64,
    pub end_sec: f64,
    pub freq_hz: f64,
}

impl NoteEvent {
    /// Checked constructor. Unchecked notes can still be built with a struct
    /// literal and diagnosed with [`validate_notes`].
    pub fn new(start_sec: f64, end_sec: f64, freq_hz: f64) -> Result<Self> {
        if !(start_sec.is_finite() && start_sec >= 0.0) {
            return Err(Error::invalid(format!("note start {start_sec} must be finite and >= 0")));
        }
        if !(end_sec.is_finite() && end_sec > start_sec) {
            return Err(Error::invalid(format!(
                "note end {end_sec} must be finite and after its start {start_sec}"
            )));
        }
        if !(freq_hz.is_finite() && freq_hz > 0.0) {
            return Err(Error::invalid(format!("note frequency {freq_hz} must be finite and positive")));
        }
        Ok(Self {
            start_sec,
            end_sec,
            freq_hz,
        })
    }

    pub fn duration(&self) -> f64 {
        self.end_sec - self.start_sec
    }

    /// Whether the half-open intervals `[start, end)` intersect.
    pub fn overlaps(&self, other: &NoteEvent) -> bool {
        self.start_sec < other.end_sec && other.start_sec < self.end_sec
    }
}

/// The notes of one track, kept sorted by start time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteTrack {
    pub track_id: String,
    notes: Vec<NoteEvent>,
}

impl NoteTrack {
    pub fn new(track_id: impl Into<String>, mut notes: Vec<NoteEvent>) -> Self {
        notes.sort_by(|a, b| a.start_sec.total_cmp(&b.start_sec));
        Self {
            track_id: track_id.into(),
            notes,
        }
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn into_notes(self) -> Vec<NoteEvent> {
        self.notes
    }

    /// Latest note end, or 0 for an empty track.
    pub fn end_sec(&self) -> f64 {
        self.notes.iter().map(|n| n.end_sec).fold(0.0, f64::max)
    }

    pub fn read_csv(track_id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(track_id, File::open(path)?)
    }

    pub fn from_csv_reader<R: Read>(track_id: impl Into<String>, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["start_sec", "end_sec", "freq_hz"] {
            return Err(Error::format(
                "note CSV",
                format!("expected header `start_sec,end_sec,freq_hz`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let notes = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<NoteEvent>, _>>()?;
        Ok(Self::new(track_id, notes))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = File::create(path)?;
        self.to_csv_writer(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["start_sec", "end_sec", "freq_hz"])?;
        for n in &self.notes {
            // `{}` on f64 is the shortest representation that round-trips.
            wtr.write_record([
                n.start_sec.to_string(),
                n.end_sec.to_string(),
                n.freq_hz.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A structural problem found by [`validate_notes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Notes `first` and `second` (indices into the sorted track) overlap.
    Overlap { first: usize, second: usize },
    /// Note `index` has `end <= start`.
    NonPositiveDuration { index: usize },
    /// Note `index` has a non-finite or non-positive frequency.
    InvalidFrequency { index: usize },
}

/// Lists every overlapping pair and every degenerate note; empty iff the track
/// is valid. Notes that merely touch (`end == next.start`) are valid.
pub fn validate_notes(track: &NoteTrack) -> Vec<Violation> {
    let notes = track.notes();
    let mut out = Vec::new();
    for (i, n) in notes.iter().enumerate() {
        if n.start_sec.is_nan() || n.end_sec.is_nan() || n.end_sec <= n.start_sec {
            out.push(Violation::NonPositiveDuration { index: i });
        }
        if !(n.freq_hz.is_finite() && n.freq_hz > 0.0) {
            out.push(Violation::InvalidFrequency { index: i });
        }
    }
    for i in 0..notes.len() {
        for j in i + 1..notes.len() {
            // Sorted by start: nothing later can reach back into note i.
            if notes[j].start_sec >= notes[i].end_sec {
                break;
            }
            if notes[i].overlaps(&notes[j]) {
                out.push(Violation::Overlap { first: i, second: j });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(a: f64, b: f64, f: f64) -> NoteEvent {
        NoteEvent {
            start_sec: a,
            end_sec: b,
            freq_hz: f,
        }
    }

    #[test]
    fn disjoint_notes_are_valid() {
        let t = NoteTrack::new("t", vec![note(1.0, 2.0, 440.0), note(0.0, 1.0, 220.0), note(2.5, 3.0, 330.0)]);
        assert!(validate_notes(&t).is_empty());
        assert_eq!(t.notes()[0].start_sec, 0.0);
    }

    #[test]
    fn overlapping_pair_is_reported_once() {
        let t = NoteTrack::new("t", vec![note(0.0, 1.0, 440.0), note(0.5, 1.5, 440.0)]);
        assert_eq!(validate_notes(&t), vec![Violation::Overlap { first: 0, second: 1 }]);
    }

    #[test]
    fn zero_length_note_is_reported() {
        let t = NoteTrack::new("t", vec![note(1.0, 1.0, 440.0)]);
        assert_eq!(validate_notes(&t), vec![Violation::NonPositiveDuration { index: 0 }]);
    }

    #[test]
    fn long_note_overlapping_several_later_ones() {
        let t = NoteTrack::new(
            "t",
            vec![note(0.0, 5.0, 440.0), note(1.0, 2.0, 440.0), note(3.0, 4.0, 440.0)],
        );
        assert_eq!(validate_notes(&t).len(), 2);
    }

    #[test]
    fn checked_constructor_rejects_bad_notes() {
        assert!(NoteEvent::new(0.0, 1.0, 440.0).is_ok());
        assert!(NoteEvent::new(1.0, 1.0, 440.0).is_err());
        assert!(NoteEvent::new(-0.1, 1.0, 440.0).is_err());
        assert!(NoteEvent::new(0.0, 1.0, 0.0).is_err());
        assert!(NoteEvent::new(0.0, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = NoteTrack::new("t", vec![note(0.1, 0.35, 261.6255653005986), note(1.0 / 3.0, 2.0, 440.0)]);
        let mut buf = Vec::new();
        t.to_csv_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("start_sec,end_sec,freq_hz\n"));
        let back = NoteTrack::from_csv_reader("t", buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn csv_with_wrong_header_is_rejected() {
        let data = "start,end,freq\n0,1,440\n";
        assert!(NoteTrack::from_csv_reader("t", data.as_bytes()).is_err());
    }
}
