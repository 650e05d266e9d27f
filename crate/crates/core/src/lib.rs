//! Error detection and cleansing for time-varying note annotations.
//!
//! A convolutional model `g` looks at an 81-frame window of constant-Q
//! spectrogram channels together with the rasterized annotation and predicts
//! whether the centre frame's label is wrong. Training pairs are synthesized:
//! positives are frames whose labels agree with a pitch-salience estimate (or
//! sit in long silences), negatives come from locally deforming the notes.
//! The scored frames drive filtering, loss reweighting and dataset reports.

pub mod deform;
pub mod error;
pub mod grid;
pub mod label;
pub mod metrics;
pub mod nn;
pub mod ngmx;
pub mod notes;
pub mod pipeline;
pub mod select;
pub mod spectral;

pub use deform::{deform_track, diff_frames, sample_negatives, DeformationConfig, DeformationRecord, PatchExample};
pub use error::{Error, Result};
pub use grid::{FrequencyGrid, TimeGrid};
pub use label::{extract_patch, rasterize, LabelMatrix, Patch};
pub use metrics::{oa, paired_t, rpa, FrameF0Sequence, PairedT};
pub use notes::{validate_notes, NoteEvent, NoteTrack, Violation};
pub use select::{build_training_set, pseudo_salience, select_likely_correct, select_silence_positives, SalienceMatrix, SelectionThresholds};
pub use spectral::{cqt, frame_energy, stack_channels, Spectrogram, SpectrogramStack, Waveform};
