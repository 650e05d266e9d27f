//! End-to-end stages: detector training data, dense scoring and cleansing,
//! dataset reports, planted-error corpora and the downstream experiment.

pub mod corpus;
pub mod downstream;
pub mod score;
pub mod synth;
pub mod training;

pub use downstream::{downstream_experiment, Condition, DownstreamConfig, DownstreamReport, EvalTrack, TrainingTrack};
pub use score::{cleanse, dataset_report, score_track, CleanseResult, DatasetReport, FrameScoreTrack, DEFAULT_THRESHOLD};
pub use corpus::{load_corpus, read_corpus_index, split_track_ids, write_corpus, CorpusEntry, CorpusIndex, LoadedTrack};
pub use synth::{synth_dataset, SynthConfig, SynthTrack};
pub use training::{collect_examples, track_features, train_detector, AnnotatedTrack, DetectionStats, DetectorConfig, ExampleConfig};
