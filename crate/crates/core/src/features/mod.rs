//! Audio ingestion, log-mel features, the synthetic corpus and its index.

pub mod audio;
pub mod index;
pub mod mel;
pub mod synth;

pub use audio::{load_wav, read_wav, resample_linear, save_wav, write_wav, AudioClip, TARGET_RATE};
pub use index::{Annotation, ClipLabels, ClipRecord, DatasetIndex, Split};
pub use mel::{logmel, LogMelConfig, LogMelExtractor, LogMelSpec, MelFilterbank};
pub use synth::{synth_generate, ClassTemplate, SplitCounts, SynthConfig, SynthSummary};
