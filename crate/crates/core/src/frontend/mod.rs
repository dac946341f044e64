//! Feature extraction, augmentation and the synthetic corpus generator.

mod archive;
mod augment;
mod logmel;
mod synth;
mod wav;

pub use archive::{read_index, ArchiveEntry, ArchiveReader, ArchiveWriter};
pub use augment::{spec_augment, SpecAugmentConfig};
pub use logmel::{
    hz_to_mel, logmel, mel_centers, mel_filterbank, mel_to_hz, normalize_bins, FeatureMatrix,
    LogMelConfig,
};
pub use synth::{
    synth_units, synth_utterance, synth_utterance_spans, PrototypeParams, SynthSpec, Synthesized,
    Unit,
};
pub use wav::{read_wav, write_wav};
