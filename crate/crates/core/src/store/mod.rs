//! Embedding datasets: the in-memory model, the VLUE file format, splitting,
//! and synthetic generation.

mod dataset;
mod format;
mod synth;

pub use dataset::{
    DatasetMeta, EmbeddingDataset, Mode, ValidationReport, DEFAULT_TAU, DUPLICATE_TOLERANCE,
    NORM_TOLERANCE,
};
pub use format::{
    decode, decode_unvalidated, encode, encoded_len, meta_path, read_dataset, write_dataset,
    HEADER_LEN, MAGIC, VERSION,
};
pub use synth::{sample_prototypes, synth_generate, SynthSpec};
