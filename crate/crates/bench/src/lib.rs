//! Shared fixtures for the criterion benches.

use vilu_core::store::synth_generate;
use vilu_core::vilu::BatchInput;
use vilu_core::zeroshot::{all_classes, predict_batch};
use vilu_core::{EmbeddingDataset, SynthSpec};

pub fn dataset(n_classes: usize, d: usize, per_class: usize) -> EmbeddingDataset {
    let spec = SynthSpec {
        n_classes,
        d,
        samples_per_class: per_class,
        intra_class_noise: 0.4,
        seed: 7,
        ..SynthSpec::default()
    };
    synth_generate(&spec).expect("valid bench spec")
}

/// First `b` samples of `ds` scored against every class.
pub fn batch_input(ds: &EmbeddingDataset, b: usize) -> BatchInput<f32> {
    let samples: Vec<usize> = (0..b.min(ds.len())).collect();
    let batch = predict_batch(ds, &samples, all_classes(ds)).expect("zero-shot batch");
    BatchInput::from_batch(ds, &batch)
}
