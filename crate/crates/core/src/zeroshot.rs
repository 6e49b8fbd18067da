//! The frozen VLM's zero-shot pipeline: cosine similarities, tempered
//! softmax, argmax prediction, error labels, and caption-mode batching.

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::store::{EmbeddingDataset, Mode};

/// Dot products of one image embedding against every candidate text row.
pub fn similarities(z_v: ArrayView1<'_, f32>, texts: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
    if texts.ncols() != z_v.len() {
        return Err(Error::Shape(format!(
            "image has dimension {}, texts have {}",
            z_v.len(),
            texts.ncols()
        )));
    }
    Ok(texts
        .outer_iter()
        .map(|t| t.iter().zip(z_v).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect())
}

/// `softmax(sims / tau)` with max-subtraction.
pub fn softmax_probs(sims: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite similarity".into()));
    }
    let mut out: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    logits.iter_mut().for_each(|x| *x /= total);
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_index: usize,
    /// Probabilities over `candidates`, in candidate order.
    pub probs: Vec<f64>,
    /// Position of the prediction within `candidates`.
    pub predicted_index: usize,
    /// The zero-shot prediction is wrong (the failure-prediction target).
    pub is_error: bool,
    /// Dataset text indices forming the candidate set.
    pub candidates: Arc<[usize]>,
}

impl PredictionRecord {
    /// Dataset index of the predicted text.
    pub fn predicted_text(&self) -> usize {
        self.candidates[self.predicted_index]
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.predicted_index]
    }

    /// `1 − max_prob`, summed over the other candidates so it does not
    /// round to 0 for confident predictions.
    pub fn mcm(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != self.predicted_index)
            .map(|(_, &p)| p)
            .sum()
    }
}

/// A set of images scored against one shared candidate set.
#[derive(Debug, Clone)]
pub struct CandidateBatch {
    pub samples: Vec<usize>,
    pub candidates: Arc<[usize]>,
    /// Raw similarities, `samples.len() x candidates.len()`.
    pub similarities: Array2<f64>,
    pub records: Vec<PredictionRecord>,
}

impl CandidateBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = bool> + '_ {
        self.records.iter().map(|r| r.is_error)
    }
}

fn check_indices(indices: &[usize], len: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= len) {
        Some(&index) => Err(Error::IndexOutOfBounds { index, len }),
        None => Ok(()),
    }
}

fn is_error(ds: &EmbeddingDataset, sample: usize, predicted_text: usize) -> bool {
    let target = ds.target_text(sample);
    match ds.mode() {
        Mode::ImageLabel => predicted_text != target,
        // Identical caption strings count as the same answer.
        Mode::ImageCaption => ds.text_ids()[predicted_text] != ds.text_ids()[target],
    }
}

/// Zero-shot predictions of `samples` against the texts in `candidates`.
pub fn predict_batch(
    ds: &EmbeddingDataset,
    samples: &[usize],
    candidates: Arc<[usize]>,
) -> Result<CandidateBatch> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("candidate set is empty".into()));
    }
    check_indices(samples, ds.len())?;
    check_indices(&candidates, ds.num_texts())?;

    let images = ds.images().select(Axis(0), samples).mapv(f64::from);
    let texts = ds.texts().select(Axis(0), &candidates).mapv(f64::from);
    let sims = images.dot(&texts.t());
    let tau = ds.tau() as f64;

    let records = samples
        .iter()
        .zip(sims.outer_iter())
        .map(|(&sample, row)| {
            let mut probs: Vec<f64> = row.iter().map(|s| s / tau).collect();
            softmax_in_place(&mut probs);
            let predicted_index = argmax_lowest(&probs);
            PredictionRecord {
                sample_index: sample,
                is_error: is_error(ds, sample, candidates[predicted_index]),
                probs,
                predicted_index,
                candidates: Arc::clone(&candidates),
            }
        })
        .collect();

    Ok(CandidateBatch {
        samples: samples.to_vec(),
        candidates,
        similarities: sims,
        records,
    })
}

pub fn predict(
    ds: &EmbeddingDataset,
    sample_index: usize,
    candidates: &[usize],
) -> Result<PredictionRecord> {
    let batch = predict_batch(ds, &[sample_index], candidates.into())?;
    Ok(batch.records.into_iter().next().expect("one sample"))
}

/// All class indices, the candidate set of every label-mode sample.
pub fn all_classes(ds: &EmbeddingDataset) -> Arc<[usize]> {
    (0..ds.num_texts()).collect()
}

/// Shuffles caption-mode samples under `seed` and cuts them into batches.
/// Each batch's candidates are exactly its own captions.
pub fn caption_batches(
    ds: &EmbeddingDataset,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if ds.mode() != Mode::ImageCaption {
        return Err(Error::InvalidArgument(
            "caption batches require an image-caption dataset".into(),
        ));
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    if batch_size > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} exceeds dataset size {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(seed, stream::BATCHES)));
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Sample indices of each prediction batch, without scoring anything.
///
/// Label mode chunks samples in index order (the candidate set does not
/// depend on the batch); caption mode defers to [`caption_batches`].
pub fn batch_plan(
    ds: &EmbeddingDataset,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    match ds.mode() {
        Mode::ImageLabel => {
            if batch_size == 0 {
                return Err(Error::InvalidArgument("batch size must be positive".into()));
            }
            let samples: Vec<usize> = (0..ds.len()).collect();
            Ok(samples.chunks(batch_size).map(<[usize]>::to_vec).collect())
        }
        Mode::ImageCaption => caption_batches(ds, batch_size, seed, drop_last),
    }
}

/// Scores `samples` against their mode's candidate set: every class in label
/// mode, the batch's own captions in caption mode.
pub fn candidate_batch(ds: &EmbeddingDataset, samples: &[usize]) -> Result<CandidateBatch> {
    let candidates: Arc<[usize]> = match ds.mode() {
        Mode::ImageLabel => all_classes(ds),
        Mode::ImageCaption => {
            check_indices(samples, ds.len())?;
            samples.iter().map(|&i| ds.target_text(i)).collect()
        }
    };
    predict_batch(ds, samples, candidates)
}

/// All prediction batches of [`batch_plan`], scored.
pub fn prediction_batches(
    ds: &EmbeddingDataset,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<CandidateBatch>> {
    batch_plan(ds, batch_size, seed, drop_last)?
        .iter()
        .map(|samples| candidate_batch(ds, samples))
        .collect()
}

/// Fraction of correctly predicted samples, pooled over batches.
pub fn zero_shot_accuracy(ds: &EmbeddingDataset, batch_size: usize, seed: u64) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for samples in batch_plan(ds, batch_size, seed, true)? {
        let b = candidate_batch(ds, &samples)?;
        total += b.len();
        correct += b.errors().filter(|e| !e).count();
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn similarity_cases() {
        let texts = array![[1.0f32, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let s = similarities(array![1.0f32, 0.0].view(), texts.view()).unwrap();
        assert_eq!(s, vec![1.0, 0.0, -1.0]);
        assert!(similarities(array![1.0f32].view(), texts.view()).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_probs(&[0.3; 4], 0.01).unwrap();
        p.iter()
            .for_each(|&x| assert_abs_diff_eq!(x, 0.25, epsilon = 1e-15));
        let p = softmax_probs(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / (e + 1.0), epsilon = 1e-15);
        let p = softmax_probs(&[0.5, 0.4], 1e-3).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(softmax_probs(&[1.0], 0.0).is_err());
        assert!(softmax_probs(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax_probs(&[0.1, 0.5, -0.2], 0.1).unwrap();
        let b = softmax_probs(&[10.1, 10.5, 9.8], 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.4, 0.4]), 1);
    }

    fn three_classes() -> EmbeddingDataset {
        EmbeddingDataset::image_label(
            0.01,
            array![[0.0, 0.0, 1.0], [0.6, 0.8, 0.0], [0.0, 1.0, 0.0]],
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![2, 0, 1],
        )
        .unwrap()
    }

    #[test]
    fn predicts_matching_class() {
        let ds = three_classes();
        let r = predict(&ds, 0, &[0, 1, 2]).unwrap();
        assert_eq!(r.predicted_index, 2);
        assert!(!r.is_error);
        assert_abs_diff_eq!(r.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let wrong = predict(&ds, 1, &[0, 1, 2]).unwrap();
        assert_eq!(wrong.predicted_text(), 1);
        assert!(wrong.is_error);
    }

    #[test]
    fn exact_tie_picks_lower_index() {
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let ds = EmbeddingDataset::image_label(
            0.01,
            array![[h, h]],
            array![[1.0, 0.0], [0.0, 1.0]],
            vec![1],
        )
        .unwrap();
        let r = predict(&ds, 0, &[0, 1]).unwrap();
        assert_eq!(r.probs[0], r.probs[1]);
        assert_eq!(r.predicted_index, 0);
        assert!(r.is_error);
    }

    #[test]
    fn duplicate_caption_counts_as_correct() {
        // Captions 1 and 2 are the same string. Image 2 ties between them and
        // the tie rule lands on caption 1.
        let ds = EmbeddingDataset::image_caption(
            0.01,
            array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]],
            array![[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]],
            vec![0, 1, 1],
        )
        .unwrap();
        let r = predict(&ds, 2, &[0, 1, 2]).unwrap();
        assert_eq!(r.predicted_text(), 1);
        assert!(!r.is_error, "caption 1 has the same text id as caption 2");
        let r = predict(&ds, 0, &[0, 1, 2]).unwrap();
        assert!(r.is_error);
    }

    #[test]
    fn singleton_candidate_is_correct_for_its_pair() {
        let ds = EmbeddingDataset::image_caption(
            0.01,
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[0.0, 1.0], [1.0, 0.0]],
            vec![0, 1],
        )
        .unwrap();
        let r = predict(&ds, 1, &[1]).unwrap();
        assert_eq!(r.probs, vec![1.0]);
        assert!(!r.is_error);
    }

    #[test]
    fn out_of_bounds_and_empty() {
        let ds = three_classes();
        assert!(matches!(
            predict(&ds, 7, &[0]),
            Err(Error::IndexOutOfBounds { .. })
        ));
        assert!(matches!(
            predict(&ds, 0, &[5]),
            Err(Error::IndexOutOfBounds { .. })
        ));
        assert!(predict(&ds, 0, &[]).is_err());
    }

    fn caption_ds(n: usize) -> EmbeddingDataset {
        let rows: Vec<f32> = (0..n)
            .flat_map(|i| {
                let a = i as f32 * 0.3;
                [a.cos(), a.sin()]
            })
            .collect();
        let m = Array2::from_shape_vec((n, 2), rows).unwrap();
        EmbeddingDataset::image_caption(0.01, m.clone(), m, (0..n as u32).collect()).unwrap()
    }

    #[test]
    fn caption_batching() {
        let ds = caption_ds(10);
        let b = caption_batches(&ds, 5, 1, true).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let b = caption_batches(&ds, 4, 1, true).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 8);
        assert_eq!(caption_batches(&ds, 4, 1, false).unwrap().len(), 3);

        assert_eq!(
            caption_batches(&ds, 4, 9, true).unwrap(),
            caption_batches(&ds, 4, 9, true).unwrap()
        );
        assert!(caption_batches(&ds, 11, 1, true).is_err());
        assert!(caption_batches(&ds, 1, 1, true).is_err());
        assert!(caption_batches(&three_classes(), 2, 1, true).is_err());
    }

    #[test]
    fn batch_candidates_are_batch_captions() {
        let ds = caption_ds(10);
        for b in prediction_batches(&ds, 5, 3, true).unwrap() {
            assert_eq!(&*b.candidates, b.samples.as_slice());
            assert_eq!(b.similarities.dim(), (5, 5));
        }
    }

    #[test]
    fn noise_free_label_accuracy_is_one() {
        let ds = EmbeddingDataset::image_label(
            0.01,
            array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
            vec![0, 1, 1],
        )
        .unwrap();
        assert_eq!(zero_shot_accuracy(&ds, 2, 0).unwrap(), 1.0);
    }
}
