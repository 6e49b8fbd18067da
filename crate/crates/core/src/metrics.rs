//! Failure-detection metrics.
//!
//! Positives are misclassified samples and a detector flags `u >= t`, so a
//! good uncertainty score ranks errors above correct predictions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{EmbeddingDataset, Mode};
use crate::zeroshot::{batch_plan, candidate_batch, CandidateBatch};

pub const DEFAULT_TARGET_TPR: f64 = 0.95;
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;
/// Below this many errors one error moves the TPR by more than 5 points.
pub const FPR_GRANULARITY_ERRORS: usize = 20;
pub const CONVENTION: &str = "positive = misclassified sample; flagged when score >= threshold";

fn class_counts(scores: &[f64], errors: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != errors.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            errors.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let pos = errors.iter().filter(|&&e| e).count();
    let neg = errors.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass("no misclassified samples"));
    }
    if neg == 0 {
        return Err(Error::SingleClass("no correctly classified samples"));
    }
    Ok((pos, neg))
}

/// Indices sorted by score, ascending.
fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Mann–Whitney AUROC with midranks: `P(u_err > u_ok) + ½ P(u_err = u_ok)`.
pub fn auroc(scores: &[f64], errors: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, errors)?;
    let idx = order_by_score(scores);
    // Twice the rank sum of positives keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let group_pos = idx[i..=j].iter().filter(|&&k| errors[k]).count() as u128;
        twice_rank_sum += twice_mid * group_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = 2R − p(p+1); U counts wins plus half ties.
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Brute-force AUROC over every (error, correct) pair.
pub fn auroc_pairwise_oracle(scores: &[f64], errors: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, errors)?;
    let mut twice_wins: u128 = 0;
    for (&si, _) in scores.iter().zip(errors).filter(|(_, &e)| e) {
        for (&sj, _) in scores.iter().zip(errors).filter(|(_, &e)| !e) {
            if si > sj {
                twice_wins += 2;
            } else if si == sj {
                twice_wins += 1;
            }
        }
    }
    Ok(twice_wins as f64 / (2 * pos as u128 * neg as u128) as f64)
}

fn check_target(target_tpr: f64) -> Result<()> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target TPR must lie in (0, 1], got {target_tpr}"
        )));
    }
    Ok(())
}

/// FPR at the largest threshold whose TPR reaches `target_tpr`.
///
/// Candidate thresholds are the distinct observed scores plus `+inf`.
pub fn fpr_at_tpr(scores: &[f64], errors: &[bool], target_tpr: f64) -> Result<f64> {
    let (pos, neg) = class_counts(scores, errors)?;
    check_target(target_tpr)?;
    let idx = order_by_score(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = idx.len();
    // Lower the threshold one distinct value at a time, from the top.
    while i > 0 {
        let t = scores[idx[i - 1]];
        while i > 0 && scores[idx[i - 1]] == t {
            if errors[idx[i - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i -= 1;
        }
        if tp as f64 / pos as f64 >= target_tpr {
            return Ok(fp as f64 / neg as f64);
        }
    }
    unreachable!("the lowest threshold flags every error")
}

/// Sweep oracle for [`fpr_at_tpr`]: recounts TPR/FPR from scratch at every
/// candidate threshold and keeps the largest qualifying one.
pub fn fpr_at_tpr_sweep_oracle(scores: &[f64], errors: &[bool], target_tpr: f64) -> Result<f64> {
    let (pos, neg) = class_counts(scores, errors)?;
    check_target(target_tpr)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let mut best: Option<(f64, f64)> = None;
    for &t in &thresholds {
        let tp = scores
            .iter()
            .zip(errors)
            .filter(|&(&s, &e)| e && s >= t)
            .count();
        let fp = scores
            .iter()
            .zip(errors)
            .filter(|&(&s, &e)| !e && s >= t)
            .count();
        if tp as f64 / pos as f64 >= target_tpr && best.is_none_or(|(bt, _)| t > bt) {
            best = Some((t, fp as f64 / neg as f64));
        }
    }
    Ok(best.expect("the minimum score qualifies").1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n_bins + 1` equally spaced edges.
    pub edges: Vec<f64>,
    pub correct: Vec<usize>,
    pub error: Vec<usize>,
}

impl Histogram {
    pub fn n_bins(&self) -> usize {
        self.correct.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,n_correct,n_error\n");
        for b in 0..self.n_bins() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[b],
                self.edges[b + 1],
                self.correct[b],
                self.error[b]
            ));
        }
        out
    }
}

/// Equal-width histogram of scores per population over `[lo, hi]`. Scores
/// outside the range are clamped into the end bins; `hi` lands in the last bin.
pub fn histogram_in(
    scores: &[f64],
    errors: &[bool],
    n_bins: usize,
    lo: f64,
    hi: f64,
) -> Result<Histogram> {
    if scores.len() != errors.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            errors.len()
        )));
    }
    if n_bins == 0 || !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err(Error::InvalidArgument(format!(
            "bad histogram range [{lo}, {hi}] with {n_bins} bins"
        )));
    }
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins)
        .map(|b| {
            if b == n_bins {
                hi
            } else {
                lo + b as f64 * width
            }
        })
        .collect();
    let mut h = Histogram {
        edges,
        correct: vec![0; n_bins],
        error: vec![0; n_bins],
    };
    for (&s, &e) in scores.iter().zip(errors) {
        let b = (((s - lo) / width).floor().max(0.0) as usize).min(n_bins - 1);
        if e {
            h.error[b] += 1;
        } else {
            h.correct[b] += 1;
        }
    }
    Ok(h)
}

/// Histogram on `[0, 1]`.
pub fn histogram(scores: &[f64], errors: &[bool], n_bins: usize) -> Result<Histogram> {
    histogram_in(scores, errors, n_bins, 0.0, 1.0)
}

/// An uncertainty scorer over zero-shot prediction batches: higher means
/// more likely to be a failure.
pub trait UncertaintyScorer: Sync {
    fn name(&self) -> &str;

    fn score_batch(&self, ds: &EmbeddingDataset, batch: &CandidateBatch) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_index: usize,
    pub score: f64,
    pub is_error: bool,
}

/// Scores every evaluation batch (dropping a ragged caption tail) and pools
/// the results in batch order. Batches are built one at a time per worker.
pub fn score_dataset(
    ds: &EmbeddingDataset,
    scorer: &dyn UncertaintyScorer,
    eval_batch_size: usize,
    seed: u64,
) -> Result<Vec<ScoredSample>> {
    let plan = batch_plan(ds, eval_batch_size, seed, true)?;
    let per_batch: Vec<Vec<ScoredSample>> = plan
        .par_iter()
        .map(|samples| {
            let batch = candidate_batch(ds, samples)?;
            let scores = scorer.score_batch(ds, &batch)?;
            if scores.len() != batch.len() {
                return Err(Error::Shape(format!(
                    "scorer returned {} scores for {} samples",
                    scores.len(),
                    batch.len()
                )));
            }
            Ok(batch
                .records
                .iter()
                .zip(scores)
                .map(|(r, score)| ScoredSample {
                    sample_index: r.sample_index,
                    score,
                    is_error: r.is_error,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub mode: Mode,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub n_errors: usize,
    pub accuracy: f64,
    pub auroc: f64,
    pub fpr95: f64,
    pub convention: String,
    pub histogram: Histogram,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<ScoredSample>>,
}

/// Builds a report from pooled scores.
pub fn report_from_scores(
    method: &str,
    dataset: &str,
    mode: Mode,
    eval_batch_size: usize,
    seed: u64,
    scored: Vec<ScoredSample>,
    keep_scores: bool,
) -> Result<EvalReport> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let errors: Vec<bool> = scored.iter().map(|s| s.is_error).collect();
    let auroc = auroc(&scores, &errors)?;
    let fpr95 = fpr_at_tpr(&scores, &errors, DEFAULT_TARGET_TPR)?;
    let n_errors = errors.iter().filter(|&&e| e).count();

    let mut warnings = Vec::new();
    if n_errors < FPR_GRANULARITY_ERRORS {
        warnings.push(format!(
            "only {n_errors} errors: FPR95 moves in TPR steps above 5%"
        ));
    }
    let in_unit = scores.iter().all(|&s| (0.0..=1.0).contains(&s));
    let histogram = if in_unit {
        histogram(&scores, &errors, DEFAULT_HISTOGRAM_BINS)?
    } else {
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        warnings.push(format!(
            "scores span [{lo}, {hi}]; histogram uses that range"
        ));
        let hi = if hi > lo { hi } else { lo + 1.0 };
        histogram_in(&scores, &errors, DEFAULT_HISTOGRAM_BINS, lo, hi)?
    };

    Ok(EvalReport {
        method: method.to_string(),
        dataset: dataset.to_string(),
        mode,
        eval_batch_size,
        seed,
        n_samples: scored.len(),
        n_errors,
        accuracy: 1.0 - n_errors as f64 / scored.len() as f64,
        auroc,
        fpr95,
        convention: CONVENTION.to_string(),
        histogram,
        warnings,
        scores: keep_scores.then_some(scored),
    })
}

/// Scores `ds` with `scorer` and computes every report field.
pub fn evaluate(
    ds: &EmbeddingDataset,
    scorer: &dyn UncertaintyScorer,
    dataset: &str,
    eval_batch_size: usize,
    seed: u64,
    keep_scores: bool,
) -> Result<EvalReport> {
    let scored = score_dataset(ds, scorer, eval_batch_size, seed)?;
    report_from_scores(
        scorer.name(),
        dataset,
        ds.mode(),
        eval_batch_size,
        seed,
        scored,
        keep_scores,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(errors: &[f64], correct: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let mut s = errors.to_vec();
        s.extend_from_slice(correct);
        let mut y = vec![true; errors.len()];
        y.extend(std::iter::repeat_n(false, correct.len()));
        (s, y)
    }

    #[test]
    fn auroc_cases() {
        let (s, y) = labeled(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(auroc(&s, &y).unwrap(), 1.0);
        let (s, y) = labeled(&[0.3, 0.3], &[0.3, 0.3, 0.3]);
        assert_eq!(auroc(&s, &y).unwrap(), 0.5);
        let (s, y) = labeled(&[0.6], &[0.4, 0.8]);
        assert_eq!(auroc(&s, &y).unwrap(), 0.5);
        assert_eq!(auroc_pairwise_oracle(&s, &y).unwrap(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[false, false]),
            Err(Error::SingleClass(_))
        ));
        assert!(matches!(
            fpr_at_tpr(&[0.1, 0.2], &[true, true], 0.95),
            Err(Error::SingleClass(_))
        ));
        assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn fpr_cases() {
        let (s, y) = labeled(&[0.9, 0.8, 0.7, 0.2], &[0.1, 0.3, 0.5]);
        assert!((fpr_at_tpr(&s, &y, 0.95).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let (s, y) = labeled(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(fpr_at_tpr(&s, &y, 0.95).unwrap(), 0.0);
        let (s, y) = labeled(&[0.2, 0.4, 0.6], &[0.2, 0.4, 0.6]);
        assert_eq!(fpr_at_tpr(&s, &y, 0.95).unwrap(), 1.0);
        assert!(fpr_at_tpr(&s, &y, 0.0).is_err());
    }

    #[test]
    fn histogram_cases() {
        let h = histogram(&[0.0, 0.0, 0.0], &[true, false, false], 50).unwrap();
        assert_eq!((h.error[0], h.correct[0]), (1, 2));
        let h = histogram(&[1.0, 0.5, 0.019, 0.02], &[true, true, false, false], 50).unwrap();
        assert_eq!(h.error[49], 1);
        assert_eq!(h.error[25], 1);
        assert_eq!(h.correct[0], 1);
        assert_eq!(h.correct[1], 1);
        assert_eq!(h.edges.len(), 51);
        assert!(h.to_csv().starts_with("bin_lo,bin_hi,n_correct,n_error\n"));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(0u8..12, n),
                    prop::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("both classes", |(_, y)| {
                y.iter().any(|&e| e) && y.iter().any(|&e| !e)
            })
            .prop_map(|(s, y)| (s.into_iter().map(|v| v as f64 / 11.0).collect(), y))
    }

    proptest! {
        #[test]
        fn auroc_matches_oracle((s, y) in arb_case()) {
            prop_assert_eq!(auroc(&s, &y).unwrap(), auroc_pairwise_oracle(&s, &y).unwrap());
        }

        #[test]
        fn fpr_matches_oracle((s, y) in arb_case(), target in 0.05f64..=1.0) {
            prop_assert_eq!(fpr_at_tpr(&s, &y, target).unwrap(), fpr_at_tpr_sweep_oracle(&s, &y, target).unwrap());
        }

        #[test]
        fn fpr_monotone_in_target((s, y) in arb_case()) {
            prop_assert!(fpr_at_tpr(&s, &y, 0.90).unwrap() <= fpr_at_tpr(&s, &y, 0.95).unwrap());
        }

        #[test]
        fn auroc_invariant_under_increasing_map((s, y) in arb_case()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
        }

        #[test]
        fn auroc_negation_complements((s, y) in arb_case()) {
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let sum = auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn histogram_counts_sum((s, y) in arb_case()) {
            let h = histogram(&s, &y, 50).unwrap();
            let errs = y.iter().filter(|&&e| e).count();
            prop_assert_eq!(h.error.iter().sum::<usize>(), errs);
            prop_assert_eq!(h.correct.iter().sum::<usize>(), y.len() - errs);
        }
    }
}
