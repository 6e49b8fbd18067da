//! Reference uncertainty scorers.
//!
//! MCM, entropy and Doctor read the zero-shot probabilities directly.
//! Temperature-scaled MCM rescales the logits by a temperature fitted to
//! minimize calibration error on training data. LVU is a learned head that
//! sees only the image embedding.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::UncertaintyScorer;
use crate::store::EmbeddingDataset;
use crate::training::{train, LossKind, TrainConfig, TrainFailure, TrainOutcome};
use crate::vilu::ViluConfig;
use crate::zeroshot::{batch_plan, candidate_batch, CandidateBatch};

pub const DEFAULT_ECE_BINS: usize = 15;
const T_MIN: f64 = 0.05;
const T_MAX: f64 = 20.0;
const T_GRID: usize = 101;
const GOLDEN_ITERS: usize = 60;

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty probability vector".into()));
    }
    Ok(())
}

/// Index of the largest entry and the sum of all the others.
fn split_max(values: &[f64]) -> (usize, f64) {
    let m = values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best });
    let rest = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != m)
        .map(|(_, &v)| v)
        .sum();
    (m, rest)
}

/// `1 − max_j p_j`, taken as the mass off the argmax so that confident
/// samples keep distinct scores instead of rounding to 0.
pub fn mcm_score(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(split_max(probs).1)
}

/// Shannon entropy `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy_score(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

/// Doctor in ratio form, `(1 − Σp²) / Σp²`.
pub fn doctor_score(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    let g: f64 = probs.iter().map(|p| p * p).sum();
    // 1 − Σp² = Σ p(1 − p), with 1 − p_max read off the other entries
    let (m, rest) = split_max(probs);
    let gini: f64 = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| p * if i == m { rest } else { 1.0 - p })
        .sum();
    Ok(gini / g)
}

/// `1 − Σp²`; ranks identically to [`doctor_score`].
pub fn doctor_simple_score(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(1.0 - probs.iter().map(|p| p * p).sum::<f64>())
}

/// Equal-width expected calibration error, `Σ_b (n_b/N)·|acc_b − conf_b|`.
/// Bins are right-closed on `(0, 1]`; a confidence of exactly 0 joins the
/// first bin.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() || confidences.is_empty() {
        return Err(Error::Shape(format!(
            "{} confidences for {} labels",
            confidences.len(),
            correct.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * n_bins as f64).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

/// Max-softmax confidence of each logit row at temperature `t`.
pub fn confidences_at(logits: &[Vec<f64>], t: f64) -> Vec<f64> {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().map(|&l| ((l - max) / t).exp()).sum::<f64>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub t: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub n_bins: usize,
    /// Labels were single-class, so ECE cannot guide the fit and `t = 1`.
    pub degenerate: bool,
}

/// Fits the temperature minimizing ECE of the max-softmax confidence.
///
/// `logits` are per-sample rows of similarities divided by the dataset
/// temperature (rows may differ in length). The search scans 101
/// log-spaced temperatures in `[0.05, 20]`, refines the best bracket by
/// golden section in `ln t`, and also considers `t = 1`. Ties prefer the
/// temperature closest to 1.
pub fn fit_temperature(
    logits: &[Vec<f64>],
    correct: &[bool],
    n_bins: usize,
) -> Result<TemperatureFit> {
    if logits.len() != correct.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            correct.len()
        )));
    }
    if logits
        .iter()
        .any(|r| r.is_empty() || r.iter().any(|l| !l.is_finite()))
    {
        return Err(Error::InvalidArgument(
            "logit rows must be non-empty and finite".into(),
        ));
    }
    let objective = |t: f64| ece(&confidences_at(logits, t), correct, n_bins);
    let ece_before = objective(1.0)?;
    let n_ok = correct.iter().filter(|&&c| c).count();
    if n_ok == 0 || n_ok == correct.len() {
        warn!("temperature fit on single-class labels; keeping t = 1");
        return Ok(TemperatureFit {
            t: 1.0,
            ece_before,
            ece_after: ece_before,
            n_bins,
            degenerate: true,
        });
    }

    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    let step = (hi - lo) / (T_GRID - 1) as f64;
    let better = |a: (f64, f64), b: (f64, f64)| a.1 < b.1 || (a.1 == b.1 && a.0.abs() < b.0.abs());

    // (ln t, ece)
    let mut best = (0.0, ece_before);
    let mut best_index = (T_GRID - 1) / 2;
    for i in 0..T_GRID {
        let x = lo + i as f64 * step;
        let cand = (x, objective(x.exp())?);
        if better(cand, best) {
            best = cand;
            best_index = i;
        }
    }

    let mut a = lo + best_index.saturating_sub(1) as f64 * step;
    let mut b = lo + (best_index + 1).min(T_GRID - 1) as f64 * step;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (objective(c.exp())?, objective(d.exp())?);
    for _ in 0..GOLDEN_ITERS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = objective(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = objective(d.exp())?;
        }
    }
    for cand in [(c, fc), (d, fd)] {
        if better(cand, best) {
            best = cand;
        }
    }
    Ok(TemperatureFit {
        t: best.0.exp(),
        ece_before,
        ece_after: best.1,
        n_bins,
        degenerate: false,
    })
}

/// Logit rows (`similarity / tau`) and correctness of every sample, batched
/// as at evaluation but keeping the ragged caption tail.
pub fn calibration_set(
    ds: &EmbeddingDataset,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let tau = ds.tau() as f64;
    let bs = batch_size.min(ds.len()).max(2);
    let mut logits = Vec::with_capacity(ds.len());
    let mut correct = Vec::with_capacity(ds.len());
    for samples in batch_plan(ds, bs, seed, false)? {
        if samples.len() < 2 && ds.mode() == crate::store::Mode::ImageCaption {
            continue;
        }
        let batch = candidate_batch(ds, &samples)?;
        for (row, r) in batch.similarities.outer_iter().zip(&batch.records) {
            logits.push(row.iter().map(|s| s / tau).collect());
            correct.push(!r.is_error);
        }
    }
    Ok((logits, correct))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Baseline {
    Mcm,
    Entropy,
    Doctor,
    /// MCM after dividing the logits by a fitted temperature.
    TsMcm {
        temperature: f64,
    },
}

impl Baseline {
    pub fn score(&self, probs: &[f64], logits: &[f64]) -> Result<f64> {
        match *self {
            Baseline::Mcm => mcm_score(probs),
            Baseline::Entropy => entropy_score(probs),
            Baseline::Doctor => doctor_score(probs),
            Baseline::TsMcm { temperature } => {
                check_probs(logits)?;
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits
                    .iter()
                    .map(|&l| ((l - max) / temperature).exp())
                    .collect();
                let rest = split_max(&e).1;
                Ok(rest / (1.0 + rest))
            }
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl UncertaintyScorer for Baseline {
    fn name(&self) -> &str {
        match self {
            Baseline::Mcm => "mcm",
            Baseline::Entropy => "entropy",
            Baseline::Doctor => "doctor",
            Baseline::TsMcm { .. } => "ts-mcm",
        }
    }

    fn score_batch(&self, ds: &EmbeddingDataset, batch: &CandidateBatch) -> Result<Vec<f64>> {
        let tau = ds.tau() as f64;
        batch
            .records
            .iter()
            .zip(batch.similarities.outer_iter())
            .map(|(r, sims)| {
                let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
                self.score(&r.probs, &logits)
            })
            .collect()
    }
}

/// Scorer names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Mcm,
    Entropy,
    Doctor,
    TsMcm,
    Lvu,
    Vilu,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mcm,
        Method::Entropy,
        Method::Doctor,
        Method::TsMcm,
        Method::Lvu,
        Method::Vilu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mcm => "mcm",
            Method::Entropy => "entropy",
            Method::Doctor => "doctor",
            Method::TsMcm => "ts-mcm",
            Method::Lvu => "lvu",
            Method::Vilu => "vilu",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Lvu | Method::Vilu)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method `{s}` (expected mcm, entropy, doctor, ts-mcm, lvu or vilu)"
                ))
            })
    }
}

/// The LVU head: same MLP, visual embedding as the only input.
pub fn lvu_config(d: usize, hidden: &[usize], seed: u64) -> ViluConfig {
    ViluConfig::visual_only(d)
        .with_hidden(hidden)
        .with_seed(seed)
}

/// LVU training settings derived from `base`: squared error on the error
/// indicator, with or without the adaptive weight.
pub fn lvu_train_config(base: &TrainConfig, weighted: bool) -> TrainConfig {
    TrainConfig {
        loss: if weighted {
            LossKind::Wmse
        } else {
            LossKind::Mse
        },
        ..base.clone()
    }
}

pub fn lvu_train(
    train_ds: &EmbeddingDataset,
    val_ds: Option<&EmbeddingDataset>,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    train(
        train_ds,
        val_ds,
        &lvu_config(train_ds.dim(), hidden, cfg.seed),
        cfg,
    )
}
