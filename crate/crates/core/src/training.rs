//! Training objectives and the SGD loop for ViLU-style heads.
//!
//! Labels follow the failure-prediction convention: `y = 1` marks a
//! misclassified sample.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{sgd_step, sigmoid, softplus};
use crate::rng::{self, stream};
use crate::store::{EmbeddingDataset, Mode};
use crate::vilu::{gather_rows, BatchInput, ModelScorer, ViluConfig, ViluModel};
use crate::zeroshot::{
    all_classes, candidate_batch, caption_batches, predict_batch, CandidateBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Binary cross-entropy with the batch-adaptive error weight.
    Wbce,
    Bce,
    /// Squared error with the batch-adaptive error weight.
    Wmse,
    Mse,
}

impl LossKind {
    pub fn is_weighted(self) -> bool {
        matches!(self, LossKind::Wbce | LossKind::Wmse)
    }

    pub fn is_mse(self) -> bool {
        matches!(self, LossKind::Wmse | LossKind::Mse)
    }

    pub fn unweighted(self) -> Self {
        match self {
            LossKind::Wbce | LossKind::Bce => LossKind::Bce,
            LossKind::Wmse | LossKind::Mse => LossKind::Mse,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Wbce => "wbce",
            LossKind::Bce => "bce",
            LossKind::Wmse => "wmse",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wbce" => Ok(LossKind::Wbce),
            "bce" => Ok(LossKind::Bce),
            "wmse" => Ok(LossKind::Wmse),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss `{other}` (expected wbce, bce, wmse or mse)"
            ))),
        }
    }
}

/// Regression target of the squared-error losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum MseTarget {
    /// The binary error indicator.
    #[default]
    Indicator,
    /// `1 − p_true`, a bounded monotone image of the zero-shot NLL.
    Nll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs during which the attention projections stay frozen.
    pub freeze_xa_epochs: usize,
    pub seed: u64,
    /// Fraction of the training set used (seeded subsample).
    pub train_fraction: f64,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
    /// Stop after this many validations without improvement; 0 disables.
    pub patience: usize,
    pub eval_batch_size: usize,
    pub mse_target: MseTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Wbce,
            lr: 1e-2,
            batch_size: 256,
            epochs: 20,
            freeze_xa_epochs: 1,
            seed: 0,
            train_fraction: 1.0,
            eval_every: 1,
            patience: 5,
            eval_batch_size: 1024,
            mse_target: MseTarget::Indicator,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "eval_every must be at least 1".into(),
            ));
        }
        if self.eval_batch_size < 2 {
            return Err(Error::InvalidArgument(
                "evaluation batch size must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive error weight of a batch, `ln(1 + #correct / #errors)`.
///
/// Returns 1 without errors (the weight multiplies nothing) and `ln 2`
/// without correct samples.
pub fn batch_weight(errors: &[bool]) -> f64 {
    let n_err = errors.iter().filter(|&&e| e).count();
    let n_ok = errors.len() - n_err;
    match (n_err, n_ok) {
        (0, _) => 1.0,
        (_, 0) => std::f64::consts::LN_2,
        (e, c) => (1.0 + c as f64 / e as f64).ln(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape(format!(
            "loss over {a} predictions and {b} labels"
        )));
    }
    Ok(())
}

/// `−(1/B) Σ [w·y·ln ŷ + (1−y)·ln(1−ŷ)]` with `ŷ = σ(logit)`, evaluated
/// through softplus. Returns gradients with respect to the logits.
pub fn wbce_loss(logits: &[f64], errors: &[bool], w: f64) -> Result<LossOutput> {
    check_lengths(logits.len(), errors.len())?;
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite logit {z}")));
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &e) in logits.iter().zip(errors) {
        let y = if e { 1.0 } else { 0.0 };
        // −ln σ(z) = softplus(−z), −ln(1 − σ(z)) = softplus(z)
        loss += w * y * softplus(-z) + (1.0 - y) * softplus(z);
        grad.push((sigmoid(z) * (w * y + 1.0 - y) - w * y) / b);
    }
    Ok(LossOutput {
        loss: loss / b,
        grad,
    })
}

/// `(1/B) Σ c_i (ŷ_i − t_i)²` with `c_i = w` on errors and 1 otherwise.
/// Returns gradients with respect to `ŷ`.
pub fn mse_loss(yhat: &[f64], targets: &[f64], errors: &[bool], w: f64) -> Result<LossOutput> {
    check_lengths(yhat.len(), targets.len())?;
    check_lengths(yhat.len(), errors.len())?;
    let b = yhat.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(yhat.len());
    for ((&p, &t), &e) in yhat.iter().zip(targets).zip(errors) {
        let c = if e { w } else { 1.0 };
        loss += c * (p - t) * (p - t);
        grad.push(2.0 * c * (p - t) / b);
    }
    Ok(LossOutput {
        loss: loss / b,
        grad,
    })
}

/// Loss and logit gradients of one batch. Returns (loss, dlogits, weight).
pub fn batch_objective(
    kind: LossKind,
    logits: &[f64],
    errors: &[bool],
    mse_targets: Option<&[f64]>,
) -> Result<(f64, Vec<f64>, f64)> {
    let w = if kind.is_weighted() {
        batch_weight(errors)
    } else {
        1.0
    };
    if !kind.is_mse() {
        let out = wbce_loss(logits, errors, w)?;
        return Ok((out.loss, out.grad, w));
    }
    let yhat: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let indicator: Vec<f64>;
    let targets = match mse_targets {
        Some(t) => t,
        None => {
            indicator = errors.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
            &indicator
        }
    };
    let out = mse_loss(&yhat, targets, errors, w)?;
    let dlogits = out
        .grad
        .iter()
        .zip(&yhat)
        .map(|(g, p)| g * p * (1.0 - p))
        .collect();
    Ok((out.loss, dlogits, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub w_mean: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub val_auc: Option<f64>,
    pub val_fpr95: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `epoch,loss,w_mean,val_auc,val_fpr95`; unvalidated epochs leave the
    /// last two fields empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,loss,w_mean,val_auc,val_fpr95\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.loss,
                r.w_mean,
                opt(r.val_auc),
                opt(r.val_fpr95)
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation model, or the final one without a validation set.
    pub model: ViluModel<f32>,
    pub history: TrainHistory,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub best_val_fpr95: Option<f64>,
}

/// A run that aborted; keeps the history up to the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub source: Error,
    pub history: TrainHistory,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted after {} epochs: {}",
            self.history.len(),
            self.source
        )
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<Error> for TrainFailure {
    fn from(source: Error) -> Self {
        Self {
            source,
            history: TrainHistory::default(),
        }
    }
}

/// Label mode never changes its predictions, so they are computed once.
struct LabelCache {
    candidates: Array2<f32>,
    predicted: Vec<usize>,
    errors: Vec<bool>,
    mcm: Vec<f32>,
    p_true: Vec<f64>,
}

impl LabelCache {
    fn build(ds: &EmbeddingDataset) -> Result<Self> {
        let samples: Vec<usize> = (0..ds.len()).collect();
        let classes = all_classes(ds);
        let mut cache = LabelCache {
            candidates: gather_rows(ds.texts(), &classes),
            predicted: Vec::with_capacity(ds.len()),
            errors: Vec::with_capacity(ds.len()),
            mcm: Vec::with_capacity(ds.len()),
            p_true: Vec::with_capacity(ds.len()),
        };
        for chunk in samples.chunks(4096) {
            let batch = predict_batch(ds, chunk, Arc::clone(&classes))?;
            for r in &batch.records {
                cache.predicted.push(r.predicted_index);
                cache.errors.push(r.is_error);
                cache.mcm.push(r.mcm() as f32);
                cache.p_true.push(r.probs[ds.target_text(r.sample_index)]);
            }
        }
        Ok(cache)
    }

    fn batch(
        &self,
        ds: &EmbeddingDataset,
        samples: &[usize],
    ) -> (BatchInput<f32>, Vec<bool>, Vec<f64>) {
        let input = BatchInput {
            images: gather_rows(ds.images(), samples),
            candidates: self.candidates.clone(),
            predicted: samples.iter().map(|&i| self.predicted[i]).collect(),
            mcm: Some(samples.iter().map(|&i| self.mcm[i]).collect()),
        };
        let errors = samples.iter().map(|&i| self.errors[i]).collect();
        let p_true = samples.iter().map(|&i| self.p_true[i]).collect();
        (input, errors, p_true)
    }
}

fn caption_batch(
    ds: &EmbeddingDataset,
    samples: &[usize],
) -> Result<(BatchInput<f32>, Vec<bool>, Vec<f64>)> {
    let batch: CandidateBatch = candidate_batch(ds, samples)?;
    let errors = batch.records.iter().map(|r| r.is_error).collect();
    // Each sample's own caption sits at its position in the batch.
    let p_true = batch
        .records
        .iter()
        .enumerate()
        .map(|(pos, r)| r.probs[pos])
        .collect();
    Ok((BatchInput::from_batch(ds, &batch), errors, p_true))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, stream::EPOCH), epoch as u64)
}

fn epoch_batches(
    ds: &EmbeddingDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    let seed = epoch_seed(seed, epoch);
    match ds.mode() {
        Mode::ImageLabel => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng::seeded(seed));
            Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
        }
        Mode::ImageCaption => {
            let bs = batch_size.min(ds.len());
            // A single leftover caption is always "correct" and carries no signal.
            Ok(caption_batches(ds, bs, seed, false)?
                .into_iter()
                .filter(|b| b.len() >= 2)
                .collect())
        }
    }
}

/// Validation (AUROC, FPR95) of a model; caption batches are capped at the
/// dataset size.
pub fn validate_model(
    model: &ViluModel<f32>,
    val: &EmbeddingDataset,
    eval_batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let bs = match val.mode() {
        Mode::ImageLabel => eval_batch_size,
        Mode::ImageCaption => eval_batch_size.min(val.len()),
    };
    let scored = metrics::score_dataset(
        val,
        &ModelScorer {
            model,
            name: "vilu",
        },
        bs,
        seed,
    )?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let errors: Vec<bool> = scored.iter().map(|s| s.is_error).collect();
    Ok((
        metrics::auroc(&scores, &errors)?,
        metrics::fpr_at_tpr(&scores, &errors, metrics::DEFAULT_TARGET_TPR)?,
    ))
}

/// Trains a fresh model with mini-batch SGD.
///
/// Each epoch reshuffles under the seed; caption-mode labels are recomputed
/// per batch because the batch is the candidate set. The attention
/// projections stay frozen for the first `freeze_xa_epochs` epochs. With a
/// validation set, the best-AUROC model is returned and early stopping
/// applies.
pub fn train(
    train_ds: &EmbeddingDataset,
    val_ds: Option<&EmbeddingDataset>,
    vilu: &ViluConfig,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    cfg.validate()?;
    let model = ViluModel::<f32>::new(vilu.clone())?;
    if train_ds.dim() != vilu.d {
        return Err(Error::Shape(format!(
            "model has d = {}, training data has d = {}",
            vilu.d,
            train_ds.dim()
        ))
        .into());
    }
    if let Some(v) = val_ds {
        if v.dim() != train_ds.dim() || v.mode() != train_ds.mode() {
            return Err(Error::InvalidArgument(
                "validation set must share mode and dimension with the training set".into(),
            )
            .into());
        }
    }
    let subset;
    let ds = if cfg.train_fraction < 1.0 {
        subset = train_ds
            .split(
                cfg.train_fraction,
                rng::derive_seed(cfg.seed, stream::FRACTION),
            )?
            .0;
        &subset
    } else {
        train_ds
    };
    if ds.len() < 2 {
        return Err(Error::InvalidArgument("need at least two training samples".into()).into());
    }
    let label_cache = match ds.mode() {
        Mode::ImageLabel => Some(LabelCache::build(ds)?),
        Mode::ImageCaption => None,
    };
    run_epochs(model, ds, val_ds, label_cache.as_ref(), cfg)
}

fn run_epochs(
    mut model: ViluModel<f32>,
    ds: &EmbeddingDataset,
    val_ds: Option<&EmbeddingDataset>,
    label_cache: Option<&LabelCache>,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut history = TrainHistory::default();
    let fail = |source: Error, history: &TrainHistory| TrainFailure {
        source,
        history: history.clone(),
    };
    let mut best: Option<(usize, f64, f64, ViluModel<f32>)> = None;
    let mut since_best = 0usize;
    let lr = cfg.lr as f32;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        model.set_cross_attention_frozen(epoch < cfg.freeze_xa_epochs);
        let batches =
            epoch_batches(ds, cfg.batch_size, cfg.seed, epoch).map_err(|e| fail(e, &history))?;

        let (mut loss_sum, mut n_seen) = (0.0, 0usize);
        let (mut w_sum, mut w_min, mut w_max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for samples in &batches {
            let (input, errors, p_true) = match label_cache {
                Some(cache) => cache.batch(ds, samples),
                None => caption_batch(ds, samples).map_err(|e| fail(e, &history))?,
            };
            let cache = model.forward_batch(input).map_err(|e| fail(e, &history))?;
            let logits: Vec<f64> = cache.logits.iter().map(|&z| z as f64).collect();
            let targets: Option<Vec<f64>> = (cfg.loss.is_mse() && cfg.mse_target == MseTarget::Nll)
                .then(|| p_true.iter().map(|p| 1.0 - p).collect());
            let (loss, dlogits, w) =
                batch_objective(cfg.loss, &logits, &errors, targets.as_deref()).map_err(|_| {
                    fail(
                        Error::Diverged {
                            epoch,
                            loss: f64::NAN,
                        },
                        &history,
                    )
                })?;
            if !loss.is_finite() {
                return Err(fail(Error::Diverged { epoch, loss }, &history));
            }
            let dlogits: Array1<f32> = dlogits.iter().map(|&g| g as f32).collect();
            model
                .backward(&cache, dlogits.view())
                .map_err(|e| fail(e, &history))?;
            sgd_step(model.params_mut(), lr).map_err(|e| fail(e, &history))?;

            loss_sum += loss * samples.len() as f64;
            n_seen += samples.len();
            w_sum += w;
            w_min = w_min.min(w);
            w_max = w_max.max(w);
        }

        let mut record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / n_seen.max(1) as f64,
            w_mean: w_sum / batches.len().max(1) as f64,
            w_min,
            w_max,
            val_auc: None,
            val_fpr95: None,
            seconds: 0.0,
        };
        let last = epoch + 1 == cfg.epochs;
        let mut stop = false;
        if let Some(val) = val_ds.filter(|_| (epoch + 1) % cfg.eval_every == 0 || last) {
            let (auc, fpr) = validate_model(&model, val, cfg.eval_batch_size, cfg.seed)
                .map_err(|e| fail(e, &history))?;
            record.val_auc = Some(auc);
            record.val_fpr95 = Some(fpr);
            if best.as_ref().is_none_or(|b| auc > b.1) {
                best = Some((epoch + 1, auc, fpr, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                stop = cfg.patience > 0 && since_best >= cfg.patience;
            }
        }
        record.seconds = started.elapsed().as_secs_f64();
        debug!(
            "epoch {} loss {:.5} w {:.3} val_auc {:?}",
            record.epoch, record.loss, record.w_mean, record.val_auc
        );
        history.epochs.push(record);
        if stop {
            info!("early stop after epoch {}", epoch + 1);
            break;
        }
    }

    let (best_epoch, best_val_auc, best_val_fpr95, model) = match best {
        Some((e, auc, fpr, m)) => (Some(e), Some(auc), Some(fpr), m),
        None => (None, None, None, model),
    };
    let mut model = model;
    model.set_cross_attention_frozen(false);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_auc,
        best_val_fpr95,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub batch_size: usize,
    pub val_auc: Option<f64>,
    pub val_fpr95: Option<f64>,
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: TrainConfig,
    pub best_model: ViluModel<f32>,
    /// One row per (lr, batch size), lr-major in grid order.
    pub results: Vec<GridPoint>,
}

impl GridOutcome {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("lr,batch_size,val_auc,val_fpr95,best_epoch,error\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.lr,
                r.batch_size,
                opt(r.val_auc),
                opt(r.val_fpr95),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                r.error.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

pub const LR_GRID: [f64; 3] = [1e-1, 1e-2, 1e-3];
pub const BATCH_GRID: [usize; 4] = [128, 256, 512, 1024];

/// Trains every (lr, batch size) pair and keeps the best validation AUROC.
/// Ties go to the smaller learning rate, then the smaller batch. Runs that
/// diverge are recorded and skipped.
pub fn grid_search(
    train_ds: &EmbeddingDataset,
    val_ds: &EmbeddingDataset,
    vilu: &ViluConfig,
    base: &TrainConfig,
    lrs: &[f64],
    batch_sizes: &[usize],
) -> Result<GridOutcome> {
    if lrs.is_empty() || batch_sizes.is_empty() {
        return Err(Error::InvalidArgument(
            "grid search needs at least one learning rate and batch size".into(),
        ));
    }
    let points: Vec<(f64, usize)> = lrs
        .iter()
        .flat_map(|&lr| batch_sizes.iter().map(move |&bs| (lr, bs)))
        .collect();
    let runs: Vec<(TrainConfig, std::result::Result<TrainOutcome, TrainFailure>)> = points
        .par_iter()
        .map(|&(lr, batch_size)| {
            let cfg = TrainConfig {
                lr,
                batch_size,
                ..base.clone()
            };
            let outcome = train(train_ds, Some(val_ds), vilu, &cfg);
            (cfg, outcome)
        })
        .collect();

    let mut results = Vec::with_capacity(runs.len());
    let mut best: Option<(f64, TrainConfig, ViluModel<f32>)> = None;
    let mut first_failure = None;
    for (cfg, outcome) in runs {
        match outcome {
            Ok(o) => {
                results.push(GridPoint {
                    lr: cfg.lr,
                    batch_size: cfg.batch_size,
                    val_auc: o.best_val_auc,
                    val_fpr95: o.best_val_fpr95,
                    best_epoch: o.best_epoch,
                    error: None,
                });
                let auc = o.best_val_auc.unwrap_or(f64::NEG_INFINITY);
                let better = match &best {
                    None => true,
                    Some((b_auc, b_cfg, _)) => {
                        auc > *b_auc
                            || (auc == *b_auc
                                && (cfg.lr, cfg.batch_size) < (b_cfg.lr, b_cfg.batch_size))
                    }
                };
                if better {
                    best = Some((auc, cfg, o.model));
                }
            }
            Err(f) => {
                results.push(GridPoint {
                    lr: cfg.lr,
                    batch_size: cfg.batch_size,
                    val_auc: None,
                    val_fpr95: None,
                    best_epoch: None,
                    error: Some(f.to_string()),
                });
                first_failure.get_or_insert(f.source);
            }
        }
    }
    let Some((_, best, best_model)) = best else {
        // Every point failed; `runs` is non-empty, so a failure was recorded.
        return Err(first_failure.expect("at least one grid point"));
    };
    Ok(GridOutcome {
        best,
        best_model,
        results,
    })
}
