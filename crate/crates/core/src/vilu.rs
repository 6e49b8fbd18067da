//! The ViLU uncertainty head.
//!
//! For an image embedding `z_v` and candidate texts `Z_t` (K rows), a single
//! bias-free attention head pools the texts with the image as query:
//!
//! ```text
//! alpha   = softmax((W_Q z_v)ᵀ (W_K Z_tᵀ) / sqrt(d))
//! z_alpha = Σ_j alpha_j W_V z_t_j
//! ```
//!
//! The embedding `[z_v | z_that | z_alpha | 1 − max p]` (enabled blocks only,
//! in that order; `z_that` is the raw embedding of the predicted text) feeds
//! an MLP with ReLU hidden layers and one output logit. The failure score is
//! `sigmoid(logit)`. Gradients never flow into the embeddings.
//!
//! All candidates of a batch are shared, which holds in both task modes: label
//! mode scores every image against all classes and caption mode against the
//! batch's own captions. Projections of the candidates are therefore computed
//! once per batch.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::UncertaintyScorer;
use crate::nn::{
    compare_gradients, numeric_gradients_piecewise, relu, relu_backward, sigmoid,
    softmax_backward_rows, softmax_rows, GradCheckReport, LinearLayer, ParamSpec, ParamStore,
};
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::store::EmbeddingDataset;
use crate::training::batch_objective;
use crate::training::LossKind;
use crate::zeroshot::{argmax_lowest, softmax_probs, CandidateBatch};

pub const W_Q: usize = 0;
pub const W_K: usize = 1;
pub const W_V: usize = 2;
const MLP_START: usize = 3;

pub const DEFAULT_HIDDEN_DIMS: [usize; 3] = [512, 256, 128];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViluConfig {
    pub d: usize,
    pub use_visual: bool,
    pub use_predicted_text: bool,
    pub use_cross_attention: bool,
    pub append_mcm_score: bool,
    pub mlp_hidden_dims: Vec<usize>,
    pub seed: u64,
}

/// Input-component ablations: which of the three embedding blocks are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum Ablation {
    /// Visual embedding only (the LVU input).
    #[serde(rename = "visual")]
    Visual,
    /// Visual plus predicted-text embedding.
    #[serde(rename = "+pred")]
    PredictedText,
    /// Visual plus cross-attention output.
    #[serde(rename = "+xattn")]
    CrossAttention,
    /// All three blocks.
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Visual,
        Ablation::PredictedText,
        Ablation::CrossAttention,
        Ablation::Full,
    ];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Visual => "visual",
            Ablation::PredictedText => "+pred",
            Ablation::CrossAttention => "+xattn",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Ablation::Visual),
            "+pred" | "pred" => Ok(Ablation::PredictedText),
            "+xattn" | "xattn" => Ok(Ablation::CrossAttention),
            "full" => Ok(Ablation::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation `{other}` (expected visual, +pred, +xattn or full)"
            ))),
        }
    }
}

impl ViluConfig {
    pub fn full(d: usize) -> Self {
        Self::ablation(d, Ablation::Full)
    }

    /// The visual-only learner used by the LVU baseline.
    pub fn visual_only(d: usize) -> Self {
        Self::ablation(d, Ablation::Visual)
    }

    pub fn ablation(d: usize, ablation: Ablation) -> Self {
        let (pred, xattn) = match ablation {
            Ablation::Visual => (false, false),
            Ablation::PredictedText => (true, false),
            Ablation::CrossAttention => (false, true),
            Ablation::Full => (true, true),
        };
        Self {
            d,
            use_visual: true,
            use_predicted_text: pred,
            use_cross_attention: xattn,
            append_mcm_score: false,
            mlp_hidden_dims: DEFAULT_HIDDEN_DIMS.to_vec(),
            seed: 0,
        }
    }

    pub fn with_hidden(mut self, dims: &[usize]) -> Self {
        self.mlp_hidden_dims = dims.to_vec();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mcm_score(mut self, on: bool) -> Self {
        self.append_mcm_score = on;
        self
    }

    pub fn num_blocks(&self) -> usize {
        [
            self.use_visual,
            self.use_predicted_text,
            self.use_cross_attention,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }

    pub fn input_dim(&self) -> usize {
        self.d * self.num_blocks() + usize::from(self.append_mcm_score)
    }

    /// Column offset of the cross-attention block inside the ViLU embedding.
    fn alpha_offset(&self) -> usize {
        self.d * (usize::from(self.use_visual) + usize::from(self.use_predicted_text))
    }

    pub fn num_layers(&self) -> usize {
        self.mlp_hidden_dims.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument(
                "embedding dimension must be positive".into(),
            ));
        }
        if self.num_blocks() == 0 {
            return Err(Error::InvalidArgument(
                "at least one of visual, predicted-text, cross-attention must be enabled".into(),
            ));
        }
        if self.mlp_hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parameter declaration order: W_Q, W_K, W_V, then each MLP layer as
    /// weight followed by bias. The projections are always present.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d;
        let mut specs = vec![
            ParamSpec::weight("xattn.w_q", d, d),
            ParamSpec::weight("xattn.w_k", d, d),
            ParamSpec::weight("xattn.w_v", d, d),
        ];
        let mut fan_in = self.input_dim();
        for (l, &h) in self
            .mlp_hidden_dims
            .iter()
            .chain(std::iter::once(&1))
            .enumerate()
        {
            specs.push(ParamSpec::weight(format!("mlp.{l}.weight"), h, fan_in));
            specs.push(ParamSpec::bias(format!("mlp.{l}.bias"), h));
            fan_in = h;
        }
        specs
    }
}

/// Tensors for one forward pass over a batch sharing a candidate set.
#[derive(Debug, Clone)]
pub struct BatchInput<T> {
    /// `B x d` image embeddings.
    pub images: Array2<T>,
    /// `K x d` candidate text embeddings.
    pub candidates: Array2<T>,
    /// Row of `candidates` predicted for each image.
    pub predicted: Vec<usize>,
    /// `1 − max p` per image; required iff the config appends it.
    pub mcm: Option<Array1<T>>,
}

pub(crate) fn gather_rows<T: Scalar>(m: ArrayView2<'_, f32>, rows: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (mut dst, &r) in out.outer_iter_mut().zip(rows) {
        dst.iter_mut()
            .zip(m.row(r))
            .for_each(|(o, &x)| *o = T::from_f32_lossy(x));
    }
    out
}

impl<T: Scalar> BatchInput<T> {
    pub fn from_batch(ds: &EmbeddingDataset, batch: &CandidateBatch) -> Self {
        Self {
            images: gather_rows(ds.images(), &batch.samples),
            candidates: gather_rows(ds.texts(), &batch.candidates),
            predicted: batch.records.iter().map(|r| r.predicted_index).collect(),
            mcm: Some(
                batch
                    .records
                    .iter()
                    .map(|r| T::from_f64_lossy(r.mcm()))
                    .collect(),
            ),
        }
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.nrows() == 0
    }
}

/// Activations saved by [`ViluModel::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    version: u64,
    input: BatchInput<T>,
    queries: Option<Array2<T>>,
    keys: Option<Array2<T>>,
    values: Option<Array2<T>>,
    alpha: Option<Array2<T>>,
    z_alpha: Option<Array2<T>>,
    /// Input of every MLP layer; the first is the ViLU embedding.
    layer_inputs: Vec<Array2<T>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Array2<T>>,
    pub logits: Array1<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn alpha(&self) -> Option<ArrayView2<'_, T>> {
        self.alpha.as_ref().map(|a| a.view())
    }

    pub fn z_alpha(&self) -> Option<ArrayView2<'_, T>> {
        self.z_alpha.as_ref().map(|a| a.view())
    }

    /// Sign pattern of every hidden pre-activation; constant on each smooth
    /// piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.hidden_pre
            .iter()
            .flat_map(|h| h.iter().map(|&x| x > T::zero()))
            .collect()
    }

    pub fn vilu_embedding(&self) -> ArrayView2<'_, T> {
        self.layer_inputs[0].view()
    }

    /// Failure scores `sigmoid(logit)`.
    pub fn scores(&self) -> Array1<T> {
        self.logits.mapv(sigmoid)
    }
}

/// Single-head cross-attention of one image over `K` candidate texts.
pub fn cross_attention<T: Scalar>(
    z_v: ArrayView1<'_, T>,
    texts: ArrayView2<'_, T>,
    w_q: ArrayView2<'_, T>,
    w_k: ArrayView2<'_, T>,
    w_v: ArrayView2<'_, T>,
) -> Result<(Array1<T>, Array1<T>)> {
    if texts.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "cross-attention needs at least one candidate".into(),
        ));
    }
    let d = z_v.len();
    if texts.ncols() != d
        || [w_q.dim(), w_k.dim(), w_v.dim()]
            .iter()
            .any(|&s| s != (d, d))
    {
        return Err(Error::Shape(format!(
            "cross-attention with d = {d} and texts {:?}",
            texts.dim()
        )));
    }
    let (alpha, z_alpha, ..) = attend(z_v.insert_axis(Axis(0)), texts, w_q, w_k, w_v);
    Ok((alpha.remove_axis(Axis(0)), z_alpha.remove_axis(Axis(0))))
}

type Attended<T> = (Array2<T>, Array2<T>, Array2<T>, Array2<T>, Array2<T>);

/// Returns (alpha, z_alpha, queries, keys, values).
fn attend<T: Scalar>(
    images: ArrayView2<'_, T>,
    texts: ArrayView2<'_, T>,
    w_q: ArrayView2<'_, T>,
    w_k: ArrayView2<'_, T>,
    w_v: ArrayView2<'_, T>,
) -> Attended<T> {
    let d = images.ncols();
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let queries = images.dot(&w_q.t());
    let keys = texts.dot(&w_k.t());
    let values = texts.dot(&w_v.t());
    let scores = queries.dot(&keys.t()) * scale;
    let alpha = softmax_rows(scores.view());
    let z_alpha = alpha.dot(&values);
    (alpha, z_alpha, queries, keys, values)
}

/// Concatenates the enabled blocks in the fixed order
/// `[z_v | z_that | z_alpha | mcm]`.
pub fn build_vilu_embedding<T: Scalar>(
    z_v: Option<&[T]>,
    z_that: Option<&[T]>,
    z_alpha: Option<&[T]>,
    mcm_score: Option<T>,
    config: &ViluConfig,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(config.input_dim());
    let blocks = [
        (config.use_visual, z_v, "visual embedding"),
        (
            config.use_predicted_text,
            z_that,
            "predicted-text embedding",
        ),
        (
            config.use_cross_attention,
            z_alpha,
            "cross-attention output",
        ),
    ];
    for (enabled, block, what) in blocks {
        if !enabled {
            continue;
        }
        let block = block.ok_or_else(|| Error::InvalidArgument(format!("missing {what}")))?;
        if block.len() != config.d {
            return Err(Error::Shape(format!(
                "{what} has length {}, expected {}",
                block.len(),
                config.d
            )));
        }
        out.extend_from_slice(block);
    }
    if config.append_mcm_score {
        out.push(mcm_score.ok_or_else(|| Error::InvalidArgument("missing MCM score".into()))?);
    }
    Ok(out)
}

/// `½ zᵀ A z` with `A = [[0, I, 0], [I, 0, 0], [0, 0, 0]]` on a ViLU embedding
/// `z = (z_v, z_that, z_alpha)`; equals `z_vᵀ z_that`.
///
/// A fixed bilinear head that reproduces the unnormalized MCM similarity,
/// used as a test oracle.
pub fn bilinear_head_eval(z_vilu: &[f64], d: usize) -> Result<f64> {
    if z_vilu.len() != 3 * d {
        return Err(Error::Shape(format!(
            "bilinear head expects length {}, got {}",
            3 * d,
            z_vilu.len()
        )));
    }
    let mut az = vec![0.0; 3 * d];
    az[..d].copy_from_slice(&z_vilu[d..2 * d]);
    az[d..2 * d].copy_from_slice(&z_vilu[..d]);
    Ok(0.5 * z_vilu.iter().zip(&az).map(|(a, b)| a * b).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViluModel<T> {
    config: ViluConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> ViluModel<T> {
    pub fn new(config: ViluConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.param_specs(), config.seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ViluConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let matches = specs.len() == params.len()
            && specs
                .iter()
                .zip(params.iter())
                .all(|(s, p)| s.name == p.name && p.value.dim() == (s.rows, s.cols));
        if !matches {
            return Err(Error::Shape(
                "parameter shapes do not match the configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ViluConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn set_cross_attention_frozen(&mut self, frozen: bool) {
        for i in [W_Q, W_K, W_V] {
            self.params.set_frozen(i, frozen);
        }
    }

    pub fn cross_attention_frozen(&self) -> bool {
        [W_Q, W_K, W_V].iter().all(|&i| self.params.is_frozen(i))
    }

    pub fn cast<U: Scalar>(&self) -> ViluModel<U> {
        ViluModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn layer(&self, l: usize) -> LinearLayer<'_, T> {
        let w = self.params.value(MLP_START + 2 * l).view();
        let b = self.params.value(MLP_START + 2 * l + 1).row(0);
        LinearLayer {
            weight: w,
            bias: Some(b),
        }
    }

    fn check_input(&self, input: &BatchInput<T>) -> Result<()> {
        let d = self.config.d;
        let b = input.images.nrows();
        if input.images.ncols() != d || input.candidates.ncols() != d {
            return Err(Error::Shape(format!(
                "model expects d = {d}, got images {:?} and candidates {:?}",
                input.images.dim(),
                input.candidates.dim()
            )));
        }
        if input.candidates.nrows() == 0 {
            return Err(Error::InvalidArgument("candidate set is empty".into()));
        }
        if input.predicted.len() != b {
            return Err(Error::Shape(format!(
                "{} predictions for {b} images",
                input.predicted.len()
            )));
        }
        if let Some(&p) = input
            .predicted
            .iter()
            .find(|&&p| p >= input.candidates.nrows())
        {
            return Err(Error::IndexOutOfBounds {
                index: p,
                len: input.candidates.nrows(),
            });
        }
        if self.config.append_mcm_score {
            match &input.mcm {
                Some(m) if m.len() == b => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "config appends the MCM score but none was supplied".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn forward_batch(&self, input: BatchInput<T>) -> Result<ForwardCache<T>> {
        self.check_input(&input)?;
        let cfg = &self.config;

        let (mut queries, mut keys, mut values, mut alpha, mut z_alpha) =
            (None, None, None, None, None);
        if cfg.use_cross_attention {
            let (a, z, q, k, v) = attend(
                input.images.view(),
                input.candidates.view(),
                self.params.value(W_Q).view(),
                self.params.value(W_K).view(),
                self.params.value(W_V).view(),
            );
            alpha = Some(a);
            z_alpha = Some(z);
            queries = Some(q);
            keys = Some(k);
            values = Some(v);
        }

        let mut blocks: Vec<ArrayView2<'_, T>> = Vec::with_capacity(4);
        let predicted_rows;
        if cfg.use_visual {
            blocks.push(input.images.view());
        }
        if cfg.use_predicted_text {
            predicted_rows = input.candidates.select(Axis(0), &input.predicted);
            blocks.push(predicted_rows.view());
        }
        if let Some(z) = &z_alpha {
            blocks.push(z.view());
        }
        let mcm_col;
        if cfg.append_mcm_score {
            mcm_col = input
                .mcm
                .as_ref()
                .expect("checked")
                .view()
                .insert_axis(Axis(1))
                .to_owned();
            blocks.push(mcm_col.view());
        }
        let embedding = concatenate(Axis(1), &blocks).map_err(|e| Error::Shape(e.to_string()))?;

        let n_layers = cfg.num_layers();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut hidden_pre = Vec::with_capacity(n_layers - 1);
        let mut h = embedding;
        for l in 0..n_layers {
            let pre = self.layer(l).forward(h.view())?;
            layer_inputs.push(h);
            if l + 1 < n_layers {
                h = relu(pre.view());
                hidden_pre.push(pre);
            } else {
                h = pre;
            }
        }
        let logits = h.remove_axis(Axis(1));

        Ok(ForwardCache {
            version: self.params.version(),
            input,
            queries,
            keys,
            values,
            alpha,
            z_alpha,
            layer_inputs,
            hidden_pre,
            logits,
        })
    }

    /// Accumulates `d loss / d params` into the gradient buffers given
    /// `dlogits = d loss / d logit` per sample. Frozen parameters receive no
    /// gradient; with cross-attention disabled the projections get none either.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dlogits: ArrayView1<'_, T>) -> Result<()> {
        if cache.version != self.params.version() {
            return Err(Error::InvalidArgument(
                "stale forward cache: parameters changed since forward".into(),
            ));
        }
        if dlogits.len() != cache.logits.len() {
            return Err(Error::Shape(format!(
                "{} upstream gradients for {} logits",
                dlogits.len(),
                cache.logits.len()
            )));
        }

        let n_layers = self.config.num_layers();
        let mut dy = dlogits.to_owned().insert_axis(Axis(1));
        let mut d_embedding = None;
        for l in (0..n_layers).rev() {
            let grads = self
                .layer(l)
                .backward(cache.layer_inputs[l].view(), dy.view())?;
            let (wi, bi) = (MLP_START + 2 * l, MLP_START + 2 * l + 1);
            if !self.params.is_frozen(wi) {
                *self.params.grad_mut(wi) += &grads.dweight;
            }
            if !self.params.is_frozen(bi) {
                let db = grads.dbias.expect("mlp layers have biases");
                self.params
                    .grad_mut(bi)
                    .row_mut(0)
                    .scaled_add(T::one(), &db);
            }
            if l > 0 {
                dy = relu_backward(cache.hidden_pre[l - 1].view(), grads.dx.view());
            } else {
                d_embedding = Some(grads.dx);
            }
        }

        if !self.config.use_cross_attention || self.cross_attention_frozen() {
            return Ok(());
        }
        let d = self.config.d;
        let off = self.config.alpha_offset();
        let d_embedding = d_embedding.expect("at least one layer");
        let dz_alpha = d_embedding.slice(s![.., off..off + d]);
        let alpha = cache.alpha.as_ref().expect("attention cached");
        let queries = cache.queries.as_ref().expect("attention cached");
        let keys = cache.keys.as_ref().expect("attention cached");
        let values = cache.values.as_ref().expect("attention cached");
        let images = &cache.input.images;
        let texts = &cache.input.candidates;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();

        let dalpha = dz_alpha.dot(&values.t());
        let dvalues = alpha.t().dot(&dz_alpha);
        let dscores = softmax_backward_rows(alpha.view(), dalpha.view()) * scale;
        let dqueries = dscores.dot(keys);
        let dkeys = dscores.t().dot(queries);

        if !self.params.is_frozen(W_V) {
            *self.params.grad_mut(W_V) += &dvalues.t().dot(texts);
        }
        if !self.params.is_frozen(W_Q) {
            *self.params.grad_mut(W_Q) += &dqueries.t().dot(images);
        }
        if !self.params.is_frozen(W_K) {
            *self.params.grad_mut(W_K) += &dkeys.t().dot(texts);
        }
        Ok(())
    }

    /// Single-sample forward: returns (logit, failure score, cache).
    /// `probs` is only consulted when the config appends the MCM score.
    pub fn forward(
        &self,
        z_v: ArrayView1<'_, T>,
        texts: ArrayView2<'_, T>,
        predicted_index: usize,
        probs: Option<&[f64]>,
    ) -> Result<(T, T, ForwardCache<T>)> {
        let mcm = if self.config.append_mcm_score {
            let p = probs.ok_or_else(|| {
                Error::InvalidArgument(
                    "config appends the MCM score but no probabilities were given".into(),
                )
            })?;
            let mcm = crate::baselines::mcm_score(p)?;
            Some(Array1::from_elem(1, T::from_f64_lossy(mcm)))
        } else {
            None
        };
        let input = BatchInput {
            images: z_v.to_owned().insert_axis(Axis(0)),
            candidates: texts.to_owned(),
            predicted: vec![predicted_index],
            mcm,
        };
        let cache = self.forward_batch(input)?;
        let logit = cache.logits[0];
        Ok((logit, sigmoid(logit), cache))
    }

    /// Failure scores for a zero-shot batch.
    pub fn score_batch(&self, ds: &EmbeddingDataset, batch: &CandidateBatch) -> Result<Vec<f64>> {
        if ds.dim() != self.config.d {
            return Err(Error::Shape(format!(
                "model has d = {}, dataset has d = {}",
                self.config.d,
                ds.dim()
            )));
        }
        let cache = self.forward_batch(BatchInput::from_batch(ds, batch))?;
        Ok(cache
            .logits
            .iter()
            .map(|&z| sigmoid(z).to_f64_lossy())
            .collect())
    }
}

/// A trained head used as an uncertainty scorer under a display name.
#[derive(Debug, Clone, Copy)]
pub struct ModelScorer<'a> {
    pub model: &'a ViluModel<f32>,
    pub name: &'a str,
}

impl UncertaintyScorer for ModelScorer<'_> {
    fn name(&self) -> &str {
        self.name
    }

    fn score_batch(&self, ds: &EmbeddingDataset, batch: &CandidateBatch) -> Result<Vec<f64>> {
        self.model.score_batch(ds, batch)
    }
}

/// Probe step for [`check_gradients`]. Smaller steps lose the weakest
/// attention gradients (around 1e-7) to rounding in the loss.
pub const GRADCHECK_EPS: f64 = 1e-3;

/// Finite-difference reports for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    /// `f64` analytic gradients against `f64` central differences.
    pub f64_report: GradCheckReport,
    /// `f32` analytic gradients against `f64` central differences at the
    /// same (f32-representable) parameters.
    pub f32_report: GradCheckReport,
}

/// Random unit-norm batch with zero-shot predictions at temperature `tau`.
fn random_batch(
    d: usize,
    k: usize,
    batch: usize,
    tau: f64,
    seed: u64,
) -> Result<(BatchInput<f64>, Vec<bool>)> {
    let mut rng = rng::seeded(rng::derive_seed(seed, stream::SAMPLES));
    let mut unit_rows = |n: usize| {
        let mut m = Array2::<f64>::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
        for mut r in m.outer_iter_mut() {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        m
    };
    let images = unit_rows(batch);
    let candidates = unit_rows(k);
    let sims = images.dot(&candidates.t());
    let mut predicted = Vec::with_capacity(batch);
    let mut mcm = Vec::with_capacity(batch);
    for row in sims.outer_iter() {
        let probs = softmax_probs(row.as_slice().expect("contiguous"), tau)?;
        let p = argmax_lowest(&probs);
        mcm.push(1.0 - probs[p]);
        predicted.push(p);
    }
    let errors = (0..batch).map(|i| predicted[i] != i % k).collect();
    Ok((
        BatchInput {
            images,
            candidates,
            predicted,
            mcm: Some(Array1::from(mcm)),
        },
        errors,
    ))
}

fn objective_and_grads<T: Scalar>(
    model: &mut ViluModel<T>,
    input: &BatchInput<f64>,
    errors: &[bool],
    with_grads: bool,
) -> Result<(f64, Vec<bool>)> {
    let cast = BatchInput {
        images: input.images.mapv(T::from_f64_lossy),
        candidates: input.candidates.mapv(T::from_f64_lossy),
        predicted: input.predicted.clone(),
        mcm: input.mcm.as_ref().map(|m| m.mapv(T::from_f64_lossy)),
    };
    let cache = model.forward_batch(cast)?;
    let logits: Vec<f64> = cache.logits.iter().map(|z| z.to_f64_lossy()).collect();
    let (loss, dlogits, _) = batch_objective(LossKind::Wbce, &logits, errors, None)?;
    if with_grads {
        let dlogits: Array1<T> = dlogits.iter().map(|&g| T::from_f64_lossy(g)).collect();
        model.params_mut().zero_grad();
        model.backward(&cache, dlogits.view())?;
    }
    Ok((loss, cache.activation_pattern()))
}

/// Checks the analytic gradients of the weighted-BCE objective for `config`
/// on a random batch of `batch` images over `k` candidates.
///
/// Parameters are rounded to `f32` first so both precisions are checked at
/// the same point.
/// Settings for [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Number of candidate texts.
    pub k: usize,
    pub batch: usize,
    /// Randomly chosen parameter coordinates to probe.
    pub coordinates: usize,
    pub eps: f64,
    pub seed: u64,
    /// Flip the sign of the largest probed analytic gradient, to show the
    /// check catches a wrong derivative.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            k: 5,
            batch: 6,
            coordinates: 300,
            eps: GRADCHECK_EPS,
            seed: 0,
            corrupt: false,
        }
    }
}

pub fn check_gradients(config: &ViluConfig, opts: &GradCheckOptions) -> Result<ModelGradCheck> {
    let (input, errors) = random_batch(config.d, opts.k, opts.batch, 0.07, opts.seed)?;
    let narrow = ViluModel::<f32>::new(config.clone())?;
    let mut wide: ViluModel<f64> = narrow.cast();
    let mut narrow = narrow;

    objective_and_grads(&mut wide, &input, &errors, true)?;
    let mut analytic64 = wide.params().flat_grads();
    objective_and_grads(&mut narrow, &input, &errors, true)?;
    let mut analytic32: Vec<f64> = narrow
        .params()
        .flat_grads()
        .iter()
        .map(|&g| g as f64)
        .collect();

    let loss = |p: &ParamStore<f64>| {
        let mut m = ViluModel::from_params(config.clone(), p.clone()).expect("same shapes");
        objective_and_grads(&mut m, &input, &errors, false).expect("valid batch")
    };
    let probes =
        numeric_gradients_piecewise(wide.params(), loss, opts.eps, opts.coordinates, opts.seed);
    if opts.corrupt {
        let target = probes
            .iter()
            .filter(|(_, numeric)| numeric.is_some())
            .map(|&(k, _)| k)
            .max_by(|&a, &b| analytic64[a].abs().total_cmp(&analytic64[b].abs()));
        if let Some(k) = target {
            analytic64[k] = -analytic64[k];
            analytic32[k] = -analytic32[k];
        }
    }
    let f64_report = compare_gradients(wide.params(), &analytic64, &probes);
    let f32_report = compare_gradients(wide.params(), &analytic32, &probes);
    Ok(ModelGradCheck {
        f64_report,
        f32_report,
    })
}
