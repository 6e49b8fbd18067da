use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Maximum allowed deviation of a row's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;
/// Rows sharing a text id must agree to this tolerance.
pub const DUPLICATE_TOLERANCE: f32 = 1e-6;
/// Temperature used when a backbone's learned logit scale is unknown.
pub const DEFAULT_TAU: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Fixed class set shared by every image.
    ImageLabel,
    /// Image `i` is paired with caption `i`; candidates come from the batch.
    ImageCaption,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::ImageLabel => 0,
            Mode::ImageCaption => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Mode::ImageLabel),
            1 => Ok(Mode::ImageCaption),
            other => Err(Error::UnknownMode(other)),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::ImageLabel => "image-label",
            Mode::ImageCaption => "image-caption",
        })
    }
}

/// Contents of the optional `<path>.meta.json` sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dataset: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Precomputed, L2-normalized image and text embeddings plus the ground-truth
/// association between them.
///
/// In label mode `labels[i]` is the class (text row) of image `i`. In caption
/// mode image `i` is paired with text `i`, and `text_ids` identifies equal
/// caption strings. Datasets are immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    mode: Mode,
    tau: f32,
    images: Array2<f32>,
    texts: Array2<f32>,
    labels: Vec<u32>,
    text_ids: Vec<u32>,
    meta: Option<DatasetMeta>,
}

impl EmbeddingDataset {
    /// Builds a label-mode dataset. Text ids default to the class index.
    pub fn image_label(
        tau: f32,
        images: Array2<f32>,
        texts: Array2<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let k = texts.nrows() as u32;
        let ds = Self {
            mode: Mode::ImageLabel,
            tau,
            images,
            texts,
            labels,
            text_ids: (0..k).collect(),
            meta: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn image_caption(
        tau: f32,
        images: Array2<f32>,
        texts: Array2<f32>,
        text_ids: Vec<u32>,
    ) -> Result<Self> {
        let ds = Self {
            mode: Mode::ImageCaption,
            tau,
            images,
            texts,
            labels: Vec::new(),
            text_ids,
            meta: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub(crate) fn from_parts_unchecked(
        mode: Mode,
        tau: f32,
        images: Array2<f32>,
        texts: Array2<f32>,
        labels: Vec<u32>,
        text_ids: Vec<u32>,
    ) -> Self {
        Self {
            mode,
            tau,
            images,
            texts,
            labels,
            text_ids,
            meta: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.images.ncols().max(self.texts.ncols())
    }

    /// Number of images.
    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.nrows() == 0
    }

    /// Number of text rows.
    pub fn num_texts(&self) -> usize {
        self.texts.nrows()
    }

    pub fn images(&self) -> ArrayView2<'_, f32> {
        self.images.view()
    }

    pub fn texts(&self) -> ArrayView2<'_, f32> {
        self.texts.view()
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f32> {
        self.images.row(i)
    }

    pub fn text(&self, j: usize) -> ArrayView1<'_, f32> {
        self.texts.row(j)
    }

    /// Class labels; empty in caption mode.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn text_ids(&self) -> &[u32] {
        &self.text_ids
    }

    pub fn meta(&self) -> Option<&DatasetMeta> {
        self.meta.as_ref()
    }

    /// Index of the ground-truth text for image `i`.
    pub fn target_text(&self, i: usize) -> usize {
        match self.mode {
            Mode::ImageLabel => self.labels[i] as usize,
            Mode::ImageCaption => i,
        }
    }

    /// Checks every dataset invariant, failing on the first violation.
    pub fn validate(&self) -> Result<()> {
        let report = self.validation_report();
        match report.violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::Invariant(v)),
        }
    }

    /// Runs all invariant checks and collects every violation.
    pub fn validation_report(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.images.nrows();
        let k = self.texts.nrows();
        let d = self.images.ncols();

        if !(self.tau > 0.0 && self.tau.is_finite()) {
            violations.push(format!("tau must be positive and finite, got {}", self.tau));
        }
        if d == 0 {
            violations.push("embedding dimension must be positive".to_string());
        }
        if self.texts.ncols() != d {
            violations.push(format!(
                "text dimension {} differs from image dimension {d}",
                self.texts.ncols()
            ));
        }
        if self.text_ids.len() != k {
            violations.push(format!(
                "expected {k} text ids, found {}",
                self.text_ids.len()
            ));
        }
        match self.mode {
            Mode::ImageLabel => {
                if self.labels.len() != n {
                    violations.push(format!("expected {n} labels, found {}", self.labels.len()));
                }
                if let Some((i, &l)) = self
                    .labels
                    .iter()
                    .enumerate()
                    .find(|(_, &l)| l as usize >= k)
                {
                    violations.push(format!("label {l} of image {i} is not below K = {k}"));
                }
            }
            Mode::ImageCaption => {
                if k != n {
                    violations.push(format!(
                        "caption mode requires K == N, got K = {k}, N = {n}"
                    ));
                }
                if !self.labels.is_empty() {
                    violations.push("caption mode datasets carry no labels".to_string());
                }
            }
        }

        let bad_image_rows = bad_rows(self.images.view());
        let bad_text_rows = bad_rows(self.texts.view());
        if let Some(&i) = bad_image_rows.first() {
            violations.push(format!(
                "{} image rows are non-finite or not unit norm (first: row {i})",
                bad_image_rows.len()
            ));
        }
        if let Some(&j) = bad_text_rows.first() {
            violations.push(format!(
                "{} text rows are non-finite or not unit norm (first: row {j})",
                bad_text_rows.len()
            ));
        }

        if self.text_ids.len() == k && self.texts.ncols() == d {
            let mut first_seen: BTreeMap<u32, usize> = BTreeMap::new();
            for (j, &id) in self.text_ids.iter().enumerate() {
                match first_seen.get(&id) {
                    None => {
                        first_seen.insert(id, j);
                    }
                    Some(&j0) => {
                        let same = self
                            .texts
                            .row(j0)
                            .iter()
                            .zip(self.texts.row(j))
                            .all(|(a, b)| (a - b).abs() <= DUPLICATE_TOLERANCE);
                        if !same {
                            violations.push(format!("texts {j0} and {j} share id {id} but differ"));
                            break;
                        }
                    }
                }
            }
        }

        ValidationReport {
            mode: self.mode,
            n,
            k,
            d,
            tau: self.tau,
            bad_image_rows,
            bad_text_rows,
            violations,
        }
    }

    /// Restricts the dataset to a subset of images.
    ///
    /// Label mode keeps the full text matrix; caption mode keeps the paired
    /// captions so that image `i` of the result still pairs with text `i`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfBounds {
                index: i,
                len: self.len(),
            });
        }
        let images = self.images.select(Axis(0), indices);
        let ds = match self.mode {
            Mode::ImageLabel => Self {
                mode: self.mode,
                tau: self.tau,
                images,
                texts: self.texts.clone(),
                labels: indices.iter().map(|&i| self.labels[i]).collect(),
                text_ids: self.text_ids.clone(),
                meta: self.meta.clone(),
            },
            Mode::ImageCaption => Self {
                mode: self.mode,
                tau: self.tau,
                images,
                texts: self.texts.select(Axis(0), indices),
                labels: Vec::new(),
                text_ids: indices.iter().map(|&i| self.text_ids[i]).collect(),
                meta: self.meta.clone(),
            },
        };
        Ok(ds)
    }

    /// Shuffles images under `seed` and cuts the first `round(fraction * N)`
    /// of them off as the training part; the rest is the holdout.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng::seeded(rng::derive_seed(seed, stream::SPLIT));
        order.shuffle(&mut rng);
        let n_train = ((fraction * n as f64).round() as usize).min(n);
        let (train, holdout) = order.split_at(n_train);
        Ok((self.subset(train)?, self.subset(holdout)?))
    }
}

fn bad_rows(m: ArrayView2<'_, f32>) -> Vec<usize> {
    m.outer_iter()
        .enumerate()
        .filter(|(_, row)| {
            if row.iter().any(|x| !x.is_finite()) {
                return true;
            }
            let norm = row
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            (norm - 1.0).abs() > NORM_TOLERANCE
        })
        .map(|(i, _)| i)
        .collect()
}

/// Result of a full validation pass, used for cross-implementation parity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub mode: Mode,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub tau: f32,
    pub bad_image_rows: Vec<usize>,
    pub bad_text_rows: Vec<usize>,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    /// One-line summary that an independent reader of the same file must
    /// reproduce exactly.
    pub fn digest(&self) -> String {
        format!(
            "mode={} N={} K={} d={} tau={:.9e} image_norm_fail={} text_norm_fail={}",
            self.mode.code(),
            self.n,
            self.k,
            self.d,
            self.tau,
            self.bad_image_rows.len(),
            self.bad_text_rows.len()
        )
    }
}
