//! Gateways to external model services.
//!
//! Every large model (rating VLM, captioner, rewriting LLM, joint image-text
//! encoder, dense feature extractor) sits behind one of the traits below.
//! [`mock`] provides deterministic implementations used by tests and the
//! desk-scale fixture; [`http`] holds the wire protocol for remote adapters.

pub mod http;
pub mod mock;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageSample};

/// Rating words in score order: index 0 is "bad" (1), index 4 is "excellent" (5).
pub const RATING_WORDS: [&str; 5] = ["bad", "poor", "fair", "good", "excellent"];

/// Placeholder a rating template must contain; replaced by the five-word scale.
pub const SCALE_PLACEHOLDER: &str = "{scale}";

pub const DEFAULT_RATING_TEMPLATE: &str = "Considering rain, haze and snow artifacts, how would you rate the visibility of this image? Answer with one word: {scale}.";

pub fn render_rating_prompt(template: &str) -> Result<String> {
    if !template.contains(SCALE_PLACEHOLDER) {
        return Err(Error::Validation(format!(
            "rating template must contain the {SCALE_PLACEHOLDER} placeholder"
        )));
    }
    let scale = "excellent, good, fair, poor, or bad";
    Ok(template.replace(SCALE_PLACEHOLDER, scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Rating,
    Caption,
    Rewrite,
    Embed,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertId {
    pub name: String,
    pub kind: ExpertKind,
}

impl ExpertId {
    pub fn new(name: impl Into<String>, kind: ExpertKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}", self.name, self.kind)
    }
}

/// Logits over the five rating tokens, bad..excellent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingLogits([f64; 5]);

impl RatingLogits {
    pub fn new(logits: [f64; 5]) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain(format!("non-finite rating logits {logits:?}")));
        }
        Ok(Self(logits))
    }

    pub fn values(&self) -> &[f64; 5] {
        &self.0
    }

    /// 1-based rating with the largest logit; ties go to the lower rating.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..5 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    /// Scales `values` to unit norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let n = crate::objectives::norm(&values);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Domain("cannot normalize a zero or non-finite embedding".into()));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        Ok(crate::objectives::cosine_with_grad(&self.values, &other.values)?.0)
    }
}

/// Vector-Jacobian product through `v / |v|`: maps a gradient w.r.t. the
/// normalized output back to a gradient w.r.t. `v`.
pub fn normalize_vjp(v: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let n = crate::objectives::norm(v);
    let u: Vec<f64> = v.iter().map(|x| x / n).collect();
    let ug = crate::objectives::dot(&u, grad_out);
    grad_out
        .iter()
        .zip(&u)
        .map(|(g, ui)| (g - ui * ug) / n)
        .collect()
}

/// Dense grid of feature vectors, row-major, `dim` values per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Validation("feature map dimensions must be positive".into()));
        }
        if data.len() != height * width * dim {
            return Err(Error::Validation(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.dim)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

// ---------------------------------------------------------------------------
// Backend traits

pub trait RatingBackend: Send + Sync {
    fn id(&self) -> &ExpertId;

    /// Logits for the five rating tokens given the rendered rating prompt.
    fn rate(&self, image: &ImageSample, template: &str) -> Result<RatingLogits>;

    /// Upper bound on concurrent calls, for rate-limited remote services.
    fn max_in_flight(&self) -> Option<usize> {
        None
    }
}

pub trait CaptionBackend: Send + Sync {
    fn id(&self) -> &ExpertId;
    fn caption(&self, image: &ImageSample) -> Result<String>;
}

pub trait RewriteBackend: Send + Sync {
    fn id(&self) -> &ExpertId;
    fn rewrite(&self, negative: &str, icl_examples: &[(String, String)]) -> Result<String>;
}

/// A CLIP-style joint image-text encoder. Prompt embeddings are consumed
/// directly by the text tower, bypassing tokenization.
pub trait JointEncoder: Send + Sync {
    fn id(&self) -> &ExpertId;
    fn image_dim(&self) -> usize;
    fn text_dim(&self) -> usize;
    /// Width of a single learnable prompt token vector.
    fn prompt_width(&self) -> usize;

    fn embed_image(&self, image: &ImageSample) -> Result<Embedding>;
    fn embed_text(&self, text: &str) -> Result<Embedding>;
    fn embed_prompt(&self, context: &[Vec<f64>]) -> Result<Embedding>;

    /// Gradient w.r.t. each context vector given a gradient w.r.t. the
    /// normalized prompt embedding.
    fn prompt_vjp(&self, context: &[Vec<f64>], grad: &[f64]) -> Result<Vec<Vec<f64>>>;

    /// Gradient w.r.t. the image pixels given a gradient w.r.t. the normalized
    /// image embedding. `None` when the image tower is not differentiable.
    fn image_vjp(&self, _image: &ImageSample, _grad: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }

    /// Digest of every frozen parameter, used to prove the encoder is untouched.
    fn parameter_digest(&self) -> String;
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &ExpertId;
    fn extract(&self, image: &ImageSample) -> Result<FeatureMap>;

    /// Gradient w.r.t. the image pixels given a gradient w.r.t. the features.
    fn vjp(&self, _image: &ImageSample, _grad: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
}

// ---------------------------------------------------------------------------
// Registry

#[derive(Clone, Default)]
pub struct Registry {
    rating: Vec<Arc<dyn RatingBackend>>,
    caption: Option<Arc<dyn CaptionBackend>>,
    rewrite: Option<Arc<dyn RewriteBackend>>,
    encoder: Option<Arc<dyn JointEncoder>>,
    features: Option<Arc<dyn FeatureExtractor>>,
    names: BTreeSet<(String, ExpertKind)>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("experts", &self.names).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, id: &ExpertId, expected: ExpertKind) -> Result<()> {
        if id.kind != expected {
            return Err(Error::Registry(format!(
                "expert `{}` has kind {:?}, expected {:?}",
                id.name, id.kind, expected
            )));
        }
        if !self.names.insert((id.name.clone(), id.kind)) {
            return Err(Error::Registry(format!(
                "duplicate expert `{}` of kind {:?}",
                id.name, id.kind
            )));
        }
        Ok(())
    }

    pub fn add_rating(&mut self, backend: Arc<dyn RatingBackend>) -> Result<&mut Self> {
        self.claim(&backend.id().clone(), ExpertKind::Rating)?;
        self.rating.push(backend);
        Ok(self)
    }

    pub fn set_caption(&mut self, backend: Arc<dyn CaptionBackend>) -> Result<&mut Self> {
        self.claim(&backend.id().clone(), ExpertKind::Caption)?;
        self.caption = Some(backend);
        Ok(self)
    }

    pub fn set_rewrite(&mut self, backend: Arc<dyn RewriteBackend>) -> Result<&mut Self> {
        self.claim(&backend.id().clone(), ExpertKind::Rewrite)?;
        self.rewrite = Some(backend);
        Ok(self)
    }

    pub fn set_encoder(&mut self, backend: Arc<dyn JointEncoder>) -> Result<&mut Self> {
        if backend.image_dim() != backend.text_dim() {
            return Err(Error::config(
                "encoder",
                format!(
                    "encoder `{}` towers disagree: image dim {} vs text dim {}",
                    backend.id().name,
                    backend.image_dim(),
                    backend.text_dim()
                ),
            ));
        }
        self.claim(&backend.id().clone(), ExpertKind::Embed)?;
        self.encoder = Some(backend);
        Ok(self)
    }

    pub fn set_features(&mut self, backend: Arc<dyn FeatureExtractor>) -> Result<&mut Self> {
        self.claim(&backend.id().clone(), ExpertKind::Feature)?;
        self.features = Some(backend);
        Ok(self)
    }

    pub fn rating(&self) -> &[Arc<dyn RatingBackend>] {
        &self.rating
    }

    pub fn caption(&self) -> Option<&Arc<dyn CaptionBackend>> {
        self.caption.as_ref()
    }

    pub fn rewrite(&self) -> Option<&Arc<dyn RewriteBackend>> {
        self.rewrite.as_ref()
    }

    pub fn encoder(&self) -> Option<&Arc<dyn JointEncoder>> {
        self.encoder.as_ref()
    }

    pub fn features(&self) -> Option<&Arc<dyn FeatureExtractor>> {
        self.features.as_ref()
    }

    pub fn expert_names(&self) -> Vec<String> {
        self.names.iter().map(|(n, k)| format!("{n}:{k:?}").to_lowercase()).collect()
    }
}

/// Pixel-space helper shared by mocks: per-pixel minimum over channels.
pub(crate) fn dark_channel_mean(img: &Image) -> f64 {
    let px = img.as_slice();
    let n = px.len() / 3;
    px.chunks_exact(3)
        .map(|p| p[0].min(p[1]).min(p[2]))
        .sum::<f64>()
        / n as f64
}
