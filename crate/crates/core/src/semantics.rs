//! Description pairs and the description-assisted semantics loss.
//!
//! Each unlabeled input is captioned (the negative description) and the
//! caption is rewritten into a clear-weather version (the positive one). A
//! lexicon/overlap validator rejects rewrites that keep weather terms or drift
//! away from the scene content; rejected pairs never enter the loss.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::mock::words;
use crate::backends::{CaptionBackend, Embedding, JointEncoder, RewriteBackend};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{hex, ImageSample};
use crate::objectives::cosine_softmax_nll;

pub const LEXICON_FIXTURE: &str = include_str!("../fixtures/lexicon.txt");
pub const STOPWORDS_FIXTURE: &str = include_str!("../fixtures/stopwords.txt");
pub const ICL_FIXTURE: &str = include_str!("../fixtures/icl_pairs.tsv");

fn word_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_ascii_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validator {
    lexicon: BTreeSet<String>,
    stopwords: BTreeSet<String>,
    threshold: f64,
}

impl Default for Validator {
    fn default() -> Self {
        Self::new(word_list(LEXICON_FIXTURE), word_list(STOPWORDS_FIXTURE), 0.3)
    }
}

impl Validator {
    pub fn new(lexicon: BTreeSet<String>, stopwords: BTreeSet<String>, threshold: f64) -> Self {
        Self {
            lexicon,
            stopwords,
            threshold,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn lexicon(&self) -> &BTreeSet<String> {
        &self.lexicon
    }

    pub fn degradation_terms(&self, text: &str) -> Vec<String> {
        words(text).into_iter().filter(|w| self.lexicon.contains(w)).collect()
    }

    fn content_tokens(&self, text: &str) -> BTreeSet<String> {
        words(text)
            .into_iter()
            .filter(|w| !self.lexicon.contains(w) && !self.stopwords.contains(w))
            .collect()
    }

    /// Jaccard similarity of content tokens; two content-free texts score 1.
    pub fn content_overlap(&self, a: &str, b: &str) -> f64 {
        let (a, b) = (self.content_tokens(a), self.content_tokens(b));
        let union = a.union(&b).count();
        if union == 0 {
            return 1.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }

    pub fn accepts(&self, negative: &str, positive: &str) -> bool {
        !positive.trim().is_empty()
            && self.degradation_terms(positive).is_empty()
            && self.content_overlap(negative, positive) >= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IclExampleSet {
    pairs: Vec<(String, String)>,
}

impl IclExampleSet {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("in-context example set is empty".into()));
        }
        Ok(Self { pairs })
    }

    /// Tab-separated `negative<TAB>positive` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (neg, pos) = line.split_once('\t').ok_or_else(|| Error::Load {
                path: "<icl examples>".into(),
                line: i + 1,
                message: "expected `negative<TAB>positive`".into(),
            })?;
            pairs.push((neg.trim().to_string(), pos.trim().to_string()));
        }
        Self::new(pairs)
    }

    pub fn default_set() -> Self {
        Self::parse(ICL_FIXTURE).expect("shipped fixture parses")
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, p) in &self.pairs {
            h.update(n.as_bytes());
            h.update([0]);
            h.update(p.as_bytes());
            h.update([0]);
        }
        hex(&h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionPair {
    pub image_id: String,
    pub d_neg: String,
    pub d_pos: String,
    pub emb_neg: Embedding,
    pub emb_pos: Embedding,
    pub validated: bool,
}

/// Everything needed to build pairs.
#[derive(Clone, Copy)]
pub struct DescribeContext<'a> {
    pub caption: &'a dyn CaptionBackend,
    pub rewrite: &'a dyn RewriteBackend,
    pub encoder: &'a dyn JointEncoder,
    pub icl: &'a IclExampleSet,
    pub validator: &'a Validator,
    pub retries: usize,
}

impl DescribeContext<'_> {
    fn backend_ids(&self) -> BackendIds {
        BackendIds {
            caption: self.caption.id().name.clone(),
            rewrite: self.rewrite.id().name.clone(),
            encoder: self.encoder.id().name.clone(),
        }
    }
}

/// Captions `image`, rewrites the caption (retrying while validation fails)
/// and embeds both texts. A pair that never validates is returned with
/// `validated = false`.
pub fn build_description_pair(image: &ImageSample, ctx: &DescribeContext<'_>) -> Result<DescriptionPair> {
    let d_neg = ctx.caption.caption(image)?;
    if d_neg.trim().is_empty() {
        return Err(Error::Validation(format!("empty caption for `{}`", image.id)));
    }
    let mut d_pos = String::new();
    let mut validated = false;
    for _ in 0..=ctx.retries {
        d_pos = ctx.rewrite.rewrite(&d_neg, ctx.icl.pairs())?;
        if ctx.validator.accepts(&d_neg, &d_pos) {
            validated = true;
            break;
        }
    }
    if d_pos.trim().is_empty() {
        return Err(Error::Validation(format!("empty rewrite for `{}`", image.id)));
    }
    Ok(DescriptionPair {
        image_id: image.id.clone(),
        emb_neg: ctx.encoder.embed_text(&d_neg)?,
        emb_pos: ctx.encoder.embed_text(&d_pos)?,
        d_neg,
        d_pos,
        validated,
    })
}

/// Semantics loss with its gradient w.r.t. the restored image embedding.
pub fn sem_loss_grad(restored: &Embedding, pair: &DescriptionPair, temperature: f64) -> Result<(f64, Vec<f64>)> {
    if !pair.validated {
        return Err(Error::Domain(format!("description pair for `{}` is not validated", pair.image_id)));
    }
    cosine_softmax_nll(
        restored.values(),
        &[pair.emb_pos.values(), pair.emb_neg.values()],
        0,
        temperature,
    )
}

pub fn sem_loss(restored: &Embedding, pair: &DescriptionPair, temperature: f64) -> Result<f64> {
    Ok(sem_loss_grad(restored, pair, temperature)?.0)
}

// ---------------------------------------------------------------------------
// Pair store

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIds {
    pub caption: String,
    pub rewrite: String,
    pub encoder: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredPair {
    pub pair: DescriptionPair,
    pub content_hash: String,
    pub backends: BackendIds,
    pub icl_hash: String,
    /// Pseudo-label version the pair was last refreshed against.
    pub label_version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreLine {
    image_id: String,
    d_neg: String,
    d_pos: String,
    validated: bool,
    backends: BackendIds,
    content_hash: String,
    icl_hash: String,
    label_version: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairStore {
    pairs: BTreeMap<String, StoredPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RefreshSummary {
    pub regenerated: usize,
    pub failed: usize,
}

impl PairStore {
    pub fn get(&self, image_id: &str) -> Option<&DescriptionPair> {
        self.pairs.get(image_id).map(|s| &s.pair)
    }

    pub fn entries(&self) -> &BTreeMap<String, StoredPair> {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validated_count(&self) -> usize {
        self.pairs.values().filter(|s| s.pair.validated).count()
    }

    fn generate(images: &[&ImageSample], ctx: &DescribeContext<'_>, exec: Exec) -> Vec<Result<DescriptionPair>> {
        exec.map(images, |s| build_description_pair(s, ctx))
    }

    fn unvalidated_placeholder(image: &ImageSample, ctx: &DescribeContext<'_>) -> Result<DescriptionPair> {
        let text = format!("unavailable description for {}", image.id);
        let emb = ctx.encoder.embed_text(&text)?;
        Ok(DescriptionPair {
            image_id: image.id.clone(),
            d_neg: text.clone(),
            d_pos: text,
            emb_neg: emb.clone(),
            emb_pos: emb,
            validated: false,
        })
    }

    fn store(&mut self, image: &ImageSample, pair: DescriptionPair, ctx: &DescribeContext<'_>, label_version: u64) {
        self.pairs.insert(
            image.id.clone(),
            StoredPair {
                pair,
                content_hash: image.pixels.content_hash(),
                backends: ctx.backend_ids(),
                icl_hash: ctx.icl.hash(),
                label_version,
            },
        );
    }

    /// Builds pairs for every image. Backend errors propagate.
    pub fn build(images: &[ImageSample], ctx: &DescribeContext<'_>, exec: Exec) -> Result<Self> {
        let refs: Vec<&ImageSample> = images.iter().collect();
        let mut store = PairStore::default();
        for (img, pair) in images.iter().zip(Self::generate(&refs, ctx, exec)) {
            store.store(img, pair?, ctx, 0);
        }
        Ok(store)
    }

    /// Regenerates pairs for images whose pseudo-label version differs from
    /// the one recorded at their last refresh, or whose cache key no longer
    /// matches. Failures are logged and leave an unvalidated pair behind.
    pub fn refresh(
        &mut self,
        images: &[ImageSample],
        label_versions: &BTreeMap<String, u64>,
        ctx: &DescribeContext<'_>,
        exec: Exec,
    ) -> Result<RefreshSummary> {
        let ids = ctx.backend_ids();
        let icl_hash = ctx.icl.hash();
        let stale: Vec<(&ImageSample, u64)> = images
            .iter()
            .filter_map(|img| {
                let version = label_versions.get(&img.id).copied().unwrap_or(0);
                let fresh = self.pairs.get(&img.id).is_some_and(|s| {
                    s.label_version == version
                        && s.backends == ids
                        && s.icl_hash == icl_hash
                        && s.content_hash == img.pixels.content_hash()
                });
                (!fresh).then_some((img, version))
            })
            .collect();
        let refs: Vec<&ImageSample> = stale.iter().map(|(s, _)| *s).collect();
        let mut summary = RefreshSummary::default();
        for ((img, version), result) in stale.iter().zip(Self::generate(&refs, ctx, exec)) {
            let pair = match result {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("description refresh failed for `{}`: {e}", img.id);
                    summary.failed += 1;
                    Self::unvalidated_placeholder(img, ctx)?
                }
            };
            self.store(img, pair, ctx, *version);
            summary.regenerated += 1;
        }
        Ok(summary)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in self.pairs.values() {
            let line = StoreLine {
                image_id: s.pair.image_id.clone(),
                d_neg: s.pair.d_neg.clone(),
                d_pos: s.pair.d_pos.clone(),
                validated: s.pair.validated,
                backends: s.backends.clone(),
                content_hash: s.content_hash.clone(),
                icl_hash: s.icl_hash.clone(),
                label_version: s.label_version,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a store file; text embeddings are recomputed with `encoder`.
    pub fn from_jsonl(text: &str, encoder: &dyn JointEncoder) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: StoreLine = serde_json::from_str(line).map_err(|e| Error::Load {
                path: "<pair store>".into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let pair = DescriptionPair {
                image_id: l.image_id.clone(),
                emb_neg: encoder.embed_text(&l.d_neg)?,
                emb_pos: encoder.embed_text(&l.d_pos)?,
                d_neg: l.d_neg,
                d_pos: l.d_pos,
                validated: l.validated,
            };
            pairs.insert(
                l.image_id,
                StoredPair {
                    pair,
                    content_hash: l.content_hash,
                    backends: l.backends,
                    icl_hash: l.icl_hash,
                    label_version: l.label_version,
                },
            );
        }
        Ok(Self { pairs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{EchoRewriter, LexiconRewriter, MockCaptioner, TagBasisEncoder};
    use crate::backends::{ExpertId, ExpertKind};
    use crate::image::{Image, Source, WeatherTag};
    use approx::assert_relative_eq;

    struct Fixed(ExpertId, String);

    impl CaptionBackend for Fixed {
        fn id(&self) -> &ExpertId {
            &self.0
        }
        fn caption(&self, _: &ImageSample) -> Result<String> {
            Ok(self.1.clone())
        }
    }

    impl RewriteBackend for Fixed {
        fn id(&self) -> &ExpertId {
            &self.0
        }
        fn rewrite(&self, _: &str, _: &[(String, String)]) -> Result<String> {
            Ok(self.1.clone())
        }
    }

    fn sample(id: &str, tag: WeatherTag) -> ImageSample {
        ImageSample::new(id, Image::filled(8, 8, 0.4).unwrap(), Some(tag), Source::Real).unwrap()
    }

    fn pair(validated: bool, pos: &[f64], neg: &[f64]) -> DescriptionPair {
        DescriptionPair {
            image_id: "x".into(),
            d_neg: "n".into(),
            d_pos: "p".into(),
            emb_neg: Embedding::normalized(neg.to_vec()).unwrap(),
            emb_pos: Embedding::normalized(pos.to_vec()).unwrap(),
            validated,
        }
    }

    #[test]
    fn lexicon_rewrite_validates() {
        let caption = Fixed(ExpertId::new("cap", ExpertKind::Caption), "a person walking in heavy rain on the street".into());
        let rewrite = LexiconRewriter::new("rw");
        let enc = TagBasisEncoder::with_name("clip", 1);
        let (icl, validator) = (IclExampleSet::default_set(), Validator::default());
        let ctx = DescribeContext { caption: &caption, rewrite: &rewrite, encoder: &enc, icl: &icl, validator: &validator, retries: 2 };
        let p = build_description_pair(&sample("a", WeatherTag::Rain), &ctx).unwrap();
        assert!(p.validated);
        assert!(p.d_pos.contains("person") && p.d_pos.contains("street") && !p.d_pos.contains("rain"));
    }

    #[test]
    fn leftover_weather_or_zero_overlap_fails() {
        let caption = Fixed(ExpertId::new("cap", ExpertKind::Caption), "a harbor with boats in haze".into());
        let enc = TagBasisEncoder::with_name("clip", 1);
        let (icl, validator) = (IclExampleSet::default_set(), Validator::default());
        let hazy = Fixed(ExpertId::new("rw", ExpertKind::Rewrite), "a harbor with boats in light haze".into());
        let ctx = DescribeContext { caption: &caption, rewrite: &hazy, encoder: &enc, icl: &icl, validator: &validator, retries: 2 };
        assert!(!build_description_pair(&sample("a", WeatherTag::Haze), &ctx).unwrap().validated);
        let unrelated = Fixed(ExpertId::new("rw", ExpertKind::Rewrite), "mountains under blue sky".into());
        let ctx = DescribeContext { rewrite: &unrelated, ..ctx };
        assert!(!build_description_pair(&sample("a", WeatherTag::Haze), &ctx).unwrap().validated);
    }

    #[test]
    fn sem_loss_hand_values() {
        let e = std::f64::consts::E;
        let same = pair(true, &[1.0, 0.0], &[1.0, 0.0]);
        assert_relative_eq!(sem_loss(&Embedding::normalized(vec![0.6, 0.8]).unwrap(), &same, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let u = Embedding::normalized(vec![1.0, 0.0]).unwrap();
        let good = pair(true, &[1.0, 0.0], &[-1.0, 0.0]);
        assert_relative_eq!(sem_loss(&u, &good, 1.0).unwrap(), -(e / (e + 1.0 / e)).ln(), epsilon = 1e-12);
        let bad = pair(true, &[-1.0, 0.0], &[1.0, 0.0]);
        assert_relative_eq!(sem_loss(&u, &bad, 1.0).unwrap(), 2.126928011042972, epsilon = 1e-12);
        assert!(matches!(sem_loss(&u, &pair(false, &[1.0, 0.0], &[0.0, 1.0]), 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn refresh_regenerates_only_changed_labels() {
        let captioner = MockCaptioner::new("cap", BTreeMap::new());
        let rewrite = LexiconRewriter::new("rw");
        let enc = TagBasisEncoder::with_name("clip", 1);
        let (icl, validator) = (IclExampleSet::default_set(), Validator::default());
        let ctx = DescribeContext { caption: &captioner, rewrite: &rewrite, encoder: &enc, icl: &icl, validator: &validator, retries: 2 };
        let images: Vec<ImageSample> = (0..10).map(|i| sample(&format!("im{i}"), WeatherTag::Rain)).collect();
        let mut versions: BTreeMap<String, u64> = images.iter().map(|s| (s.id.clone(), 1)).collect();
        let mut store = PairStore::build(&images, &ctx, Exec::Sequential).unwrap();
        assert_eq!(store.validated_count(), 10);
        let first = store.refresh(&images, &versions, &ctx, Exec::Sequential).unwrap();
        assert_eq!(first.regenerated, 10);
        let before = store.clone();
        assert_eq!(store.refresh(&images, &versions, &ctx, Exec::Sequential).unwrap().regenerated, 0);
        for id in ["im1", "im4", "im7"] {
            *versions.get_mut(id).unwrap() += 1;
        }
        assert_eq!(store.refresh(&images, &versions, &ctx, Exec::Sequential).unwrap().regenerated, 3);
        for (id, s) in store.entries() {
            assert_eq!(s.pair, before.entries()[id].pair);
        }
    }

    #[test]
    fn echo_rewriter_never_validates_weather_captions() {
        let captioner = MockCaptioner::new("cap", BTreeMap::new());
        let rewrite = EchoRewriter::new("echo");
        let enc = TagBasisEncoder::with_name("clip", 1);
        let (icl, validator) = (IclExampleSet::default_set(), Validator::default());
        let ctx = DescribeContext { caption: &captioner, rewrite: &rewrite, encoder: &enc, icl: &icl, validator: &validator, retries: 2 };
        let images: Vec<ImageSample> = [WeatherTag::Rain, WeatherTag::Haze, WeatherTag::Snow]
            .iter()
            .enumerate()
            .map(|(i, t)| sample(&format!("im{i}"), *t))
            .collect();
        assert_eq!(PairStore::build(&images, &ctx, Exec::Sequential).unwrap().validated_count(), 0);
    }

    #[test]
    fn store_round_trip() {
        let captioner = MockCaptioner::new("cap", BTreeMap::new());
        let rewrite = LexiconRewriter::new("rw");
        let enc = TagBasisEncoder::with_name("clip", 1);
        let (icl, validator) = (IclExampleSet::default_set(), Validator::default());
        let ctx = DescribeContext { caption: &captioner, rewrite: &rewrite, encoder: &enc, icl: &icl, validator: &validator, retries: 2 };
        let images = vec![sample("b", WeatherTag::Snow), sample("a", WeatherTag::Haze)];
        let store = PairStore::build(&images, &ctx, Exec::Sequential).unwrap();
        let text = store.to_jsonl().unwrap();
        assert!(text.starts_with("{\"image_id\":\"a\""));
        assert_eq!(PairStore::from_jsonl(&text, &enc).unwrap(), store);
    }
}
