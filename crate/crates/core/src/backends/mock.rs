//! Deterministic stand-ins for every backend.
//!
//! Each mock is a pure function of its inputs and its fixture seed. The
//! differentiable ones ([`WeatherEncoder`], [`PooledFeatures`]) also provide
//! exact vector-Jacobian products so the trainer can push gradients through
//! them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{
    dark_channel_mean, normalize_vjp, render_rating_prompt, CaptionBackend, Embedding, ExpertId,
    ExpertKind, FeatureExtractor, FeatureMap, JointEncoder, RatingBackend, RatingLogits,
    RewriteBackend,
};
use crate::error::{Error, Result};
use crate::image::{hex, Image, ImageSample, WeatherTag, CHANNELS};
use crate::rng::seeded_rng;

pub const TAG_BASIS_FIXTURE: &str = include_str!("../../fixtures/tag_basis.tsv");
pub const REWRITE_RULES_FIXTURE: &str = include_str!("../../fixtures/rewrite_rules.tsv");

fn fixture_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches(['\r', '\n'])))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn fixture_error(what: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Load {
        path: what.to_string(),
        line,
        message: message.into(),
    }
}

/// Lowercase alphanumeric words.
pub(crate) fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()
}

fn word_vector(word: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(word.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    gaussian_matrix(1, dim, 1.0, seed)
}

fn digest_f64s<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        for v in part {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

// ---------------------------------------------------------------------------
// Rating judges

/// Logits of the oracle rule for an artifact energy `e` in `[0, 1]`:
/// `scale · (1 − |e − anchor_i|)`, anchors evenly spaced with "excellent" at 0
/// and "bad" at 1.
pub fn oracle_logits(energy: f64, scale: f64) -> RatingLogits {
    let e = energy.clamp(0.0, 1.0);
    let mut l = [0.0; 5];
    for (i, v) in l.iter_mut().enumerate() {
        // i = 0 is "bad" (anchor 1.0), i = 4 is "excellent" (anchor 0.0)
        let anchor = (4 - i) as f64 / 4.0;
        *v = scale * (1.0 - (e - anchor).abs());
    }
    RatingLogits::new(l).expect("finite by construction")
}

/// Full-reference judge: artifact energy is the mean absolute residual against
/// a known clean image, divided by `energy_scale` and clipped to 1.
pub struct OracleJudge {
    id: ExpertId,
    references: Arc<BTreeMap<String, Image>>,
    scale: f64,
    energy_scale: f64,
}

impl OracleJudge {
    pub const DEFAULT_SCALE: f64 = 20.0;
    pub const DEFAULT_ENERGY_SCALE: f64 = 0.3;

    pub fn new(name: &str, references: Arc<BTreeMap<String, Image>>) -> Self {
        Self::with_params(name, references, Self::DEFAULT_SCALE, Self::DEFAULT_ENERGY_SCALE)
    }

    pub fn with_params(
        name: &str,
        references: Arc<BTreeMap<String, Image>>,
        scale: f64,
        energy_scale: f64,
    ) -> Self {
        Self {
            id: ExpertId::new(name, ExpertKind::Rating),
            references,
            scale,
            energy_scale,
        }
    }

    pub fn energy(&self, image: &ImageSample) -> Result<f64> {
        let reference = self.references.get(&image.id).ok_or_else(|| Error::Protocol {
            expert: self.id.name.clone(),
            message: format!("no reference image for `{}`", image.id),
            raw: String::new(),
        })?;
        Ok((image.pixels.mean_abs_diff(reference)? / self.energy_scale).min(1.0))
    }
}

impl RatingBackend for OracleJudge {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn rate(&self, image: &ImageSample, template: &str) -> Result<RatingLogits> {
        render_rating_prompt(template)?;
        Ok(oracle_logits(self.energy(image)?, self.scale))
    }
}

/// No-reference judge driven by the dark-channel mean, which rises with haze.
pub struct DarkChannelJudge {
    id: ExpertId,
    low: f64,
    high: f64,
    scale: f64,
}

impl DarkChannelJudge {
    pub fn new(name: &str) -> Self {
        Self {
            id: ExpertId::new(name, ExpertKind::Rating),
            low: 0.05,
            high: 0.6,
            scale: OracleJudge::DEFAULT_SCALE,
        }
    }
}

impl RatingBackend for DarkChannelJudge {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn rate(&self, image: &ImageSample, template: &str) -> Result<RatingLogits> {
        render_rating_prompt(template)?;
        let dark = dark_channel_mean(&image.pixels);
        let e = ((dark - self.low) / (self.high - self.low)).clamp(0.0, 1.0);
        Ok(oracle_logits(e, self.scale))
    }
}

// ---------------------------------------------------------------------------
// Captioning and rewriting

pub struct MockCaptioner {
    id: ExpertId,
    scenes: BTreeMap<String, String>,
}

impl MockCaptioner {
    pub const DEFAULT_SCENE: &'static str = "an outdoor scene with buildings";

    pub fn new(name: &str, scenes: BTreeMap<String, String>) -> Self {
        Self {
            id: ExpertId::new(name, ExpertKind::Caption),
            scenes,
        }
    }

    fn weather_of(image: &ImageSample) -> WeatherTag {
        image.weather_tag.unwrap_or_else(|| {
            if dark_channel_mean(&image.pixels) > 0.35 {
                WeatherTag::Haze
            } else {
                WeatherTag::Clear
            }
        })
    }
}

impl CaptionBackend for MockCaptioner {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn caption(&self, image: &ImageSample) -> Result<String> {
        let scene = self
            .scenes
            .get(&image.id)
            .map(String::as_str)
            .unwrap_or(Self::DEFAULT_SCENE);
        let phrase = match Self::weather_of(image) {
            WeatherTag::Clear => "on a bright day",
            WeatherTag::Rain => "in heavy rain",
            WeatherTag::Haze => "in dense haze",
            WeatherTag::Snow => "in falling snow",
        };
        Ok(format!("{scene} {phrase}"))
    }
}

#[derive(Debug, Clone)]
pub struct RewriteRules {
    pub replacement: String,
    pub prefix: String,
    pub weather: BTreeSet<String>,
    pub modifiers: BTreeSet<String>,
}

impl RewriteRules {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = RewriteRules {
            replacement: String::new(),
            prefix: String::new(),
            weather: BTreeSet::new(),
            modifiers: BTreeSet::new(),
        };
        for (line, l) in fixture_lines(text) {
            let (kind, value) = l
                .split_once('\t')
                .ok_or_else(|| fixture_error("rewrite rules", line, "expected `kind<TAB>value`"))?;
            match kind {
                "replacement" => rules.replacement = value.to_string(),
                "prefix" => rules.prefix = value.to_string(),
                "weather" => {
                    rules.weather.insert(value.trim().to_ascii_lowercase());
                }
                "modifier" => {
                    rules.modifiers.insert(value.trim().to_ascii_lowercase());
                }
                other => return Err(fixture_error("rewrite rules", line, format!("unknown kind `{other}`"))),
            }
        }
        if rules.replacement.is_empty() || rules.weather.is_empty() {
            return Err(fixture_error("rewrite rules", 0, "missing replacement or weather terms"));
        }
        Ok(rules)
    }

    pub fn default_rules() -> Self {
        Self::parse(REWRITE_RULES_FIXTURE).expect("shipped fixture parses")
    }

    /// Lexicon substitution: the first weather term (with any modifiers right
    /// before it) becomes the replacement phrase, later ones are dropped. Text
    /// without weather terms gets the clear-weather prefix.
    pub fn apply(&self, negative: &str) -> String {
        let tokens: Vec<&str> = negative.split_whitespace().collect();
        let core = |t: &str| {
            t.trim_matches(|c: char| !c.is_ascii_alphanumeric())
                .to_ascii_lowercase()
        };
        let is_weather = |t: &str| self.weather.contains(&core(t));
        if !tokens.iter().any(|t| is_weather(t)) {
            return format!("{}{}", self.prefix, negative);
        }
        let mut out: Vec<String> = Vec::with_capacity(tokens.len());
        let mut replaced = false;
        let mut i = 0;
        while i < tokens.len() {
            let t = tokens[i];
            // a run of modifiers ending in a weather term
            let mut j = i;
            while j < tokens.len() && self.modifiers.contains(&core(tokens[j])) {
                j += 1;
            }
            if j < tokens.len() && is_weather(tokens[j]) {
                let term = tokens[j];
                let trailing: String = term
                    .chars()
                    .rev()
                    .take_while(|c| !c.is_ascii_alphanumeric())
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect();
                if !replaced {
                    out.push(format!("{}{}", self.replacement, trailing));
                    replaced = true;
                } else {
                    if matches!(out.last().map(|s| core(s)).as_deref(), Some("and" | "with")) {
                        out.pop();
                    }
                    if !trailing.is_empty() {
                        if let Some(last) = out.last_mut() {
                            last.push_str(&trailing);
                        }
                    }
                }
                i = j + 1;
                continue;
            }
            out.push(t.to_string());
            i += 1;
        }
        out.join(" ")
    }
}

pub struct LexiconRewriter {
    id: ExpertId,
    rules: RewriteRules,
}

impl LexiconRewriter {
    pub fn new(name: &str) -> Self {
        Self::with_rules(name, RewriteRules::default_rules())
    }

    pub fn with_rules(name: &str, rules: RewriteRules) -> Self {
        Self {
            id: ExpertId::new(name, ExpertKind::Rewrite),
            rules,
        }
    }
}

impl RewriteBackend for LexiconRewriter {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn rewrite(&self, negative: &str, _icl: &[(String, String)]) -> Result<String> {
        Ok(self.rules.apply(negative))
    }
}

/// Returns its input verbatim; every description it produces fails validation
/// when the input mentions weather.
pub struct EchoRewriter {
    id: ExpertId,
}

impl EchoRewriter {
    pub fn new(name: &str) -> Self {
        Self {
            id: ExpertId::new(name, ExpertKind::Rewrite),
        }
    }
}

impl RewriteBackend for EchoRewriter {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn rewrite(&self, negative: &str, _icl: &[(String, String)]) -> Result<String> {
        Ok(negative.to_string())
    }
}

// ---------------------------------------------------------------------------
// Prompt projection shared by both mock encoders

/// Frozen text-tower map for learnable prompts: `normalize(P · mean(ctx))`.
struct PromptProjection {
    dim: usize,
    width: usize,
    matrix: Vec<f64>,
}

impl PromptProjection {
    fn new(dim: usize, width: usize, seed: u64) -> Self {
        Self {
            dim,
            width,
            matrix: gaussian_matrix(dim, width, 1.0 / (width as f64).sqrt(), seed),
        }
    }

    fn check(&self, context: &[Vec<f64>]) -> Result<()> {
        if context.is_empty() {
            return Err(Error::Domain("prompt has no context vectors".into()));
        }
        if let Some(v) = context.iter().find(|v| v.len() != self.width) {
            return Err(Error::config(
                "prompt_width",
                format!("prompt vector width {} does not match encoder width {}", v.len(), self.width),
            ));
        }
        Ok(())
    }

    fn raw(&self, context: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check(context)?;
        let n = context.len() as f64;
        let mut mean = vec![0.0; self.width];
        for v in context {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        Ok((0..self.dim)
            .map(|r| crate::objectives::dot(&self.matrix[r * self.width..(r + 1) * self.width], &mean))
            .collect())
    }

    fn embed(&self, context: &[Vec<f64>]) -> Result<Embedding> {
        Embedding::normalized(self.raw(context)?)
    }

    fn vjp(&self, context: &[Vec<f64>], grad: &[f64]) -> Result<Vec<Vec<f64>>> {
        let raw = self.raw(context)?;
        if grad.len() != self.dim {
            return Err(Error::Domain("prompt gradient has wrong dimension".into()));
        }
        let g_raw = normalize_vjp(&raw, grad);
        let n = context.len() as f64;
        let mut g_mean = vec![0.0; self.width];
        for (r, gr) in g_raw.iter().enumerate() {
            for (c, gm) in g_mean.iter_mut().enumerate() {
                *gm += self.matrix[r * self.width + c] * gr;
            }
        }
        Ok(context
            .iter()
            .map(|_| g_mean.iter().map(|g| g / n).collect())
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Tag-basis encoder

/// Image tower returns a fixed orthonormal basis vector per weather tag; the
/// text tower maps weather words onto the same basis.
pub struct TagBasisEncoder {
    id: ExpertId,
    basis: [Vec<f64>; 4],
    prompts: PromptProjection,
}

impl TagBasisEncoder {
    pub const PROMPT_WIDTH: usize = 16;

    pub fn with_name(name: &str, seed: u64) -> Self {
        Self::from_table(name, TAG_BASIS_FIXTURE, Self::PROMPT_WIDTH, seed).expect("shipped fixture parses")
    }

    pub fn from_table(name: &str, table: &str, width: usize, seed: u64) -> Result<Self> {
        let mut basis: [Option<Vec<f64>>; 4] = Default::default();
        for (line, l) in fixture_lines(table) {
            let (tag, vec) = l
                .split_once('\t')
                .ok_or_else(|| fixture_error("tag basis", line, "expected `tag<TAB>values`"))?;
            let tag = WeatherTag::parse(tag.trim())
                .ok_or_else(|| fixture_error("tag basis", line, format!("unknown tag `{tag}`")))?;
            let values = vec
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| fixture_error("tag basis", line, e.to_string()))?;
            basis[tag.index()] = Some(values);
        }
        let basis: [Vec<f64>; 4] = basis
            .map(|b| b.ok_or_else(|| fixture_error("tag basis", 0, "all four tags required")))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
            .try_into()
            .expect("four entries");
        let dim = basis[0].len();
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                if a.len() != dim || (crate::objectives::dot(a, b) - expected).abs() > 1e-9 {
                    return Err(fixture_error("tag basis", 0, "basis vectors must be orthonormal"));
                }
            }
        }
        if dim < 5 {
            return Err(fixture_error("tag basis", 0, "dimension must leave room for content"));
        }
        Ok(Self {
            id: ExpertId::new(name, ExpertKind::Embed),
            prompts: PromptProjection::new(dim, width, seed),
            basis,
        })
    }

    pub fn basis(&self, tag: WeatherTag) -> &[f64] {
        &self.basis[tag.index()]
    }
}

fn weather_word(word: &str) -> Option<WeatherTag> {
    match word {
        "clear" | "sunny" => Some(WeatherTag::Clear),
        "rain" | "rainy" | "drizzle" | "storm" => Some(WeatherTag::Rain),
        "haze" | "hazy" | "fog" | "foggy" | "mist" | "overcast" => Some(WeatherTag::Haze),
        "snow" | "snowy" => Some(WeatherTag::Snow),
        _ => None,
    }
}

impl JointEncoder for TagBasisEncoder {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn image_dim(&self) -> usize {
        self.prompts.dim
    }

    fn text_dim(&self) -> usize {
        self.prompts.dim
    }

    fn prompt_width(&self) -> usize {
        self.prompts.width
    }

    fn embed_image(&self, image: &ImageSample) -> Result<Embedding> {
        let tag = image.weather_tag.ok_or_else(|| {
            Error::Domain(format!("tag-basis encoder needs a weather tag on `{}`", image.id))
        })?;
        Embedding::normalized(self.basis[tag.index()].clone())
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let dim = self.prompts.dim;
        let mut v = vec![0.0; dim];
        let mut found = false;
        for w in words(text) {
            if let Some(tag) = weather_word(&w) {
                found = true;
                for (a, b) in v.iter_mut().zip(&self.basis[tag.index()]) {
                    *a += b;
                }
            }
        }
        if !found {
            // no weather content: a hashed direction orthogonal to all four tags
            let mut h = word_vector(text, dim);
            for b in &self.basis {
                let p = crate::objectives::dot(&h, b);
                for (x, y) in h.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
            v = h;
        }
        Embedding::normalized(v)
    }

    fn embed_prompt(&self, context: &[Vec<f64>]) -> Result<Embedding> {
        self.prompts.embed(context)
    }

    fn prompt_vjp(&self, context: &[Vec<f64>], grad: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.prompts.vjp(context, grad)
    }

    fn parameter_digest(&self) -> String {
        digest_f64s(
            self.basis
                .iter()
                .map(Vec::as_slice)
                .chain(std::iter::once(self.prompts.matrix.as_slice())),
        )
    }
}

// ---------------------------------------------------------------------------
// Differentiable weather-aware encoder

/// A small differentiable stand-in for a CLIP image/text pair.
///
/// Embedding layout: axis 0 clear, 1 rain, 2 haze, 3 snow, then content axes.
/// The image tower reads handcrafted weather statistics (dark channel,
/// contrast, streak and speckle energy) plus a coarse luminance layout; the
/// text tower maps weather words onto the weather axes and every other word
/// onto a hashed content direction.
pub struct WeatherEncoder {
    id: ExpertId,
    content_dim: usize,
    content_proj: Vec<f64>,
    prompts: PromptProjection,
}

const LAYOUT_GRID: usize = 4;
const LAYOUT_CELLS: usize = LAYOUT_GRID * LAYOUT_GRID;

struct ImageStats {
    lum: Vec<f64>,
    mean_lum: f64,
    raw: Vec<f64>,
}

impl WeatherEncoder {
    pub const DIM: usize = 16;
    pub const PROMPT_WIDTH: usize = 16;

    const CLEAR_BIAS: f64 = 1.0;
    const CLEAR_DARK: f64 = 2.0;
    const CLEAR_CONTRAST: f64 = 3.0;
    const RAIN_GAIN: f64 = 12.0;
    const HAZE_GAIN: f64 = 2.0;
    const SNOW_GAIN: f64 = 24.0;
    const CONTENT_GAIN: f64 = 2.0;

    pub fn new(name: &str, seed: u64) -> Self {
        let content_dim = Self::DIM - 4;
        Self {
            id: ExpertId::new(name, ExpertKind::Embed),
            content_dim,
            content_proj: gaussian_matrix(content_dim, LAYOUT_CELLS, 1.0, seed ^ 0x5eed),
            prompts: PromptProjection::new(Self::DIM, Self::PROMPT_WIDTH, seed),
        }
    }

    fn layout_cell(h: usize, w: usize, y: usize, x: usize) -> usize {
        let gy = (y * LAYOUT_GRID / h).min(LAYOUT_GRID - 1);
        let gx = (x * LAYOUT_GRID / w).min(LAYOUT_GRID - 1);
        gy * LAYOUT_GRID + gx
    }

    fn stats(&self, img: &Image) -> ImageStats {
        let (h, w) = img.shape();
        let px = img.as_slice();
        let n = (h * w) as f64;
        let lum: Vec<f64> = px.chunks_exact(CHANNELS).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        let mean_lum = lum.iter().sum::<f64>() / n;
        let dark = dark_channel_mean(img);
        let contrast = lum.iter().map(|l| (l - mean_lum).abs()).sum::<f64>() / n;

        let interior = ((h - 2) * (w - 2)) as f64;
        let (mut streak, mut speck) = (0.0, 0.0);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let c = lum[y * w + x];
                let hz = (2.0 * c - lum[y * w + x - 1] - lum[y * w + x + 1]).max(0.0);
                let vt = (2.0 * c - lum[(y - 1) * w + x] - lum[(y + 1) * w + x]).max(0.0);
                streak += hz - vt;
                speck += hz.min(vt);
            }
        }
        streak /= interior;
        speck /= interior;

        let mut cells = [0.0; LAYOUT_CELLS];
        let mut counts = [0.0; LAYOUT_CELLS];
        for y in 0..h {
            for x in 0..w {
                let k = Self::layout_cell(h, w, y, x);
                cells[k] += lum[y * w + x];
                counts[k] += 1.0;
            }
        }
        let layout: Vec<f64> = (0..LAYOUT_CELLS).map(|k| cells[k] / counts[k] - mean_lum).collect();

        let mut raw = vec![
            Self::CLEAR_BIAS - Self::CLEAR_DARK * dark + Self::CLEAR_CONTRAST * contrast,
            Self::RAIN_GAIN * streak,
            Self::HAZE_GAIN * dark,
            Self::SNOW_GAIN * speck,
        ];
        for r in 0..self.content_dim {
            let row = &self.content_proj[r * LAYOUT_CELLS..(r + 1) * LAYOUT_CELLS];
            raw.push(Self::CONTENT_GAIN * crate::objectives::dot(row, &layout));
        }
        ImageStats { lum, mean_lum, raw }
    }

    fn pixel_grad(&self, img: &Image, stats: &ImageStats, g_raw: &[f64]) -> Vec<f64> {
        let (h, w) = img.shape();
        let px = img.as_slice();
        let n = (h * w) as f64;
        let lum = &stats.lum;
        let mut g_px = vec![0.0; px.len()];
        let mut g_lum = vec![0.0; lum.len()];

        // dark channel: feeds the clear and haze axes
        let g_dark = -Self::CLEAR_DARK * g_raw[0] + Self::HAZE_GAIN * g_raw[2];
        for (i, p) in px.chunks_exact(CHANNELS).enumerate() {
            let mut arg = 0;
            for c in 1..CHANNELS {
                if p[c] < p[arg] {
                    arg = c;
                }
            }
            g_px[i * CHANNELS + arg] += g_dark / n;
        }

        // contrast: mean |L - mean(L)|
        let g_contrast = Self::CLEAR_CONTRAST * g_raw[0];
        let signs: Vec<f64> = lum.iter().map(|l| sign(l - stats.mean_lum)).collect();
        let mean_sign = signs.iter().sum::<f64>() / n;
        for (gl, s) in g_lum.iter_mut().zip(&signs) {
            *gl += g_contrast * (s - mean_sign) / n;
        }

        // streak and speckle
        let interior = ((h - 2) * (w - 2)) as f64;
        let g_streak = Self::RAIN_GAIN * g_raw[1] / interior;
        let g_speck = Self::SNOW_GAIN * g_raw[3] / interior;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                let (l, r, u, d) = (i - 1, i + 1, i - w, i + w);
                let hz = 2.0 * lum[i] - lum[l] - lum[r];
                let vt = 2.0 * lum[i] - lum[u] - lum[d];
                let mut g_hz = 0.0;
                let mut g_vt = 0.0;
                if hz > 0.0 {
                    g_hz += g_streak;
                }
                if vt > 0.0 {
                    g_vt -= g_streak;
                }
                let (hz_r, vt_r) = (hz.max(0.0), vt.max(0.0));
                if hz_r <= vt_r {
                    if hz > 0.0 {
                        g_hz += g_speck;
                    }
                } else if vt > 0.0 {
                    g_vt += g_speck;
                }
                g_lum[i] += 2.0 * (g_hz + g_vt);
                g_lum[l] -= g_hz;
                g_lum[r] -= g_hz;
                g_lum[u] -= g_vt;
                g_lum[d] -= g_vt;
            }
        }

        // layout content: proj · (cell means - global mean)
        let mut g_layout = [0.0; LAYOUT_CELLS];
        for r in 0..self.content_dim {
            let row = &self.content_proj[r * LAYOUT_CELLS..(r + 1) * LAYOUT_CELLS];
            for (gl, q) in g_layout.iter_mut().zip(row) {
                *gl += Self::CONTENT_GAIN * g_raw[4 + r] * q;
            }
        }
        let mut counts = [0.0; LAYOUT_CELLS];
        for y in 0..h {
            for x in 0..w {
                counts[Self::layout_cell(h, w, y, x)] += 1.0;
            }
        }
        let g_mean: f64 = g_layout.iter().sum();
        for y in 0..h {
            for x in 0..w {
                let k = Self::layout_cell(h, w, y, x);
                g_lum[y * w + x] += g_layout[k] / counts[k] - g_mean / n;
            }
        }

        for (i, gl) in g_lum.iter().enumerate() {
            for c in 0..CHANNELS {
                g_px[i * CHANNELS + c] += gl / 3.0;
            }
        }
        g_px
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl JointEncoder for WeatherEncoder {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn image_dim(&self) -> usize {
        Self::DIM
    }

    fn text_dim(&self) -> usize {
        Self::DIM
    }

    fn prompt_width(&self) -> usize {
        self.prompts.width
    }

    fn embed_image(&self, image: &ImageSample) -> Result<Embedding> {
        Embedding::normalized(self.stats(&image.pixels).raw)
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let mut v = vec![0.0; Self::DIM];
        let mut content: Vec<Vec<f64>> = Vec::new();
        for w in words(text) {
            match weather_word(&w) {
                Some(tag) => v[tag.index()] += 1.0,
                None => content.push(word_vector(&w, self.content_dim)),
            }
        }
        if !content.is_empty() {
            let scale = 1.0 / (content.len() as f64).sqrt();
            for c in &content {
                for (a, b) in v[4..].iter_mut().zip(c) {
                    *a += scale * b;
                }
            }
        }
        Embedding::normalized(v)
    }

    fn embed_prompt(&self, context: &[Vec<f64>]) -> Result<Embedding> {
        self.prompts.embed(context)
    }

    fn prompt_vjp(&self, context: &[Vec<f64>], grad: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.prompts.vjp(context, grad)
    }

    fn image_vjp(&self, image: &ImageSample, grad: &[f64]) -> Option<Result<Vec<f64>>> {
        if grad.len() != Self::DIM {
            return Some(Err(Error::Domain("image gradient has wrong dimension".into())));
        }
        let stats = self.stats(&image.pixels);
        let g_raw = normalize_vjp(&stats.raw, grad);
        Some(Ok(self.pixel_grad(&image.pixels, &stats, &g_raw)))
    }

    fn parameter_digest(&self) -> String {
        digest_f64s([self.content_proj.as_slice(), self.prompts.matrix.as_slice()])
    }
}

// ---------------------------------------------------------------------------
// Dense features

/// Average-pooled RGB over `patch`×`patch` blocks (edge blocks average the
/// pixels they contain).
pub struct PooledFeatures {
    id: ExpertId,
    patch: usize,
}

impl PooledFeatures {
    pub fn new(name: &str) -> Self {
        Self::with_patch(name, 8)
    }

    pub fn with_patch(name: &str, patch: usize) -> Self {
        Self {
            id: ExpertId::new(name, ExpertKind::Feature),
            patch: patch.max(1),
        }
    }

    fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.patch), w.div_ceil(self.patch))
    }
}

impl FeatureExtractor for PooledFeatures {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn extract(&self, image: &ImageSample) -> Result<FeatureMap> {
        let (h, w) = image.pixels.shape();
        let (gh, gw) = self.grid(h, w);
        let mut sums = vec![0.0; gh * gw * CHANNELS];
        let mut counts = vec![0.0; gh * gw];
        for y in 0..h {
            for x in 0..w {
                let cell = (y / self.patch) * gw + x / self.patch;
                counts[cell] += 1.0;
                for c in 0..CHANNELS {
                    sums[cell * CHANNELS + c] += image.pixels.get(y, x, c);
                }
            }
        }
        for (cell, n) in counts.iter().enumerate() {
            for c in 0..CHANNELS {
                sums[cell * CHANNELS + c] /= n;
            }
        }
        FeatureMap::new(gh, gw, CHANNELS, sums)
    }

    fn vjp(&self, image: &ImageSample, grad: &[f64]) -> Option<Result<Vec<f64>>> {
        let (h, w) = image.pixels.shape();
        let (gh, gw) = self.grid(h, w);
        if grad.len() != gh * gw * CHANNELS {
            return Some(Err(Error::Domain("feature gradient has wrong size".into())));
        }
        let mut counts = vec![0.0; gh * gw];
        for y in 0..h {
            for x in 0..w {
                counts[(y / self.patch) * gw + x / self.patch] += 1.0;
            }
        }
        let mut out = vec![0.0; h * w * CHANNELS];
        for y in 0..h {
            for x in 0..w {
                let cell = (y / self.patch) * gw + x / self.patch;
                for c in 0..CHANNELS {
                    out[(y * w + x) * CHANNELS + c] = grad[cell * CHANNELS + c] / counts[cell];
                }
            }
        }
        Some(Ok(out))
    }
}
