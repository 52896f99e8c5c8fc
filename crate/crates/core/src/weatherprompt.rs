//! Learnable weather prompts.
//!
//! Stage one fits four prompt sequences (clear, rain, haze, snow) so that a
//! frozen joint encoder classifies reference images by weather. Stage two
//! uses the fitted prompts to pull restored images towards the clear class.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backends::{Embedding, JointEncoder};
use crate::error::{Error, Result};
use crate::image::{ImageSample, WeatherTag};
use crate::objectives::{cosine_softmax_nll, cosine_with_grad, softmax};

pub const INIT_STD: f64 = 0.02;
const HEADER: &str = "weather-prompts";

#[derive(Debug, Clone, PartialEq)]
pub struct WeatherPrompts {
    n_ctx: usize,
    width: usize,
    /// Indexed by [`WeatherTag::index`].
    context: [Vec<Vec<f64>>; 4],
}

/// Text-tower embeddings of the four prompts, in [`WeatherTag::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeddings(pub [Embedding; 4]);

impl PromptEmbeddings {
    fn targets(&self) -> [&[f64]; 4] {
        [self.0[0].values(), self.0[1].values(), self.0[2].values(), self.0[3].values()]
    }
}

impl WeatherPrompts {
    pub fn from_context(context: [Vec<Vec<f64>>; 4]) -> Result<Self> {
        let n_ctx = context[0].len();
        let width = context[0].first().map_or(0, Vec::len);
        if n_ctx == 0 || width == 0 {
            return Err(Error::Validation("prompts need at least one non-empty context vector".into()));
        }
        for seq in &context {
            if seq.len() != n_ctx || seq.iter().any(|v| v.len() != width) {
                return Err(Error::Validation("all prompts must share n_ctx and width".into()));
            }
            if seq.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Validation("non-finite prompt value".into()));
            }
        }
        Ok(Self { n_ctx, width, context })
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn context(&self, tag: WeatherTag) -> &[Vec<f64>] {
        &self.context[tag.index()]
    }

    pub fn embed(&self, encoder: &dyn JointEncoder) -> Result<PromptEmbeddings> {
        let e = |t: WeatherTag| encoder.embed_prompt(&self.context[t.index()]);
        Ok(PromptEmbeddings([
            e(WeatherTag::Clear)?,
            e(WeatherTag::Rain)?,
            e(WeatherTag::Haze)?,
            e(WeatherTag::Snow)?,
        ]))
    }

    /// Deterministic text form: a header line, then one line per vector.
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} n_ctx={} width={}\n", self.n_ctx, self.width);
        for tag in WeatherTag::ALL {
            for (k, v) in self.context[tag.index()].iter().enumerate() {
                let _ = write!(out, "{} {k}", tag.as_str());
                for x in v {
                    let _ = write!(out, " {x:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Load {
            path: "<prompts>".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty prompt file".into()))?;
        let mut fields = header.split_whitespace();
        let mut dims = (None, None);
        if fields.next() != Some(HEADER) {
            return Err(err(1, "missing header".into()));
        }
        for f in fields {
            match f.split_once('=') {
                Some(("n_ctx", v)) => dims.0 = v.parse::<usize>().ok(),
                Some(("width", v)) => dims.1 = v.parse::<usize>().ok(),
                _ => return Err(err(1, format!("unexpected header field `{f}`"))),
            }
        }
        let (Some(n_ctx), Some(width)) = dims else {
            return Err(err(1, "header needs n_ctx and width".into()));
        };
        let mut context: [Vec<Vec<f64>>; 4] = Default::default();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let mut parts = line.split_whitespace();
            let tag = parts
                .next()
                .and_then(WeatherTag::parse)
                .ok_or_else(|| err(lineno, "expected a weather class".into()))?;
            let k: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(lineno, "expected a vector index".into()))?;
            if k != context[tag.index()].len() {
                return Err(err(lineno, format!("vector {k} out of order")));
            }
            let v: Vec<f64> = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(lineno, e.to_string()))?;
            if v.len() != width {
                return Err(err(lineno, format!("expected {width} values, got {}", v.len())));
            }
            context[tag.index()].push(v);
        }
        if context.iter().any(|c| c.len() != n_ctx) {
            return Err(err(0, format!("every class needs {n_ctx} vectors")));
        }
        Self::from_context(context)
    }
}

/// Draws every prompt entry from N(0, 0.02²).
pub fn init_prompts<R: Rng>(n_ctx: usize, encoder: &dyn JointEncoder, width: usize, rng: &mut R) -> Result<WeatherPrompts> {
    if n_ctx == 0 {
        return Err(Error::config("n_ctx", "must be >= 1"));
    }
    if width != encoder.prompt_width() {
        return Err(Error::config(
            "prompt_width",
            format!("width {width} does not match encoder width {}", encoder.prompt_width()),
        ));
    }
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut seq = || -> Vec<Vec<f64>> {
        (0..n_ctx)
            .map(|_| (0..width).map(|_| normal.sample(rng)).collect())
            .collect()
    };
    let context = [seq(), seq(), seq(), seq()];
    WeatherPrompts::from_context(context)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {temperature}")))
    }
}

/// Class probabilities from cosine similarities to the four prompts.
pub fn classify(image: &Embedding, prompts: &PromptEmbeddings, temperature: f64) -> Result<[f64; 4]> {
    check_temperature(temperature)?;
    let mut logits = [0.0; 4];
    for (z, p) in logits.iter_mut().zip(&prompts.0) {
        *z = image.cosine(p)? / temperature;
    }
    let p = softmax(&logits);
    Ok([p[0], p[1], p[2], p[3]])
}

/// Weather-prompt loss with its gradient w.r.t. the restored image embedding.
pub fn wpl_loss_grad(restored: &Embedding, prompts: &PromptEmbeddings, temperature: f64) -> Result<(f64, Vec<f64>)> {
    cosine_softmax_nll(restored.values(), &prompts.targets(), WeatherTag::Clear.index(), temperature)
}

pub fn wpl_loss(restored: &Embedding, prompts: &PromptEmbeddings, temperature: f64) -> Result<f64> {
    Ok(wpl_loss_grad(restored, prompts, temperature)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTraining {
    pub prompts: WeatherPrompts,
    /// Mean cross-entropy before each epoch's update, plus the final value.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the prompt vectors only; the encoder is
/// read through `&dyn JointEncoder` and never modified.
pub fn train_prompts(
    prompts: &WeatherPrompts,
    references: &BTreeMap<WeatherTag, Vec<ImageSample>>,
    encoder: &dyn JointEncoder,
    epochs: usize,
    lr: f64,
    temperature: f64,
) -> Result<PromptTraining> {
    check_temperature(temperature)?;
    for tag in WeatherTag::ALL {
        if references.get(&tag).is_none_or(Vec::is_empty) {
            return Err(Error::Training(format!("no reference images for class `{}`", tag.as_str())));
        }
    }
    let examples: Vec<(usize, Embedding)> = WeatherTag::ALL
        .iter()
        .flat_map(|t| references[t].iter().map(move |s| (t.index(), s)))
        .map(|(y, s)| Ok((y, encoder.embed_image(s)?)))
        .collect::<Result<_>>()?;
    let n = examples.len() as f64;

    let mut current = prompts.clone();
    let mut losses = Vec::with_capacity(epochs + 1);
    let evaluate = |p: &WeatherPrompts| -> Result<(f64, [Vec<f64>; 4])> {
        let emb = p.embed(encoder)?;
        let mut loss = 0.0;
        let mut grads: [Vec<f64>; 4] = std::array::from_fn(|k| vec![0.0; emb.0[k].dim()]);
        for (y, img) in &examples {
            let mut logits = [0.0; 4];
            let mut dcos: [Vec<f64>; 4] = Default::default();
            for k in 0..4 {
                let (c, g) = cosine_with_grad(emb.0[k].values(), img.values())?;
                logits[k] = c / temperature;
                dcos[k] = g;
            }
            let probs = softmax(&logits);
            loss -= probs[*y].ln() / n;
            for k in 0..4 {
                let coeff = (probs[k] - if k == *y { 1.0 } else { 0.0 }) / (temperature * n);
                for (g, d) in grads[k].iter_mut().zip(&dcos[k]) {
                    *g += coeff * d;
                }
            }
        }
        Ok((loss, grads))
    };

    for _ in 0..epochs {
        let (loss, grads) = evaluate(&current)?;
        losses.push(loss);
        let mut next = current.context.clone();
        for tag in WeatherTag::ALL {
            let k = tag.index();
            let g = encoder.prompt_vjp(&current.context[k], &grads[k])?;
            for (v, gv) in next[k].iter_mut().zip(&g) {
                for (x, d) in v.iter_mut().zip(gv) {
                    *x -= lr * d;
                }
            }
        }
        current = WeatherPrompts::from_context(next)?;
    }
    losses.push(evaluate(&current)?.0);
    Ok(PromptTraining { prompts: current, losses })
}

/// Fraction of references whose argmax class matches their class.
pub fn reference_accuracy(
    prompts: &WeatherPrompts,
    references: &BTreeMap<WeatherTag, Vec<ImageSample>>,
    encoder: &dyn JointEncoder,
    temperature: f64,
) -> Result<f64> {
    let emb = prompts.embed(encoder)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (tag, samples) in references {
        for s in samples {
            let p = classify(&encoder.embed_image(s)?, &emb, temperature)?;
            let argmax = (0..4).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            hit += usize::from(argmax == tag.index());
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}
