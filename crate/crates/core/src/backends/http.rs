//! Wire protocol for remote model services.
//!
//! Rating request: `{"image_png_base64": ..., "prompt": ...}`.
//! Rating response: `{"tokens": [{"token": "good", "logprob": -0.4}, ...]}`,
//! the top-k candidate tokens for the answer position. All five rating words
//! must be present; a missing word is a protocol error, never a silent zero.
//!
//! Text request (caption / rewrite): `{"prompt": ..., "image_png_base64": ...?}`,
//! response `{"text": ...}`.
//!
//! The transport itself is compiled only with the `http` feature.

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{RatingLogits, RATING_WORDS};
use crate::error::{Error, Result};
use crate::image::{encode_png16, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRequest {
    pub image_png_base64: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingResponse {
    pub tokens: Vec<TokenLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRequest {
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image_png_base64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextResponse {
    pub text: String,
}

pub fn rating_request(image: &Image, prompt: &str) -> Result<RatingRequest> {
    Ok(RatingRequest {
        image_png_base64: base64::engine::general_purpose::STANDARD.encode(encode_png16(image)?),
        prompt: prompt.to_string(),
    })
}

/// Maps a raw rating response body onto [`RatingLogits`]. Token matching is
/// case-insensitive and ignores surrounding whitespace; when a word appears
/// more than once the highest log-probability wins.
pub fn logits_from_response(expert: &str, raw: &str) -> Result<RatingLogits> {
    let protocol = |message: String| Error::Protocol {
        expert: expert.to_string(),
        message,
        raw: raw.to_string(),
    };
    let resp: RatingResponse =
        serde_json::from_str(raw).map_err(|e| protocol(format!("malformed response: {e}")))?;
    let mut logits = [f64::NEG_INFINITY; 5];
    for t in &resp.tokens {
        let word = t.token.trim().to_ascii_lowercase();
        if let Some(i) = RATING_WORDS.iter().position(|w| *w == word) {
            if t.logprob.is_finite() {
                logits[i] = logits[i].max(t.logprob);
            }
        }
    }
    let missing: Vec<&str> = RATING_WORDS
        .iter()
        .zip(&logits)
        .filter(|(_, l)| !l.is_finite())
        .map(|(w, _)| *w)
        .collect();
    if !missing.is_empty() {
        return Err(protocol(format!("rating tokens missing: {}", missing.join(", "))));
    }
    RatingLogits::new(logits)
}

pub fn text_from_response(expert: &str, raw: &str) -> Result<String> {
    let resp: TextResponse = serde_json::from_str(raw).map_err(|e| Error::Protocol {
        expert: expert.to_string(),
        message: format!("malformed response: {e}"),
        raw: raw.to_string(),
    })?;
    if resp.text.trim().is_empty() {
        return Err(Error::Protocol {
            expert: expert.to_string(),
            message: "empty text".into(),
            raw: raw.to_string(),
        });
    }
    Ok(resp.text)
}

/// Prompt sent to a rewriting LLM: the in-context demonstrations followed by
/// the description to convert.
pub fn rewrite_prompt(negative: &str, icl_examples: &[(String, String)]) -> String {
    let mut p = String::from(
        "Rewrite the scene description so that it describes the same scene in clear weather. \
         Keep every object and place; change only the weather and visibility.\n\n",
    );
    for (neg, pos) in icl_examples {
        p.push_str(&format!("Input: {neg}\nOutput: {pos}\n\n"));
    }
    p.push_str(&format!("Input: {negative}\nOutput:"));
    p
}

#[cfg(feature = "http")]
mod transport {
    use super::*;
    use crate::backends::{
        render_rating_prompt, CaptionBackend, ExpertId, ExpertKind, RatingBackend, RewriteBackend,
    };
    use crate::image::ImageSample;

    fn post(expert: &ExpertId, url: &str, body: &impl Serialize) -> Result<String> {
        let transport = |e: String| Error::Transport {
            expert: expert.name.clone(),
            message: e,
        };
        let mut resp = ureq::post(url)
            .send_json(body)
            .map_err(|e| transport(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| transport(e.to_string()))
    }

    pub struct HttpRatingBackend {
        id: ExpertId,
        url: String,
        max_in_flight: Option<usize>,
    }

    impl HttpRatingBackend {
        pub fn new(name: &str, url: &str, max_in_flight: Option<usize>) -> Self {
            Self {
                id: ExpertId::new(name, ExpertKind::Rating),
                url: url.to_string(),
                max_in_flight,
            }
        }
    }

    impl RatingBackend for HttpRatingBackend {
        fn id(&self) -> &ExpertId {
            &self.id
        }

        fn rate(&self, image: &ImageSample, template: &str) -> Result<RatingLogits> {
            let req = rating_request(&image.pixels, &render_rating_prompt(template)?)?;
            let raw = post(&self.id, &self.url, &req)?;
            logits_from_response(&self.id.name, &raw)
        }

        fn max_in_flight(&self) -> Option<usize> {
            self.max_in_flight
        }
    }

    pub struct HttpCaptionBackend {
        id: ExpertId,
        url: String,
        prompt: String,
    }

    impl HttpCaptionBackend {
        pub fn new(name: &str, url: &str, prompt: &str) -> Self {
            Self {
                id: ExpertId::new(name, ExpertKind::Caption),
                url: url.to_string(),
                prompt: prompt.to_string(),
            }
        }
    }

    impl CaptionBackend for HttpCaptionBackend {
        fn id(&self) -> &ExpertId {
            &self.id
        }

        fn caption(&self, image: &ImageSample) -> Result<String> {
            let req = TextRequest {
                prompt: self.prompt.clone(),
                image_png_base64: Some(rating_request(&image.pixels, "")?.image_png_base64),
            };
            text_from_response(&self.id.name, &post(&self.id, &self.url, &req)?)
        }
    }

    pub struct HttpRewriteBackend {
        id: ExpertId,
        url: String,
    }

    impl HttpRewriteBackend {
        pub fn new(name: &str, url: &str) -> Self {
            Self {
                id: ExpertId::new(name, ExpertKind::Rewrite),
                url: url.to_string(),
            }
        }
    }

    impl RewriteBackend for HttpRewriteBackend {
        fn id(&self) -> &ExpertId {
            &self.id
        }

        fn rewrite(&self, negative: &str, icl_examples: &[(String, String)]) -> Result<String> {
            let req = TextRequest {
                prompt: rewrite_prompt(negative, icl_examples),
                image_png_base64: None,
            };
            text_from_response(&self.id.name, &post(&self.id, &self.url, &req)?)
        }
    }
}

#[cfg(feature = "http")]
pub use transport::{HttpCaptionBackend, HttpRatingBackend, HttpRewriteBackend};
