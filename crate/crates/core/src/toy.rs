//! Procedural desk-scale fixture: clean scenes, parametric haze, rain and
//! snow overlays, candidate restorations and prompt reference sets.
//!
//! Labeled pairs use mild grey haze; the unlabeled "real" set uses thicker,
//! tinted haze so that supervised training alone leaves a domain gap.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::backends::mock::{LexiconRewriter, MockCaptioner, OracleJudge, PooledFeatures, WeatherEncoder};
use crate::backends::{RatingBackend, Registry};
use crate::config::{AssessmentInterval, TrainConfig};
use crate::error::Result;
use crate::image::{Image, ImageSample, LabeledPair, Source, UnlabeledSet, WeatherTag, CHANNELS};
use crate::pseudodb::CandidateSet;
use crate::rng::{stream_rng, DetRng, Stream};
use crate::trainer::Datasets;

const SCENES: [&str; 8] = [
    "a street with tall buildings",
    "a park with trees and a bench",
    "a harbor with boats",
    "a road with cars",
    "a bridge over a river",
    "a square with a fountain",
    "a row of houses",
    "a field with a barn",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_heldout: usize,
    pub refs_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_labeled: 40,
            n_unlabeled: 40,
            n_heldout: 20,
            refs_per_class: 8,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Haze {
    /// transmission at the top and bottom rows
    pub t_top: f64,
    pub t_bottom: f64,
    pub airlight: [f64; 3],
}

impl Haze {
    fn transmission(&self, y: usize, height: usize) -> f64 {
        let f = y as f64 / (height - 1).max(1) as f64;
        self.t_top + (self.t_bottom - self.t_top) * f
    }

    /// `I = J·t + A·(1 − t)`
    pub fn apply(&self, clean: &Image) -> Result<Image> {
        let h = clean.height();
        Image::from_fn(h, clean.width(), |y, x, c| {
            let t = self.transmission(y, h);
            clean.get(y, x, c) * t + self.airlight[c] * (1.0 - t)
        })
    }

    /// Inverts the model with a perturbed transmission estimate.
    pub fn invert(&self, hazy: &Image, t_error: f64) -> Result<Image> {
        let h = hazy.height();
        Image::from_fn(h, hazy.width(), |y, x, c| {
            let t = (self.transmission(y, h) * (1.0 + t_error)).clamp(0.05, 1.0);
            (hazy.get(y, x, c) - self.airlight[c] * (1.0 - t)) / t
        })
    }
}

#[derive(Debug, Clone)]
pub struct ToyFixture {
    pub labeled: Vec<LabeledPair>,
    pub unlabeled: UnlabeledSet,
    /// identity, smoothed input and a prior-based dehazing, in that order
    pub candidates: BTreeMap<String, CandidateSet>,
    pub heldout: Vec<ImageSample>,
    /// clean images for every unlabeled and held-out id
    pub ground_truth: BTreeMap<String, Image>,
    pub prompt_refs: BTreeMap<WeatherTag, Vec<ImageSample>>,
    /// scene phrase per image id, for captioning
    pub scenes: BTreeMap<String, String>,
}

/// A clean scene: sky gradient, ground plane, a few blocks and fine texture.
/// Values stay inside `[0.05, 0.95]`.
pub fn clean_scene(rng: &mut DetRng, size: usize) -> Result<Image> {
    let horizon = rng.random_range(0.35..0.6) * size as f64;
    let sky: [f64; 3] = [rng.random_range(0.45..0.7), rng.random_range(0.55..0.8), rng.random_range(0.7..0.95)];
    let ground: [f64; 3] = [rng.random_range(0.1..0.45), rng.random_range(0.15..0.5), rng.random_range(0.05..0.35)];
    let blocks: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..rng.random_range(2..5))
        .map(|_| {
            let x0 = rng.random_range(0.0..0.8) * size as f64;
            let w = rng.random_range(0.1..0.3) * size as f64;
            let top = rng.random_range(0.15..0.55) * size as f64;
            let bottom = rng.random_range(0.6..0.95) * size as f64;
            let col = [rng.random_range(0.05..0.8), rng.random_range(0.05..0.8), rng.random_range(0.05..0.8)];
            (x0, x0 + w, top, bottom, col)
        })
        .collect();
    let freq = rng.random_range(0.3..0.9);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    Image::from_fn(size, size, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = if yf < horizon {
            sky[c] * (0.85 + 0.15 * yf / horizon)
        } else {
            ground[c] * (1.0 + 0.3 * (yf - horizon) / size as f64)
        };
        for &(x0, x1, top, bottom, col) in &blocks {
            if xf >= x0 && xf < x1 && yf >= top && yf < bottom {
                let window = (y / 4 + x / 4) % 3 == 0;
                v = if window { col[c] * 0.6 + 0.3 } else { col[c] };
            }
        }
        v += 0.05 * (freq * xf + phase).sin() * (0.7 * freq * yf).cos();
        v.clamp(0.05, 0.95)
    })
}

pub fn labeled_haze(rng: &mut DetRng) -> Haze {
    let a = rng.random_range(0.75..0.95);
    Haze {
        t_top: rng.random_range(0.5..0.7),
        t_bottom: rng.random_range(0.7..0.9),
        airlight: [a; 3],
    }
}

pub fn real_haze(rng: &mut DetRng) -> Haze {
    let a: f64 = rng.random_range(0.75..0.95);
    let tint = [rng.random_range(-0.06..0.02), rng.random_range(-0.03..0.03), rng.random_range(0.0..0.06)];
    Haze {
        t_top: rng.random_range(0.25..0.4),
        t_bottom: rng.random_range(0.4..0.6),
        airlight: [(a + tint[0]).min(1.0), (a + tint[1]).min(1.0), (a + tint[2]).min(1.0)],
    }
}

/// Bright, slightly slanted streaks.
pub fn add_rain(clean: &Image, rng: &mut DetRng) -> Result<Image> {
    let (h, w) = clean.shape();
    let mut data = clean.as_slice().to_vec();
    for _ in 0..(w / 2) {
        let x0 = rng.random_range(0..w) as isize;
        let y0 = rng.random_range(0..h) as isize;
        let len = rng.random_range(6..14) as isize;
        for k in 0..len {
            let (y, x) = (y0 + k, x0 + k / 4);
            if y < h as isize && x < w as isize {
                for c in 0..CHANNELS {
                    let i = (y as usize * w + x as usize) * CHANNELS + c;
                    data[i] = data[i] * 0.3 + 0.7 * 0.95;
                }
            }
        }
    }
    Image::from_clamped(h, w, data)
}

/// Scattered bright specks of one or two pixels.
pub fn add_snow(clean: &Image, rng: &mut DetRng) -> Result<Image> {
    let (h, w) = clean.shape();
    let mut data = clean.as_slice().to_vec();
    for _ in 0..(h * w / 12) {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        let r = rng.random_range(0..2usize);
        for yy in y..(y + r + 1).min(h) {
            for xx in x..(x + r + 1).min(w) {
                for c in 0..CHANNELS {
                    data[(yy * w + xx) * CHANNELS + c] = 0.97;
                }
            }
        }
    }
    Image::from_clamped(h, w, data)
}

/// Separable binomial blur with edge clamping.
pub fn smooth(img: &Image) -> Result<Image> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = img.shape();
    let at = |y: isize, x: isize, c: usize, src: &Image| {
        src.get(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize, c)
    };
    let horizontal = Image::from_fn(h, w, |y, x, c| {
        (0..5).map(|k| K[k] * at(y as isize, x as isize + k as isize - 2, c, img)).sum()
    })?;
    Image::from_fn(h, w, |y, x, c| {
        (0..5).map(|k| K[k] * at(y as isize + k as isize - 2, x as isize, c, &horizontal)).sum()
    })
}

/// Restorers never emit pure black; keeps pooled features non-degenerate.
fn floor(img: &Image, min: f64) -> Result<Image> {
    Image::from_clamped(img.height(), img.width(), img.as_slice().iter().map(|v| v.max(min)).collect())
}

fn scene_label(rng: &mut DetRng) -> String {
    SCENES[rng.random_range(0..SCENES.len())].to_string()
}

impl ToyFixture {
    pub fn generate(spec: &ToySpec) -> Result<Self> {
        let mut rng = stream_rng(spec.seed, Stream::Fixture);
        let mut scenes = BTreeMap::new();
        let mut ground_truth = BTreeMap::new();

        let mut labeled = Vec::with_capacity(spec.n_labeled);
        for i in 0..spec.n_labeled {
            let id = format!("syn{i:03}");
            let clean = clean_scene(&mut rng, spec.size)?;
            let hazy = labeled_haze(&mut rng).apply(&clean)?.quantized16();
            scenes.insert(id.clone(), scene_label(&mut rng));
            labeled.push(LabeledPair::new(
                ImageSample::new(id.clone(), hazy, Some(WeatherTag::Haze), Source::Synthetic)?,
                ImageSample::new(id, clean.quantized16(), Some(WeatherTag::Clear), Source::Synthetic)?,
            )?);
        }

        let mut real = |prefix: &str, n: usize, rng: &mut DetRng| -> Result<Vec<(ImageSample, Haze)>> {
            (0..n)
                .map(|i| {
                    let id = format!("{prefix}{i:03}");
                    let clean = clean_scene(rng, spec.size)?.quantized16();
                    let haze = real_haze(rng);
                    let hazy = haze.apply(&clean)?.quantized16();
                    scenes.insert(id.clone(), scene_label(rng));
                    ground_truth.insert(id.clone(), clean);
                    Ok((ImageSample::new(id, hazy, Some(WeatherTag::Haze), Source::Real)?, haze))
                })
                .collect()
        };
        let unlabeled = real("real", spec.n_unlabeled, &mut rng)?;
        let heldout = real("test", spec.n_heldout, &mut rng)?;

        let mut candidates = BTreeMap::new();
        for (s, haze) in &unlabeled {
            // a prior-based restorer: one transmission for the whole frame and
            // a grey airlight, both estimated with error
            let t_mean = 0.5 * (haze.t_top + haze.t_bottom);
            let a_mean = haze.airlight.iter().sum::<f64>() / 3.0;
            let estimate = Haze {
                t_top: t_mean,
                t_bottom: t_mean,
                airlight: [a_mean; 3],
            };
            let t_error = 0.15 * crate::rng::standard_normal(&mut rng);
            candidates.insert(
                s.id.clone(),
                CandidateSet {
                    image_id: s.id.clone(),
                    candidates: vec![
                        ("identity".to_string(), s.pixels.clone()),
                        ("smooth".to_string(), smooth(&s.pixels)?.quantized16()),
                        ("prior".to_string(), floor(&estimate.invert(&s.pixels, t_error)?, 0.02)?.quantized16()),
                    ],
                },
            );
        }

        let mut prompt_refs = BTreeMap::new();
        for tag in WeatherTag::ALL {
            let mut refs = Vec::with_capacity(spec.refs_per_class);
            for i in 0..spec.refs_per_class {
                let clean = clean_scene(&mut rng, spec.size)?;
                let img = match tag {
                    WeatherTag::Clear => clean,
                    WeatherTag::Haze => labeled_haze(&mut rng).apply(&clean)?,
                    WeatherTag::Rain => add_rain(&clean, &mut rng)?,
                    WeatherTag::Snow => add_snow(&clean, &mut rng)?,
                };
                let id = format!("ref-{}{i:02}", tag.as_str());
                refs.push(ImageSample::new(id, img.quantized16(), Some(tag), Source::Synthetic)?);
            }
            prompt_refs.insert(tag, refs);
        }

        Ok(Self {
            labeled,
            unlabeled: UnlabeledSet::new(unlabeled.into_iter().map(|(s, _)| s).collect())?,
            candidates,
            heldout: heldout.into_iter().map(|(s, _)| s).collect(),
            ground_truth,
            prompt_refs,
            scenes,
        })
    }
}

/// Rain and snow test images, `n` of each, with their clean references.
/// Ids are `rain###` and `snow###`.
pub fn weather_test_set(seed: u64, n: usize, size: usize) -> Result<Vec<(ImageSample, Image)>> {
    let mut rng = stream_rng(seed, Stream::TestSet);
    let mut out = Vec::with_capacity(2 * n);
    for tag in [WeatherTag::Rain, WeatherTag::Snow] {
        for i in 0..n {
            let clean = clean_scene(&mut rng, size)?.quantized16();
            let img = match tag {
                WeatherTag::Rain => add_rain(&clean, &mut rng)?,
                _ => add_snow(&clean, &mut rng)?,
            };
            let id = format!("{}{i:03}", tag.as_str());
            out.push((ImageSample::new(id, img.quantized16(), Some(tag), Source::Real)?, clean));
        }
    }
    Ok(out)
}

/// Rating experts for the desk setup: two full-reference oracles with
/// different sharpness and sensitivity.
pub fn desk_experts(ground_truth: &BTreeMap<String, Image>) -> Vec<Arc<dyn RatingBackend>> {
    let refs = Arc::new(ground_truth.clone());
    vec![
        Arc::new(OracleJudge::with_params("oracle-a", refs.clone(), 20.0, 0.3)),
        Arc::new(OracleJudge::with_params("oracle-b", refs, 12.0, 0.4)),
    ]
}

/// Every backend the trainer can use, all mocks.
pub fn desk_registry(fixture: &ToyFixture, seed: u64) -> Result<Registry> {
    let mut reg = Registry::new();
    for e in desk_experts(&fixture.ground_truth) {
        reg.add_rating(e)?;
    }
    reg.set_encoder(Arc::new(WeatherEncoder::new("clip-mock", seed)))?
        .set_features(Arc::new(PooledFeatures::new("pool8")))?
        .set_caption(Arc::new(MockCaptioner::new("caption-mock", fixture.scenes.clone())))?
        .set_rewrite(Arc::new(LexiconRewriter::new("rewrite-mock")))?;
    Ok(reg)
}

/// Training settings for the desk setup: 2 rounds of 500 steps.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        ema_decay: 0.99,
        iterations_per_round: 500,
        rounds: 2,
        assessment_interval: AssessmentInterval::Every(10),
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

impl ToyFixture {
    pub fn datasets(&self) -> Datasets {
        Datasets {
            labeled: self.labeled.clone(),
            unlabeled: self.unlabeled.clone(),
            candidates: self.candidates.clone(),
            prompt_refs: self.prompt_refs.clone(),
        }
    }
}
