//! Analytic gradients against central finite differences.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stormlab::backends::mock::{PooledFeatures, WeatherEncoder};
use stormlab::backends::{Embedding, FeatureExtractor, FeatureMap, JointEncoder};
use stormlab::model::RestorationModel;
use stormlab::objectives::{dual_target_feat_loss_grad, l1_loss};
use stormlab::semantics::{sem_loss_grad, DescriptionPair};
use stormlab::weatherprompt::{init_prompts, wpl_loss_grad};
use stormlab::{Image, ImageSample, Source, WeatherTag};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Norm-wise relative error between two gradient vectors.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + H;
            let up = f(&x);
            x[i] = v - H;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| stormlab::rng::standard_normal(rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Embedding {
    Embedding::normalized(gaussian_vec(rng, n)).unwrap()
}

#[test]
fn weather_prompt_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = WeatherEncoder::new("enc", 3);
    for _ in 0..20 {
        let prompts = init_prompts(4, &enc, enc.prompt_width(), &mut rng).unwrap().embed(&enc).unwrap();
        let t = rng.random_range(0.05..2.0);
        let u = gaussian_vec(&mut rng, enc.image_dim());
        let (_, g) = wpl_loss_grad(&Embedding::raw(u.clone()), &prompts, t).unwrap();
        let fd = central(&u, |x| wpl_loss_grad(&Embedding::raw(x.to_vec()), &prompts, t).unwrap().0);
        assert!(rel_err(&g, &fd) <= TOL, "{}", rel_err(&g, &fd));
    }
}

#[test]
fn semantic_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let pair = DescriptionPair {
            image_id: "x".into(),
            d_neg: String::new(),
            d_pos: String::new(),
            emb_neg: unit(&mut rng, 16),
            emb_pos: unit(&mut rng, 16),
            validated: true,
        };
        let t = rng.random_range(0.05..2.0);
        let u = gaussian_vec(&mut rng, 16);
        let (_, g) = sem_loss_grad(&Embedding::raw(u.clone()), &pair, t).unwrap();
        let fd = central(&u, |x| sem_loss_grad(&Embedding::raw(x.to_vec()), &pair, t).unwrap().0);
        assert!(rel_err(&g, &fd) <= TOL, "{}", rel_err(&g, &fd));
    }
}

#[test]
fn feature_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, d) = (3, 4, 5);
    let fmap = |rng: &mut ChaCha8Rng| FeatureMap::new(h, w, d, gaussian_vec(rng, h * w * d)).unwrap();
    for _ in 0..20 {
        let pseudo = fmap(&mut rng);
        let input = fmap(&mut rng);
        let x = gaussian_vec(&mut rng, h * w * d);
        let loss = |v: &[f64]| {
            dual_target_feat_loss_grad(&FeatureMap::new(h, w, d, v.to_vec()).unwrap(), &pseudo, &input)
                .unwrap()
                .0
        };
        let (_, g) = dual_target_feat_loss_grad(&FeatureMap::new(h, w, d, x.clone()).unwrap(), &pseudo, &input).unwrap();
        let fd = central(&x, loss);
        assert!(rel_err(&g, &fd) <= TOL, "{}", rel_err(&g, &fd));
    }
}

#[test]
fn appearance_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let target: Vec<f64> = (0..192).map(|_| rng.random_range(0.0..1.0)).collect();
        // keep every residual well away from the kink at zero
        let pred: Vec<f64> = target
            .iter()
            .map(|t| {
                let d: f64 = rng.random_range(0.01..0.2);
                if rng.random_bool(0.5) {
                    t + d
                } else {
                    t - d
                }
            })
            .collect();
        let (_, g) = l1_loss(&pred, &target).unwrap();
        let fd = central(&pred, |x| l1_loss(x, &target).unwrap().0);
        assert!(rel_err(&g, &fd) <= TOL, "{}", rel_err(&g, &fd));
    }
}

fn random_sample(rng: &mut ChaCha8Rng, size: usize) -> ImageSample {
    let v: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(0.15..0.85)).collect();
    ImageSample::new("x", Image::new(size, size, v).unwrap(), Some(WeatherTag::Haze), Source::Real).unwrap()
}

#[test]
fn encoder_image_tower() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = WeatherEncoder::new("enc", 9);
    for _ in 0..5 {
        let s = random_sample(&mut rng, 16);
        let dir = gaussian_vec(&mut rng, enc.image_dim());
        let g = enc.image_vjp(&s, &dir).unwrap().unwrap();
        let f = |x: &[f64]| {
            let px = Image::new(16, 16, x.to_vec()).unwrap();
            let e = enc.embed_image(&s.with_pixels(px).unwrap()).unwrap();
            e.values().iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = central(s.pixels.as_slice(), f);
        assert!(rel_err(&g, &fd) <= TOL, "{}", rel_err(&g, &fd));
    }
}

#[test]
fn pooled_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fx = PooledFeatures::with_patch("pool", 4);
    let s = random_sample(&mut rng, 12);
    let n = fx.extract(&s).unwrap().as_slice().len();
    let dir = gaussian_vec(&mut rng, n);
    let g = fx.vjp(&s, &dir).unwrap().unwrap();
    let f = |x: &[f64]| {
        let px = Image::new(12, 12, x.to_vec()).unwrap();
        let m = fx.extract(&s.with_pixels(px).unwrap()).unwrap();
        m.as_slice().iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>()
    };
    let fd = central(s.pixels.as_slice(), f);
    assert!(rel_err(&g, &fd) <= TOL);
}

#[test]
fn network_backward_on_trained_like_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let init = RestorationModel::init(&mut rng);
    // perturb the zero-initialized head so every path carries gradient
    let params: Vec<f64> = init.params().iter().map(|p| p + 0.01 * stormlab::rng::standard_normal(&mut rng)).collect();
    let model = RestorationModel::from_params(params.clone()).unwrap();
    let s = random_sample(&mut rng, 16);
    let dir = gaussian_vec(&mut rng, s.pixels.as_slice().len());
    let tape = model.forward_tape(&s.pixels).unwrap();
    let g = model.backward(&tape, &dir).unwrap();
    let probe: BTreeSet<usize> = (0..30).map(|_| rng.random_range(0..params.len())).collect();
    for &i in &probe {
        let eval = |v: f64| {
            let mut p = params.clone();
            p[i] = v;
            let out = RestorationModel::from_params(p).unwrap().forward(&s.pixels).unwrap();
            out.as_slice().iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = (eval(params[i] + H) - eval(params[i] - H)) / (2.0 * H);
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
        assert!(err <= 1e-3, "param {i}: {} vs {fd}", g[i]);
    }
}
