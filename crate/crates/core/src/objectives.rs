//! Pixel and feature losses and their weighted combination.
//!
//! Every loss here comes with an analytic gradient with respect to its first
//! argument; the trainer chains those through the encoders and the network.

use serde::{Deserialize, Serialize};

use crate::backends::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pseudodb::PseudoLabelRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 0.5,
            w2: 0.2,
            w3: 0.05,
            w4: 0.2,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        w1: 0.0,
        w2: 0.0,
        w3: 0.0,
        w4: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (key, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3), ("w4", self.w4)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(key, format!("loss weight must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// True when none of the unlabeled-stream terms contributes.
    pub fn is_supervised_only(&self) -> bool {
        self.w1 == 0.0 && self.w2 == 0.0 && self.w3 == 0.0 && self.w4 == 0.0
    }
}

/// Raw per-term values before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub sup: f64,
    pub ps: f64,
    pub wpl: f64,
    pub sem: f64,
    pub feat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub ps: f64,
    pub wpl: f64,
    pub sem: f64,
    pub feat: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.sup + w.w1 * self.ps + w.w2 * self.wpl + w.w3 * self.sem + w.w4 * self.feat
    }
}

pub fn total_loss(c: LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        sup: c.sup,
        ps: c.ps,
        wpl: c.wpl,
        sem: c.sem,
        feat: c.feat,
        total: 0.0,
    };
    b.total = b.recompute_total(w);
    let parts = [c.sup, c.ps, c.wpl, c.sem, c.feat, b.total];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iteration: None,
            breakdown: Box::new(b),
        });
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// Appearance (L1)

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Domain(format!("shape mismatch: {a} vs {b} values")));
    }
    if a == 0 {
        return Err(Error::Domain("empty input".into()));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn appearance_loss(pred: &Image, target: &Image) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Domain(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(l1_loss(pred.as_slice(), target.as_slice())?.0)
}

/// L1 loss and its (sub)gradient w.r.t. `pred`. The subgradient at exact ties is 0.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(pred.len(), target.len())?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

pub fn pseudo_label_loss(pred: &Image, record: &PseudoLabelRecord) -> Result<f64> {
    appearance_loss(pred, &record.label)
}

// ---------------------------------------------------------------------------
// Dense feature alignment

fn check_congruent(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Domain(format!(
            "feature maps are not congruent: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1/HW) Σ (1 − cos(pred_i, target_i))` and its gradient w.r.t. `pred`.
pub fn feature_similarity_loss_grad(pred: &FeatureMap, target: &FeatureMap) -> Result<(f64, Vec<f64>)> {
    check_congruent(pred, target)?;
    let cells = pred.cells();
    let d = pred.dim();
    let mut grad = vec![0.0; pred.as_slice().len()];
    let mut sum = 0.0;
    for i in 0..cells {
        let p = pred.cell(i);
        let t = target.cell(i);
        let (pn, tn) = (norm(p), norm(t));
        if pn == 0.0 || tn == 0.0 {
            return Err(Error::Domain(format!("zero-norm feature vector at cell {i}")));
        }
        let c = dot(p, t) / (pn * tn);
        sum += 1.0 - c;
        let g = &mut grad[i * d..(i + 1) * d];
        for k in 0..d {
            // d(1 - cos)/dp = -(t/(|p||t|) - cos * p/|p|^2)
            g[k] = -(t[k] / (pn * tn) - c * p[k] / (pn * pn)) / cells as f64;
        }
    }
    Ok((sum / cells as f64, grad))
}

pub fn feature_similarity_loss(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    Ok(feature_similarity_loss_grad(pred, target)?.0)
}

/// Equal average of the alignment to the pseudo-label and to the input.
pub fn dual_target_feat_loss_grad(
    pred: &FeatureMap,
    pseudo_label: &FeatureMap,
    input: &FeatureMap,
) -> Result<(f64, Vec<f64>)> {
    let (l1, g1) = feature_similarity_loss_grad(pred, pseudo_label)?;
    let (l2, g2) = feature_similarity_loss_grad(pred, input)?;
    let grad = g1.iter().zip(&g2).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * (l1 + l2), grad))
}

pub fn dual_target_feat_loss(pred: &FeatureMap, pseudo_label: &FeatureMap, input: &FeatureMap) -> Result<f64> {
    Ok(dual_target_feat_loss_grad(pred, pseudo_label, input)?.0)
}

// ---------------------------------------------------------------------------
// Cosine-softmax contrast shared by the prompt and description losses

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity and its gradient w.r.t. `u`.
pub fn cosine_with_grad(u: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(u.len(), w.len())?;
    let (un, wn) = (norm(u), norm(w));
    if un == 0.0 || wn == 0.0 {
        return Err(Error::Domain("cosine of a zero vector".into()));
    }
    let c = dot(u, w) / (un * wn);
    let grad = u
        .iter()
        .zip(w)
        .map(|(ui, wi)| wi / (un * wn) - c * ui / (un * un))
        .collect();
    Ok((c, grad))
}

/// `−log softmax(cos(u, t_k) / T)[positive]` over the given targets, with its
/// gradient w.r.t. `u`.
pub fn cosine_softmax_nll(
    u: &[f64],
    targets: &[&[f64]],
    positive: usize,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    if positive >= targets.len() {
        return Err(Error::Domain("positive index out of range".into()));
    }
    let cos: Vec<(f64, Vec<f64>)> = targets
        .iter()
        .map(|t| cosine_with_grad(u, t))
        .collect::<Result<_>>()?;
    let logits: Vec<f64> = cos.iter().map(|(c, _)| c / temperature).collect();
    let probs = softmax(&logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[positive];
    let mut grad = vec![0.0; u.len()];
    for (k, (_, dc)) in cos.iter().enumerate() {
        let coeff = (probs[k] - if k == positive { 1.0 } else { 0.0 }) / temperature;
        for (g, d) in grad.iter_mut().zip(dc) {
            *g += coeff * d;
        }
    }
    Ok((loss, grad))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
