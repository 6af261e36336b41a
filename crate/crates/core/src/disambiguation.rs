//! Semantic anchor disambiguation.
//!
//! Each subject is encoded twice: inside the full prompt, where the encoder
//! lets neighbouring words bleed into it, and alone, giving a clean anchor.
//! The confusion scale measures how strongly the contextual subject leans
//! toward the *other* anchors; the directional vector points from the other
//! anchors toward its own. Conditioning then adds
//! `ω(step) · s_i · Δ_i` to every token row of subject `i`, with `ω`
//! decaying linearly over the sampling trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{EmbeddingSet, SubjectSpan};
use crate::tensor::{cosine, Tensor};

pub const DEFAULT_TAU: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SadConfig {
    pub tau: f64,
    pub total_steps: usize,
    pub enabled: bool,
}

impl Default for SadConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            total_steps: 50,
            enabled: true,
        }
    }
}

impl SadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Confusion scales and directional vectors, computed once per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SadState {
    pub confusion: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
}

impl SadState {
    pub fn from_embeddings(emb: &EmbeddingSet, tau: f64) -> Result<Self> {
        Ok(Self {
            confusion: confusion_scale(&emb.pooled_prompt, &emb.pooled_anchors, tau)?,
            directions: directional_vectors(&emb.pooled_anchors)?,
        })
    }

    /// Conditioning embedding for a given sampling step.
    pub fn apply(&self, prompt: &Tensor, spans: &[SubjectSpan], step: usize, total: usize) -> Result<Tensor> {
        interpolate(prompt, spans, &self.confusion, &self.directions, attenuation(step, total)?)
    }
}

/// `s_k = Σ_{i≠k} e^{cos(P̄_k,Ā_i)/τ} / Σ_i e^{cos(P̄_k,Ā_i)/τ}`.
pub fn confusion_scale(pooled_prompt: &[Vec<f64>], pooled_anchors: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    let m = pooled_prompt.len();
    if m == 0 || pooled_anchors.len() != m {
        return Err(Error::arg(format!(
            "need M >= 1 matching pooled vectors, got {m} prompt and {} anchor",
            pooled_anchors.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::arg(format!("tau must be positive, got {tau}")));
    }
    pooled_prompt
        .iter()
        .enumerate()
        .map(|(k, pk)| {
            let logits = pooled_anchors
                .iter()
                .map(|ai| cosine(pk, ai).map(|c| c / tau))
                .collect::<Result<Vec<_>>>()?;
            // Shifting by the max leaves the ratio unchanged and avoids overflow.
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let others: f64 = weights
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(_, w)| w)
                .sum();
            Ok(others / total)
        })
        .collect()
}

/// `Δ_k = Σ_i (Ā_k − Ā_i) = M·Ā_k − Σ_i Ā_i`.
pub fn directional_vectors(pooled_anchors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = pooled_anchors.first() else {
        return Err(Error::arg("need at least one anchor"));
    };
    let d = first.len();
    if pooled_anchors.iter().any(|a| a.len() != d) {
        return Err(Error::arg("anchors differ in dimension"));
    }
    Ok(pooled_anchors
        .iter()
        .map(|ak| {
            let mut delta = vec![0.0; d];
            for ai in pooled_anchors {
                for ((out, a), b) in delta.iter_mut().zip(ak).zip(ai) {
                    *out += a - b;
                }
            }
            delta
        })
        .collect())
}

/// `ω = 1 − step/total`, where step 0 is the first (noisiest) denoising step.
pub fn attenuation(step: usize, total: usize) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::arg(format!("step {step} outside 0..={total}")));
    }
    Ok(1.0 - step as f64 / total as f64)
}

/// Adds `ω·s_i·Δ_i` to each token row of subject `i`. Other rows are copied
/// unchanged.
pub fn interpolate(
    prompt: &Tensor,
    spans: &[SubjectSpan],
    confusion: &[f64],
    directions: &[Vec<f64>],
    omega: f64,
) -> Result<Tensor> {
    if spans.len() != confusion.len() || spans.len() != directions.len() {
        return Err(Error::arg(format!(
            "{} spans, {} confusion scales, {} directions",
            spans.len(),
            confusion.len(),
            directions.len()
        )));
    }
    let d = prompt.cols();
    if let Some(bad) = directions.iter().find(|dir| dir.len() != d) {
        return Err(Error::arg(format!(
            "direction of dimension {} for embeddings of dimension {d}",
            bad.len()
        )));
    }
    let mut out = prompt.clone();
    if omega == 0.0 {
        return Ok(out);
    }
    for ((span, &s), dir) in spans.iter().zip(confusion).zip(directions) {
        if span.end > prompt.rows() || span.start >= span.end {
            return Err(Error::arg(format!("invalid span [{}, {})", span.start, span.end)));
        }
        let strength = omega * s;
        if strength == 0.0 {
            continue;
        }
        for r in span.start..span.end {
            for (v, dv) in out.row_mut(r).iter_mut().zip(dir) {
                *v += strength * dv;
            }
        }
    }
    out.ensure_finite("interpolated embeddings")?;
    Ok(out)
}
