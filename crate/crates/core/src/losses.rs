//! Supervision signals: weighted vertex loss, rendered-domain lip-reading
//! loss, and their stage-dependent combination.
//!
//! The vertex loss is a sum (not mean) over frames and vertices of weighted
//! squared L2 error. The lip-reading loss is one minus the mean per-frame
//! cosine similarity between extractor features of predicted lip renders and
//! precomputed ground-truth features; it is differentiable through the
//! extractor and the renderer down to mesh vertices.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{FaceTopology, Region};
use crate::lipreader::{cosine_similarity, LipFeatureSequence, SurrogateLipReader};
use crate::render::GrayFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageId {
    Stage1,
    Stage2,
    Stage3,
}

impl StageId {
    pub fn number(self) -> u8 {
        match self {
            StageId::Stage1 => 1,
            StageId::Stage2 => 2,
            StageId::Stage3 => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(StageId::Stage1),
            2 => Ok(StageId::Stage2),
            3 => Ok(StageId::Stage3),
            other => Err(Error::config(format!("stage must be 1..=3, got {other}"))),
        }
    }
}

/// Per-vertex weights for the geometric loss. Stage 1 weighs everything at
/// 1.0; stages 2–3 keep skin at 1.0, halve non-skin regions (lip, teeth) to
/// damp pseudo-ground-truth noise, and zero eye vertices entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexWeightPolicy {
    pub weights: Vec<f64>,
}

impl VertexWeightPolicy {
    pub fn for_stage(stage: StageId, topology: &FaceTopology) -> Self {
        let weights = topology
            .regions
            .iter()
            .map(|&r| match stage {
                StageId::Stage1 => 1.0,
                StageId::Stage2 | StageId::Stage3 => match r {
                    Region::Skin => 1.0,
                    Region::Eye => 0.0,
                    Region::Lip | Region::Teeth => 0.5,
                },
            })
            .collect();
        Self { weights }
    }

    pub fn uniform(v: usize) -> Self {
        Self {
            weights: vec![1.0; v],
        }
    }
}

/// Eq-style weighted vertex loss: Σ_t Σ_v ‖pred − gt‖² · W_v.
pub fn vertex_loss(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    policy: &VertexWeightPolicy,
) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::data(format!(
            "vertex loss shape mismatch: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.shape()[1] != policy.weights.len() {
        return Err(Error::data("weight policy does not match vertex count"));
    }
    let (t_len, v) = (pred.shape()[0], pred.shape()[1]);
    let mut total = 0.0;
    for t in 0..t_len {
        for i in 0..v {
            let w = policy.weights[i];
            let mut sq = 0.0;
            for k in 0..3 {
                let d = pred[[t, i, k]] - gt[[t, i, k]];
                sq += d * d;
            }
            total += sq * w;
        }
    }
    if !total.is_finite() {
        return Err(Error::numerical("vertex loss is not finite"));
    }
    Ok(total)
}

/// d(vertex_loss)/d(pred) = 2·W_v·(pred − gt).
pub fn vertex_loss_grad(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    policy: &VertexWeightPolicy,
) -> Result<Array3<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::data("vertex loss shape mismatch"));
    }
    let mut grad = Array3::zeros(pred.raw_dim());
    let (t_len, v) = (pred.shape()[0], pred.shape()[1]);
    for t in 0..t_len {
        for i in 0..v {
            let w = policy.weights[i];
            for k in 0..3 {
                grad[[t, i, k]] = 2.0 * w * (pred[[t, i, k]] - gt[[t, i, k]]);
            }
        }
    }
    Ok(grad)
}

/// How sequence features collapse into one similarity value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CosineAggregation {
    /// Mean of per-frame cosine similarities (default).
    PerFrameMean,
    /// Single cosine over the flattened feature sequences.
    Flattened,
}

/// Lip-reading loss on already-extracted features: 1 − CosSim ∈ [0, 2].
pub fn lipread_loss_features(
    pred: &LipFeatureSequence,
    gt: &LipFeatureSequence,
    aggregation: CosineAggregation,
) -> Result<f64> {
    if pred.extractor_id != gt.extractor_id {
        return Err(Error::data(format!(
            "stale feature cache: extractor `{}` vs `{}`",
            gt.extractor_id, pred.extractor_id
        )));
    }
    if pred.frames() != gt.frames() {
        return Err(Error::data(format!(
            "frame count mismatch: pred {} vs gt {}",
            pred.frames(),
            gt.frames()
        )));
    }
    let sim = match aggregation {
        CosineAggregation::PerFrameMean => {
            let mut acc = 0.0;
            for t in 0..pred.frames() {
                acc += cosine_similarity(
                    pred.features.row(t).as_slice().unwrap(),
                    gt.features.row(t).as_slice().unwrap(),
                );
            }
            acc / pred.frames() as f64
        }
        CosineAggregation::Flattened => cosine_similarity(
            pred.features.as_slice().unwrap(),
            gt.features.as_slice().unwrap(),
        ),
    };
    Ok(1.0 - sim)
}

/// d(1 − mean-frame CosSim)/d(pred features).
pub fn lipread_loss_grad_features(
    pred: &LipFeatureSequence,
    gt: &LipFeatureSequence,
) -> Array2<f64> {
    let t_len = pred.frames();
    let d = pred.features.shape()[1];
    let mut grad = Array2::zeros((t_len, d));
    for t in 0..t_len {
        let a = pred.features.row(t);
        let b = gt.features.row(t);
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let cosv = dot / (na * nb);
        for c in 0..d {
            // d(cos)/da = b/(‖a‖‖b‖) − cos·a/‖a‖²
            let dcos = b[c] / (na * nb) - cosv * a[c] / (na * na);
            grad[[t, c]] = -dcos / t_len as f64;
        }
    }
    grad
}

/// Full lip-reading loss from predicted gray frames, with pixel gradients.
pub fn lipread_loss_with_pixel_grad(
    reader: &SurrogateLipReader,
    pred_frames: &[GrayFrame],
    gt: &LipFeatureSequence,
    aggregation: CosineAggregation,
) -> Result<(f64, Vec<GrayFrame>)> {
    let (pred, cache) = reader.extract_with_cache(pred_frames)?;
    let loss = lipread_loss_features(&pred, gt, aggregation)?;
    let d_features = lipread_loss_grad_features(&pred, gt);
    let d_pixels = reader.backward_pixels(&cache, &d_features);
    Ok((loss, d_pixels))
}

/// Per-step loss record. `total = vert + λ_read·read` whenever the
/// perceptual term is active; otherwise `total = vert`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vert: f64,
    pub read: f64,
    pub total: f64,
    pub lambda_read: f64,
}

/// Combine stage losses. Stage 3 requires the perceptual term unless
/// λ_read is zero (the rendering pathway may then be skipped entirely).
pub fn total_loss(
    stage: StageId,
    vert: f64,
    read: Option<f64>,
    lambda_read: f64,
) -> Result<LossBreakdown> {
    match stage {
        StageId::Stage1 | StageId::Stage2 => Ok(LossBreakdown {
            vert,
            read: 0.0,
            total: vert,
            lambda_read: 0.0,
        }),
        StageId::Stage3 => {
            let read = match read {
                Some(r) => r,
                None if lambda_read == 0.0 => 0.0,
                None => {
                    return Err(Error::config(
                        "stage 3 needs the renderer/extractor pathway wired (no read loss given)",
                    ))
                }
            };
            Ok(LossBreakdown {
                vert,
                read,
                total: vert + lambda_read * read,
                lambda_read,
            })
        }
    }
}
