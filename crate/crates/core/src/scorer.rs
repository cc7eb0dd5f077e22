//! Inference: distance to the nearest bank entry per patch, upsampled and smoothed.
//! Class labels are never read here.

use ndarray::{Array2, ArrayView2};

use crate::backbone::PatchFeatureMap;
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, resize_bilinear_2d};
use crate::memory_bank::MemoryBank;
use crate::model::RdCfaModel;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    /// Non-negative, `H_img x W_img`.
    pub pixel_scores: Array2<f64>,
    /// Maximum of `pixel_scores`.
    pub image_score: f64,
}

/// Squared distance from each location's (augmented) feature to its nearest bank entry, `H x W`.
pub fn raw_score_map(features: &PatchFeatureMap, model: &RdCfaModel, bank: &MemoryBank) -> Result<Array2<f64>> {
    let width = model.query_width(bank.augmented());
    if bank.width() != width {
        return Err(Error::shape(format!(
            "bank width {} but the model produces width {width}",
            bank.width()
        )));
    }
    let queries = model.embed(features, bank.augmented())?;
    let nearest = bank.nearest_columns(queries.view(), 1)?;
    let scores: Vec<f64> = nearest.iter().map(|n| n.distances[0]).collect();
    Ok(Array2::from_shape_vec((features.height(), features.width()), scores).expect("one score per patch"))
}

/// Bilinear upsampling to `(out_h, out_w)` followed by a unit-sum Gaussian blur.
pub fn postprocess(raw: ArrayView2<f64>, out_h: usize, out_w: usize, sigma: f64) -> Result<AnomalyMap> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("raw score map must be finite and >= 0".into()));
    }
    let up = resize_bilinear_2d(raw, out_h, out_w);
    // the kernel is non-negative, so clamping only removes rounding noise
    let pixel_scores = gaussian_blur(up.view(), sigma).mapv(|v| v.max(0.0));
    let image_score = pixel_scores.iter().copied().fold(0.0, f64::max);
    Ok(AnomalyMap {
        pixel_scores,
        image_score,
    })
}

pub fn score_features(
    features: &PatchFeatureMap,
    model: &RdCfaModel,
    bank: &MemoryBank,
    out_h: usize,
    out_w: usize,
    sigma: f64,
) -> Result<AnomalyMap> {
    let raw = raw_score_map(features, model, bank)?;
    postprocess(raw.view(), out_h, out_w, sigma)
}
