//! Prior-guided metric module.
//!
//! Support features are weighted by their (soft-downsampled) mask, then
//! every query pixel is scored against every weighted support pixel with
//! cosine similarity; the per-query-pixel maximum forms the raw prior map.
//! The map is min-max normalized, averaged over the k shots, and finally
//! concatenated onto the intermediate query features as an extra channel.
//!
//! The module is parameter-free; everything trainable lives downstream in
//! the prompt learner.

use std::path::Path;

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::nn::{avg_pool_to, bilinear_resize};
use crate::tensor::{BinaryMask, Tensor};

/// Denominator guard for min-max normalization.
pub const NORM_EPSILON: f64 = 1e-7;

/// The cosine prior between one query and its supports.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMask {
    /// Per-pixel max cosine, in `[-1, 1]`. `h x w x 1`.
    pub raw: Tensor,
    /// Min-max normalized form, in `[0, 1]`. All 0.5 for constant `raw`.
    pub normalized: Tensor,
    pub target_class: ClassId,
}

impl PriorMask {
    /// Build from a raw cosine map, computing the normalized form.
    pub fn from_raw(raw: Tensor, target_class: ClassId) -> Result<Self> {
        if raw.channels() != 1 {
            return Err(Error::Shape(format!(
                "prior map must be single-channel, got {}",
                raw.channels()
            )));
        }
        if raw.data().iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::Shape("raw prior values outside [-1, 1]".into()));
        }
        let normalized = normalize_prior(&raw);
        Ok(PriorMask {
            raw,
            normalized,
            target_class,
        })
    }

    /// A support-free prior: constant 0.5 everywhere. Used when the metric
    /// module is ablated away.
    pub fn constant(h: usize, w: usize, target_class: ClassId) -> Self {
        PriorMask {
            raw: Tensor::filled(h, w, 1, 0.5),
            normalized: Tensor::filled(h, w, 1, 0.5),
            target_class,
        }
    }
}

/// Intermediate query features with the prior appended as the last channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedQueryFeatures {
    /// `h_M x w_M x (C_M + 1)`.
    pub tensor: Tensor,
}

impl FusedQueryFeatures {
    /// Channel count of the underlying intermediate features.
    pub fn mid_channels(&self) -> usize {
        self.tensor.channels() - 1
    }
}

/// Weight high-level support features by the support mask: the mask is
/// average-pooled down to the feature grid (soft, so thin objects survive)
/// and multiplied into every channel.
pub fn mask_weight_features(support_high: &Tensor, support_mask: &BinaryMask) -> Result<Tensor> {
    if support_mask.foreground() == 0 {
        return Err(Error::DegenerateSupport(
            "support mask has no foreground pixels".into(),
        ));
    }
    let (fh, fw, c) = support_high.shape();
    let soft = avg_pool_to(&support_mask.to_tensor(), fh, fw);
    let mut out = Tensor::zeros(fh, fw, c);
    for y in 0..fh {
        for x in 0..fw {
            let m = soft.at(y, x, 0);
            for ch in 0..c {
                *out.at_mut(y, x, ch) = support_high.at(y, x, ch) * m;
            }
        }
    }
    Ok(out)
}

/// Raw prior map: for each query pixel, the maximum cosine similarity
/// against all weighted support pixels. Zero vectors score 0.
pub fn prior_map(query_high: &Tensor, weighted_support: &Tensor) -> Result<Tensor> {
    let (qh, qw, qc) = query_high.shape();
    let (sh, sw, sc) = weighted_support.shape();
    if qc != sc {
        return Err(Error::Shape(format!(
            "query has {qc} channels, weighted support has {sc}"
        )));
    }
    let support_norms: Vec<f64> = (0..sh * sw)
        .map(|i| {
            let px = weighted_support.pixel(i / sw, i % sw);
            px.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    let mut raw = Tensor::zeros(qh, qw, 1);
    for y in 0..qh {
        for x in 0..qw {
            let q = query_high.pixel(y, x);
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = -1.0f64;
            for sy in 0..sh {
                for sx in 0..sw {
                    let s = weighted_support.pixel(sy, sx);
                    let sn = support_norms[sy * sw + sx];
                    let cos = if qn == 0.0 || sn == 0.0 {
                        0.0
                    } else {
                        let dot: f64 = q.iter().zip(s).map(|(a, b)| a * b).sum();
                        (dot / (qn * sn)).clamp(-1.0, 1.0)
                    };
                    best = best.max(cos);
                }
            }
            *raw.at_mut(y, x, 0) = best;
        }
    }
    Ok(raw)
}

/// Min-max normalization of a raw cosine map into `[0, 1]`; constant maps
/// become all 0.5.
pub fn normalize_prior(raw: &Tensor) -> Tensor {
    let min = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Tensor::filled(raw.height(), raw.width(), raw.channels(), 0.5);
    }
    raw.map(|v| (v - min) / (max - min + NORM_EPSILON))
}

/// Average the per-shot priors elementwise (both raw and normalized).
pub fn aggregate_shots(priors: &[PriorMask]) -> Result<PriorMask> {
    let first = priors
        .first()
        .ok_or_else(|| Error::Config("aggregate_shots needs at least one prior".into()))?;
    for p in priors {
        if p.raw.shape() != first.raw.shape() {
            return Err(Error::Shape(format!(
                "prior shapes differ: {:?} vs {:?}",
                p.raw.shape(),
                first.raw.shape()
            )));
        }
        if p.target_class != first.target_class {
            return Err(Error::Protocol(format!(
                "aggregating priors for classes {} and {}",
                first.target_class, p.target_class
            )));
        }
    }
    let k = priors.len() as f64;
    let mut raw = Tensor::zeros(first.raw.height(), first.raw.width(), 1);
    let mut normalized = raw.clone();
    for p in priors {
        for (acc, v) in raw.data_mut().iter_mut().zip(p.raw.data()) {
            *acc += v / k;
        }
        for (acc, v) in normalized.data_mut().iter_mut().zip(p.normalized.data()) {
            *acc += v / k;
        }
    }
    Ok(PriorMask {
        raw,
        normalized,
        target_class: first.target_class,
    })
}

/// Prior for a whole episode: weight, score, normalize per shot, then
/// average over the shots.
pub fn episode_prior(
    query_high: &Tensor,
    supports: &[(Tensor, BinaryMask)],
    target_class: ClassId,
) -> Result<PriorMask> {
    let mut shots = Vec::with_capacity(supports.len());
    for (high, mask) in supports {
        let weighted = mask_weight_features(high, mask)?;
        let raw = prior_map(query_high, &weighted)?;
        shots.push(PriorMask::from_raw(raw, target_class)?);
    }
    aggregate_shots(&shots)
}

/// Append the normalized prior (bilinearly resized to the intermediate
/// grid) as one extra channel on the intermediate query features.
pub fn fuse(query_mid: &Tensor, prior: &PriorMask) -> FusedQueryFeatures {
    let up = bilinear_resize(&prior.normalized, query_mid.height(), query_mid.width());
    let tensor = query_mid
        .concat_channels(&up)
        .expect("resized prior matches mid grid");
    FusedQueryFeatures { tensor }
}

/// Debug export: the normalized prior as an 8-bit grayscale PNG
/// (`round(normalized * 255)`).
pub fn export_prior_png(prior: &PriorMask, path: &Path) -> Result<()> {
    let (h, w, _) = prior.normalized.shape();
    let data: Vec<u8> = prior
        .normalized
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, data).expect("buffer sized");
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}
