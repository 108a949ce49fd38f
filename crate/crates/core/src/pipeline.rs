//! Evaluation protocol shared by the CLI and the end-to-end tests.
//!
//! Registration always takes the US image as fixed and the MR image as
//! moving. The MR-frame zone mask is warped by the estimated field and
//! scored against the US-frame zone mask.

use ndarray::Array3;

use crate::error::{AcmtError, Result};
use crate::image::{BinaryMask, Image};
use crate::metrics::{evaluate_registration, fid_proxy, kid_proxy, FeatureExtractorProxy, RegistrationScores};
use crate::objectives::sobel_apply;
use crate::phantom::PairedSample;
use crate::registration::{register, RegistrationConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistributionScores {
    pub fid_proxy: f64,
    pub kid_proxy: f64,
}

/// FID/KID proxies between the MR set and the US set of `pairs`.
pub fn modality_gap(pairs: &[PairedSample], extractor: &FeatureExtractorProxy) -> Result<DistributionScores> {
    let mr: Vec<Image> = pairs.iter().map(|p| p.mr.clone()).collect();
    let us: Vec<Image> = pairs.iter().map(|p| p.us.clone()).collect();
    Ok(DistributionScores {
        fid_proxy: fid_proxy(&mr, &us, extractor)?,
        kid_proxy: kid_proxy(&mr, &us, extractor)?,
    })
}

/// Registers `pair.us` (fixed) with `pair.mr` (moving) and scores the zone
/// mask overlap.
pub fn register_pair(pair: &PairedSample, config: &RegistrationConfig) -> Result<RegistrationScores> {
    let field = register(&pair.us, &pair.mr, config)?;
    evaluate_registration(&field, &pair.zone_mask, &pair.us_zone_mask())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanScores {
    pub dsc: f64,
    pub iou: f64,
    pub asd: f64,
}

pub fn mean_scores(scores: &[RegistrationScores]) -> Result<MeanScores> {
    if scores.is_empty() {
        return Err(AcmtError::UndefinedMetric("no registration scores".into()));
    }
    let n = scores.len() as f64;
    Ok(MeanScores {
        dsc: scores.iter().map(|s| s.dsc).sum::<f64>() / n,
        iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
        asd: scores.iter().map(|s| s.asd).sum::<f64>() / n,
    })
}

/// Per-pixel Sobel gradient magnitude of an image.
pub fn sobel_magnitude(img: &Image) -> Result<Image> {
    let (h, w) = img.shape();
    let f = img.as_array().clone().into_shape_with_order((1, h, w)).expect("image plane");
    let g: Array3<f64> = sobel_apply(&f)?;
    Image::from_fn(h, w, |(y, x)| g[[0, y, x]].hypot(g[[1, y, x]]))
}

/// Pearson correlation between an image's Sobel magnitude and a boundary
/// mask.
pub fn edge_boundary_correlation(img: &Image, boundary: &BinaryMask) -> Result<f64> {
    if img.shape() != boundary.shape() {
        return Err(AcmtError::shape("image and boundary mask differ in shape"));
    }
    let mag = sobel_magnitude(img)?;
    let a = mag.as_slice();
    let b: Vec<f64> = boundary.as_array().iter().map(|&v| f64::from(v)).collect();
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(AcmtError::UndefinedMetric("correlation with a constant signal".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Mean edge/boundary correlation over both modalities of every pair, using
/// the MR-frame boundary for MR and the deformed boundary for US.
pub fn mean_boundary_correlation(pairs: &[PairedSample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(AcmtError::UndefinedMetric("no pairs".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        total += edge_boundary_correlation(&p.mr, &p.boundary_mask)?;
        total += edge_boundary_correlation(&p.us, &p.us_zone_mask().boundary())?;
    }
    Ok(total / (2 * pairs.len()) as f64)
}
