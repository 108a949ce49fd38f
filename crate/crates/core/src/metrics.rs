//! Evaluation metrics: overlap and surface distance on masks, Fréchet and
//! kernel distances on a fixed random descriptor, and the chessboard view.
//!
//! The FID/KID values here are proxies computed with an untrained random
//! encoder. They are only meaningful as comparisons between runs, never as
//! absolute numbers.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AcmtError, Result};
use crate::image::{BinaryMask, DisplacementField, Image};
use crate::registration::warp_mask;
use crate::rng;

fn overlap_counts(x: &BinaryMask, y: &BinaryMask) -> Result<(usize, usize, usize)> {
    if x.shape() != y.shape() {
        return Err(AcmtError::shape(format!("masks {:?} vs {:?}", x.shape(), y.shape())));
    }
    let inter = x
        .as_array()
        .iter()
        .zip(y.as_array().iter())
        .filter(|(a, b)| **a == 1 && **b == 1)
        .count();
    Ok((inter, x.count(), y.count()))
}

/// `2|X∩Y| / (|X| + |Y|)`.
pub fn dsc(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    let (i, a, b) = overlap_counts(x, y)?;
    if a + b == 0 {
        return Err(AcmtError::UndefinedMetric("dsc of two empty masks".into()));
    }
    Ok(2.0 * i as f64 / (a + b) as f64)
}

/// `|X∩Y| / |X∪Y|`.
pub fn iou(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    let (i, a, b) = overlap_counts(x, y)?;
    if a + b == 0 {
        return Err(AcmtError::UndefinedMetric("iou of two empty masks".into()));
    }
    Ok(i as f64 / (a + b - i) as f64)
}

fn mean_nearest(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let dy = y as f64 - v as f64;
                    let dx = x as f64 - u as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

/// Symmetric average surface distance in pixels, surfaces being the masks
/// minus their 4-neighbourhood erosions.
pub fn asd(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(AcmtError::shape(format!("masks {:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.is_empty() || y.is_empty() {
        return Err(AcmtError::UndefinedMetric("asd needs two nonempty masks".into()));
    }
    let bx = x.boundary().points();
    let by = y.boundary().points();
    Ok(0.5 * (mean_nearest(&bx, &by) + mean_nearest(&by, &bx)))
}

/// Fixed random 3-layer strided conv encoder (1→8→16→32 channels, 3×3,
/// stride 2, ReLU) followed by global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractorProxy {
    pub seed: u64,
    layers: Vec<(Array4<f64>, Vec<f64>)>,
}

pub const DESCRIPTOR_DIM: usize = 32;

impl Default for FeatureExtractorProxy {
    fn default() -> Self {
        Self::new(0)
    }
}

impl FeatureExtractorProxy {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, "metrics/extractor", 0);
        let widths = [1usize, 8, 16, DESCRIPTOR_DIM];
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = (2.0 / (w[0] * 9) as f64).sqrt();
                let k = Array4::from_shape_simple_fn((w[1], w[0], 3, 3), || std * rng::normal(&mut r));
                let b = (0..w[1]).map(|_| 0.1 * rng::normal(&mut r)).collect();
                (k, b)
            })
            .collect();
        FeatureExtractorProxy { seed, layers }
    }

    pub fn describe(&self, img: &Image) -> Vec<f64> {
        let mut x = img.as_array().clone().insert_axis(ndarray::Axis(0));
        for (k, b) in &self.layers {
            x = conv_stride2_relu(&x, k, b);
        }
        let (c, h, w) = x.dim();
        (0..c)
            .map(|ci| x.index_axis(ndarray::Axis(0), ci).sum() / (h * w) as f64)
            .collect()
    }

    /// `(N, 32)` descriptor matrix.
    pub fn describe_all(&self, images: &[Image]) -> Array2<f64> {
        let mut out = Array2::zeros((images.len(), DESCRIPTOR_DIM));
        for (i, img) in images.iter().enumerate() {
            for (j, v) in self.describe(img).into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }
}

fn conv_stride2_relu(x: &Array3<f64>, k: &Array4<f64>, b: &[f64]) -> Array3<f64> {
    let (cin, h, w) = x.dim();
    let cout = k.dim().0;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::zeros((cout, ho, wo));
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += k[[co, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
                out[[co, oy, ox]] = acc.max(0.0);
            }
        }
    }
    out
}

fn check_sets(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(AcmtError::invalid(format!(
            "distribution metrics need at least 2 samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(AcmtError::shape("descriptor dimensions differ"));
    }
    Ok(())
}

fn mean_and_cov(x: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mu: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two descriptor sets.
pub fn fid_from_descriptors(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_sets(a, b)?;
    let (mu_a, ca) = mean_and_cov(a);
    let (mu_b, cb) = mean_and_cov(b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    // Tr((Σa Σb)^½) = Tr((Σa^½ Σb Σa^½)^½), the inner product being symmetric PSD.
    let ra = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&ra * &cb * &ra)).trace();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

fn poly_kernel(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> f64 {
    (x.dot(&y) / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel.
pub fn kid_from_descriptors(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_sets(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    let within = |x: &Array2<f64>| {
        let k = x.nrows();
        let mut s = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                s += poly_kernel(x.row(i), x.row(j));
            }
        }
        2.0 * s / (k * (k - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += poly_kernel(a.row(i), b.row(j));
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (m * n) as f64)
}

pub fn fid_proxy(set_a: &[Image], set_b: &[Image], extractor: &FeatureExtractorProxy) -> Result<f64> {
    fid_from_descriptors(&extractor.describe_all(set_a), &extractor.describe_all(set_b))
}

pub fn kid_proxy(set_a: &[Image], set_b: &[Image], extractor: &FeatureExtractorProxy) -> Result<f64> {
    kid_from_descriptors(&extractor.describe_all(set_a), &extractor.describe_all(set_b))
}

/// Bootstrap standard error of the KID estimate, resampling each set with
/// replacement.
pub fn kid_bootstrap_stderr(a: &Array2<f64>, b: &Array2<f64>, rounds: usize, seed: u64) -> Result<f64> {
    check_sets(a, b)?;
    let mut r = rng::stream(seed, "metrics/bootstrap", 0);
    let mut vals = Vec::with_capacity(rounds);
    let resample = |x: &Array2<f64>, r: &mut rng::SeededRng| {
        let n = x.nrows();
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        x.select(ndarray::Axis(0), &idx)
    };
    for _ in 0..rounds {
        let ra = resample(a, &mut r);
        let rb = resample(b, &mut r);
        vals.push(kid_from_descriptors(&ra, &rb)?);
    }
    let mean = vals.iter().sum::<f64>() / rounds as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rounds.max(2) - 1) as f64;
    Ok(var.sqrt())
}

/// Alternating `block × block` tiles of `a` and `b`, top-left from `a`.
pub fn chessboard_composite(a: &Image, b: &Image, block: usize) -> Result<Image> {
    a.ensure_same_shape(b, "chessboard_composite")?;
    if block == 0 {
        return Err(AcmtError::invalid("block must be >= 1"));
    }
    let (h, w) = a.shape();
    Image::from_fn(h, w, |(y, x)| {
        if (y / block + x / block) % 2 == 0 {
            a.get(y, x)
        } else {
            b.get(y, x)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationScores {
    pub dsc: f64,
    pub iou: f64,
    pub asd: f64,
}

/// Warps `mask_moving` by `field` (nearest) and scores it against
/// `mask_fixed`.
pub fn evaluate_registration(
    field: &DisplacementField,
    mask_moving: &BinaryMask,
    mask_fixed: &BinaryMask,
) -> Result<RegistrationScores> {
    let warped = warp_mask(mask_moving, field)?;
    Ok(RegistrationScores {
        dsc: dsc(&warped, mask_fixed)?,
        iou: iou(&warped, mask_fixed)?,
        asd: asd(&warped, mask_fixed)?,
    })
}

/// Evaluation summary. Absent entries were not part of the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
    pub asd_px: Option<f64>,
    pub fid_proxy: Option<f64>,
    pub kid_proxy: Option<f64>,
    /// Registration pairs scored.
    pub n_pairs: usize,
    /// Images per set for the distribution metrics.
    pub n_images: usize,
}

impl MetricsReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fid_proxy and kid_proxy use a fixed random encoder; compare runs, not absolute values");
        let _ = writeln!(s, "mode = \"{}\"", self.mode);
        for (k, v) in [
            ("dsc", self.dsc),
            ("iou", self.iou),
            ("asd_px", self.asd_px),
            ("fid_proxy", self.fid_proxy),
            ("kid_proxy", self.kid_proxy),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v:.9}");
            }
        }
        let _ = writeln!(s, "n_pairs = {}", self.n_pairs);
        let _ = writeln!(s, "n_images = {}", self.n_images);
        s
    }
}
