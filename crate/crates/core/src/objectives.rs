//! Hierarchical feature-disentanglement objectives.
//!
//! * texture consistency: `mean |C7(F1s_mr) − C7(F1s_us)|²` on shallow taps,
//! * boundary preservation: `mean |S(C3(F1d)) − S(C3(F0d))|` on deep taps,
//! * bridge loss: `mean |x_t − x1|² − 2σ(1−t)·H(x_t, x1)`,
//! * the weighted total.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the translated (`x1`) side. `C7`/`C3` are frozen seeded linear
//! heads, `S` is the Sobel pair; all convolutions use replicate padding.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{AcmtError, Result};
use crate::image::Image;
use crate::rng;

/// Frozen bias-free convolution with replicate padding and odd kernel size.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvHead {
    /// `(C_out, C_in, k, k)`.
    pub weights: Array4<f64>,
}

/// Replicate-padded im2col: rows indexed by `(c, ky, kx)`, columns by pixel.
fn im2col_replicate(x: &Array3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let r = (k / 2) as isize;
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for y in 0..h {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    for xx in 0..w {
                        let sx = (xx as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        dst[y * w + xx] = x[[ci, sy, sx]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_replicate(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let r = (k / 2) as isize;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for y in 0..h {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    for xx in 0..w {
                        let sx = (xx as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        out[[ci, sy, sx]] += row[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

impl ConvHead {
    /// Weights drawn from `N(0, gain²/fan_in)`.
    pub fn seeded(seed: u64, tag: &str, channels: usize, k: usize, gain: f64) -> Self {
        let mut r = rng::stream(seed, tag, 0);
        let std = gain * (1.0 / (channels * k * k) as f64).sqrt();
        let weights = Array4::from_shape_simple_fn((channels, channels, k, k), || std * rng::normal(&mut r));
        ConvHead { weights }
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.dim().2
    }

    fn matrix(&self) -> ArrayView2<'_, f64> {
        let (co, ci, k, _) = self.weights.dim();
        self.weights
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous head weights")
    }

    pub fn apply(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (co, ci, k, _) = self.weights.dim();
        let (c, h, w) = x.dim();
        if c != ci {
            return Err(AcmtError::shape(format!("head expects {ci} channels, got {c}")));
        }
        let y = self.matrix().dot(&im2col_replicate(x, k));
        Ok(y.into_shape_with_order((co, h, w)).expect("head output shape"))
    }

    /// Adjoint of [`ConvHead::apply`].
    pub fn adjoint(&self, dy: &Array3<f64>) -> Array3<f64> {
        let (co, ci, k, _) = self.weights.dim();
        let (_, h, w) = dy.dim();
        let dyv = dy
            .view()
            .into_shape_with_order((co, h * w))
            .expect("contiguous gradient");
        let dcols = self.matrix().t().dot(&dyv);
        col2im_replicate(&dcols, ci, h, w, k)
    }
}

/// Gain of the 7×7 texture head. The texture loss is quadratic in it and
/// the boundary loss does not see it, so it sets how strongly texture
/// alignment competes with the L1 boundary anchor at the default weights.
/// At unit gain the anchor wins and training stays at the identity map.
/// The value is √5.
pub const TEXTURE_HEAD_GAIN: f64 = 2.236_067_977_499_79;

/// Seeded frozen projection heads: 7×7 over the shallow tap, 3×3 over the
/// deep tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHeads {
    pub conv7: ConvHead,
    pub conv3: ConvHead,
    pub seed: u64,
}

impl LossHeads {
    pub fn new(seed: u64, shallow_channels: usize, deep_channels: usize) -> Self {
        LossHeads {
            conv7: ConvHead::seeded(seed, "heads/conv7", shallow_channels, 7, TEXTURE_HEAD_GAIN),
            conv3: ConvHead::seeded(seed, "heads/conv3", deep_channels, 3, 1.0),
            seed,
        }
    }
}

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Per-channel Sobel responses (cross-correlation, replicate padding):
/// channels `0..C` hold `kx`, channels `C..2C` hold `ky`.
pub fn sobel_apply(f: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = f.dim();
    if h < 3 || w < 3 {
        return Err(AcmtError::invalid(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let mut out = Array3::<f64>::zeros((2 * c, h, w));
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for dy in 0..3 {
                    let sy = clampi(y as isize + dy as isize - 1, h);
                    for dx in 0..3 {
                        let sx = clampi(x as isize + dx as isize - 1, w);
                        let v = f[[ci, sy, sx]];
                        gx += SOBEL_X[dy][dx] * v;
                        gy += SOBEL_Y[dy][dx] * v;
                    }
                }
                out[[ci, y, x]] = gx;
                out[[c + ci, y, x]] = gy;
            }
        }
    }
    Ok(out)
}

fn sobel_adjoint(d: &Array3<f64>) -> Array3<f64> {
    let (c2, h, w) = d.dim();
    let c = c2 / 2;
    let mut out = Array3::<f64>::zeros((c, h, w));
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (gx, gy) = (d[[ci, y, x]], d[[c + ci, y, x]]);
                for dy in 0..3 {
                    let sy = clampi(y as isize + dy as isize - 1, h);
                    for dx in 0..3 {
                        let sx = clampi(x as isize + dx as isize - 1, w);
                        out[[ci, sy, sx]] += SOBEL_X[dy][dx] * gx + SOBEL_Y[dy][dx] * gy;
                    }
                }
            }
        }
    }
    out
}

fn ensure_same(a: &Array3<f64>, b: &Array3<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(AcmtError::shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Texture consistency between translated MR and US shallow features.
/// Returns the loss and its gradients with respect to both inputs.
pub fn texture_loss(
    fs_mr1: &Array3<f64>,
    fs_us1: &Array3<f64>,
    heads: &LossHeads,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    ensure_same(fs_mr1, fs_us1, "texture_loss")?;
    let diff = heads.conv7.apply(fs_mr1)? - heads.conv7.apply(fs_us1)?;
    let n = diff.len() as f64;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let d_mr = heads.conv7.adjoint(&(diff * (2.0 / n)));
    let d_us = -&d_mr;
    Ok((value, d_mr, d_us))
}

/// Boundary preservation between translated and source deep features. The
/// source branch is a constant: only the gradient for `fd_1` is returned.
pub fn boundary_loss(
    fd_1: &Array3<f64>,
    fd_0_detached: &Array3<f64>,
    heads: &LossHeads,
) -> Result<(f64, Array3<f64>)> {
    ensure_same(fd_1, fd_0_detached, "boundary_loss")?;
    let e1 = sobel_apply(&heads.conv3.apply(fd_1)?)?;
    let e0 = sobel_apply(&heads.conv3.apply(fd_0_detached)?)?;
    let diff = e1 - e0;
    let n = diff.len() as f64;
    let value = diff.iter().map(|v| v.abs()).sum::<f64>() / n;
    let sign = diff.mapv(|v| if v > 0.0 { 1.0 / n } else if v < 0.0 { -1.0 / n } else { 0.0 });
    let grad = heads.conv3.adjoint(&sobel_adjoint(&sign));
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise Euclidean distance of the batch.
    MedianHeuristic,
}

pub const MIN_ENTROPY_SAMPLES: usize = 4;

fn pairwise_sq_dist(s: &Array2<f64>) -> Array2<f64> {
    let n = s.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = s
                .row(i)
                .iter()
                .zip(s.row(j).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Leave-one-out Gaussian-kernel entropy estimate of the rows of `samples`.
pub fn entropy_estimate(samples: &Array2<f64>, bandwidth: Bandwidth) -> Result<f64> {
    entropy_with_grad(samples, bandwidth).map(|(h, _)| h)
}

/// Entropy estimate and its gradient with respect to every sample. With the
/// median heuristic the gradient includes the bandwidth's dependence on the
/// two (or one) median pairs.
pub fn entropy_with_grad(samples: &Array2<f64>, bandwidth: Bandwidth) -> Result<(f64, Array2<f64>)> {
    let (n, d) = samples.dim();
    if n < MIN_ENTROPY_SAMPLES {
        return Err(AcmtError::DegenerateBatch(format!(
            "entropy needs at least {MIN_ENTROPY_SAMPLES} samples, got {n}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(AcmtError::NonFinite {
            component: "entropy samples".into(),
            detail: "non-finite sample".into(),
        });
    }
    let sq = pairwise_sq_dist(samples);

    // Bandwidth and, for the median heuristic, the pairs it depends on.
    let (h, median_pairs): (f64, Vec<(usize, usize, f64)>) = match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0) || !h.is_finite() {
                return Err(AcmtError::invalid(format!("bandwidth must be positive, got {h}")));
            }
            (h, Vec::new())
        }
        Bandwidth::MedianHeuristic => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    pairs.push((sq[[i, j]].sqrt(), i, j));
                }
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let m = pairs.len();
            let picks: Vec<(usize, usize, f64)> = if m % 2 == 1 {
                let (_, i, j) = pairs[m / 2];
                vec![(i, j, 1.0)]
            } else {
                let (_, i0, j0) = pairs[m / 2 - 1];
                let (_, i1, j1) = pairs[m / 2];
                vec![(i0, j0, 0.5), (i1, j1, 0.5)]
            };
            let h: f64 = picks.iter().map(|&(i, j, w)| w * sq[[i, j]].sqrt()).sum();
            if !(h > 0.0) {
                return Err(AcmtError::DegenerateBatch(
                    "median pairwise distance is zero".into(),
                ));
            }
            (h, picks)
        }
    };

    let nf = n as f64;
    let df = d as f64;
    let inv2h2 = 1.0 / (2.0 * h * h);
    let log_norm = -(df / 2.0) * (2.0 * std::f64::consts::PI * h * h).ln() - (nf - 1.0).ln();
    // p[i][j]: leave-one-out softmax weights of sample i over j != i.
    let mut p = Array2::<f64>::zeros((n, n));
    let mut entropy = 0.0;
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                mx = mx.max(-sq[[i, j]] * inv2h2);
            }
        }
        let mut z = 0.0;
        for j in 0..n {
            if j != i {
                let e = (-sq[[i, j]] * inv2h2 - mx).exp();
                p[[i, j]] = e;
                z += e;
            }
        }
        p.row_mut(i).mapv_inplace(|v| v / z);
        let log_density = mx + z.ln() + log_norm;
        entropy -= log_density / nf;
    }

    // dH/dD_ij for squared distances through the kernel exponent.
    let mut grad = Array2::<f64>::zeros((n, d));
    let coef = 1.0 / (2.0 * nf * h * h);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // Ordered pair (i, j) contributes p_ij·coef·dD_ij; dD_ij/ds_i = 2(s_i − s_j).
            let g = p[[i, j]] * coef * 2.0;
            for k in 0..d {
                let diff = samples[[i, k]] - samples[[j, k]];
                grad[[i, k]] += g * diff;
                grad[[j, k]] -= g * diff;
            }
        }
    }
    if !median_pairs.is_empty() {
        // dH/dh = −(1/N) Σ_i (Σ_j p_ij D_ij / h³ − d/h)
        let mut dh = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                if j != i {
                    acc += p[[i, j]] * sq[[i, j]];
                }
            }
            dh -= (acc / (h * h * h) - df / h) / nf;
        }
        for &(i, j, w) in &median_pairs {
            let dist = sq[[i, j]].sqrt();
            for k in 0..d {
                let u = (samples[[i, k]] - samples[[j, k]]) / dist;
                grad[[i, k]] += dh * w * u;
                grad[[j, k]] -= dh * w * u;
            }
        }
    }
    Ok((entropy, grad))
}

/// Fixed Gaussian random projection of concatenated `(x_t, x1)` pairs to a
/// low-dimensional space for the entropy estimate.
#[derive(Clone, Debug)]
pub struct SbProjection {
    /// `(out_dim, 2·image_len)`.
    matrix: Array2<f64>,
}

pub const SB_PROJECTION_DIM: usize = 64;

impl SbProjection {
    pub fn new(seed: u64, image_len: usize, out_dim: usize) -> Self {
        let mut r = rng::stream(seed, "sb/projection", image_len as u64);
        let std = (1.0 / (2 * image_len) as f64).sqrt();
        let matrix = Array2::from_shape_simple_fn((out_dim, 2 * image_len), || std * rng::normal(&mut r));
        SbProjection { matrix }
    }

    pub fn image_len(&self) -> usize {
        self.matrix.ncols() / 2
    }
}

/// Bridge loss over a batch. Returns the loss and its gradient with respect
/// to each `x1_pred`. With `sigma == 0` the entropy term is skipped.
///
/// Both terms are per-element means: the squared distance is averaged over
/// pixels and the entropy over the projected dimensions.
pub fn sb_loss(
    x_ti: &[Image],
    x1_pred: &[Image],
    t_i: f64,
    sigma: f64,
    projection: &SbProjection,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if x_ti.len() != x1_pred.len() || x_ti.is_empty() {
        return Err(AcmtError::shape(format!(
            "sb_loss batch sizes {} vs {}",
            x_ti.len(),
            x1_pred.len()
        )));
    }
    if !(0.0..=1.0).contains(&t_i) || !(sigma >= 0.0) {
        return Err(AcmtError::invalid(format!("sb_loss needs t in [0,1], sigma >= 0; got {t_i}, {sigma}")));
    }
    for (a, b) in x_ti.iter().zip(x1_pred) {
        a.ensure_same_shape(b, "sb_loss")?;
        a.ensure_same_shape(&x_ti[0], "sb_loss batch")?;
    }
    let n = x_ti.len();
    let len = x_ti[0].len();
    let denom = (n * len) as f64;
    let mut mse = 0.0;
    let mut grads: Vec<Array2<f64>> = Vec::with_capacity(n);
    for (a, b) in x_ti.iter().zip(x1_pred) {
        let diff = b.as_array() - a.as_array();
        mse += diff.iter().map(|v| v * v).sum::<f64>();
        grads.push(diff * (2.0 / denom));
    }
    mse /= denom;
    let coef = 2.0 * sigma * (1.0 - t_i);
    if sigma == 0.0 {
        return Ok((mse, grads));
    }
    if n < MIN_ENTROPY_SAMPLES {
        return Err(AcmtError::DegenerateBatch(format!(
            "sb_loss with sigma > 0 needs a batch of at least {MIN_ENTROPY_SAMPLES}, got {n}"
        )));
    }
    if projection.image_len() != len {
        return Err(AcmtError::shape(format!(
            "projection built for {} pixels, images have {len}",
            projection.image_len()
        )));
    }
    let mut z = Array2::<f64>::zeros((n, 2 * len));
    for (b, (a, x1)) in x_ti.iter().zip(x1_pred).enumerate() {
        z.slice_mut(s![b, ..len]).assign(&ndarray::ArrayView1::from(a.as_slice()));
        z.slice_mut(s![b, len..]).assign(&ndarray::ArrayView1::from(x1.as_slice()));
    }
    let projected = z.dot(&projection.matrix.t());
    let (entropy, d_proj) = entropy_with_grad(&projected, Bandwidth::MedianHeuristic)?;
    let coef = coef / projected.ncols() as f64;
    let loss = mse - coef * entropy;
    // Back through the projection, keeping only the x1 half.
    let d_z = d_proj.dot(&projection.matrix.slice(s![.., len..]));
    let (h, w) = x_ti[0].shape();
    for (b, g) in grads.iter_mut().enumerate() {
        let row = d_z.index_axis(Axis(0), b);
        let row = row.into_shape_with_order((h, w)).expect("image-shaped gradient");
        g.scaled_add(-coef, &row);
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_texture: f64,
    pub lambda_boundary: f64,
    pub lambda_sb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_texture: 1.0,
            lambda_boundary: 0.5,
            lambda_sb: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_texture: f64, lambda_boundary: f64, lambda_sb: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_texture,
            lambda_boundary,
            lambda_sb,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_texture, self.lambda_boundary, self.lambda_sb];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(AcmtError::Config("loss weights must be finite and >= 0".into()));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(AcmtError::Config("loss weights cannot all be zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub texture: f64,
    pub boundary_mr: f64,
    pub boundary_us: f64,
    pub sb_mr: f64,
    pub sb_us: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report and fills `total` via [`total_loss`].
    pub fn compose(
        texture: f64,
        boundary_mr: f64,
        boundary_us: f64,
        sb_mr: f64,
        sb_us: f64,
        weights: &LossWeights,
    ) -> Result<Self> {
        let mut r = LossReport {
            texture,
            boundary_mr,
            boundary_us,
            sb_mr,
            sb_us,
            total: 0.0,
        };
        r.total = total_loss(&r, weights)?;
        Ok(r)
    }

    pub fn boundary(&self) -> f64 {
        0.5 * (self.boundary_mr + self.boundary_us)
    }

    pub fn sb(&self) -> f64 {
        0.5 * (self.sb_mr + self.sb_us)
    }
}

/// `λ_tex·texture + λ_bnd·½(b_mr + b_us) + λ_sb·½(sb_mr + sb_us)`.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("texture", report.texture),
        ("boundary_mr", report.boundary_mr),
        ("boundary_us", report.boundary_us),
        ("sb_mr", report.sb_mr),
        ("sb_us", report.sb_us),
    ] {
        if !v.is_finite() {
            return Err(AcmtError::NonFinite {
                component: name.into(),
                detail: format!("{v}"),
            });
        }
    }
    Ok(weights.lambda_texture * report.texture
        + weights.lambda_boundary * report.boundary()
        + weights.lambda_sb * report.sb())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;
    use rand::Rng;

    fn rand3(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut r = from_seed(seed);
        Array3::from_shape_simple_fn((c, h, w), || r.random_range(-1.0..1.0))
    }

    #[test]
    fn sobel_constant_is_zero() {
        let f = Array3::from_elem((2, 5, 6), 0.7);
        assert!(sobel_apply(&f).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn sobel_ramp_and_step() {
        let ramp = Array3::from_shape_fn((1, 6, 7), |(_, _, x)| x as f64);
        let r = sobel_apply(&ramp).unwrap();
        for y in 1..5 {
            for x in 1..6 {
                assert_eq!(r[[0, y, x]], 8.0);
                assert_eq!(r[[1, y, x]], 0.0);
            }
        }
        let step = Array3::from_shape_fn((1, 6, 8), |(_, _, x)| if x >= 4 { 1.0 } else { 0.0 });
        let r = sobel_apply(&step).unwrap();
        for y in 1..5 {
            for x in 0..8 {
                let nonzero = r[[0, y, x]] != 0.0;
                assert_eq!(nonzero, x == 3 || x == 4, "column {x}");
            }
        }
    }

    #[test]
    fn sobel_rejects_tiny_inputs() {
        assert!(sobel_apply(&Array3::zeros((1, 2, 5))).is_err());
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let heads = LossHeads::new(3, 3, 2);
        let x = rand3(3, 6, 5, 1);
        let y = rand3(3, 6, 5, 2);
        let lhs = (&heads.conv7.apply(&x).unwrap() * &y).sum();
        let rhs = (&x * &heads.conv7.adjoint(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let x = rand3(2, 5, 5, 3);
        let y = rand3(4, 5, 5, 4);
        let lhs = (&sobel_apply(&x).unwrap() * &y).sum();
        let rhs = (&x * &sobel_adjoint(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn texture_identical_is_zero_and_homogeneous() {
        let heads = LossHeads::new(0, 2, 4);
        let f = rand3(2, 4, 4, 5);
        assert_eq!(texture_loss(&f, &f, &heads).unwrap().0, 0.0);
        let g = rand3(2, 4, 4, 6);
        let base = texture_loss(&f, &g, &heads).unwrap().0;
        let a = 2.5;
        let scaled = texture_loss(&(&f * a), &(&g * a), &heads).unwrap().0;
        assert!((scaled - a * a * base).abs() < 1e-10 * scaled.max(1.0));
        assert!(texture_loss(&f, &rand3(2, 4, 5, 1), &heads).is_err());
    }

    #[test]
    fn boundary_equal_and_constant_inputs_are_zero() {
        let heads = LossHeads::new(0, 2, 4);
        let f = rand3(4, 8, 8, 7);
        assert_eq!(boundary_loss(&f, &f, &heads).unwrap().0, 0.0);
        let a = Array3::from_elem((4, 8, 8), 0.3);
        let b = Array3::from_elem((4, 8, 8), -1.2);
        assert!(boundary_loss(&a, &b, &heads).unwrap().0 < 1e-12);
    }

    #[test]
    fn entropy_degenerate_batches() {
        let few = Array2::zeros((3, 2));
        assert!(matches!(
            entropy_estimate(&few, Bandwidth::MedianHeuristic),
            Err(AcmtError::DegenerateBatch(_))
        ));
        let same = Array2::from_elem((6, 2), 0.5);
        assert!(matches!(
            entropy_estimate(&same, Bandwidth::MedianHeuristic),
            Err(AcmtError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn entropy_scaling_shift() {
        let mut r = from_seed(1);
        let s = Array2::from_shape_simple_fn((200, 2), || rng::normal(&mut r));
        let h1 = entropy_estimate(&s, Bandwidth::Fixed(0.4)).unwrap();
        let h2 = entropy_estimate(&(&s * 2.0), Bandwidth::Fixed(0.8)).unwrap();
        assert!((h2 - h1 - 2.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_gradient_matches_finite_difference() {
        let mut r = from_seed(2);
        let s = Array2::from_shape_simple_fn((7, 3), || rng::normal(&mut r));
        for bw in [Bandwidth::Fixed(0.9), Bandwidth::MedianHeuristic] {
            let (_, g) = entropy_with_grad(&s, bw).unwrap();
            for i in 0..7 {
                for k in 0..3 {
                    let e = 1e-6;
                    let mut up = s.clone();
                    up[[i, k]] += e;
                    let mut dn = s.clone();
                    dn[[i, k]] -= e;
                    let fd = (entropy_estimate(&up, bw).unwrap() - entropy_estimate(&dn, bw).unwrap()) / (2.0 * e);
                    assert!((fd - g[[i, k]]).abs() < 1e-6 * fd.abs().max(1.0), "{bw:?} ({i},{k}) {fd} vs {}", g[[i, k]]);
                }
            }
        }
    }

    fn batch(n: usize, seed: u64) -> Vec<Image> {
        let mut r = from_seed(seed);
        (0..n)
            .map(|_| Image::from_fn(4, 4, |_| r.random_range(-1.0..1.0)).unwrap())
            .collect()
    }

    #[test]
    fn sb_loss_zero_sigma_is_mse() {
        let a = batch(3, 1);
        let b = batch(3, 2);
        let proj = SbProjection::new(0, 16, 8);
        let (l, _) = sb_loss(&a, &b, 0.4, 0.0, &proj).unwrap();
        let mse: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x.as_array() - y.as_array()).mapv(|v| v * v).sum())
            .sum::<f64>()
            / 48.0;
        assert!((l - mse).abs() < 1e-15);
        assert_eq!(sb_loss(&a, &a, 0.4, 0.0, &proj).unwrap().0, 0.0);
    }

    #[test]
    fn sb_loss_coefficient_vanishes_at_terminal_time() {
        let a = batch(6, 3);
        let b = batch(6, 4);
        let proj = SbProjection::new(0, 16, 8);
        let mse = sb_loss(&a, &b, 0.5, 0.0, &proj).unwrap().0;
        let near_one = sb_loss(&a, &b, 1.0 - 1e-9, 0.3, &proj).unwrap().0;
        assert!((near_one - mse).abs() < 1e-7);
    }

    #[test]
    fn sb_loss_is_permutation_invariant() {
        let a = batch(6, 5);
        let b = batch(6, 6);
        let proj = SbProjection::new(1, 16, 8);
        let l = sb_loss(&a, &b, 0.2, 0.5, &proj).unwrap().0;
        let perm = [3, 0, 5, 1, 4, 2];
        let pa: Vec<Image> = perm.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<Image> = perm.iter().map(|&i| b[i].clone()).collect();
        let lp = sb_loss(&pa, &pb, 0.2, 0.5, &proj).unwrap().0;
        assert!((l - lp).abs() < 1e-12);
    }

    #[test]
    fn sb_loss_degenerate_batch() {
        let a = batch(3, 7);
        let proj = SbProjection::new(1, 16, 8);
        assert!(matches!(
            sb_loss(&a, &batch(3, 8), 0.2, 0.1, &proj),
            Err(AcmtError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let sel = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let r = LossReport::compose(0.7, 3.0, 5.0, 2.0, 4.0, &sel).unwrap();
        assert_eq!(r.total, 0.7);
        let sb = LossWeights::new(0.0, 0.0, 1.0).unwrap();
        assert_eq!(LossReport::compose(0.7, 3.0, 5.0, 2.0, 4.0, &sb).unwrap().total, 3.0);
        let ones = LossWeights::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(LossReport::compose(0.5, 0.25, 0.25, 0.25, 0.25, &ones).unwrap().total, 1.0);
        let err = LossReport::compose(0.5, f64::NAN, 0.0, 0.0, 0.0, &ones).unwrap_err();
        assert!(err.to_string().contains("boundary_mr"));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 1.0).is_err());
        LossWeights::default().validate().unwrap();
    }
}
