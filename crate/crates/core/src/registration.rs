//! Mono-modal deformable registration used as the downstream consumer of the
//! translated images: coarse-to-fine gradient descent on
//! `SSD(fixed, moving∘u) + λ·‖∇u‖²` with backtracking, plus backward warping.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{AcmtError, Result};
use crate::image::{BinaryMask, DisplacementField, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub iters_per_level: usize,
    /// Initial step applied to the per-pixel force `n·∂E/∂u`.
    pub step_size: f64,
    /// Weight of the diffusion regulariser.
    pub smooth_weight: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            iters_per_level: 100,
            step_size: 1.0,
            smooth_weight: 0.1,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iters_per_level == 0 {
            return Err(AcmtError::Config(
                "registration levels and iters_per_level must be positive".into(),
            ));
        }
        if !(self.step_size > 0.0) || !(self.smooth_weight > 0.0) {
            return Err(AcmtError::Config(
                "registration step_size and smooth_weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Energy history per pyramid level (coarsest first), one value per accepted
/// iteration plus the starting energy.
#[derive(Clone, Debug, Default)]
pub struct RegistrationTrace {
    pub energies: Vec<Vec<f64>>,
}

fn sample_bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear sample and its partial derivatives with respect to `(y, x)`.
/// Derivatives vanish where the clamp is active.
fn sample_bilinear_grad(img: &Array2<f64>, y: f64, x: f64) -> (f64, f64, f64) {
    let (h, w) = img.dim();
    let y_in = y >= 0.0 && y <= (h - 1) as f64;
    let x_in = x >= 0.0 && x <= (w - 1) as f64;
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
    let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let (a, b, c, d) = (img[[y0, x0]], img[[y0, x1]], img[[y1, x0]], img[[y1, x1]]);
    let top = a * (1.0 - fx) + b * fx;
    let bottom = c * (1.0 - fx) + d * fx;
    let v = top * (1.0 - fy) + bottom * fy;
    let gy = if y_in && h > 1 { bottom - top } else { 0.0 };
    let gx = if x_in && w > 1 {
        (b - a) * (1.0 - fy) + (d - c) * fy
    } else {
        0.0
    };
    (v, gy, gx)
}

fn warp_array(img: &Array2<f64>, u: &Array3<f64>, interp: Interpolation) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let qy = y as f64 + u[[0, y, x]];
        let qx = x as f64 + u[[1, y, x]];
        match interp {
            Interpolation::Bilinear => sample_bilinear(img, qy, qx),
            Interpolation::Nearest => {
                let ny = qy.round().clamp(0.0, (h - 1) as f64) as usize;
                let nx = qx.round().clamp(0.0, (w - 1) as f64) as usize;
                img[[ny, nx]]
            }
        }
    })
}

/// Backward warp with border clamping: `out(p) = image(p + u(p))`.
pub fn warp(image: &Image, field: &DisplacementField, interpolation: Interpolation) -> Result<Image> {
    if image.shape() != field.shape() {
        return Err(AcmtError::shape(format!(
            "warp: image {:?} vs field {:?}",
            image.shape(),
            field.shape()
        )));
    }
    Ok(Image::from_array_unchecked(warp_array(
        image.as_array(),
        field.as_array(),
        interpolation,
    )))
}

/// Nearest-neighbour warp of a binary mask; output stays binary.
pub fn warp_mask(mask: &BinaryMask, field: &DisplacementField) -> Result<BinaryMask> {
    if mask.shape() != field.shape() {
        return Err(AcmtError::shape(format!(
            "warp: mask {:?} vs field {:?}",
            mask.shape(),
            field.shape()
        )));
    }
    let (h, w) = mask.shape();
    let u = field.as_array();
    Ok(BinaryMask::from_fn(h, w, |(y, x)| {
        let ny = (y as f64 + u[[0, y, x]]).round().clamp(0.0, (h - 1) as f64) as usize;
        let nx = (x as f64 + u[[1, y, x]]).round().clamp(0.0, (w - 1) as f64) as usize;
        mask.get(ny, nx)
    }))
}

fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let ys = [2 * y, (2 * y + 1).min(h - 1)];
        let xs = [2 * x, (2 * x + 1).min(w - 1)];
        ys.iter()
            .flat_map(|&yy| xs.iter().map(move |&xx| img[[yy, xx]]))
            .sum::<f64>()
            / 4.0
    })
}

/// Bilinear upsampling of a coarse field onto `(h, w)`, with vectors doubled.
fn upsample_field(u: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (_, ch, cw) = u.dim();
    let mut out = Array3::zeros((2, h, w));
    for c in 0..2 {
        let coarse = u.index_axis(ndarray::Axis(0), c).to_owned();
        for y in 0..h {
            for x in 0..w {
                // Pixel centres: fine index i sits at coarse (i + 0.5) / 2 - 0.5.
                let cy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (ch - 1) as f64);
                let cx = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (cw - 1) as f64);
                out[[c, y, x]] = 2.0 * sample_bilinear(&coarse, cy, cx);
            }
        }
    }
    out
}

fn smoothness(u: &Array3<f64>) -> f64 {
    DisplacementField::from_array_unchecked(u.clone()).smoothness_energy()
}

fn energy(fixed: &Array2<f64>, moving: &Array2<f64>, u: &Array3<f64>, lambda: f64) -> f64 {
    let n = fixed.len() as f64;
    let warped = warp_array(moving, u, Interpolation::Bilinear);
    let ssd: f64 = fixed
        .iter()
        .zip(warped.iter())
        .map(|(f, m)| (m - f).powi(2))
        .sum();
    (ssd + lambda * smoothness(u)) / n
}

/// Per-pixel force `n·∂E/∂u`.
fn force(fixed: &Array2<f64>, moving: &Array2<f64>, u: &Array3<f64>, lambda: f64) -> Array3<f64> {
    let (h, w) = fixed.dim();
    let mut g = Array3::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let (m, gy, gx) =
                sample_bilinear_grad(moving, y as f64 + u[[0, y, x]], x as f64 + u[[1, y, x]]);
            let r = 2.0 * (m - fixed[[y, x]]);
            g[[0, y, x]] = r * gy;
            g[[1, y, x]] = r * gx;
        }
    }
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let v = u[[c, y, x]];
                let mut s = 0.0;
                if y > 0 {
                    s += v - u[[c, y - 1, x]];
                }
                if y + 1 < h {
                    s += v - u[[c, y + 1, x]];
                }
                if x > 0 {
                    s += v - u[[c, y, x - 1]];
                }
                if x + 1 < w {
                    s += v - u[[c, y, x + 1]];
                }
                g[[c, y, x]] += 2.0 * lambda * s;
            }
        }
    }
    g
}

pub fn register(fixed: &Image, moving: &Image, config: &RegistrationConfig) -> Result<DisplacementField> {
    register_with_trace(fixed, moving, config).map(|(u, _)| u)
}

pub fn register_with_trace(
    fixed: &Image,
    moving: &Image,
    config: &RegistrationConfig,
) -> Result<(DisplacementField, RegistrationTrace)> {
    config.validate()?;
    fixed.ensure_same_shape(moving, "register")?;
    let mut pyramid = vec![(fixed.as_array().clone(), moving.as_array().clone())];
    for _ in 1..config.levels {
        let (f, m) = pyramid.last().expect("pyramid is non-empty");
        if f.nrows() < 8 || f.ncols() < 8 {
            break;
        }
        let next = (downsample(f), downsample(m));
        pyramid.push(next);
    }

    let mut trace = RegistrationTrace::default();
    let mut u: Option<Array3<f64>> = None;
    for (f, m) in pyramid.iter().rev() {
        let (h, w) = f.dim();
        let mut cur = match u.take() {
            None => Array3::zeros((2, h, w)),
            Some(coarse) => upsample_field(&coarse, h, w),
        };
        let mut e = energy(f, m, &cur, config.smooth_weight);
        let mut energies = vec![e];
        let mut step = config.step_size;
        for _ in 0..config.iters_per_level {
            let g = force(f, m, &cur, config.smooth_weight);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AcmtError::NonFinite {
                    component: "registration force".into(),
                    detail: format!("level {}x{}, energy {e}", h, w),
                });
            }
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &cur - &(&g * step);
                let ce = energy(f, m, &cand, config.smooth_weight);
                if ce.is_finite() && ce <= e {
                    cur = cand;
                    e = ce;
                    accepted = true;
                    step *= 1.25;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            energies.push(e);
        }
        if !e.is_finite() {
            return Err(AcmtError::NonFinite {
                component: "registration energy".into(),
                detail: format!("level {h}x{w}"),
            });
        }
        log::debug!("registration level {h}x{w}: energy {:.6} -> {:.6}", energies[0], e);
        trace.energies.push(energies);
        u = Some(cur);
    }
    let field = DisplacementField::new(u.expect("at least one pyramid level"))?;
    Ok((field, trace))
}
