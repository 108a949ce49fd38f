//! Synthetic paired MR-like / US-like phantoms with shared ground-truth
//! anatomy.
//!
//! One random geometry (a smooth star-shaped gland with an inner zone) is
//! rendered twice: once as an MR-like slice (piecewise-constant tissue levels,
//! smooth bias, Gaussian noise) in the anatomy frame, and once as a US-like
//! slice (Rayleigh speckle, beam-facing boundary echoes, depth attenuation,
//! log compression) in a frame deformed by a smooth ground-truth field.
//!
//! Masks are stored in the MR (anatomy) frame. The US-frame mask is
//! `warp(zone_mask, gt_field, nearest)`, see [`PairedSample::us_zone_mask`].

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AcmtError, Result};
use crate::image::{BinaryMask, DisplacementField, Image};
use crate::registration::warp_mask;
use crate::rng::{self, SeededRng};

pub const MIN_SIDE: usize = 32;
pub const MIN_ZONE_FRACTION: f64 = 0.08;
pub const MAX_ZONE_FRACTION: f64 = 0.45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Upper bound on the ground-truth displacement magnitude, in pixels.
    pub max_displacement: f64,
    /// Standard deviation of the additive MR noise.
    pub mr_noise: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            max_displacement: 5.0,
            mr_noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub mr: Image,
    pub us: Image,
    pub boundary_mask: BinaryMask,
    pub zone_mask: BinaryMask,
    pub gt_field: DisplacementField,
    pub seed: u64,
}

impl PairedSample {
    pub fn shape(&self) -> (usize, usize) {
        self.mr.shape()
    }

    /// Zone mask carried into the US frame by the ground-truth deformation.
    pub fn us_zone_mask(&self) -> BinaryMask {
        warp_mask(&self.zone_mask, &self.gt_field).expect("sample arrays share one shape")
    }

    pub fn check_invariants(&self) -> Result<()> {
        let shape = self.mr.shape();
        if self.us.shape() != shape
            || self.zone_mask.shape() != shape
            || self.boundary_mask.shape() != shape
            || self.gt_field.shape() != shape
        {
            return Err(AcmtError::shape("paired sample arrays differ in shape"));
        }
        if self.boundary_mask != self.zone_mask.boundary() {
            return Err(AcmtError::invalid(
                "boundary mask is not zone minus its 4-erosion",
            ));
        }
        let comps = self.zone_mask.component_sizes();
        if comps.len() != 1 {
            return Err(AcmtError::invalid(format!(
                "zone mask has {} components",
                comps.len()
            )));
        }
        let frac = comps[0] as f64 / (shape.0 * shape.1) as f64;
        if !(MIN_ZONE_FRACTION..=MAX_ZONE_FRACTION).contains(&frac) {
            return Err(AcmtError::invalid(format!("zone area fraction {frac:.3}")));
        }
        Ok(())
    }
}

/// Random gland geometry in continuous pixel coordinates.
struct Geometry {
    cy: f64,
    cx: f64,
    r0: f64,
    harmonics: [(f64, f64); 3],
    inner_cy: f64,
    inner_cx: f64,
    inner_frac: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Zone,
    Inner,
}

impl Geometry {
    fn sample(rng: &mut SeededRng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let cy = h as f64 / 2.0 + rng.random_range(-0.08..0.08) * h as f64;
        let cx = w as f64 / 2.0 + rng.random_range(-0.08..0.08) * w as f64;
        let r0 = rng.random_range(0.2..0.28) * side;
        let mut harmonics = [(0.0, 0.0); 3];
        for hm in &mut harmonics {
            *hm = (rng.random_range(0.0..0.08), rng.random_range(0.0..2.0 * PI));
        }
        let inner_frac = rng.random_range(0.4..0.55);
        let inner_cy = cy - rng.random_range(0.0..0.2) * r0;
        let inner_cx = cx + rng.random_range(-0.1..0.1) * r0;
        Geometry {
            cy,
            cx,
            r0,
            harmonics,
            inner_cy,
            inner_cx,
            inner_frac,
        }
    }

    fn radius(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, phase))| a * ((k as f64 + 2.0) * theta + phase).cos())
            .sum();
        self.r0 * (1.0 + wobble)
    }

    /// Radial signed distance to the gland outline (negative inside).
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        dy.hypot(dx) - self.radius(dy.atan2(dx))
    }

    /// Vertical component of the outward radial direction, the proxy for the
    /// boundary normal seen by a beam travelling along +y.
    fn normal_y(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let r = dy.hypot(dx);
        if r < 1e-9 {
            0.0
        } else {
            dy / r
        }
    }

    fn tissue(&self, y: f64, x: f64) -> Tissue {
        if self.signed_distance(y, x) >= 0.0 {
            return Tissue::Background;
        }
        let (dy, dx) = (y - self.inner_cy, x - self.inner_cx);
        let theta = dy.atan2(dx);
        if dy.hypot(dx) < self.inner_frac * self.radius(theta) {
            Tissue::Inner
        } else {
            Tissue::Zone
        }
    }
}

struct Levels {
    background: f64,
    zone: f64,
    inner: f64,
}

impl Levels {
    fn of(&self, t: Tissue) -> f64 {
        match t {
            Tissue::Background => self.background,
            Tissue::Zone => self.zone,
            Tissue::Inner => self.inner,
        }
    }
}

pub fn generate_phantom(seed: u64, size: (usize, usize)) -> Result<PairedSample> {
    generate_phantom_with(seed, size, &PhantomConfig::default())
}

pub fn generate_phantom_with(
    seed: u64,
    size: (usize, usize),
    config: &PhantomConfig,
) -> Result<PairedSample> {
    let (h, w) = size;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(AcmtError::invalid(format!(
            "phantom size {h}x{w} below the {MIN_SIDE}x{MIN_SIDE} minimum"
        )));
    }
    if !(config.max_displacement >= 0.0) {
        return Err(AcmtError::invalid("max_displacement must be non-negative"));
    }
    let mut geo_rng = rng::stream(seed, "phantom/geometry", 0);
    let geo = Geometry::sample(&mut geo_rng, h, w);

    let zone_mask = BinaryMask::from_fn(h, w, |(y, x)| {
        geo.tissue(y as f64, x as f64) != Tissue::Background
    })
    .largest_component();
    let boundary_mask = zone_mask.boundary();

    let gt_field = smooth_field(&mut rng::stream(seed, "phantom/field", 0), h, w, config);
    let mr = render_mr(&geo, &mut rng::stream(seed, "phantom/mr", 0), h, w, config);
    let us = render_us(&geo, &gt_field, &mut rng::stream(seed, "phantom/us", 0), h, w);

    let sample = PairedSample {
        mr,
        us,
        boundary_mask,
        zone_mask,
        gt_field,
        seed,
    };
    sample.check_invariants()?;
    Ok(sample)
}

/// Smooth deformation built from a few Gaussian bumps, rescaled so the peak
/// magnitude lands in `[0.5, 1] * max_displacement`.
fn smooth_field(rng: &mut SeededRng, h: usize, w: usize, config: &PhantomConfig) -> DisplacementField {
    let side = h.min(w) as f64;
    let mut u = Array3::<f64>::zeros((2, h, w));
    for _ in 0..3 {
        let by = rng.random_range(0.2..0.8) * h as f64;
        let bx = rng.random_range(0.2..0.8) * w as f64;
        let width = rng.random_range(0.25..0.45) * side;
        let ay = rng::normal(rng);
        let ax = rng::normal(rng);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                let g = (-d2 / (2.0 * width * width)).exp();
                u[[0, y, x]] += ay * g;
                u[[1, y, x]] += ax * g;
            }
        }
    }
    let field = DisplacementField::from_array_unchecked(u);
    let peak = field.max_magnitude();
    let target = rng.random_range(0.5..1.0) * config.max_displacement;
    if peak < 1e-12 {
        return DisplacementField::zeros(h, w);
    }
    let scale = target / peak;
    DisplacementField::from_array_unchecked(field.into_array().mapv(|v| v * scale))
}

fn render_mr(geo: &Geometry, rng: &mut SeededRng, h: usize, w: usize, config: &PhantomConfig) -> Image {
    let levels = Levels {
        background: rng.random_range(-0.55..-0.35),
        zone: rng.random_range(0.25..0.45),
        inner: rng.random_range(-0.05..0.15),
    };
    let (fy, fx) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
    let (py, px) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let bias_amp = rng.random_range(0.04..0.1);
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // 2x2 supersampling softens the staircase outline.
            let mut v = 0.0;
            for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                v += levels.of(geo.tissue(y as f64 + oy, x as f64 + ox));
            }
            v /= 4.0;
            let bias = bias_amp
                * ((2.0 * PI * fy * y as f64 / h as f64 + py).sin()
                    * (2.0 * PI * fx * x as f64 / w as f64 + px).cos());
            out[[y, x]] = (v + bias + config.mr_noise * rng::normal(rng)).clamp(-1.0, 1.0);
        }
    }
    Image::from_array_unchecked(out)
}

fn render_us(
    geo: &Geometry,
    field: &DisplacementField,
    rng: &mut SeededRng,
    h: usize,
    w: usize,
) -> Image {
    let echo = Levels {
        background: rng.random_range(0.55..0.7),
        zone: rng.random_range(0.2..0.3),
        inner: rng.random_range(0.35..0.45),
    };
    let rim_gain = rng.random_range(0.7..1.0);
    let attenuation = rng.random_range(0.6..1.0);
    let speckle = rayleigh_speckle(rng, h, w);

    const RIM_WIDTH: f64 = 1.2;
    const COMPRESSION: f64 = 10.0;
    let reference = (1.0 + COMPRESSION * 1.6f64).ln();

    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let qy = y as f64 + field.dy(y, x);
            let qx = x as f64 + field.dx(y, x);
            let mut e = echo.of(geo.tissue(qy, qx));
            let s = geo.signed_distance(qy, qx);
            let facing = 0.25 + 0.75 * geo.normal_y(qy, qx).abs();
            e += rim_gain * facing * (-s * s / (2.0 * RIM_WIDTH * RIM_WIDTH)).exp();
            let depth = (-attenuation * y as f64 / h as f64).exp();
            let amplitude = e * depth * speckle[[y, x]];
            let v = (1.0 + COMPRESSION * amplitude).ln() / reference;
            out[[y, x]] = (2.0 * v - 1.0).clamp(-1.0, 1.0);
        }
    }
    Image::from_array_unchecked(out)
}

/// Unit-mean Rayleigh amplitude field from a complex Gaussian field blurred by
/// a small point-spread function.
fn rayleigh_speckle(rng: &mut SeededRng, h: usize, w: usize) -> Array2<f64> {
    let re = Array2::from_shape_simple_fn((h, w), || rng::normal(rng));
    let im = Array2::from_shape_simple_fn((h, w), || rng::normal(rng));
    let kernel = [0.25, 0.5, 0.25];
    let blur = |a: &Array2<f64>| {
        let mut tmp = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                tmp[[y, x]] = (0..3)
                    .map(|k| kernel[k] * a[[y, (x + k).saturating_sub(1).min(w - 1)]])
                    .sum();
            }
        }
        let mut out = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] = (0..3)
                    .map(|k| kernel[k] * tmp[[(y + k).saturating_sub(1).min(h - 1), x]])
                    .sum();
            }
        }
        out
    };
    let (re, im) = (blur(&re), blur(&im));
    let mut amp = Array2::from_shape_fn((h, w), |p| re[p].hypot(im[p]));
    let mean = amp.mean().unwrap_or(1.0).max(1e-12);
    amp.mapv_inplace(|v| v / mean);
    amp
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl Augmentation {
    pub const ALL: [Augmentation; 5] = [
        Augmentation::FlipH,
        Augmentation::FlipV,
        Augmentation::Rot90,
        Augmentation::Rot180,
        Augmentation::Rot270,
    ];

    fn needs_square(self) -> bool {
        matches!(self, Augmentation::Rot90 | Augmentation::Rot270)
    }

    /// Source index in the input for output index `(y, x)`, for an input of
    /// shape `(h, w)`.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Augmentation::FlipH => (y, w - 1 - x),
            Augmentation::FlipV => (h - 1 - y, x),
            // Counter-clockwise quarter turn.
            Augmentation::Rot90 => (x, w - 1 - y),
            Augmentation::Rot180 => (h - 1 - y, w - 1 - x),
            Augmentation::Rot270 => (h - 1 - x, y),
        }
    }

    fn out_shape(self, h: usize, w: usize) -> (usize, usize) {
        if self.needs_square() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// How a displacement vector `(dy, dx)` transforms under the coordinate
    /// change.
    fn rotate_vector(self, dy: f64, dx: f64) -> (f64, f64) {
        match self {
            Augmentation::FlipH => (dy, -dx),
            Augmentation::FlipV => (-dy, dx),
            Augmentation::Rot90 => (-dx, dy),
            Augmentation::Rot180 => (-dy, -dx),
            Augmentation::Rot270 => (dx, -dy),
        }
    }

    fn apply<T: Copy>(self, a: &Array2<T>) -> Array2<T> {
        let (h, w) = a.dim();
        Array2::from_shape_fn(self.out_shape(h, w), |(y, x)| a[self.source(y, x, h, w)])
    }
}

pub fn augment_image(image: &Image, op: Augmentation) -> Image {
    Image::from_array_unchecked(op.apply(image.as_array()))
}

pub fn augment_pair(sample: &PairedSample, op: Augmentation) -> Result<PairedSample> {
    let (h, w) = sample.shape();
    if op.needs_square() && h != w {
        return Err(AcmtError::invalid(format!(
            "{op:?} needs a square image, got {h}x{w}"
        )));
    }
    let mask = |m: &BinaryMask| BinaryMask::new(op.apply(m.as_array())).expect("binary in, binary out");
    let u = sample.gt_field.as_array();
    let (oh, ow) = op.out_shape(h, w);
    let mut field = Array3::<f64>::zeros((2, oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = op.source(y, x, h, w);
            let (dy, dx) = op.rotate_vector(u[[0, sy, sx]], u[[1, sy, sx]]);
            field[[0, y, x]] = dy;
            field[[1, y, x]] = dx;
        }
    }
    Ok(PairedSample {
        mr: augment_image(&sample.mr, op),
        us: augment_image(&sample.us, op),
        boundary_mask: mask(&sample.boundary_mask),
        zone_mask: mask(&sample.zone_mask),
        gt_field: DisplacementField::from_array_unchecked(field),
        seed: sample.seed,
    })
}

/// Deterministic batch generation: sample `i` uses seed `base_seed + i`.
pub fn generate_set(base_seed: u64, count: usize, size: (usize, usize)) -> Result<Vec<PairedSample>> {
    (0..count as u64)
        .map(|i| generate_phantom(base_seed + i, size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_sizes() {
        assert!(generate_phantom(1, (16, 64)).is_err());
        assert!(generate_phantom(1, (64, 31)).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(7, (64, 64)).unwrap();
        let b = generate_phantom(7, (64, 64)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let a = generate_phantom(7, (64, 64)).unwrap();
        let b = generate_phantom(8, (64, 64)).unwrap();
        assert!(a.zone_mask.xor(&b.zone_mask).count() >= 1);
    }

    #[test]
    fn boundary_is_zone_xor_erosion() {
        let s = generate_phantom(3, (48, 64)).unwrap();
        assert_eq!(s.boundary_mask, s.zone_mask.xor(&s.zone_mask.erode4()));
    }

    #[test]
    fn field_respects_bound() {
        for seed in 0..20 {
            let s = generate_phantom(seed, (64, 64)).unwrap();
            assert!(s.gt_field.max_magnitude() <= 5.0 + 1e-9);
        }
        let cfg = PhantomConfig {
            max_displacement: 2.0,
            ..Default::default()
        };
        let s = generate_phantom_with(0, (64, 64), &cfg).unwrap();
        assert!(s.gt_field.max_magnitude() <= 2.0 + 1e-9);
    }

    #[test]
    fn images_in_unit_range() {
        let s = generate_phantom(11, (64, 64)).unwrap();
        for v in s.mr.as_slice().iter().chain(s.us.as_slice()) {
            assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn flip_h_is_involution() {
        let s = generate_phantom(5, (64, 64)).unwrap();
        let twice = augment_pair(&augment_pair(&s, Augmentation::FlipH).unwrap(), Augmentation::FlipH).unwrap();
        assert_eq!(twice, s);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let s = generate_phantom(6, (64, 64)).unwrap();
        let mut t = s.clone();
        for _ in 0..4 {
            t = augment_pair(&t, Augmentation::Rot90).unwrap();
        }
        assert_eq!(t, s);
    }

    #[test]
    fn rot90_then_rot270_is_identity() {
        let s = generate_phantom(9, (64, 64)).unwrap();
        let t = augment_pair(&augment_pair(&s, Augmentation::Rot90).unwrap(), Augmentation::Rot270).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn flip_h_moves_centroid() {
        let s = generate_phantom(12, (64, 64)).unwrap();
        let (cy, cx) = s.zone_mask.centroid().unwrap();
        let f = augment_pair(&s, Augmentation::FlipH).unwrap();
        let (fy, fx) = f.zone_mask.centroid().unwrap();
        assert!((fy - cy).abs() < 1e-12);
        assert!((fx - (63.0 - cx)).abs() < 1e-9);
    }

    #[test]
    fn quarter_turn_rejects_non_square() {
        let s = generate_phantom(1, (48, 64)).unwrap();
        assert!(augment_pair(&s, Augmentation::Rot90).is_err());
        assert!(augment_pair(&s, Augmentation::Rot270).is_err());
        assert!(augment_pair(&s, Augmentation::Rot180).is_ok());
    }

    #[test]
    fn augmentation_commutes_with_mask_warp() {
        let s = generate_phantom(21, (64, 64)).unwrap();
        for op in Augmentation::ALL {
            let a = augment_pair(&s, op).unwrap();
            let warped_then_aug = BinaryMask::new(op.apply(s.us_zone_mask().as_array())).unwrap();
            assert_eq!(a.us_zone_mask(), warped_then_aug, "{op:?}");
        }
    }
}
