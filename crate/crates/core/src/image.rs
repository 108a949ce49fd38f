//! Core raster types shared by every stage of the pipeline.
//!
//! All arrays are row-major with shape `(H, W)`; displacement fields carry an
//! extra leading channel axis ordered `[dy, dx]`.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{AcmtError, Result};

/// Single-channel intensity image. Generated and translated images live in
/// `[-1, 1]`; intermediate bridge states may carry small excursions from
/// injected noise, so only finiteness is enforced.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Array2<f64>);

impl Image {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(AcmtError::invalid("image shape must be positive"));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(AcmtError::NonFinite {
                component: "image".into(),
                detail: format!("pixel value {bad}"),
            });
        }
        Ok(Image(pixels))
    }

    /// Wraps an array that is known to be finite (internal producers only).
    pub(crate) fn from_array_unchecked(pixels: Array2<f64>) -> Self {
        debug_assert!(pixels.iter().all(|v| v.is_finite()));
        Image(pixels)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image(Array2::zeros((h, w)))
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Image(Array2::from_elem((h, w), value))
    }

    pub fn from_fn(h: usize, w: usize, f: impl FnMut((usize, usize)) -> f64) -> Result<Self> {
        Image::new(Array2::from_shape_fn((h, w), f))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0[[y, x]]
    }

    /// Contiguous row-major pixel slice.
    pub fn as_slice(&self) -> &[f64] {
        self.0
            .as_slice()
            .expect("images are always stored in standard layout")
    }

    pub fn clamp_unit(&self) -> Image {
        Image(self.0.mapv(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    pub(crate) fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AcmtError::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Binary segmentation mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(Array2<u8>);

impl BinaryMask {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(AcmtError::invalid("mask values must be 0 or 1"));
        }
        Ok(BinaryMask(values))
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut((usize, usize)) -> bool) -> Self {
        BinaryMask(Array2::from_shape_fn((h, w), |p| u8::from(f(p))))
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask(Array2::zeros((h, w)))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0[[y, x]] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.0[[y, x]] = u8::from(on);
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Pixels that stay on only if all four axis neighbours are on; pixels
    /// outside the image count as off.
    pub fn erode4(&self) -> BinaryMask {
        let (h, w) = self.shape();
        BinaryMask::from_fn(h, w, |(y, x)| {
            self.get(y, x)
                && y > 0
                && x > 0
                && y + 1 < h
                && x + 1 < w
                && self.get(y - 1, x)
                && self.get(y + 1, x)
                && self.get(y, x - 1)
                && self.get(y, x + 1)
        })
    }

    /// One-pixel boundary band: the mask minus its 4-neighbourhood erosion.
    pub fn boundary(&self) -> BinaryMask {
        let eroded = self.erode4();
        let (h, w) = self.shape();
        BinaryMask::from_fn(h, w, |(y, x)| self.get(y, x) && !eroded.get(y, x))
    }

    pub fn xor(&self, other: &BinaryMask) -> BinaryMask {
        let (h, w) = self.shape();
        BinaryMask::from_fn(h, w, |(y, x)| self.get(y, x) != other.get(y, x))
    }

    /// Coordinates of all set pixels in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.0
            .indexed_iter()
            .filter(|(_, &v)| v == 1)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let pts = self.points();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        let (sy, sx) = pts
            .iter()
            .fold((0.0, 0.0), |(a, b), &(y, x)| (a + y as f64, b + x as f64));
        Some((sy / n, sx / n))
    }

    /// Sizes of the 4-connected components, largest first.
    pub fn component_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = label_components(self)
            .into_iter()
            .map(|c| c.len())
            .collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }

    /// Keeps only the largest 4-connected component.
    pub fn largest_component(&self) -> BinaryMask {
        let (h, w) = self.shape();
        let mut out = BinaryMask::empty(h, w);
        if let Some(best) = label_components(self).into_iter().max_by_key(|c| c.len()) {
            for (y, x) in best {
                out.set(y, x, true);
            }
        }
        out
    }

    pub fn to_image(&self) -> Image {
        Image(self.0.mapv(f64::from))
    }
}

fn label_components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.shape();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut comps = Vec::new();
    for (y0, x0) in mask.points() {
        if seen[[y0, x0]] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![(y0, x0)];
        seen[[y0, x0]] = true;
        while let Some((y, x)) = stack.pop() {
            comp.push((y, x));
            let mut visit = |ny: usize, nx: usize| {
                if mask.get(ny, nx) && !seen[[ny, nx]] {
                    seen[[ny, nx]] = true;
                    stack.push((ny, nx));
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
        comps.push(comp);
    }
    comps
}

/// Dense per-pixel displacement in pixels, shape `(2, H, W)` with channel
/// order `[dy, dx]`. Used for backward warping: `out(p) = in(p + u(p))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField(Array3<f64>);

impl DisplacementField {
    pub fn new(u: Array3<f64>) -> Result<Self> {
        if u.dim().0 != 2 {
            return Err(AcmtError::shape(format!(
                "displacement field needs 2 channels, got {}",
                u.dim().0
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(AcmtError::NonFinite {
                component: "displacement field".into(),
                detail: "non-finite offset".into(),
            });
        }
        Ok(DisplacementField(u))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        DisplacementField(Array3::zeros((2, h, w)))
    }

    pub fn constant(h: usize, w: usize, dy: f64, dx: f64) -> Self {
        let mut u = Array3::zeros((2, h, w));
        u.index_axis_mut(Axis(0), 0).fill(dy);
        u.index_axis_mut(Axis(0), 1).fill(dx);
        DisplacementField(u)
    }

    pub(crate) fn from_array_unchecked(u: Array3<f64>) -> Self {
        DisplacementField(u)
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dim();
        (h, w)
    }

    pub fn dy(&self, y: usize, x: usize) -> f64 {
        self.0[[0, y, x]]
    }

    pub fn dx(&self, y: usize, x: usize) -> f64 {
        self.0[[1, y, x]]
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array3<f64> {
        self.0
    }

    pub fn max_magnitude(&self) -> f64 {
        let (h, w) = self.shape();
        let mut m = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                m = m.max(self.dy(y, x).hypot(self.dx(y, x)));
            }
        }
        m
    }

    pub fn mean_magnitude(&self) -> f64 {
        let (h, w) = self.shape();
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += self.dy(y, x).hypot(self.dx(y, x));
            }
        }
        s / (h * w) as f64
    }

    /// Sum of squared forward differences of both channels.
    pub fn smoothness_energy(&self) -> f64 {
        let (h, w) = self.shape();
        let mut e = 0.0;
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let v = self.0[[c, y, x]];
                    if y + 1 < h {
                        e += (self.0[[c, y + 1, x]] - v).powi(2);
                    }
                    if x + 1 < w {
                        e += (self.0[[c, y, x + 1]] - v).powi(2);
                    }
                }
            }
        }
        e
    }
}
