//! Browser demo. The plain Rust functions do the work and are tested
//! natively; the `wasm_bindgen` wrapper only adapts errors and buffers.

use acmt_core::bridge::cfm_interpolate;
use acmt_core::metrics::{chessboard_composite, evaluate_registration, RegistrationScores};
use acmt_core::phantom::{generate_phantom, PairedSample};
use acmt_core::registration::{register, warp, Interpolation, RegistrationConfig};
use acmt_core::{rng, DisplacementField, Image, Result};
use wasm_bindgen::prelude::*;

/// Grey RGBA bytes, mapping `[-1, 1]` to `[0, 255]`.
pub fn to_rgba(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.len() * 4);
    for &v in img.as_slice() {
        let g = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// The MR image with the zone boundary drawn in red.
pub fn boundary_overlay(sample: &PairedSample) -> Vec<u8> {
    let mut out = to_rgba(&sample.mr);
    let (_, w) = sample.shape();
    for (y, x) in sample.boundary_mask.points() {
        let i = 4 * (y * w + x);
        out[i..i + 3].copy_from_slice(&[230, 40, 40]);
    }
    out
}

/// One draw of the bridge state at time `t` between MR (`t = 0`) and US
/// (`t = 1`) of the same phantom.
pub fn bridge_state(sample: &PairedSample, t: f64, sigma: f64, noise_seed: u64) -> Result<Image> {
    let mut r = rng::stream(noise_seed, "web/bridge", 0);
    cfm_interpolate(&sample.mr, &sample.us, 0.0, 1.0, t, sigma, &mut r)
}

pub struct RegistrationView {
    pub composite: Image,
    pub scores: RegistrationScores,
}

/// Chessboard of the US image against the MR image, warped by the SSD
/// registration field (or left as is when `registered` is false).
pub fn registration_view(sample: &PairedSample, block: usize, registered: bool) -> Result<RegistrationView> {
    let (h, w) = sample.shape();
    let field = if registered {
        register(&sample.us, &sample.mr, &RegistrationConfig::default())?
    } else {
        DisplacementField::zeros(h, w)
    };
    let warped = warp(&sample.mr, &field, Interpolation::Bilinear)?;
    Ok(RegistrationView {
        composite: chessboard_composite(&sample.us, &warped, block)?,
        scores: evaluate_registration(&field, &sample.zone_mask, &sample.us_zone_mask())?,
    })
}

fn js(e: acmt_core::AcmtError) -> JsError {
    JsError::new(&e.to_string())
}

/// One phantom pair held by the page.
#[wasm_bindgen]
pub struct Demo {
    sample: PairedSample,
    dsc: f64,
    asd: f64,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32) -> std::result::Result<Demo, JsError> {
        let s = size as usize;
        let sample = generate_phantom(u64::from(seed), (s, s)).map_err(js)?;
        Ok(Demo {
            sample,
            dsc: f64::NAN,
            asd: f64::NAN,
        })
    }

    pub fn size(&self) -> u32 {
        self.sample.shape().0 as u32
    }

    pub fn mr_rgba(&self) -> Vec<u8> {
        boundary_overlay(&self.sample)
    }

    pub fn us_rgba(&self) -> Vec<u8> {
        to_rgba(&self.sample.us)
    }

    pub fn bridge_rgba(&self, t: f64, sigma: f64, noise_seed: u32) -> std::result::Result<Vec<u8>, JsError> {
        let x = bridge_state(&self.sample, t, sigma, u64::from(noise_seed)).map_err(js)?;
        Ok(to_rgba(&x))
    }

    /// Composite image; the scores are read back with `dsc()` / `asd()`.
    pub fn chessboard_rgba(&mut self, block: u32, registered: bool) -> std::result::Result<Vec<u8>, JsError> {
        let v = registration_view(&self.sample, block as usize, registered).map_err(js)?;
        self.dsc = v.scores.dsc;
        self.asd = v.scores.asd;
        Ok(to_rgba(&v.composite))
    }

    pub fn dsc(&self) -> f64 {
        self.dsc
    }

    pub fn asd(&self) -> f64 {
        self.asd
    }
}
