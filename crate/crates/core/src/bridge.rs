//! Schrödinger-bridge primitives under the conditional-flow-matching
//! discretisation: the Gaussian bridge between two states, the one-step
//! transition toward a predicted terminal state, and the timestep pool.

use ndarray::Zip;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AcmtError, Result};
use crate::image::Image;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    /// Variance scale of the reference Wiener process (intensity² per unit
    /// time). Zero gives a deterministic bridge.
    pub sigma: f64,
    /// Strictly increasing times in `[0, 1)` starting at 0. The terminal time
    /// 1 is implicit.
    pub timestep_pool: Vec<f64>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            sigma: 0.01,
            timestep_pool: uniform_pool(5),
        }
    }
}

/// `{0, 1/T, …, (T-1)/T}`.
pub fn uniform_pool(steps: usize) -> Vec<f64> {
    (0..steps).map(|i| i as f64 / steps as f64).collect()
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(AcmtError::Config(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        let pool = &self.timestep_pool;
        if pool.is_empty() {
            return Err(AcmtError::Config("timestep pool is empty".into()));
        }
        if pool[0] != 0.0 {
            return Err(AcmtError::Config("timestep pool must start at 0".into()));
        }
        if pool.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(AcmtError::Config("timestep pool must be strictly increasing".into()));
        }
        if pool.iter().any(|&t| !(t < 1.0)) {
            return Err(AcmtError::Config("timestep pool entries must be < 1".into()));
        }
        Ok(())
    }

    pub fn pool_len(&self) -> usize {
        self.timestep_pool.len()
    }
}

/// A point on the bridge.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeState {
    pub x: Image,
    pub t: f64,
}

impl BridgeState {
    pub fn new(x: Image, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(AcmtError::invalid(format!("bridge time {t} outside [0, 1]")));
        }
        Ok(BridgeState { x, t })
    }
}

/// `w·a + (1-w)·b + sqrt(var)·ε`, with no noise draws when `var == 0`.
fn mix_with_noise<R: Rng + ?Sized>(a: &Image, b: &Image, w: f64, var: f64, rng: &mut R) -> Result<Image> {
    let mut out = a.as_array().clone();
    Zip::from(&mut out)
        .and(b.as_array())
        .for_each(|o, &bv| *o = w * *o + (1.0 - w) * bv);
    if var > 0.0 {
        let std = var.sqrt();
        out.mapv_inplace(|v| v + std * rng::normal(rng));
    }
    Image::new(out)
}

/// Draws `x_t ~ N(w·x_tn + (1-w)·x_tm, w(1-w)·σ·(t_n - t_m)·I)` with
/// `w = (t - t_m)/(t_n - t_m)`.
pub fn cfm_interpolate<R: Rng + ?Sized>(
    x_tm: &Image,
    x_tn: &Image,
    t_m: f64,
    t_n: f64,
    t: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Image> {
    x_tm.ensure_same_shape(x_tn, "cfm_interpolate")?;
    if !(t_m < t_n) {
        return Err(AcmtError::invalid(format!("need t_m < t_n, got {t_m} >= {t_n}")));
    }
    if !(t_m <= t && t <= t_n) {
        return Err(AcmtError::invalid(format!("t = {t} outside [{t_m}, {t_n}]")));
    }
    if !(sigma >= 0.0) {
        return Err(AcmtError::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if t == t_m {
        return Ok(x_tm.clone());
    }
    if t == t_n {
        return Ok(x_tn.clone());
    }
    let w = (t - t_m) / (t_n - t_m);
    let var = w * (1.0 - w) * sigma * (t_n - t_m);
    mix_with_noise(x_tn, x_tm, w, var, rng)
}

/// Interpolation weight and noise variance of one transition `t_j → t_j1`.
pub fn step_coefficients(t_j: f64, t_j1: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(0.0 <= t_j && t_j < t_j1 && t_j1 <= 1.0) {
        return Err(AcmtError::invalid(format!(
            "diffusion step needs 0 <= t_j < t_j1 <= 1, got {t_j} -> {t_j1}"
        )));
    }
    let w = (t_j1 - t_j) / (1.0 - t_j);
    let alpha = w * (1.0 - w) * (1.0 - t_j) * sigma;
    Ok((w, alpha))
}

/// `x_{t_{j+1}} = w·x1_pred + (1-w)·x_tj + N(0, α·I)` with
/// `w = (t_{j+1}-t_j)/(1-t_j)` and `α = w(1-w)(1-t_j)σ`.
pub fn diffusion_step<R: Rng + ?Sized>(
    x_tj: &Image,
    x1_pred: &Image,
    t_j: f64,
    t_j1: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Image> {
    x_tj.ensure_same_shape(x1_pred, "diffusion_step")?;
    if !(sigma >= 0.0) {
        return Err(AcmtError::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let (w, alpha) = step_coefficients(t_j, t_j1, sigma)?;
    if w == 1.0 {
        return Ok(x1_pred.clone());
    }
    mix_with_noise(x1_pred, x_tj, w, alpha, rng)
}

/// Uniform draw of a pool index.
pub fn pool_sample<R: Rng + ?Sized>(pool: &[f64], rng: &mut R) -> Result<(usize, f64)> {
    if pool.is_empty() {
        return Err(AcmtError::invalid("cannot sample from an empty timestep pool"));
    }
    let i = rng.random_range(0..pool.len());
    Ok((i, pool[i]))
}
