//! Inference: carry a source image along the bridge to the intermediate
//! modality.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::{diffusion_step, BridgeConfig};
use crate::dataset::{self, DatasetManifest, SampleFiles};
use crate::error::{AcmtError, Result};
use crate::image::Image;
use crate::net::TranslatorNet;
use crate::phantom::PairedSample;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslateOptions {
    /// Number of network evaluations, `1..=pool_len + 1`.
    pub nfe: usize,
    /// Keep the bridge noise of each diffusion step at inference.
    pub stochastic: bool,
    pub seed: u64,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        TranslateOptions {
            nfe: 5,
            stochastic: false,
            seed: 0,
        }
    }
}

/// Times `0 = t_0 < … < t_nfe = 1` visited by the sampler.
///
/// For `nfe <= T` the pool is subsampled with an even stride; `nfe = T + 1`
/// uses the uniform grid `k / nfe`.
pub fn schedule(pool: &[f64], nfe: usize) -> Result<Vec<f64>> {
    let t = pool.len();
    if nfe == 0 || nfe > t + 1 {
        return Err(AcmtError::invalid(format!("nfe must be in 1..={}, got {nfe}", t + 1)));
    }
    let mut times: Vec<f64> = if nfe <= t {
        (0..nfe).map(|k| pool[k * t / nfe]).collect()
    } else {
        (0..nfe).map(|k| k as f64 / nfe as f64).collect()
    };
    times.push(1.0);
    Ok(times)
}

pub fn translate(x0: &Image, net: &TranslatorNet, bridge: &BridgeConfig, opts: &TranslateOptions) -> Result<Image> {
    if x0.as_slice().iter().any(|v| v.abs() > 1.0 + 1e-9) {
        return Err(AcmtError::invalid("source intensities must lie in [-1, 1]"));
    }
    let times = schedule(&bridge.timestep_pool, opts.nfe)?;
    let sigma = if opts.stochastic { bridge.sigma } else { 0.0 };
    let mut r = rng::stream(opts.seed, "sampler", 0);
    let mut x = x0.clone();
    for w in times.windows(2) {
        let pred = net.predict(&x, w[0])?;
        x = diffusion_step(&x, &pred, w[0], w[1], sigma, &mut r)?;
    }
    Ok(x)
}

/// Translates both modalities of a pair, keeping masks and field.
pub fn translate_pair(
    pair: &PairedSample,
    net: &TranslatorNet,
    bridge: &BridgeConfig,
    opts: &TranslateOptions,
) -> Result<PairedSample> {
    Ok(PairedSample {
        mr: translate(&pair.mr, net, bridge, opts)?,
        us: translate(&pair.us, net, bridge, opts)?,
        ..pair.clone()
    })
}

#[derive(Clone, Debug)]
pub struct TranslateSummary {
    pub manifest: DatasetManifest,
    /// `(sample id, error)` for every sample that could not be produced.
    pub failures: Vec<(String, String)>,
}

impl TranslateSummary {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Translates every pair of the dataset in `data_dir` into `out_dir`,
/// preserving ids. Masks and fields are copied alongside.
pub fn translate_dataset(
    data_dir: &Path,
    net: &TranslatorNet,
    bridge: &BridgeConfig,
    opts: &TranslateOptions,
    out_dir: &Path,
) -> Result<TranslateSummary> {
    let input = dataset::read_manifest(data_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| AcmtError::io(out_dir, e))?;
    let mut samples = Vec::with_capacity(input.samples.len());
    let mut failures = Vec::new();
    for entry in &input.samples {
        let result = dataset::load_entry(data_dir, entry, input.image_size)
            .and_then(|pair| translate_pair(&pair, net, bridge, opts))
            .and_then(|t| dataset::write_sample(out_dir, &entry.id, SampleFiles::translated(&entry.id), &t));
        match result {
            Ok(e) => samples.push(e),
            Err(e) => {
                log::error!("sample {}: {e}", entry.id);
                failures.push((entry.id.clone(), e.to_string()));
            }
        }
    }
    let manifest = DatasetManifest {
        version: input.version,
        image_size: input.image_size,
        samples,
    };
    dataset::write_manifest(out_dir, &manifest)?;
    Ok(TranslateSummary { manifest, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;

    #[test]
    fn schedules() {
        let pool = crate::bridge::uniform_pool(5);
        assert_eq!(schedule(&pool, 1).unwrap(), vec![0.0, 1.0]);
        assert_eq!(schedule(&pool, 5).unwrap(), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let s = schedule(&pool, 2).unwrap();
        assert_eq!(s, vec![0.0, 0.4, 1.0]);
        assert_eq!(schedule(&pool, 6).unwrap().len(), 7);
        assert!(schedule(&pool, 0).is_err());
        assert!(schedule(&pool, 7).is_err());
    }

    fn small_net() -> TranslatorNet {
        let cfg = NetworkConfig {
            image_size: [16, 16],
            levels: 3,
            base_channels: 4,
            time_embed_dim: 8,
            shallow_tap_level: 1,
            deep_tap_level: 2,
        };
        TranslatorNet::new(cfg, 3).unwrap()
    }

    #[test]
    fn single_step_is_direct_prediction() {
        let net = small_net();
        let x = Image::from_fn(16, 16, |(y, x)| ((y + 2 * x) % 7) as f64 / 7.0 - 0.5).unwrap();
        let opts = TranslateOptions {
            nfe: 1,
            stochastic: true,
            seed: 1,
        };
        let out = translate(&x, &net, &BridgeConfig::default(), &opts).unwrap();
        assert_eq!(out, net.predict(&x, 0.0).unwrap());
    }

    #[test]
    fn deterministic_and_in_range() {
        let net = small_net();
        let x = Image::from_fn(16, 16, |(y, x)| ((y * x) % 5) as f64 / 5.0).unwrap();
        let b = BridgeConfig::default();
        let a1 = translate(&x, &net, &b, &TranslateOptions::default()).unwrap();
        let a2 = translate(&x, &net, &b, &TranslateOptions::default()).unwrap();
        assert_eq!(a1, a2);
        assert!(a1.as_slice().iter().all(|v| v.abs() <= 1.0));
        assert!(translate(&Image::filled(16, 16, 1.5), &net, &b, &TranslateOptions::default()).is_err());
    }
}
