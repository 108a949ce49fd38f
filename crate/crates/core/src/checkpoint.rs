//! Checkpoint directory: `weights.bin`, optional `optimizer.bin`, and a
//! `meta.json` sidecar carrying the configs, counters and integrity hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::BridgeConfig;
use crate::error::{AcmtError, Result};
use crate::net::{hex_digest, NetworkConfig, TranslatorNet};
use crate::objectives::LossWeights;
use crate::optim::{Adam, AdamConfig};

pub const FORMAT_VERSION: &str = "1.0.0";
const WEIGHTS_MAGIC: &[u8; 8] = b"ACMTWGT1";
const OPTIM_MAGIC: &[u8; 8] = b"ACMTOPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub network: NetworkConfig,
    pub bridge: BridgeConfig,
    pub weights: LossWeights,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub param_count: usize,
    pub config_hash: String,
    pub weights_sha256: String,
    pub optimizer_sha256: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: TranslatorNet,
    pub bridge: BridgeConfig,
    pub weights: LossWeights,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub optimizer: Option<Adam>,
}

/// SHA-256 of the canonical JSON of the three configs.
pub fn config_hash(network: &NetworkConfig, bridge: &BridgeConfig, weights: &LossWeights) -> String {
    let blob = serde_json::json!({ "network": network, "bridge": bridge, "weights": weights });
    let mut h = Sha256::new();
    h.update(blob.to_string().as_bytes());
    hex_digest(h)
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

fn encode_f32s(magic: &[u8; 8], header: &[u64], blocks: &[&[f32]]) -> Vec<u8> {
    let n: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(8 + 8 * header.len() + 4 * n);
    out.extend_from_slice(magic);
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for b in blocks {
        for v in *b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> AcmtError {
        AcmtError::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt("file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 8]) -> Result<()> {
        if self.take(8)? != expect {
            return Err(self.corrupt("bad magic"));
        }
        Ok(())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AcmtError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AcmtError::io(path, e))
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        let weights_blob = encode_f32s(WEIGHTS_MAGIC, &[self.net.param_count() as u64], &[self.net.params()]);
        CheckpointMeta {
            version: FORMAT_VERSION.into(),
            network: self.net.config().clone(),
            bridge: self.bridge.clone(),
            weights: self.weights.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            param_count: self.net.param_count(),
            config_hash: config_hash(self.net.config(), &self.bridge, &self.weights),
            weights_sha256: sha_hex(&weights_blob),
            optimizer_sha256: self.optimizer.as_ref().map(|o| sha_hex(&optimizer_blob(o))),
        }
    }
}

fn optimizer_blob(o: &Adam) -> Vec<u8> {
    let lr = o.config.learning_rate.to_bits();
    encode_f32s(OPTIM_MAGIC, &[o.step, o.m.len() as u64, lr], &[&o.m, &o.v])
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| AcmtError::io(dir, e))?;
    let weights_blob = encode_f32s(WEIGHTS_MAGIC, &[ckpt.net.param_count() as u64], &[ckpt.net.params()]);
    write(&dir.join("weights.bin"), &weights_blob)?;
    let opt_path = dir.join("optimizer.bin");
    match &ckpt.optimizer {
        Some(o) => write(&opt_path, &optimizer_blob(o))?,
        None if opt_path.exists() => fs::remove_file(&opt_path).map_err(|e| AcmtError::io(&opt_path, e))?,
        None => {}
    }
    let meta = ckpt.meta();
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write(&dir.join("meta.json"), json.as_bytes())?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let corrupt = |p: PathBuf, reason: String| AcmtError::CorruptCheckpoint { path: p, reason };
    let meta_path = dir.join("meta.json");
    let meta_bytes = read(&meta_path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| corrupt(meta_path.clone(), format!("meta.json: {e}")))?;
    if meta.version.split('.').next() != FORMAT_VERSION.split('.').next() {
        return Err(corrupt(
            meta_path,
            format!("format version {} incompatible with {FORMAT_VERSION}", meta.version),
        ));
    }
    let expected = config_hash(&meta.network, &meta.bridge, &meta.weights);
    if expected != meta.config_hash {
        return Err(corrupt(meta_path, "config hash mismatch".into()));
    }

    let wpath = dir.join("weights.bin");
    let wbytes = read(&wpath)?;
    if sha_hex(&wbytes) != meta.weights_sha256 {
        return Err(corrupt(wpath, "weights hash mismatch".into()));
    }
    let mut r = Reader { bytes: &wbytes, pos: 0, path: &wpath };
    r.magic(WEIGHTS_MAGIC)?;
    let n = r.u64()? as usize;
    if n != meta.param_count {
        return Err(r.corrupt(format!("{n} parameters, meta says {}", meta.param_count)));
    }
    let params = r.f32s(n)?;
    r.finish()?;
    let net = TranslatorNet::from_params(meta.network.clone(), params)
        .map_err(|e| corrupt(wpath.clone(), e.to_string()))?;

    let optimizer = match &meta.optimizer_sha256 {
        None => None,
        Some(hash) => {
            let opath = dir.join("optimizer.bin");
            let obytes = read(&opath)?;
            if &sha_hex(&obytes) != hash {
                return Err(corrupt(opath, "optimizer hash mismatch".into()));
            }
            let mut r = Reader { bytes: &obytes, pos: 0, path: &opath };
            r.magic(OPTIM_MAGIC)?;
            let step = r.u64()?;
            let len = r.u64()? as usize;
            let lr = f64::from_bits(r.u64()?);
            if len != n {
                return Err(r.corrupt("optimizer size differs from parameter count"));
            }
            let m = r.f32s(len)?;
            let v = r.f32s(len)?;
            r.finish()?;
            Some(Adam {
                config: AdamConfig::with_lr(lr),
                step,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        net,
        bridge: meta.bridge,
        weights: meta.weights,
        epoch: meta.epoch,
        step: meta.step,
        seed: meta.seed,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn small_ckpt() -> Checkpoint {
        let cfg = NetworkConfig {
            image_size: [16, 16],
            levels: 3,
            base_channels: 4,
            time_embed_dim: 8,
            shallow_tap_level: 1,
            deep_tap_level: 2,
        };
        let net = TranslatorNet::new(cfg, 5).unwrap();
        let n = net.param_count();
        let mut opt = Adam::new(AdamConfig::with_lr(2e-4), n);
        opt.step = 7;
        opt.m[3] = 0.5;
        Checkpoint {
            net,
            bridge: BridgeConfig {
                sigma: 0.05,
                ..Default::default()
            },
            weights: LossWeights::new(1.0, 0.25, 2.0).unwrap(),
            epoch: 2,
            step: 7,
            seed: 11,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_restores_forward() {
        let dir = tempfile::tempdir().unwrap();
        let ck = small_ckpt();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.net.params(), ck.net.params());
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!((back.epoch, back.step, back.seed), (2, 7, 11));
        let x = Image::from_fn(16, 16, |(y, x)| ((y * 16 + x) as f64 / 256.0) - 0.5).unwrap();
        assert_eq!(back.net.predict(&x, 0.4).unwrap(), ck.net.predict(&x, 0.4).unwrap());
    }

    #[test]
    fn meta_echoes_sigma_and_lambdas() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&small_ckpt(), dir.path()).unwrap();
        let meta: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["bridge"]["sigma"], 0.05);
        assert_eq!(meta["weights"]["lambda_boundary"], 0.25);
        assert_eq!(meta["weights"]["lambda_sb"], 2.0);
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&small_ckpt(), dir.path()).unwrap();
        let p = dir.path().join("weights.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(AcmtError::CorruptCheckpoint { .. })));
    }

    #[test]
    fn edited_config_or_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&small_ckpt(), dir.path()).unwrap();
        let p = dir.path().join("meta.json");
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replace("\"sigma\": 0.05", "\"sigma\": 0.5")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(AcmtError::CorruptCheckpoint { .. })));
        fs::write(&p, text.replace(FORMAT_VERSION, "9.0.0")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(AcmtError::CorruptCheckpoint { .. })));
    }
}
