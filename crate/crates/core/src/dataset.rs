//! On-disk dataset layout.
//!
//! `manifest.json` plus, per sample id: `mr_{id}.png` and `us_{id}.png`
//! (16-bit grayscale, stored value `round((v+1)/2·65535)`), `zone_{id}.png`
//! and `boundary_{id}.png` (8-bit, {0,255}), and `field_{id}.bin`
//! (little-endian f32, row-major `(2, H, W)`, channels `[dy, dx]`) with a
//! `field_{id}.json` shape sidecar. The manifest records a SHA-256 per file.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AcmtError, Result};
use crate::image::{BinaryMask, DisplacementField, Image};
use crate::net::hex_digest;
use crate::phantom::PairedSample;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: &str = "1.0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub mr: String,
    pub us: String,
    pub zone: String,
    pub boundary: String,
    pub field: String,
    pub field_header: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub files: SampleFiles,
    /// File name → hex SHA-256.
    pub sha256: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub image_size: [usize; 2],
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FieldHeader {
    shape: [usize; 3],
    dtype: String,
    channels: [String; 2],
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

impl SampleFiles {
    pub fn standard(id: &str) -> Self {
        Self::with_image_prefix(id, "")
    }

    /// Names for translated outputs, `acmt_mr_{id}.png` / `acmt_us_{id}.png`.
    pub fn translated(id: &str) -> Self {
        Self::with_image_prefix(id, "acmt_")
    }

    fn with_image_prefix(id: &str, prefix: &str) -> Self {
        SampleFiles {
            mr: format!("{prefix}mr_{id}.png"),
            us: format!("{prefix}us_{id}.png"),
            zone: format!("zone_{id}.png"),
            boundary: format!("boundary_{id}.png"),
            field: format!("field_{id}.bin"),
            field_header: format!("field_{id}.json"),
        }
    }

    fn all(&self) -> [&str; 6] {
        [&self.mr, &self.us, &self.zone, &self.boundary, &self.field, &self.field_header]
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> AcmtError {
    AcmtError::CorruptDataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

fn encode_png(w: usize, h: usize, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut writer = enc
            .write_header()
            .map_err(|e| AcmtError::invalid(format!("png encode: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| AcmtError::invalid(format!("png encode: {e}")))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8], path: &Path, depth: png::BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| corrupt(path, format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != depth {
        return Err(corrupt(
            path,
            format!("expected {depth:?}-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| corrupt(path, format!("png: {e}")))?;
    buf.truncate(frame.buffer_size());
    Ok((h, w, buf))
}

/// Quantizes `[-1, 1]` intensities to 16-bit PNG bytes.
pub fn encode_image_png16(img: &Image) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(img.len() * 2);
    for &v in img.as_array().iter() {
        let q = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 65535.0).round() as u16;
        data.extend_from_slice(&q.to_be_bytes());
    }
    encode_png(img.width(), img.height(), png::BitDepth::Sixteen, &data)
}

pub fn decode_image_png16(bytes: &[u8], path: &Path) -> Result<Image> {
    let (h, w, buf) = decode_png(bytes, path, png::BitDepth::Sixteen)?;
    let px: Vec<f64> = buf
        .chunks_exact(2)
        .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0 * 2.0 - 1.0)
        .collect();
    Image::new(Array2::from_shape_vec((h, w), px).map_err(|e| corrupt(path, e.to_string()))?)
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let (h, w) = mask.shape();
    let data: Vec<u8> = mask.as_array().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    encode_png(w, h, png::BitDepth::Eight, &data)
}

pub fn decode_mask_png(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    let (h, w, buf) = decode_png(bytes, path, png::BitDepth::Eight)?;
    if buf.iter().any(|&v| v != 0 && v != 255) {
        return Err(corrupt(path, "mask values must be 0 or 255"));
    }
    let arr = Array2::from_shape_vec((h, w), buf.into_iter().map(|v| u8::from(v == 255)).collect())
        .map_err(|e| corrupt(path, e.to_string()))?;
    BinaryMask::new(arr)
}

/// `(bin, json)` bytes of a displacement field.
pub fn encode_field(field: &DisplacementField) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = field.shape();
    let mut bin = Vec::with_capacity(2 * h * w * 4);
    for &v in field.as_array().iter() {
        bin.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let header = FieldHeader {
        shape: [2, h, w],
        dtype: "float32-le".into(),
        channels: ["dy".into(), "dx".into()],
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    (bin, json)
}

pub fn decode_field(bin: &[u8], json: &[u8], path: &Path) -> Result<DisplacementField> {
    let header: FieldHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(path, format!("field header: {e}")))?;
    let [c, h, w] = header.shape;
    if c != 2 || bin.len() != c * h * w * 4 {
        return Err(corrupt(
            path,
            format!("field holds {} bytes, header shape {:?}", bin.len(), header.shape),
        ));
    }
    let vals: Vec<f64> = bin
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let arr = Array3::from_shape_vec((2, h, w), vals).map_err(|e| corrupt(path, e.to_string()))?;
    DisplacementField::new(arr).map_err(|e| corrupt(path, e.to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AcmtError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AcmtError::io(path, e))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_image_png16(img)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image_png16(&read_file(path)?, path)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_file(path, &encode_mask_png(mask)?)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask_png(&read_file(path)?, path)
}

/// Writes `path` (`.bin`) and its `.json` sidecar.
pub fn write_field(path: &Path, field: &DisplacementField) -> Result<()> {
    let (bin, json) = encode_field(field);
    write_file(path, &bin)?;
    write_file(&path.with_extension("json"), &json)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let bin = read_file(path)?;
    let json = read_file(&path.with_extension("json"))?;
    decode_field(&bin, &json, path)
}

/// Writes one sample under `files` names and returns its manifest entry.
pub fn write_sample(dir: &Path, id: &str, files: SampleFiles, sample: &PairedSample) -> Result<ManifestEntry> {
    let (field_bin, field_json) = encode_field(&sample.gt_field);
    let blobs: [(&str, Vec<u8>); 6] = [
        (&files.mr, encode_image_png16(&sample.mr)?),
        (&files.us, encode_image_png16(&sample.us)?),
        (&files.zone, encode_mask_png(&sample.zone_mask)?),
        (&files.boundary, encode_mask_png(&sample.boundary_mask)?),
        (&files.field, field_bin),
        (&files.field_header, field_json),
    ];
    let mut sha256 = BTreeMap::new();
    for (name, bytes) in &blobs {
        write_file(&dir.join(name), bytes)?;
        sha256.insert(name.to_string(), sha_hex(bytes));
    }
    Ok(ManifestEntry {
        id: id.to_string(),
        seed: sample.seed,
        files,
        sha256,
    })
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AcmtError::io(dir, e))
}

/// Writes every sample with ids `00000, 00001, …` and the manifest.
pub fn save_dataset(samples: &[PairedSample], dir: &Path) -> Result<DatasetManifest> {
    ensure_dir(dir)?;
    let image_size = samples.first().map(|s| [s.mr.height(), s.mr.width()]).unwrap_or([0, 0]);
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if [s.mr.height(), s.mr.width()] != image_size {
            return Err(AcmtError::shape("dataset samples differ in size"));
        }
        let id = sample_id(i);
        entries.push(write_sample(dir, &id, SampleFiles::standard(&id), s)?);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        image_size,
        samples: entries,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, format!("manifest: {e}")))?;
    let mut seen = HashSet::new();
    for e in &m.samples {
        if !seen.insert(e.id.as_str()) {
            return Err(corrupt(&path, format!("duplicate sample id {}", e.id)));
        }
    }
    Ok(m)
}

/// Loads and verifies one manifest entry.
pub fn load_entry(dir: &Path, entry: &ManifestEntry, image_size: [usize; 2]) -> Result<PairedSample> {
    let mut blobs: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for name in entry.files.all() {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(corrupt(&path, "missing file"));
        }
        let bytes = read_file(&path)?;
        match entry.sha256.get(name) {
            Some(h) if *h == sha_hex(&bytes) => {}
            Some(_) => return Err(corrupt(&path, "checksum mismatch")),
            None => return Err(corrupt(&path, "no checksum in manifest")),
        }
        blobs.insert(name, bytes);
    }
    let f = &entry.files;
    let mr = decode_image_png16(&blobs[f.mr.as_str()], &dir.join(&f.mr))?;
    let us = decode_image_png16(&blobs[f.us.as_str()], &dir.join(&f.us))?;
    let zone_mask = decode_mask_png(&blobs[f.zone.as_str()], &dir.join(&f.zone))?;
    let boundary_mask = decode_mask_png(&blobs[f.boundary.as_str()], &dir.join(&f.boundary))?;
    let gt_field = decode_field(&blobs[f.field.as_str()], &blobs[f.field_header.as_str()], &dir.join(&f.field))?;
    let shape = (image_size[0], image_size[1]);
    for (name, s) in [
        (&f.mr, mr.shape()),
        (&f.us, us.shape()),
        (&f.zone, zone_mask.shape()),
        (&f.boundary, boundary_mask.shape()),
        (&f.field, gt_field.shape()),
    ] {
        if s != shape {
            return Err(corrupt(&dir.join(name), format!("shape {s:?}, manifest says {shape:?}")));
        }
    }
    Ok(PairedSample {
        mr,
        us,
        boundary_mask,
        zone_mask,
        gt_field,
        seed: entry.seed,
    })
}

/// Loads every sample listed in the manifest, verifying checksums and shapes.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PairedSample>)> {
    let m = read_manifest(dir)?;
    let samples = m
        .samples
        .iter()
        .map(|e| load_entry(dir, e, m.image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, samples))
}

/// Writes `value` as pretty JSON to `dir/name`.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| AcmtError::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| AcmtError::io(&path, std::io::Error::other(e)))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_set;

    #[test]
    fn round_trip_is_lossless_at_stored_precision() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_set(40, 3, (32, 32)).unwrap();
        let m = save_dataset(&set, dir.path()).unwrap();
        assert_eq!(m.samples.len(), 3);
        assert_eq!(m.samples[1].id, "00001");
        let (_, back) = load_dataset(dir.path()).unwrap();
        for (a, b) in set.iter().zip(&back) {
            assert!(a.mr.max_abs_diff(&b.mr) <= 1.0 / 65535.0 + 1e-12);
            assert!(a.us.max_abs_diff(&b.us) <= 1.0 / 65535.0 + 1e-12);
            assert_eq!(a.zone_mask, b.zone_mask);
            assert_eq!(a.boundary_mask, b.boundary_mask);
            let d = (a.gt_field.as_array() - b.gt_field.as_array()).mapv(f64::abs);
            assert!(d.iter().all(|&v| v < 1e-5));
            assert_eq!(a.seed, b.seed);
        }
    }

    #[test]
    fn quantization_formula() {
        let img = Image::new(Array2::from_shape_vec((1, 3), vec![-1.0, 0.0, 1.0]).unwrap()).unwrap();
        let bytes = encode_image_png16(&img).unwrap();
        let (_, _, raw) = decode_png(&bytes, Path::new("x"), png::BitDepth::Sixteen).unwrap();
        let vals: Vec<u16> = raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        assert_eq!(vals, vec![0, 32768, 65535]);
    }

    #[test]
    fn missing_or_altered_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&generate_set(1, 2, (32, 32)).unwrap(), dir.path()).unwrap();
        fs::write(dir.path().join("zone_00001.png"), b"junk").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(AcmtError::CorruptDataset { .. })));
        fs::remove_file(dir.path().join("us_00000.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(AcmtError::CorruptDataset { .. })));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(&[], dir.path()).unwrap();
        assert!(m.samples.is_empty());
        assert!(load_dataset(dir.path()).unwrap().1.is_empty());
    }

    #[test]
    fn field_header_shape_is_checked() {
        let f = DisplacementField::constant(4, 5, 1.0, -2.0);
        let (bin, json) = encode_field(&f);
        let back = decode_field(&bin, &json, Path::new("f")).unwrap();
        assert_eq!(back, f);
        assert!(decode_field(&bin[..bin.len() - 4], &json, Path::new("f")).is_err());
    }
}
