//! On-disk formats.
//!
//! Volumes are stored as a raw little-endian payload plus a JSON sidecar:
//! masks as `<stem>.mask.u8` / `<stem>.mask.json`, images as
//! `<stem>.image.f32` / `<stem>.image.json`. Checkpoints are a JSON header
//! (`<stem>.json`) plus a binary blob (`<stem>.bin`) holding parameters
//! followed by the two Adam moment vectors, all little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::volume::{ImageVolume, MaskVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub shape: [usize; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn mask_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(stem, ".mask.u8"), with_suffix(stem, ".mask.json"))
}

pub fn image_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(stem, ".image.f32"), with_suffix(stem, ".image.json"))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

pub fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Checkpoint(format!("payload length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_mask(stem: &Path, mask: &MaskVolume, seed: Option<u64>, config: serde_json::Value) -> Result<()> {
    let (raw, side) = mask_paths(stem);
    write_bytes(&raw, mask.voxels().data())?;
    write_json(&side, &VolumeSidecar { shape: mask.dims(), dtype: "uint8".into(), labels: Some(mask.label_set().to_vec()), seed, config })
}

pub fn read_mask(stem: &Path) -> Result<(MaskVolume, VolumeSidecar)> {
    let (raw, side) = mask_paths(stem);
    let meta: VolumeSidecar = read_json(&side)?;
    let vox = Volume::new(meta.shape, read_bytes(&raw)?)?;
    let labels = meta.labels.clone().unwrap_or_else(|| {
        let mut l = vox.data().to_vec();
        l.push(0);
        l.sort_unstable();
        l.dedup();
        l
    });
    Ok((MaskVolume::new(vox, labels)?, meta))
}

pub fn write_image(stem: &Path, image: &ImageVolume, seed: Option<u64>, config: serde_json::Value) -> Result<()> {
    let (raw, side) = image_paths(stem);
    write_bytes(&raw, &f32_to_le(image.data()))?;
    write_json(&side, &VolumeSidecar { shape: image.dims(), dtype: "float32".into(), labels: None, seed, config })
}

pub fn read_image(stem: &Path) -> Result<(ImageVolume, VolumeSidecar)> {
    let (raw, side) = image_paths(stem);
    let meta: VolumeSidecar = read_json(&side)?;
    let vol = Volume::new(meta.shape, le_to_f32(&read_bytes(&raw)?)?)?;
    Ok((ImageVolume::new(vol)?, meta))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a (mask, image) pair.
pub fn pair_checksum(mask: &MaskVolume, image: &ImageVolume) -> String {
    let mut h = Sha256::new();
    for d in mask.dims() {
        h.update((d as u64).to_le_bytes());
    }
    h.update(mask.voxels().data());
    h.update(f32_to_le(image.data()));
    hex::encode(h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model role, e.g. `mask`, `image`, `refiner-axial`.
    pub kind: String,
    pub architecture: serde_json::Value,
    /// Role-specific hyperparameters (m, n, H, W, view, ...).
    pub hyper: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<crate::diffusion::ScheduleSpec>,
    pub step: u64,
    pub num_params: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    /// Present when the blob carries averaged parameters after the Adam moments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub adam: Adam<f32>,
    pub ema: Option<Vec<f32>>,
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(stem, ".json"), with_suffix(stem, ".bin"))
}

pub fn write_checkpoint(stem: &Path, ckpt: &Checkpoint) -> Result<()> {
    let (json, bin) = checkpoint_paths(stem);
    let n = ckpt.params.len();
    if ckpt.adam.m.len() != n || ckpt.adam.v.len() != n || ckpt.header.num_params != n {
        return Err(Error::Checkpoint("parameter and optimizer lengths disagree".into()));
    }
    if ckpt.ema.as_ref().is_some_and(|e| e.len() != n) || ckpt.ema.is_some() != ckpt.header.ema_decay.is_some() {
        return Err(Error::Checkpoint("averaged parameters disagree with the header".into()));
    }
    let mut blob = f32_to_le(&ckpt.params);
    blob.extend(f32_to_le(&ckpt.adam.m));
    blob.extend(f32_to_le(&ckpt.adam.v));
    if let Some(e) = &ckpt.ema {
        blob.extend(f32_to_le(e));
    }
    write_bytes(&bin, &blob)?;
    write_json(&json, &ckpt.header)
}

pub fn read_checkpoint(stem: &Path) -> Result<Checkpoint> {
    let (json, bin) = checkpoint_paths(stem);
    let header: CheckpointHeader = read_json(&json)?;
    let all = le_to_f32(&read_bytes(&bin)?)?;
    let n = header.num_params;
    let blocks = if header.ema_decay.is_some() { 4 } else { 3 };
    if all.len() != blocks * n {
        return Err(Error::Checkpoint(format!("blob holds {} values, header implies {}", all.len(), blocks * n)));
    }
    let adam = Adam { cfg: header.optimizer, step: header.step, m: all[n..2 * n].to_vec(), v: all[2 * n..3 * n].to_vec() };
    Ok(Checkpoint { params: all[..n].to_vec(), adam, ema: (blocks == 4).then(|| all[3 * n..].to_vec()), header })
}
