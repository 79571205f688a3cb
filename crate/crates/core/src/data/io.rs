//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train/<id>.bin
//! <dir>/eval/<id>.bin
//! ```
//!
//! The manifest records the generating [`SceneSpec`], the class count, image
//! size and, per sample, its id, relative blob path and the SHA-256 of the blob.
//!
//! A blob is `b"SSMP"`, then little-endian `u32` version (1), height, width,
//! channels, then `height * width * channels` `f32` LE pixel values in
//! row-major `(y, x, c)` order, then `height * width` `u8` labels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Sample, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::IGNORE_ID;

pub const BLOB_MAGIC: &[u8; 4] = b"SSMP";
pub const BLOB_VERSION: u32 = 1;
pub const FORMAT: &str = "satslab-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u32,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: SceneSpec,
    pub class_count: usize,
    pub image_size: usize,
    pub train: Vec<ManifestEntry>,
    pub eval: Vec<ManifestEntry>,
}

pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let shape = s.image.shape();
    let mut out = Vec::with_capacity(20 + s.image.numel() * 4 + s.labels.len());
    out.extend_from_slice(BLOB_MAGIC);
    for v in [BLOB_VERSION, shape[0] as u32, shape[1] as u32, shape[2] as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in s.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.labels);
    out
}

pub fn decode_sample(id: u32, bytes: &[u8]) -> Result<Sample> {
    let err = |m: &str| Error::Data(format!("sample {id}: {m}"));
    if bytes.len() < 20 {
        return Err(err("blob truncated in header"));
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(err("bad blob magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) as u32 != BLOB_VERSION {
        return Err(err("unsupported blob version"));
    }
    let (h, w, c) = (word(1), word(2), word(3));
    if h == 0 || w == 0 || c == 0 {
        return Err(err("zero-sized image"));
    }
    let pixels = h * w * c;
    let expected = 20 + pixels * 4 + h * w;
    if bytes.len() < expected {
        return Err(err(&format!("blob truncated ({} of {expected} bytes)", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(err("trailing bytes after labels"));
    }
    let data = bytes[20..20 + pixels * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let image = Tensor::new(&[h, w, c], data)?;
    Ok(Sample {
        id,
        image,
        labels: bytes[20 + pixels * 4..].to_vec(),
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `ds` under `dir`, creating it if needed.
pub fn save(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    let entries = |split: &str, samples: &[Sample]| -> Result<Vec<ManifestEntry>> {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        samples
            .iter()
            .map(|s| {
                let file = format!("{split}/{:06}.bin", s.id);
                let bytes = encode_sample(s);
                write(&dir.join(&file), &bytes)?;
                Ok(ManifestEntry {
                    id: s.id,
                    file,
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect()
    };
    let train = entries("train", &ds.train)?;
    let eval = entries("eval", &ds.eval)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        spec: ds.spec.clone(),
        class_count: ds.spec.class_count,
        image_size: ds.spec.image_size,
        train,
        eval,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        return Err(Error::Data(format!("{}: not a {FORMAT} manifest", path.display())));
    }
    Ok(m)
}

/// Loads and verifies a dataset: checksums, dimensions and label range.
pub fn load(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let read_split = |entries: &[ManifestEntry]| -> Result<Vec<Sample>> {
        entries
            .iter()
            .map(|e| {
                let path: PathBuf = dir.join(&e.file);
                let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
                if sha256_hex(&bytes) != e.sha256 {
                    return Err(Error::Data(format!("sample {} ({}): checksum mismatch", e.id, e.file)));
                }
                let s = decode_sample(e.id, &bytes)?;
                if s.image.shape()[..2] != [m.image_size, m.image_size] {
                    return Err(Error::Data(format!(
                        "sample {}: image is {:?}, manifest says {}",
                        e.id,
                        s.image.shape(),
                        m.image_size
                    )));
                }
                if let Some(&bad) = s
                    .labels
                    .iter()
                    .find(|&&l| l != IGNORE_ID && l as usize > m.class_count)
                {
                    return Err(Error::Data(format!(
                        "sample {}: label {bad} exceeds class_count {}",
                        e.id, m.class_count
                    )));
                }
                Ok(s)
            })
            .collect()
    };
    let train = read_split(&m.train)?;
    let eval = read_split(&m.eval)?;
    let mut spec = m.spec;
    spec.class_count = m.class_count;
    Ok(Dataset { spec, train, eval })
}

/// SHA-256 over all blob checksums in manifest order; identical datasets give
/// identical digests.
pub fn dataset_digest(m: &Manifest) -> String {
    let mut h = Sha256::new();
    for e in m.train.iter().chain(&m.eval) {
        h.update(e.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 over every encoded sample, train then eval, without touching disk.
pub fn fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for s in ds.train.iter().chain(&ds.eval) {
        h.update(encode_sample(s));
    }
    hex::encode(h.finalize())
}
