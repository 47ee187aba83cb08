//! Versioned binary checkpoint format.
//!
//! Layout, in order:
//!   1. magic bytes `MOER`
//!   2. format version, `u32` little-endian
//!   3. header length, `u32` little-endian
//!   4. UTF-8 JSON header: model config, a SHA-256 hash of the canonical
//!      config JSON, and a named-array manifest (name, shape, byte offset
//!      into the payload)
//!   5. payload: raw little-endian `f64` arrays, in manifest order
//!
//! Weights round-trip bit-exactly; the loader verifies magic, version,
//! config hash, manifest-vs-config shapes, and payload length before
//! returning a model.

use super::{ModelConfig, ModelError, MoEModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MOER";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic { found: [u8; 4] },
    UnsupportedVersion { found: u32, supported: u32 },
    /// File ends before the declared header or payload does.
    Truncated { what: &'static str },
    Header(String),
    /// Stored config hash does not match the stored config.
    ConfigHashMismatch,
    /// Manifest names/shapes disagree with the stored config.
    ManifestMismatch(String),
    Model(ModelError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::BadMagic { found } => write!(f, "bad magic {found:?}, expected {MAGIC:?}"),
            Self::UnsupportedVersion { found, supported } => {
                write!(f, "unsupported checkpoint version {found} (supported: {supported})")
            }
            Self::Truncated { what } => write!(f, "truncated checkpoint: {what}"),
            Self::Header(msg) => write!(f, "malformed header: {msg}"),
            Self::ConfigHashMismatch => write!(f, "config hash mismatch"),
            Self::ManifestMismatch(msg) => write!(f, "manifest mismatch: {msg}"),
            Self::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn config_hash(config: &ModelConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(model: &MoEModel, path: &Path) -> Result<(), CheckpointError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);

    let specs = model.config().param_specs();
    let params = model.params();
    let mut manifest = Vec::with_capacity(specs.len());
    let mut offset = 0u64;
    for ((name, shape), t) in specs.iter().zip(&params) {
        manifest.push(ManifestEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += (t.len() * 8) as u64;
    }
    let header = Header {
        config: model.config().clone(),
        config_hash: config_hash(model.config()),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in &params {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MoEModel, CheckpointError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let mut buf4 = [0u8; 4];
    read_exact(&mut r, &mut buf4, "version")?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    read_exact(&mut r, &mut buf4, "header length")?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;

    if config_hash(&header.config) != header.config_hash {
        return Err(CheckpointError::ConfigHashMismatch);
    }
    let specs = header.config.param_specs();
    if specs.len() != header.manifest.len() {
        return Err(CheckpointError::ManifestMismatch(format!(
            "expected {} arrays, manifest lists {}",
            specs.len(),
            header.manifest.len()
        )));
    }
    let mut expected_offset = 0u64;
    for ((name, shape), entry) in specs.iter().zip(&header.manifest) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CheckpointError::ManifestMismatch(format!(
                "array {} {:?} does not match config-implied {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(CheckpointError::ManifestMismatch(format!(
                "array {name} at offset {}, expected {expected_offset}",
                entry.offset
            )));
        }
        expected_offset += (shape.iter().product::<usize>() * 8) as u64;
    }

    let mut flat = Vec::with_capacity(specs.len());
    let mut buf8 = [0u8; 8];
    for (_, shape) in &specs {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            read_exact(&mut r, &mut buf8, "payload")?;
            data.push(f64::from_le_bytes(buf8));
        }
        flat.push(Tensor::new(shape.clone(), data).expect("manifest shape"));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::ManifestMismatch("trailing bytes after payload".into()));
    }
    Ok(MoEModel::from_flat(header.config, flat)?)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(CheckpointError::Truncated { what });
        }
        filled += n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_model() -> MoEModel {
        let cfg = ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 2,
            n_experts: 4,
            k_active: 2,
            n_shared: 1,
            d_ff: 12,
            n_heads: 2,
            max_seq: 16,
            rng_seed: 99,
        };
        MoEModel::init(cfg).unwrap()
    }

    #[test]
    fn round_trip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.moer");
        let model = test_model();
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        let tokens: Vec<u32> = vec![1, 5, 3, 12, 0];
        let (a, _) = model.forward(&tokens, None).unwrap();
        let (b, _) = loaded.forward(&tokens, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (p, q) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.moer");
        save(&test_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(load(&cut), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.moer");
        save(&test_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn bumped_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.moer");
        save(&test_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2; // version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn tampered_config_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.moer");
        save(&test_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // flip the vocab_size inside the JSON header without updating the hash
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let patched = text.replacen("\"vocab_size\":13", "\"vocab_size\":14", 1);
        assert_eq!(patched.len(), text.len());
        std::fs::write(&path, patched.as_bytes()).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::ConfigHashMismatch)));
    }
}
