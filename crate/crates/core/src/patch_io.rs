//! On-disk patch containers and patch-pool directories.
//!
//! A single patch lives in a `TQPATCH1` file: an 8-byte magic, a
//! length-prefixed JSON header describing geometry and provenance, and
//! the raw pixel payload as little-endian 64-bit floats. A pool is a
//! directory of such files plus an `index.json` manifest; the manifest
//! triples (size, location, source bits) are what seen/unseen patch
//! classification is decided against. Write → read → write reproduces
//! every byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{PatchFamily, PatchSpec};
use crate::config::PoolEntry;
use crate::error::{Result, TriqError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TQPATCH1";
const INDEX: &str = "index.json";

#[derive(Debug, Serialize, Deserialize)]
struct PatchHeader {
    schema_version: u32,
    channels: usize,
    height: usize,
    width: usize,
    row: usize,
    col: usize,
    source_bits: u8,
    family: String,
    target_class: Option<usize>,
}

fn data_err(path: &Path, offset: u64, msg: impl Into<String>) -> TriqError {
    TriqError::Data {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

/// Serializes a patch into the container byte layout.
pub fn patch_bytes(p: &PatchSpec) -> Result<Vec<u8>> {
    p.validate()?;
    let (ph, pw) = p.size();
    let header = PatchHeader {
        schema_version: 1,
        channels: p.channels(),
        height: ph,
        width: pw,
        row: p.row,
        col: p.col,
        source_bits: p.source_bits,
        family: p.family.name().to_string(),
        target_class: p.target_class,
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + head.len() + p.pixels.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(head.len()).unwrap().to_le_bytes());
    out.extend_from_slice(&head);
    for v in p.pixels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_patch(path: &Path, p: &PatchSpec) -> Result<()> {
    std::fs::write(path, patch_bytes(p)?)?;
    Ok(())
}

pub fn read_patch(path: &Path) -> Result<PatchSpec> {
    let bytes = std::fs::read(path).map_err(|e| data_err(path, 0, e.to_string()))?;
    if bytes.len() < 12 {
        return Err(data_err(
            path,
            bytes.len() as u64,
            format!("file ends after {} bytes, before the header", bytes.len()),
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(data_err(path, 0, "bad magic: not a TQPATCH1 container"));
    }
    let head_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_at = 12 + head_len;
    if bytes.len() < payload_at {
        return Err(data_err(path, 12, format!("truncated header: {head_len} bytes declared")));
    }
    let header: PatchHeader = serde_json::from_slice(&bytes[12..payload_at])
        .map_err(|e| data_err(path, 12, format!("malformed header: {e}")))?;
    if header.schema_version != 1 {
        return Err(data_err(
            path,
            12,
            format!("unsupported schema version {}", header.schema_version),
        ));
    }
    let count = header.channels * header.height * header.width;
    let payload = &bytes[payload_at..];
    if payload.len() != count * 8 {
        return Err(data_err(
            path,
            payload_at as u64,
            format!("payload holds {} bytes, header declares {}", payload.len(), count * 8),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let pixels = Tensor::new(vec![header.channels, header.height, header.width], data)
        .map_err(|e| data_err(path, payload_at as u64, e.to_string()))?;
    let spec = PatchSpec {
        pixels,
        row: header.row,
        col: header.col,
        source_bits: header.source_bits,
        family: PatchFamily::parse(&header.family)?,
        target_class: header.target_class,
    };
    spec.validate()
        .map_err(|e| data_err(path, payload_at as u64, e.to_string()))?;
    Ok(spec)
}

// ── pools ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    size: [usize; 2],
    location: [usize; 2],
    source_bits: u8,
    family: String,
    target_class: Option<usize>,
}

/// The pool index: one row per patch file, in pool order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolManifest {
    schema_version: u32,
    patches: Vec<ManifestEntry>,
}

impl PoolManifest {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// The (size, location, source bits) triple of each pool slot.
    pub fn entries(&self) -> Vec<PoolEntry> {
        self.patches
            .iter()
            .map(|p| PoolEntry {
                size: (p.size[0], p.size[1]),
                location: (p.location[0], p.location[1]),
                source_bits: p.source_bits,
            })
            .collect()
    }

    /// Whether a triple was part of this pool — the seen/unseen test.
    pub fn contains(&self, e: &PoolEntry) -> bool {
        self.entries().contains(e)
    }
}

/// Writes the patches and their manifest into `dir`, creating it if
/// needed. Files are named `patch_000.tqp`, `patch_001.tqp`, … in the
/// order given.
pub fn write_pool(dir: &Path, patches: &[PatchSpec]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        let file = format!("patch_{i:03}.tqp");
        write_patch(&dir.join(&file), p)?;
        let (ph, pw) = p.size();
        entries.push(ManifestEntry {
            file,
            size: [ph, pw],
            location: [p.row, p.col],
            source_bits: p.source_bits,
            family: p.family.name().to_string(),
            target_class: p.target_class,
        });
    }
    let manifest = PoolManifest {
        schema_version: 1,
        patches: entries,
    };
    std::fs::write(dir.join(INDEX), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<PoolManifest> {
    let path = dir.join(INDEX);
    let bytes = std::fs::read(&path).map_err(|e| data_err(&path, 0, e.to_string()))?;
    let manifest: PoolManifest =
        serde_json::from_slice(&bytes).map_err(|e| data_err(&path, 0, format!("malformed manifest: {e}")))?;
    if manifest.schema_version != 1 {
        return Err(data_err(
            &path,
            0,
            format!("unsupported schema version {}", manifest.schema_version),
        ));
    }
    Ok(manifest)
}

/// Reads every patch the manifest lists, in manifest order, and checks
/// each file against its manifest row.
pub fn read_pool(dir: &Path) -> Result<Vec<PatchSpec>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.len());
    for entry in &manifest.patches {
        let path: PathBuf = dir.join(&entry.file);
        let p = read_patch(&path)?;
        let (ph, pw) = p.size();
        if [ph, pw] != entry.size
            || [p.row, p.col] != entry.location
            || p.source_bits != entry.source_bits
        {
            return Err(data_err(
                &path,
                0,
                format!("patch disagrees with its manifest row {entry:?}"),
            ));
        }
        out.push(p);
    }
    Ok(out)
}

// ── tests ──────────────────────────────────────────────────────────────
