//! On-disk formats: the binary tensor container, JSON manifests for
//! datasets and checkpoints, and CSV report tables. All writes go through
//! a temp-file-plus-rename so interrupted runs never leave truncated
//! artifacts.

mod manifest;
mod tensor_file;

pub use manifest::{
    load_class_dataset, load_network, load_response_scans, load_similarity, save_class_dataset,
    save_network, save_response_scans, save_similarity, ClassDataset, ClassManifest,
    GroundTruth, GroundTruthPaths, ResponseManifest, ScanEntry, SimilarityIndex,
};
pub use tensor_file::{read_tensor, write_tensor, DTYPE_F32, MAGIC, VERSION};

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::CoreResult;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes bytes to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CoreResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let mut os = path.as_os_str().to_os_string();
    os.push(format!(".tmp-{}-{n}", std::process::id()));
    PathBuf::from(os)
}

/// Serializes a value as pretty JSON (stable field order) and writes it
/// atomically.
pub fn atomic_write_json<T: serde::Serialize>(path: &Path, value: &T) -> CoreResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CoreResult<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes a CSV table; every cell is already formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CoreResult<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = std::env::temp_dir().join(format!("simreg-io-{}", std::process::id()));
        let path = dir.join("x.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert!(std::fs::read_dir(&dir).unwrap().count() == 1, "no temp leftovers");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
