//! File formats: layout and config JSON, binary dumps, images, weights and
//! run manifests.

pub mod dump;
pub mod image;
pub mod layout_file;
pub mod run_config;
pub mod run_dir;
pub mod weights;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use image::Image;
pub use layout_file::{LayoutFile, SubjectEntry};
pub use run_config::{DumpToggles, RunConfig};
pub use run_dir::{write_run, EmbeddingReport, Manifest, RunDir, SimilarityTables, WeightsRef};
pub use weights::WeightsFile;

/// Reads a file, mapping a missing path to [`Error::NotFound`].
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::format(format!("{}: {}", path.display(), e.path()), e.into_inner().to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
