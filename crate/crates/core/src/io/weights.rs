//! Denoiser weight files: the spec, the tensors and optional training notes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, sha256_hex};
use crate::sandbox::dataset::DatasetConfig;
use crate::sandbox::denoiser::{Denoiser, DenoiserSpec, DenoiserWeights};
use crate::sandbox::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingNotes {
    pub dataset: DatasetConfig,
    pub config: TrainConfig,
    pub iterations: usize,
    /// Mean loss over the last 100 iterations.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub spec: DenoiserSpec,
    pub weights: DenoiserWeights,
    pub training: Option<TrainingNotes>,
}

impl WeightsFile {
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads a weights file and returns it with the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = read_bytes(path)?;
        let file: WeightsFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
        file.weights
            .check_spec(&file.spec)
            .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
        Ok((file, sha256_hex(&bytes)))
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::with_weights(self.spec, self.weights.clone()).map_err(|e| Error::Weights(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = DenoiserSpec {
            layers: 1,
            d_model: 8,
            heads: 2,
            weight_seed: 5,
        };
        let file = WeightsFile {
            spec,
            weights: DenoiserWeights::init(&spec),
            training: None,
        };
        let path = tmp.path().join("w.json");
        let digest = file.save(&path).unwrap();
        let (back, digest2) = WeightsFile::load(&path).unwrap();
        assert_eq!(back, file);
        assert_eq!(digest, digest2);
        assert_eq!(digest.len(), 64);
    }

    #[test]
    fn mismatched_spec_is_a_weights_error() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = DenoiserSpec::default();
        let mut file = WeightsFile {
            spec,
            weights: DenoiserWeights::init(&spec),
            training: None,
        };
        file.spec.d_model = 32;
        let path = tmp.path().join("w.json");
        file.save(&path).unwrap();
        assert!(matches!(WeightsFile::load(&path), Err(Error::Weights(_))));
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(WeightsFile::load(&path), Err(Error::Weights(_))));
    }
}
