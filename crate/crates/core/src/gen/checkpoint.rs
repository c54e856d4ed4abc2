//! Model checkpoints: `params.bin` holds every parameter as little-endian
//! `f64` in slot order; `manifest.json` describes how to read it back.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig, P};
use super::vocab::Vocab;
use super::GenError;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub vocab: Vocab,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    /// Relative path of the training log, if one was written.
    pub training_log: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

const FORMAT: &str = "f64-le-v1";

fn io(path: &Path) -> impl Fn(std::io::Error) -> GenError + '_ {
    move |source| GenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(model: &Model, dir: &Path, training_log: Option<&str>) -> Result<(), GenError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut blob = Vec::with_capacity(model.n_params() * 8);
    for p in &model.params {
        for v in p.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin: PathBuf = dir.join(PARAMS_FILE);
    fs::write(&bin, blob).map_err(io(&bin))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        vocab: model.vocab.clone(),
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| ParamEntry {
                name: P::NAMES[i].into(),
                shape: [p.nrows(), p.ncols()],
            })
            .collect(),
        training_log: training_log.map(str::to_string),
        seed: model.config.seed,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io(&path))
}

pub fn load(dir: &Path) -> Result<(Model, Manifest), GenError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| GenError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(GenError::Manifest(format!("unsupported format {:?}", manifest.format)));
    }
    manifest.config.validate()?;
    let expected = Model::shapes(&manifest.config, manifest.vocab.len());
    let listed: Vec<(usize, usize)> = manifest.params.iter().map(|e| (e.shape[0], e.shape[1])).collect();
    if listed != expected {
        return Err(GenError::Manifest("parameter shapes do not match the config".into()));
    }
    let bin = dir.join(PARAMS_FILE);
    let blob = fs::read(&bin).map_err(io(&bin))?;
    let total: usize = expected.iter().map(|(r, c)| r * c).sum();
    if blob.len() != total * 8 {
        return Err(GenError::Manifest(format!(
            "{} holds {} bytes, expected {}",
            bin.display(),
            blob.len(),
            total * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params = expected
        .iter()
        .map(|&(r, c)| Array2::from_shape_fn((r, c), |_| values.next().unwrap()))
        .collect();
    let model = Model {
        config: manifest.config.clone(),
        vocab: manifest.vocab.clone(),
        params,
    };
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 6,
            latent_dim: 4,
            seed: 5,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, Vocab::new(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path(), Some("train_log.jsonl")).unwrap();
        let (back, manifest) = load(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.training_log.as_deref(), Some("train_log.jsonl"));
    }

    #[test]
    fn truncated_blob_rejected() {
        let model = Model::new(
            ModelConfig {
                embed_dim: 2,
                hidden_dim: 2,
                latent_dim: 2,
                ..ModelConfig::default()
            },
            Vocab::new(1),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path(), None).unwrap();
        let bin = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(GenError::Manifest(_))));
    }
}
