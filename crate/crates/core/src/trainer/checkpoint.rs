use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::network::{Model, ScaleConfig};
use crate::substrate::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

/// Mean loss terms over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub l_id: f64,
    pub l_hctri: f64,
    pub l_pose: f64,
    pub l_kd: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Everything needed to rebuild a trained model except the raw arrays.
///
/// Batch sampling draws a fresh generator from `(batch_seed, epoch,
/// iteration)`, so the seed and `epochs_completed` are the full sampler
/// state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub scale: ScaleConfig,
    pub epochs_completed: usize,
    pub batch_seed: u64,
    pub standardization: Standardization,
    /// Dataset identity of each classifier output, in class order.
    pub classes: Vec<usize>,
    pub last_epoch: Option<EpochSummary>,
    pub params: Vec<ParamEntry>,
}

impl Manifest {
    pub fn new(
        config: TrainConfig,
        scale: ScaleConfig,
        standardization: Standardization,
        classes: Vec<usize>,
    ) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            batch_seed: config.seed,
            config,
            scale,
            epochs_completed: 0,
            standardization,
            classes,
            last_epoch: None,
            params: Vec::new(),
        }
    }
}

/// Writes `manifest.json` plus one little-endian `f32` file per parameter
/// (batch-norm running statistics included). Existing files are replaced.
pub fn save_checkpoint(dir: &Path, model: &Model<f32>, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = manifest.clone();
    manifest.params.clear();
    for p in model.store.iter() {
        let file = format!("{}.f32", p.name);
        let mut bytes = Vec::with_capacity(4 * p.tensor.len());
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        manifest.params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            file,
        });
    }
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, Manifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::ingestion(&path, e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::ingestion(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::ingestion(
            &path,
            format!("unsupported checkpoint format {}", manifest.format_version),
        ));
    }
    let mut model = Model::new(manifest.scale.clone(), manifest.config.arch(), manifest.config.seed)?;
    if model.store.len() != manifest.params.len() {
        return Err(Error::ingestion(
            &path,
            format!(
                "manifest lists {} parameters, the configured model has {}",
                manifest.params.len(),
                model.store.len()
            ),
        ));
    }
    for entry in &manifest.params {
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::ingestion(&file, e.to_string()))?;
        let expected: usize = entry.shape.iter().product();
        if bytes.len() != 4 * expected {
            return Err(Error::ingestion(
                &file,
                format!("{} bytes for shape {:?}", bytes.len(), entry.shape),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.store.set_tensor(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok((model, manifest))
}
