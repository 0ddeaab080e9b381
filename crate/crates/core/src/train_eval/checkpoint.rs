//! Single-file checkpoints: an 8-byte little-endian header length, a JSON
//! manifest, then every tensor as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::FeatureStats;
use crate::error::{FateError, Result};
use crate::head::LabelScaler;
use crate::model::{Model, ModelConfig};

const FORMAT: &str = "fate-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length in the payload.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub scaler: LabelScaler,
    pub feature_stats: Option<FeatureStats>,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for id in model.store.ids() {
        let v = model.store.value(id);
        let len = v.len() * 4;
        tensors.push(TensorEntry {
            name: model.store.name(id).to_string(),
            shape: [v.nrows(), v.ncols()],
            offset,
            len,
        });
        offset += len;
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        scaler: model.scaler,
        feature_stats: model.feature_stats.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&manifest)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(offset);
    for v in model.store.values() {
        for x in v.iter() {
            payload.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

fn read_parts<R: Read>(mut r: R) -> Result<(CheckpointManifest, Vec<u8>)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| FateError::Format("checkpoint shorter than its header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(FateError::Format(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|_| FateError::Format("truncated checkpoint header".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&header)
        .map_err(|e| FateError::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(FateError::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((manifest, payload))
}

/// Reads only the manifest of a checkpoint.
pub fn read_manifest<R: Read>(r: R) -> Result<CheckpointManifest> {
    Ok(read_parts(r)?.0)
}

/// Lists every tensor whose presence or shape differs between the
/// checkpoint and `model`.
pub fn shape_diffs(manifest: &CheckpointManifest, model: &Model) -> Vec<String> {
    let mut diffs = Vec::new();
    for entry in &manifest.tensors {
        match model.store.get(&entry.name) {
            None => diffs.push(format!("{}: in checkpoint {:?}, absent from model", entry.name, entry.shape)),
            Some(id) => {
                let d = model.store.value(id).dim();
                if [d.0, d.1] != entry.shape {
                    diffs.push(format!(
                        "{}: checkpoint {:?} vs model {:?}",
                        entry.name,
                        entry.shape,
                        [d.0, d.1]
                    ));
                }
            }
        }
    }
    for name in model.store.names() {
        if !manifest.tensors.iter().any(|e| &e.name == name) {
            let d = model.store.value(model.store.get(name).unwrap()).dim();
            diffs.push(format!("{name}: in model {:?}, absent from checkpoint", [d.0, d.1]));
        }
    }
    diffs
}

fn fill(model: &mut Model, manifest: &CheckpointManifest, payload: &[u8]) -> Result<()> {
    for entry in &manifest.tensors {
        let end = entry.offset + entry.len;
        if end > payload.len() || entry.len != entry.shape[0] * entry.shape[1] * 4 {
            return Err(FateError::Format(format!("tensor {} outside payload", entry.name)));
        }
        let values: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let id = model.store.get(&entry.name).expect("checked by shape_diffs");
        *model.store.value_mut(id) = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values)
            .map_err(|e| FateError::Format(e.to_string()))?;
    }
    model.scaler = manifest.scaler;
    model.feature_stats = manifest.feature_stats.clone();
    Ok(())
}

/// Rebuilds the model stored in a checkpoint.
pub fn read_checkpoint<R: Read>(r: R) -> Result<Model> {
    let (manifest, payload) = read_parts(r)?;
    let mut model = Model::new(manifest.config.clone(), 0)?;
    let diffs = shape_diffs(&manifest, &model);
    if !diffs.is_empty() {
        return Err(FateError::Incompatible(diffs));
    }
    fill(&mut model, &manifest, &payload)?;
    Ok(model)
}

/// Loads a checkpoint into a model wired by `expected`, failing with the
/// list of tensor differences when the two disagree.
pub fn read_checkpoint_for<R: Read>(r: R, expected: &ModelConfig) -> Result<Model> {
    let (manifest, payload) = read_parts(r)?;
    let mut model = Model::new(expected.clone(), 0)?;
    let diffs = shape_diffs(&manifest, &model);
    if !diffs.is_empty() {
        return Err(FateError::Incompatible(diffs));
    }
    fill(&mut model, &manifest, &payload)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ActionSchema;
    use crate::domain::test_support::toy_sample;

    fn cfg(dh: usize) -> ModelConfig {
        ModelConfig {
            schema: ActionSchema::uniform(2, 1, 3).unwrap(),
            steps: 3,
            embed_dim: 4,
            hidden_dim: dh,
            scorer_hidden: 4,
            head_hidden: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact_to_f32() {
        let mut model = Model::new(cfg(4), 3).unwrap();
        model.scaler = LabelScaler { shift: 1.5, scale: 0.25 };
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.value_mut(id).mapv_inplace(|x| x as f32 as f64);
        }
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        let s = toy_sample(&model.config.schema, 3, 2);
        assert_eq!(back.forward(&s).unwrap(), model.forward(&s).unwrap());
    }

    #[test]
    fn mismatch_lists_shape_differences() {
        let model = Model::new(cfg(4), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        match read_checkpoint_for(buf.as_slice(), &cfg(6)) {
            Err(FateError::Incompatible(diffs)) => {
                assert!(diffs.iter().any(|d| d.contains("lstm0.U_f.0") && d.contains("[8, 4]") && d.contains("[8, 6]")));
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(matches!(read_checkpoint(&[1u8, 2][..]), Err(FateError::Format(_))));
        let model = Model::new(cfg(4), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
