//! On-disk model format: `manifest.json` (names, shapes, configs, vocab)
//! plus `params.bin`, every parameter as little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{contract, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
const FORMAT: &str = "regspan-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub train: Option<TrainConfig>,
    pub params: Vec<ParamEntry>,
}

pub fn save(dir: &Path, model: &Model, train: Option<&TrainConfig>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64".into(),
        model: model.config.clone(),
        vocab: model.vocab.clone(),
        train: train.cloned(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 8);
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(dir.join(PARAMS), blob)?;
    Ok(())
}

fn at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn load(dir: &Path) -> Result<(Model, Option<TrainConfig>)> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath).map_err(|e| at(&mpath, e))?)?;
    if manifest.format != FORMAT || manifest.dtype != "f64" {
        return contract(format!(
            "unsupported checkpoint format {} ({})",
            manifest.format, manifest.dtype
        ));
    }
    let ppath = dir.join(PARAMS);
    let blob = fs::read(&ppath).map_err(|e| at(&ppath, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != expected * 8 {
        return contract(format!(
            "{} holds {} bytes, manifest needs {}",
            PARAMS,
            blob.len(),
            expected * 8
        ));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let n = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    let model = Model::from_parts(manifest.model, manifest.vocab, store)?;
    Ok((model, manifest.train))
}
