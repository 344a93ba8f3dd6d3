//! On-disk checkpoints: `manifest.json` (config, vocabulary, tensor table,
//! seed) and `weights.bin` (concatenated little-endian `f32`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Params, Vocabulary};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideManifest {
    /// Free-form metadata for the owner of the side tensors.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<SideManifest>,
    pub checksum: String,
}

/// Extra tensors stored alongside a model (side memories and the like).
#[derive(Clone, Debug, PartialEq)]
pub struct SideData {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn push_tensor(bytes: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> TensorEntry {
    let entry = TensorEntry {
        name: name.to_string(),
        shape: t.shape.clone(),
        offset: bytes.len(),
    };
    for x in &t.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    entry
}

fn read_tensor(bytes: &[u8], entry: &TensorEntry, path: &Path) -> Result<Tensor<f32>> {
    let n: usize = entry.shape.iter().product();
    let end = entry.offset + 4 * n;
    if end > bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("tensor {} runs past end of weights", entry.name),
        });
    }
    let data = bytes[entry.offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(&entry.shape, data))
}

pub fn save(dir: &Path, state: &ModelState, side: Option<&SideData>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(state.params.num_parameters() * 4);
    let tensors: Vec<TensorEntry> = state
        .params
        .named()
        .into_iter()
        .map(|(name, t)| push_tensor(&mut bytes, &name, t))
        .collect();
    let side = side.map(|s| SideManifest {
        meta: s.meta.clone(),
        tensors: s.tensors.iter().map(|(n, t)| push_tensor(&mut bytes, n, t)).collect(),
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        seed: state.config.seed,
        vocab: state.vocab.tokens().to_vec(),
        tensors,
        side,
        checksum: state.checksum(),
    };
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn load(dir: &Path) -> Result<(ModelState, Option<SideData>)> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let vocab = Vocabulary::from_tokens(manifest.vocab.clone());
    let mut params = Params::<f32>::zeros(&manifest.config, vocab.len());
    {
        let mut slots = params.named_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&manifest.tensors) {
            if *name != entry.name || slot.shape != entry.shape {
                return Err(Error::Validation(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    entry.name, entry.shape, name, slot.shape
                )));
            }
            **slot = read_tensor(&bytes, entry, &wpath)?;
        }
    }
    let state = ModelState {
        config: manifest.config.clone(),
        vocab,
        params,
    };
    if state.checksum() != manifest.checksum {
        return Err(Error::Validation(format!("checksum mismatch in {}", dir.display())));
    }
    let side = match &manifest.side {
        None => None,
        Some(s) => Some(SideData {
            meta: s.meta.clone(),
            tensors: s
                .tensors
                .iter()
                .map(|e| Ok((e.name.clone(), read_tensor(&bytes, e, &wpath)?)))
                .collect::<Result<_>>()?,
        }),
    };
    Ok((state, side))
}
