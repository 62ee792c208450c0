//! Parameter checkpoint container.
//!
//! Layout: the 8-byte magic `ZAPCKPT1`, a little-endian `u64` header length,
//! a JSON header (architecture, seed provenance, config hash, tensor table),
//! then every tensor's values as little-endian `f64` in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zaplab_autograd::Tensor;

use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ParamRole};

const MAGIC: &[u8; 8] = b"ZAPCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

pub fn encode(model: &Model, provenance: &Provenance) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        architecture: model.architecture().clone(),
        seed: provenance.seed,
        config_hash: provenance.config_hash.clone(),
        tensors: model
            .names()
            .iter()
            .zip(model.roles())
            .zip(model.params())
            .map(|((name, role), t)| TensorEntry {
                name: name.clone(),
                role: *role,
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Model, Provenance), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a zaplab checkpoint".into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + header_len).ok_or("truncated header")?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    let mut model = match &header.architecture {
        // Parameter values are overwritten below, so the init stream is irrelevant.
        Architecture::Convnet(spec) => Model::build_convnet(spec, &mut crate::rng::seeded(0)),
        Architecture::Linear { input_dim, num_classes } => {
            Model::linear(*input_dim, *num_classes, &mut crate::rng::seeded(0))
        }
    }
    .map_err(|e| e.to_string())?;
    if header.tensors.len() != model.params().len() {
        return Err("tensor table does not match architecture".into());
    }
    let mut cursor = 16 + header_len;
    let mut values = Vec::with_capacity(header.tensors.len());
    for (entry, name) in header.tensors.iter().zip(model.names()) {
        if &entry.name != name || entry.dtype != "f64" {
            return Err(format!("unexpected tensor {} ({})", entry.name, entry.dtype));
        }
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(cursor..cursor + 8 * n).ok_or("truncated payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Tensor::new(&entry.shape, data).map_err(|e| e.to_string())?);
        cursor += 8 * n;
    }
    if cursor != bytes.len() {
        return Err("trailing bytes after payload".into());
    }
    model.set_params(values).map_err(|e| e.to_string())?;
    Ok((
        model,
        Provenance {
            seed: header.seed,
            config_hash: header.config_hash,
        },
    ))
}

pub fn save(path: &Path, model: &Model, provenance: &Provenance) -> Result<()> {
    let bytes = encode(model, provenance)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Provenance)> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
