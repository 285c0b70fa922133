//! Checkpoint container: a self-describing binary file holding the model
//! configuration, the vocabulary content hash, and the named parameter
//! arrays. Loading refuses a checkpoint whose vocabulary hash does not match
//! the supplied vocabulary.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::TensorData;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::vocab::ExtendedVocabulary;

const MAGIC: &[u8; 4] = b"AOCP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    params: Vec<ParamEntry>,
}

/// Write atomically (temp file + rename).
pub fn save(params: &ModelParams, vocab_hash: &str, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    params.tree.visit(&mut |name, td: &TensorData| {
        entries.push(ParamEntry { name, shape: td.shape.clone() });
        for v in &td.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        config: params.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint, returning the parameters and the stored vocabulary hash.
pub fn load(path: &Path) -> Result<(ModelParams, String)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;

    let mut stored: Vec<(String, TensorData)> = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        f.read_exact(&mut buf)?;
        let data: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        stored.push((entry.name.clone(), TensorData { shape: entry.shape.clone(), data }));
    }

    let params = rebuild(header.config, stored)?;
    Ok((params, header.vocab_hash))
}

fn rebuild(config: ModelConfig, stored: Vec<(String, TensorData)>) -> Result<ModelParams> {
    let mut map: std::collections::HashMap<String, TensorData> = stored.into_iter().collect();
    let mut params = ModelParams::init(config, 0);
    let mut missing = Vec::new();
    let mut bad_shape = Vec::new();
    params.tree.visit_mut(&mut |name, td: &mut TensorData| match map.remove(&name) {
        Some(loaded) => {
            if loaded.shape == td.shape {
                *td = loaded;
            } else {
                bad_shape.push(name);
            }
        }
        None => missing.push(name),
    });
    if !missing.is_empty() || !bad_shape.is_empty() || !map.is_empty() {
        let extra: Vec<String> = map.into_keys().collect();
        return Err(Error::Checkpoint(format!(
            "parameter mismatch: missing {missing:?}, bad shapes {bad_shape:?}, extra {extra:?}"
        )));
    }
    Ok(params)
}

/// Load and verify the vocabulary binding in one step.
pub fn load_with_vocab(path: &Path, vocab: &ExtendedVocabulary) -> Result<ModelParams> {
    let (params, stored_hash) = load(path)?;
    let actual = vocab.content_hash();
    if stored_hash != actual {
        return Err(Error::VocabHashMismatch { expected: stored_hash, actual });
    }
    Ok(params)
}
