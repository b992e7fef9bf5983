//! Checkpoint container: a JSON header (model config, vocabulary manifest,
//! optional training config, tensor index) followed by the raw little-endian
//! f64 parameter buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, ModelError, ModelParams, TrainConfig};
use crate::vocab::VocabManifest;

const MAGIC: &[u8; 8] = b"OBJSEQCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    vocab: VocabManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub params: ModelParams,
    pub manifest: VocabManifest,
    pub train_config: Option<TrainConfig>,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    manifest: &VocabManifest,
    train_config: Option<&TrainConfig>,
) -> Result<(), ModelError> {
    if manifest.n_text != params.cfg.n_text || manifest.n_bins != params.cfg.n_bins {
        return Err(ModelError::Checkpoint("vocabulary manifest does not match the model config".into()));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: params.cfg.clone(),
        vocab: manifest.clone(),
        train_config: train_config.cloned(),
        tensors: params
            .layout
            .specs
            .iter()
            .map(|s| TensorEntry { name: s.name.clone(), rows: s.t.rows, cols: s.t.cols })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(format!("header encode: {e}")))?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(&header_json).map_err(|e| io_err(path, e))?;
    for &x in &params.data {
        w.write_all(&x.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(|e| io_err(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| ModelError::Checkpoint(format!("header decode: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    header.model_config.validate()?;
    let layout = Layout::build(&header.model_config);
    // The tensor index must agree with the layout the config derives; a
    // mismatch means the file was written by an incompatible build.
    if layout.specs.len() != header.tensors.len()
        || layout
            .specs
            .iter()
            .zip(&header.tensors)
            .any(|(s, e)| s.name != e.name || s.t.rows != e.rows || s.t.cols != e.cols)
    {
        return Err(ModelError::Checkpoint("tensor index does not match the model config".into()));
    }
    let mut data = vec![0.0f64; layout.total];
    let mut buf = [0u8; 8];
    for x in data.iter_mut() {
        r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        *x = f64::from_le_bytes(buf);
    }
    if r.read(&mut buf).map_err(|e| io_err(path, e))? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok(Checkpoint {
        params: ModelParams { cfg: header.model_config, layout, data },
        manifest: header.vocab,
        train_config: header.train_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TypeEmbedding;
    use crate::vocab::{build_vocab, WordVocab};

    fn tiny() -> (ModelParams, VocabManifest) {
        let cfg = ModelConfig {
            n_text: 12,
            n_bins: 4,
            feat_dim: 5,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_enc_len: 8,
            max_dec_len: 8,
            type_embedding: TypeEmbedding::None,
        };
        let params = ModelParams::init(cfg, 11).unwrap();
        let vocab = build_vocab(12, 4).unwrap();
        let words = WordVocab::new((0..8).map(|i| format!("w{i}")).collect(), 12).unwrap();
        (params, VocabManifest::new(vocab, &words))
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (params, manifest) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, &manifest, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.data, params.data);
        assert_eq!(loaded.params.cfg, params.cfg);
        assert_eq!(loaded.manifest, manifest);
        assert!(loaded.train_config.is_none());
    }

    #[test]
    fn checkpoint_keeps_train_config() {
        let (params, manifest) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let tc = TrainConfig { n_bins: 4, ..TrainConfig::default() };
        save_checkpoint(&path, &params, &manifest, Some(&tc)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.train_config, Some(tc));
    }

    #[test]
    fn checkpoint_rejects_mismatched_manifest() {
        let (params, _) = tiny();
        let vocab = build_vocab(20, 4).unwrap();
        let words = WordVocab::new((0..16).map(|i| format!("w{i}")).collect(), 20).unwrap();
        let wrong = VocabManifest::new(vocab, &words);
        let dir = tempfile::tempdir().unwrap();
        assert!(save_checkpoint(&dir.path().join("x.ckpt"), &params, &wrong, None).is_err());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
