//! Model checkpoints: a one-line JSON manifest followed by the weights as a
//! single blob of little-endian `f32`s in manifest order.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::language::{synthesize_synonym_embeddings, LabelSet, Lexicon, TableEncoder, TextEncoder};
use crate::model::{model_from_params, EncoderChoice, ModelConfig, ModelKind, Reshaper};

pub const FORMAT_NAME: &str = "semtraj-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Where a frozen-encoder model gets its embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSource {
    /// No table: the model trains its own scratch encoder.
    None,
    /// Synonym-aware table synthesized for the bundled lexicon and labels.
    Synthetic { seed: u64 },
    /// Embedding file on disk.
    File { path: PathBuf },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Synthetic { seed: 0 }
    }
}

impl EmbeddingSource {
    /// The table for a model of width `dim`, or `None` for scratch models.
    pub fn load(&self, encoder: EncoderChoice, dim: usize) -> Result<Option<Arc<TableEncoder>>> {
        if encoder == EncoderChoice::Scratch {
            return Ok(None);
        }
        let table = match self {
            EmbeddingSource::None => {
                return Err(Error::Argument("table encoder selected but no embeddings configured".into()))
            }
            EmbeddingSource::Synthetic { seed } => {
                let lexicon = Lexicon::default();
                let labels = LabelSet::default();
                synthesize_synonym_embeddings(&lexicon, labels.as_slice(), dim, *seed)
            }
            EmbeddingSource::File { path } => TableEncoder::load(path)?,
        };
        if table.dim() != dim {
            return Err(Error::Shape(format!(
                "embedding table has width {}, model expects {dim}",
                table.dim()
            )));
        }
        Ok(Some(Arc::new(table)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    /// In floats from the start of the blob.
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    kind: ModelKind,
    config: ModelConfig,
    embeddings: EmbeddingSource,
    tensors: Vec<TensorEntry>,
    sha256: String,
}

/// A model restored from disk together with its embedding source.
pub struct Checkpoint {
    pub model: Box<dyn Reshaper>,
    pub embeddings: EmbeddingSource,
}

pub fn checkpoint_bytes(model: &dyn Reshaper, embeddings: &EmbeddingSource) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(model.num_parameters() * 4);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            offset,
            shape: t.shape().to_vec(),
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        kind: model.kind(),
        config: model.config().clone(),
        embeddings: embeddings.clone(),
        tensors,
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    let mut out = serde_json::to_vec(&manifest).map_err(|e| Error::Argument(e.to_string()))?;
    out.push(b'\n');
    out.extend(blob);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &dyn Reshaper, embeddings: &EmbeddingSource) -> Result<()> {
    let bytes = checkpoint_bytes(model, embeddings)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Load("missing manifest line".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Load(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT_NAME} v{FORMAT_VERSION})",
            manifest.format, manifest.version
        )));
    }
    let blob = &bytes[nl + 1..];
    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for t in &manifest.tensors {
        let len: usize = t.shape.iter().product();
        if t.offset != expected_offset {
            return Err(Error::Load(format!(
                "tensor {} at offset {}, expected {expected_offset}",
                t.name, t.offset
            )));
        }
        let (lo, hi) = (4 * t.offset, 4 * (t.offset + len));
        let raw = blob.get(lo..hi).ok_or_else(|| {
            Error::Load(format!(
                "truncated checkpoint: tensor {} needs bytes {lo}..{hi}, blob has {}",
                t.name,
                blob.len()
            ))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
        expected_offset += len;
    }
    if blob.len() != 4 * expected_offset {
        return Err(Error::Load(format!(
            "blob has {} bytes, manifest describes {}",
            blob.len(),
            4 * expected_offset
        )));
    }
    let digest = hex::encode(Sha256::digest(blob));
    if digest != manifest.sha256 {
        return Err(Error::Load(format!(
            "checksum mismatch: manifest {}, blob {digest}",
            manifest.sha256
        )));
    }
    manifest.config.validate()?;
    let table = manifest.embeddings.load(manifest.config.encoder, manifest.config.d_lang)?;
    let model = model_from_params(manifest.kind, manifest.config, table, params)?;
    Ok(Checkpoint {
        model,
        embeddings: manifest.embeddings,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn tiny(kind: ModelKind, encoder: EncoderChoice) -> (Box<dyn Reshaper>, EmbeddingSource) {
        let cfg = ModelConfig {
            encoder,
            ..ModelConfig::tiny()
        };
        let src = match encoder {
            EncoderChoice::Table => EmbeddingSource::Synthetic { seed: 3 },
            EncoderChoice::Scratch => EmbeddingSource::None,
        };
        let table = src.load(encoder, cfg.d_lang).unwrap();
        (build_model(kind, cfg, table, 5).unwrap(), src)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for kind in [ModelKind::Transformer, ModelKind::Fcn] {
            for enc in [EncoderChoice::Table, EncoderChoice::Scratch] {
                let (model, src) = tiny(kind, enc);
                let bytes = checkpoint_bytes(model.as_ref(), &src).unwrap();
                let back = checkpoint_from_bytes(&bytes).unwrap();
                assert_eq!(back.model.kind(), kind);
                assert_eq!(back.embeddings, src);
                for ((na, ta), (nb, tb)) in model.params().iter().zip(back.model.params().iter()) {
                    assert_eq!(na, nb);
                    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    assert_eq!(bits(ta), bits(tb), "{na}");
                }
                assert_eq!(checkpoint_bytes(back.model.as_ref(), &back.embeddings).unwrap(), bytes);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, src) = tiny(ModelKind::Transformer, EncoderChoice::Table);
        save_checkpoint(&path, model.as_ref(), &src).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.params().num_scalars(), model.num_parameters());
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn truncated_or_corrupt_files_fail_to_load() {
        let (model, src) = tiny(ModelKind::Transformer, EncoderChoice::Table);
        let bytes = checkpoint_bytes(model.as_ref(), &src).unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Load(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        let err = checkpoint_from_bytes(&flipped).err().unwrap().to_string();
        assert!(err.contains("checksum"), "{err}");
        let mut extra = bytes.clone();
        extra.extend([0, 0, 0, 0]);
        assert!(checkpoint_from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let (model, src) = tiny(ModelKind::Transformer, EncoderChoice::Table);
        let bytes = checkpoint_bytes(model.as_ref(), &src).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        manifest["config"]["ffn_width"] = 4.into();
        let mut edited = serde_json::to_vec(&manifest).unwrap();
        edited.extend_from_slice(&bytes[nl..]);
        let err = checkpoint_from_bytes(&edited).err().unwrap().to_string();
        assert!(err.contains("enc0.ffn.0.w"), "{err}");

        let mut versioned = manifest.clone();
        versioned["version"] = 99.into();
        let mut edited = serde_json::to_vec(&versioned).unwrap();
        edited.extend_from_slice(&bytes[nl..]);
        assert!(checkpoint_from_bytes(&edited).err().unwrap().to_string().contains("v99"));
    }
}
