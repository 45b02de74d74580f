//! Checkpoint directory: `manifest.json` plus `tensors.bin`, a concatenation
//! of every parameter as little-endian IEEE-754 f64 in row-major order. The
//! layout is described in `docs/checkpoint-format.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{EncoderKind, RunConfig};
use super::model::{Model, ModelEncoder};
use crate::autodiff::{ParamGroup, ParamStore};
use crate::bag::BagParameters;
use crate::corpus::{EmbeddingTable, LabelVocabulary};
use crate::deductive::DecoderParameters;
use crate::encoder::{PrecomputedEncoder, TokenVocab, ToyEncoder};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT: &str = "fet-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the tensor file.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub config: RunConfig,
    pub vocabulary: LabelVocabulary,
    pub vocabulary_sha256: String,
    pub embedding_sha256: String,
    pub token_vocab: Option<TokenVocab>,
    pub tensor_file: String,
    pub tensor_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.store.scalar_count() * 8);
    let mut tensors = Vec::with_capacity(model.store.len());
    for id in model.store.ids() {
        let m = model.store.get(id);
        tensors.push(TensorEntry {
            name: model.store.name(id).to_string(),
            group: model.store.group(id),
            rows: m.rows(),
            cols: m.cols(),
            offset: blob.len() as u64,
        });
        for x in m.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        vocabulary: model.vocab.clone(),
        vocabulary_sha256: model.vocab.digest(),
        embedding_sha256: model.table.digest(),
        token_vocab: model.encoder.token_vocab().cloned(),
        tensor_file: TENSOR_FILE.into(),
        tensor_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    let tensor_path = dir.join(TENSOR_FILE);
    fs::write(&tensor_path, &blob).map_err(|e| Error::io(&tensor_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| err(&path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.format_version != FORMAT_VERSION {
        return Err(err(
            &path,
            format!(
                "unsupported format {} version {}",
                manifest.format, manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

/// Loads a checkpoint. The embedding table must have the dimension the model
/// was trained with; `features` is required for precomputed-encoder models.
pub fn load(
    dir: impl AsRef<Path>,
    table: EmbeddingTable,
    features: Option<PrecomputedEncoder>,
) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let tensor_path = dir.join(&manifest.tensor_file);
    let blob = fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.tensor_sha256 {
        return Err(err(&tensor_path, "tensor checksum mismatch"));
    }
    if manifest.vocabulary.digest() != manifest.vocabulary_sha256 {
        return Err(err(dir, "vocabulary checksum mismatch"));
    }
    if table.digest() != manifest.embedding_sha256 {
        log::warn!(
            "event=embedding_mismatch checkpoint={} expected={} got={}",
            dir.display(),
            manifest.embedding_sha256,
            table.digest()
        );
    }
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let len = t.rows * t.cols;
        let start = usize::try_from(t.offset).map_err(|_| err(&tensor_path, "offset overflow"))?;
        let end = start + len * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| err(&tensor_path, format!("tensor {} is truncated", t.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(
            t.name.clone(),
            t.group,
            Matrix::from_vec(t.rows, t.cols, data),
        );
    }
    let config = manifest.config;
    let encoder = match config.encoder {
        EncoderKind::Toy => {
            let vocab = manifest
                .token_vocab
                .ok_or_else(|| err(dir, "toy encoder checkpoint lacks a token vocabulary"))?;
            ModelEncoder::Toy(ToyEncoder::from_store(&store, vocab)?)
        }
        EncoderKind::Precomputed => ModelEncoder::Precomputed(
            features.unwrap_or_else(|| PrecomputedEncoder::new(config.hidden_size())),
        ),
    };
    let decoder = DecoderParameters::from_store(&store)?;
    if decoder.dims.num_labels != manifest.vocabulary.len() {
        return Err(err(
            dir,
            "decoder output size does not match the vocabulary",
        ));
    }
    let bag = BagParameters::from_store(&store)?;
    Model::from_parts(
        config,
        manifest.vocabulary,
        store,
        encoder,
        table,
        decoder,
        bag,
    )
}
