use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::CtClip;
use crate::corpus::LabelVector;
use crate::dataset::{encode_volumes, StudyData};
use crate::encoders::Embedding;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CTIDX001";

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub study_id: String,
    pub embedding: Embedding,
    pub labels: Option<LabelVector>,
}

/// Immutable set of unit-length volume embeddings keyed by study id.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    by_id: HashMap<String, usize>,
    dim: usize,
    encoder_tag: String,
    vocab: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexInfo {
    pub encoder_tag: String,
    pub entries: usize,
    pub dim: usize,
    pub labeled: usize,
    pub vocab: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    encoder_tag: String,
    dim: usize,
    vocab: Option<Vec<String>>,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    study_id: String,
    labels: Option<Vec<f64>>,
}

impl EmbeddingIndex {
    /// Embeddings are normalized on the way in.
    pub fn new(entries: Vec<IndexEntry>, encoder_tag: impl Into<String>, vocab: Option<Vec<String>>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.embedding.dim());
        let mut by_id = HashMap::with_capacity(entries.len());
        let mut out = Vec::with_capacity(entries.len());
        for (i, mut e) in entries.into_iter().enumerate() {
            if e.embedding.dim() != dim {
                return Err(Error::Retrieval(format!(
                    "`{}` has dimension {}, expected {dim}",
                    e.study_id,
                    e.embedding.dim()
                )));
            }
            if let (Some(l), Some(v)) = (&e.labels, &vocab) {
                l.check_len(v.len())?;
            }
            if by_id.insert(e.study_id.clone(), i).is_some() {
                return Err(Error::DuplicateStudy(e.study_id));
            }
            if !e.embedding.normalized {
                e.embedding = e
                    .embedding
                    .normalized()
                    .map_err(|err| Error::Retrieval(format!("`{}`: {err}", e.study_id)))?;
            }
            out.push(e);
        }
        Ok(Self {
            entries: out,
            by_id,
            dim,
            encoder_tag: encoder_tag.into(),
            vocab,
        })
    }

    /// Encode every study's volume with `model`.
    pub fn build(model: &CtClip, data: &[StudyData], encoder_tag: &str, vocab: Option<Vec<String>>) -> Result<Self> {
        let emb = encode_volumes(model, data, 8)?;
        let entries = data
            .iter()
            .zip(emb)
            .map(|(d, e)| IndexEntry {
                study_id: d.study_id.clone(),
                embedding: e,
                labels: d.labels.clone(),
            })
            .collect();
        Self::new(entries, encoder_tag, vocab)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, study_id: &str) -> Option<&IndexEntry> {
        self.by_id.get(study_id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    pub fn vocab(&self) -> Option<&[String]> {
        self.vocab.as_deref()
    }

    /// Names of the positive labels of an entry, when a vocabulary is attached.
    pub fn label_names(&self, entry: &IndexEntry) -> Vec<String> {
        match (&entry.labels, &self.vocab) {
            (Some(l), Some(v)) => l.positives().into_iter().map(|i| v[i].clone()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn info(&self) -> IndexInfo {
        IndexInfo {
            encoder_tag: self.encoder_tag.clone(),
            entries: self.len(),
            dim: self.dim,
            labeled: self.entries.iter().filter(|e| e.labels.is_some()).count(),
            vocab: self.vocab.clone(),
        }
    }

    /// `CTIDX001`, u64 LE manifest length, JSON manifest, then `len × dim` f32 LE.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let manifest = Manifest {
            version: 1,
            encoder_tag: self.encoder_tag.clone(),
            dim: self.dim,
            vocab: self.vocab.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    study_id: e.study_id.clone(),
                    labels: e.labels.as_ref().map(|l| l.values().to_vec()),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.dim * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for v in &e.embedding.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Retrieval(format!("{} is not an index file", path.display())));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + n)
            .ok_or_else(|| Error::Retrieval("truncated index manifest".into()))?;
        let m: Manifest = serde_json::from_slice(json)?;
        let payload = &bytes[16 + n..];
        if payload.len() != 4 * m.dim * m.entries.len() {
            return Err(Error::Retrieval(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * m.dim * m.entries.len()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let entries = m
            .entries
            .into_iter()
            .map(|e| {
                let values: Vec<f32> = floats.by_ref().take(m.dim).collect();
                Ok(IndexEntry {
                    study_id: e.study_id,
                    embedding: Embedding {
                        values,
                        normalized: true,
                    },
                    labels: e.labels.map(LabelVector::new).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, m.encoder_tag, m.vocab)
    }
}
