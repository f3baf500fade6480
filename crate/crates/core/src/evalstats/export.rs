//! Embedding table export: one CSV row per volume or report, plus a JSON sidecar
//! describing the columns.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::csv_escape;
use crate::corpus::{AbnormalityVocab, LabelVector};
use crate::encoders::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Volume,
    Report,
}

impl EmbeddingKind {
    fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Volume => "volume",
            EmbeddingKind::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub kind: EmbeddingKind,
    pub study_id: String,
    pub labels: Option<LabelVector>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub rows: usize,
    pub dim: usize,
    pub labels: Vec<String>,
    pub columns: Vec<String>,
    pub note: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write `path` (CSV) and `path` with a `.json` extension (column description).
/// Floats use shortest round-trip formatting, so reloading is lossless.
pub fn export_embeddings(rows: &[EmbeddingRow], vocab: &AbnormalityVocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, |r| r.embedding.dim());
    let mut columns = vec!["kind".to_string(), "study_id".to_string()];
    columns.extend(vocab.names().iter().map(|n| format!("label:{n}")));
    columns.extend((0..dim).map(|i| format!("e{i}")));
    let mut out = columns.iter().map(|c| csv_escape(c)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in rows {
        if r.embedding.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "{}: embedding dim {} differs from {dim}",
                r.study_id,
                r.embedding.dim()
            )));
        }
        let mut fields = vec![r.kind.as_str().to_string(), csv_escape(&r.study_id)];
        match &r.labels {
            Some(l) => {
                l.check_len(vocab.size())?;
                fields.extend(l.values().iter().map(|v| v.to_string()));
            }
            None => fields.extend(std::iter::repeat(String::new()).take(vocab.size())),
        }
        fields.extend(r.embedding.values.iter().map(|v| v.to_string()));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = EmbeddingSidecar {
        rows: rows.len(),
        dim,
        labels: vocab.names().to_vec(),
        columns,
        note: "embeddings are raw projection outputs; L2-normalize before cosine comparison".into(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

/// Read back a table written by [`export_embeddings`]. Study ids containing commas are
/// not supported here.
pub fn read_embedding_table(path: impl AsRef<Path>) -> Result<(EmbeddingSidecar, Vec<EmbeddingRow>)> {
    let path = path.as_ref();
    let sp = sidecar_path(path);
    let side: EmbeddingSidecar =
        serde_json::from_str(&std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let nl = side.labels.len();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 2 + nl + side.dim {
            return Err(Error::InvalidArgument(format!("line {}: {} fields", i + 1, f.len())));
        }
        let kind = match f[0] {
            "volume" => EmbeddingKind::Volume,
            "report" => EmbeddingKind::Report,
            k => return Err(Error::InvalidArgument(format!("line {}: kind `{k}`", i + 1))),
        };
        let bad = |what: &str| Error::InvalidArgument(format!("line {}: bad {what}", i + 1));
        let labels = if f[2..2 + nl].iter().all(|s| s.is_empty()) {
            None
        } else {
            let v = f[2..2 + nl]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad("label")))
                .collect::<Result<Vec<_>>>()?;
            Some(LabelVector::new(v)?)
        };
        let values = f[2 + nl..]
            .iter()
            .map(|s| s.parse::<f32>().map_err(|_| bad("embedding value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            kind,
            study_id: f[1].to_string(),
            labels,
            embedding: Embedding::new(values),
        });
    }
    Ok((side, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = AbnormalityVocab::new(["A", "B"]).unwrap();
        let rows = vec![
            EmbeddingRow {
                kind: EmbeddingKind::Volume,
                study_id: "s1".into(),
                labels: Some(LabelVector::from_binary(&[1, 0]).unwrap()),
                embedding: Embedding::new(vec![0.1, -1.0e-7, 3.333_333_3]),
            },
            EmbeddingRow {
                kind: EmbeddingKind::Report,
                study_id: "s1".into(),
                labels: None,
                embedding: Embedding::new(vec![f32::MIN_POSITIVE, 2.0, -0.5]),
            },
        ];
        let p = dir.path().join("emb.csv");
        export_embeddings(&rows, &vocab, &p).unwrap();
        let (side, back) = read_embedding_table(&p).unwrap();
        assert_eq!(side.dim, 3);
        assert_eq!(back, rows);
    }
}
