//! Loading a corpus into model-ready form: preprocessed patches, report text and labels.

use crate::clip::CtClip;
use crate::corpus::{training_text, Corpus, LabelVector, Split, TextMode};
use crate::encoders::{patchify, Embedding, PatchConfig, Patches};
use crate::error::{Error, Result};
use crate::evalstats::{EmbeddingKind, EmbeddingRow};
use crate::volpre::{io::read_volume, prepare_any, TargetGeometry};

#[derive(Debug, Clone)]
pub struct StudyData {
    pub study_id: String,
    pub patient_id: String,
    pub split: Split,
    /// Report text under the chosen text mode; `None` when that section is absent.
    pub text: Option<String>,
    pub labels: Option<LabelVector>,
    pub patches: Patches,
}

/// Read, preprocess and patchify every study. Missing volumes are an error.
pub fn prepare_corpus(
    corpus: &Corpus,
    geometry: &TargetGeometry,
    patch: &PatchConfig,
    mode: TextMode,
) -> Result<Vec<StudyData>> {
    if let Some(id) = corpus.missing_volumes.first() {
        return Err(Error::Volume(format!(
            "{} studies have no volume file (first: {id})",
            corpus.missing_volumes.len()
        )));
    }
    corpus
        .records
        .iter()
        .map(|r| {
            let vol = prepare_any(&read_volume(&r.volume_path)?, geometry)?;
            Ok(StudyData {
                study_id: r.study_id.clone(),
                patient_id: r.patient_id.clone(),
                split: r.split,
                text: training_text(r, mode).ok(),
                labels: r.labels.clone(),
                patches: patchify(&vol, patch)?,
            })
        })
        .collect()
}

/// Volume embeddings for a set of studies, in order.
pub fn encode_volumes(model: &CtClip, data: &[StudyData], chunk: usize) -> Result<Vec<Embedding>> {
    let p: Vec<&Patches> = data.iter().map(|d| &d.patches).collect();
    model.encode_patch_batch(&p, chunk)
}

/// Volume rows and, where text exists, report rows for an embedding export.
pub fn embedding_rows(model: &CtClip, data: &[StudyData]) -> Result<Vec<EmbeddingRow>> {
    let vols = encode_volumes(model, data, 8)?;
    let mut rows = Vec::with_capacity(2 * data.len());
    for (d, v) in data.iter().zip(vols) {
        rows.push(EmbeddingRow {
            kind: EmbeddingKind::Volume,
            study_id: d.study_id.clone(),
            labels: d.labels.clone(),
            embedding: v,
        });
        if let Some(t) = &d.text {
            rows.push(EmbeddingRow {
                kind: EmbeddingKind::Report,
                study_id: d.study_id.clone(),
                labels: d.labels.clone(),
                embedding: model.encode_text(t)?,
            });
        }
    }
    Ok(rows)
}
