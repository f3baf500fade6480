//! Dataset-fraction ablation: one model per training fraction on nested patient
//! subsets, each evaluated on the same held-out split.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::ClipConfig;
use crate::corpus::{sample_fraction, Corpus, Split};
use crate::dataset::StudyData;
use crate::error::{Error, Result};
use crate::evalstats::{MetricsReport, ThresholdRule};
use crate::pipeline::{train_model, zeroshot_scores};
use crate::train::TrainConfig;
use crate::zeroshot::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub patients: usize,
    pub studies: usize,
    pub final_loss: f64,
    /// Held-out zero-shot mean AUROC, when the held-out split is labeled.
    pub mean_auroc: Option<f64>,
    pub auroc_std: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn fraction_dir(out: &Path, fraction: f64) -> PathBuf {
    out.join(format!("fraction_{fraction}"))
}

/// Train once per fraction. `data` must be `corpus` prepared in the same order.
/// Writes `fraction_<f>/model.ckpt`, `fraction_<f>/train_log.jsonl`, and a
/// `curve.csv` / `curve.json` table under `out`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    corpus: &Corpus,
    data: &[StudyData],
    fractions: &[f64],
    clip: &ClipConfig,
    train: &TrainConfig,
    model_seed: u64,
    template: &PromptTemplate,
    bootstrap_iterations: usize,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument("no fractions given".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidArgument(format!("fraction {f} outside (0, 1]")));
    }
    if corpus.len() != data.len() {
        return Err(Error::InvalidArgument("corpus and prepared data differ in length".into()));
    }
    let train_corpus = corpus.filter_split(Split::Train);
    let valid: Vec<StudyData> = data.iter().filter(|d| d.split == Split::Valid).cloned().collect();
    let evaluate = valid.iter().any(|d| d.labels.is_some());
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let sub = sample_fraction(&train_corpus, f, train.seed)?;
        let keep: std::collections::BTreeSet<&str> = sub.records.iter().map(|r| r.study_id.as_str()).collect();
        let subset: Vec<StudyData> = data.iter().filter(|d| keep.contains(d.study_id.as_str())).cloned().collect();
        let dir = fraction_dir(out, f);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let log_path = dir.join("train_log.jsonl");
        let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let cfg = TrainConfig {
            fraction: f,
            ..train.clone()
        };
        let (model, report) = train_model(&subset, clip, &cfg, model_seed, Some(&mut log), None)?;
        let checkpoint = dir.join("model.ckpt");
        model.save(&checkpoint, "contrastive", serde_json::json!({ "step": cfg.steps, "train": cfg }))?;
        let (mean_auroc, auroc_std) = if evaluate {
            let preds = zeroshot_scores(&model, &corpus.vocab, template, &valid, &format!("fraction_{f}"))?;
            let m = MetricsReport::compute(&preds, ThresholdRule::TopLeft)?;
            let m = if bootstrap_iterations > 0 {
                m.with_bootstrap(&preds, bootstrap_iterations, train.seed)?
            } else {
                m
            };
            (Some(m.mean.auroc), m.bootstrap.map(|b| b.std.auroc))
        } else {
            (None, None)
        };
        rows.push(AblationRow {
            fraction: f,
            patients: sub.patients().len(),
            studies: subset.len(),
            final_loss: report.losses().last().copied().unwrap_or(f64::NAN),
            mean_auroc,
            auroc_std,
            checkpoint,
        });
    }
    write_curve(out, &rows)?;
    Ok(rows)
}

pub fn curve_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut s = String::from("fraction,patients,studies,final_loss,mean_auroc,auroc_std,checkpoint\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{},{}",
            r.fraction,
            r.patients,
            r.studies,
            r.final_loss,
            opt(r.mean_auroc),
            opt(r.auroc_std),
            r.checkpoint.display()
        );
    }
    s
}

fn write_curve(out: &Path, rows: &[AblationRow]) -> Result<()> {
    let csv = out.join("curve.csv");
    std::fs::write(&csv, curve_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let json = out.join("curve.json");
    std::fs::write(&json, serde_json::to_string_pretty(rows)?).map_err(|e| Error::io(&json, e))
}
