//! Multi-stage workflows shared by the command line, the examples and the acceptance
//! suite: loading a split, training, scoring and the synthetic end-to-end run.

use std::path::Path;
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::clip::{ClipConfig, CtClip};
use crate::corpus::{load_corpus, AbnormalityVocab, Corpus, LabelVector, Split, TextMode};
use crate::dataset::{encode_volumes, prepare_corpus, StudyData};
use crate::encoders::WordTokenizer;
use crate::error::{Error, Result};
use crate::evalstats::{MetricsReport, ScoredPredictions, ThresholdRule};
use crate::finetune::{lipro_train, LiProConfig, LiProHead, VocabFineConfig, VocabFineTrainer};
use crate::retrieval::{recall_for_reports, EmbeddingIndex, RecallReport};
use crate::synth::{write_synth, SynthConfig};
use crate::train::{train_pairs, TrainConfig, TrainReport, Trainer};
use crate::zeroshot::{default_templates, prompt_sweep, score_set, template_by_id, PromptBank, PromptTemplate, SweepReport};

/// Word vocabulary over report text plus every prompt form, so prompts never fall
/// back to the unknown token.
pub fn build_tokenizer<'a>(texts: impl IntoIterator<Item = &'a str>, templates: &'a [PromptTemplate]) -> WordTokenizer {
    let forms: Vec<&str> = templates
        .iter()
        .flat_map(|t| [t.positive_form.as_str(), t.negative_form.as_str()])
        .collect();
    WordTokenizer::build(texts.into_iter().chain(forms), 1)
}

/// Load a manifest and turn every study into model input.
pub fn load_studies(
    manifest: impl AsRef<Path>,
    vocab: &AbnormalityVocab,
    clip: &ClipConfig,
    mode: TextMode,
) -> Result<(Corpus, Vec<StudyData>)> {
    let corpus = load_corpus(manifest, vocab)?;
    let data = prepare_corpus(&corpus, &clip.geometry, &clip.vision, mode)?;
    Ok((corpus, data))
}

pub fn split_of(data: &[StudyData], split: Split) -> Vec<StudyData> {
    data.iter().filter(|d| d.split == split).cloned().collect()
}

/// Independent copy of a model: fresh parameter storage with the same values.
pub fn fork(model: &CtClip) -> Result<CtClip> {
    CtClip::from_checkpoint(&model.checkpoint("fork", serde_json::Value::Null)?, model.dtype())
}

/// Fresh desk model with a tokenizer fitted to `train`, trained contrastively.
pub fn train_model(
    train: &[StudyData],
    clip: &ClipConfig,
    cfg: &TrainConfig,
    model_seed: u64,
    log: Option<&mut dyn std::io::Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<(CtClip, TrainReport)> {
    let texts: Vec<&str> = train.iter().filter_map(|d| d.text.as_deref()).collect();
    if texts.is_empty() {
        return Err(Error::InvalidArgument("training split has no report text".into()));
    }
    let templates = default_templates();
    let tok = build_tokenizer(texts, &templates);
    let model = CtClip::new(clip.clone(), tok, model_seed, DType::F32)?;
    let pairs = train_pairs(&model, train)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let report = trainer.fit(&pairs, log, checkpoint_dir)?;
    Ok((trainer.into_model(), report))
}

/// Write the synthetic corpus under `dir/data` and load it, then either load
/// `checkpoint` or train a fresh model on the train split with `cfg.train`.
pub fn synthetic_model(dir: impl AsRef<Path>, cfg: &E2eConfig, checkpoint: Option<&Path>) -> Result<(Corpus, Vec<StudyData>, CtClip)> {
    let summary = write_synth(dir.as_ref().join("data"), &cfg.synth)?;
    let vocab = AbnormalityVocab::from_file(&summary.vocab)?;
    let (corpus, data) = load_studies(&summary.manifest, &vocab, &cfg.clip, cfg.train.text_mode)?;
    let model = match checkpoint {
        Some(p) => CtClip::load(p, DType::F32)?.0,
        None => train_model(&split_of(&data, Split::Train), &cfg.clip, &cfg.train, cfg.model_seed, None, None)?.0,
    };
    Ok((corpus, data, model))
}

/// Report-to-volume Recall@K over one split, querying with each study's own report.
pub fn report_recall(model: &CtClip, data: &[StudyData], k: usize) -> Result<RecallReport> {
    let index = EmbeddingIndex::build(model, data, "recall", None)?;
    let reports: Vec<(String, String)> = data
        .iter()
        .filter_map(|d| d.text.clone().map(|t| (d.study_id.clone(), t)))
        .collect();
    recall_for_reports(&reports, &index, k, model)
}

fn labeled(data: &[StudyData]) -> Result<(Vec<&StudyData>, Vec<LabelVector>)> {
    let l: Vec<&StudyData> = data.iter().filter(|d| d.labels.is_some()).collect();
    if l.is_empty() {
        return Err(Error::InvalidArgument("no labeled studies".into()));
    }
    let truths = l.iter().map(|d| d.labels.clone().unwrap()).collect();
    Ok((l, truths))
}

/// Zero-shot scores with the model's learned temperature.
pub fn zeroshot_scores(
    model: &CtClip,
    vocab: &AbnormalityVocab,
    template: &PromptTemplate,
    data: &[StudyData],
    tag: &str,
) -> Result<ScoredPredictions> {
    let (l, truths) = labeled(data)?;
    let owned: Vec<StudyData> = l.into_iter().cloned().collect();
    let emb = encode_volumes(model, &owned, 8)?;
    let bank = PromptBank::new(vocab, template, model)?;
    score_set(&bank, vocab, &emb, &truths, model.temperature(), tag)
}

pub fn sweep_templates(
    model: &CtClip,
    vocab: &AbnormalityVocab,
    templates: &[PromptTemplate],
    data: &[StudyData],
) -> Result<SweepReport> {
    let (l, truths) = labeled(data)?;
    let owned: Vec<StudyData> = l.into_iter().cloned().collect();
    let emb = encode_volumes(model, &owned, 8)?;
    prompt_sweep(model, vocab, templates, &emb, &truths, model.temperature())
}

pub fn lipro_scores(model: &CtClip, head: &LiProHead, vocab: &AbnormalityVocab, data: &[StudyData], tag: &str) -> Result<ScoredPredictions> {
    let (l, truths) = labeled(data)?;
    let owned: Vec<StudyData> = l.into_iter().cloned().collect();
    let emb = encode_volumes(model, &owned, 8)?;
    let items = emb
        .iter()
        .zip(truths)
        .map(|(e, t)| Ok((head.predict(e)?, t)))
        .collect::<Result<Vec<_>>>()?;
    ScoredPredictions::from_items(tag, vocab.names(), &items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2eConfig {
    pub synth: SynthConfig,
    pub clip: ClipConfig,
    pub train: TrainConfig,
    pub vocabfine: VocabFineConfig,
    pub lipro: LiProConfig,
    pub model_seed: u64,
    pub bootstrap_iterations: usize,
    pub bootstrap_seed: u64,
}

impl E2eConfig {
    /// The default recipe with a shorter schedule, for demos that need a usable model fast.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.train.steps = 500;
        c.train.sentence_keep_until = 350;
        c
    }
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                negative_mention: 0.5,
                shuffle_sentences: true,
                ..Default::default()
            },
            clip: ClipConfig::desk(),
            train: TrainConfig {
                batch_size: 16,
                steps: 1500,
                learning_rate: 1e-3,
                sentence_keep: 0.5,
                sentence_keep_until: 1000,
                ..Default::default()
            },
            vocabfine: VocabFineConfig {
                chunk_size: 4,
                batch_size: 16,
                steps: 60,
                learning_rate: 1e-4,
                ..Default::default()
            },
            lipro: LiProConfig {
                steps: 300,
                ..Default::default()
            },
            model_seed: 0,
            bootstrap_iterations: 500,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eOutcome {
    pub train_seconds: f64,
    pub total_seconds: f64,
    pub final_loss: f64,
    pub train_recall_at_1: f64,
    /// Template sweep on the training split; its winner drives zero-shot and VocabFine.
    pub sweep: SweepReport,
    pub zeroshot: MetricsReport,
    pub vocabfine: MetricsReport,
    pub lipro: MetricsReport,
}

impl E2eOutcome {
    /// Fine-tuned mean AUROC is at least the zero-shot mean minus its bootstrap std.
    pub fn matches_or_improves(&self, tuned: &MetricsReport) -> bool {
        let std = self.zeroshot.bootstrap.as_ref().map_or(0.0, |b| b.std.auroc);
        tuned.mean.auroc >= self.zeroshot.mean.auroc - std
    }
}

/// Generate the synthetic corpus under `dir`, pre-train, then evaluate zero-shot,
/// VocabFine and a frozen linear probe on the held-out split. Artifacts land in `dir`.
pub fn run_synthetic_e2e(dir: impl AsRef<Path>, cfg: &E2eConfig) -> Result<(E2eOutcome, CtClip)> {
    let dir = dir.as_ref();
    let t0 = Instant::now();
    let summary = write_synth(dir.join("data"), &cfg.synth)?;
    let vocab = AbnormalityVocab::from_file(&summary.vocab)?;
    let (_, data) = load_studies(&summary.manifest, &vocab, &cfg.clip, cfg.train.text_mode)?;
    let (train, valid) = (split_of(&data, Split::Train), split_of(&data, Split::Valid));

    let t_train = Instant::now();
    let mut log = std::fs::File::create(dir.join("train_log.jsonl")).map_err(|e| Error::io(dir, e))?;
    let (model, report) = train_model(&train, &cfg.clip, &cfg.train, cfg.model_seed, Some(&mut log), None)?;
    let train_seconds = t_train.elapsed().as_secs_f64();
    model.save(dir.join("model.ckpt"), "contrastive", serde_json::json!({ "step": cfg.train.steps }))?;

    let recall = report_recall(&model, &train, 1)?;
    let templates = default_templates();
    let sweep = sweep_templates(&model, &vocab, &templates, &train)?;
    let template = template_by_id(&templates, sweep.best_template)?.clone();

    let rule = ThresholdRule::TopLeft;
    let (n, seed) = (cfg.bootstrap_iterations, cfg.bootstrap_seed);
    let zs = zeroshot_scores(&model, &vocab, &template, &valid, "zeroshot")?;
    let zeroshot = MetricsReport::compute(&zs, rule)?.with_bootstrap(&zs, n, seed)?;

    let head = LiProHead::new(vocab.size(), cfg.clip.proj_dim, cfg.lipro.freeze_backbone, cfg.lipro.seed, DType::F32)?;
    lipro_train(&model, &head, &train, &cfg.lipro)?;
    let lp = lipro_scores(&model, &head, &vocab, &valid, "lipro")?;
    let lipro = MetricsReport::compute(&lp, rule)?
        .with_bootstrap(&lp, n, seed)?
        .with_comparison(&lp, &zs, 1000, seed)?;

    let vf_cfg = VocabFineConfig {
        template_id: template.id,
        ..cfg.vocabfine.clone()
    };
    let mut vf = VocabFineTrainer::new(fork(&model)?, &vocab, &template, vf_cfg)?;
    vf.fit(&train)?;
    vf.checkpoint()?.save(dir.join("vocabfine.ckpt"))?;
    let vs = zeroshot_scores(vf.model(), &vocab, &template, &valid, "vocabfine")?;
    let vocabfine = MetricsReport::compute(&vs, rule)?
        .with_bootstrap(&vs, n, seed)?
        .with_comparison(&vs, &zs, 1000, seed)?;

    zeroshot.write(dir.join("zeroshot_metrics.json"))?;
    vocabfine.write(dir.join("vocabfine_metrics.json"))?;
    lipro.write(dir.join("lipro_metrics.json"))?;
    sweep.write(dir.join("prompt_sweep.json"))?;
    let outcome = E2eOutcome {
        train_seconds,
        total_seconds: t0.elapsed().as_secs_f64(),
        final_loss: report.losses().last().copied().unwrap_or(f64::NAN),
        train_recall_at_1: recall.recall,
        sweep,
        zeroshot,
        vocabfine,
        lipro,
    };
    std::fs::write(dir.join("outcome.json"), serde_json::to_string_pretty(&outcome)?).map_err(|e| Error::io(dir, e))?;
    Ok((outcome, model))
}
