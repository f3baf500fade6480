//! Command-line entry point. Every subcommand resolves one configuration (defaults,
//! then `--config` JSON, then `CTCLIP_*` environment, then `--override` and `--seed`),
//! writes it to `<out>/config.resolved.json`, runs, and records `<out>/run.json`.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ablation::run_ablation;
use crate::clip::{ClipConfig, CtClip};
use crate::corpus::{load_corpus, sample_fraction, AbnormalityVocab, Split, TextMode};
use crate::dataset::{embedding_rows, prepare_corpus, StudyData};
use crate::error::{Error, Result};
use crate::evalstats::{export_embeddings, MetricsReport, ScoredPredictions, ThresholdRule};
use crate::finetune::{lipro_checkpoint, lipro_train, LiProConfig, LiProHead, VocabFineConfig, VocabFineTrainer};
use crate::labelx::{eval_extractor, extract_labels, load_gold, RuleExtractor, RuleSet};
use crate::nn::Checkpoint;
use crate::pipeline::{build_tokenizer, fork, report_recall, split_of, sweep_templates};
use crate::retrieval::service::{serve_blocking, ServiceState, VolumeStore};
use crate::retrieval::{map_at_k, query_by_text, query_by_volume, EmbeddingIndex, MapConfig, RetrievalResult, VolumeQuery};
use crate::synth::{write_synth, SynthConfig};
use crate::train::{checkpoint_step, train_pairs, TrainConfig, Trainer};
use crate::volpre::io::{read_slice_dir, read_volume, write_volume, DType as VolDType};
use crate::volpre::prepare_any;
use crate::zeroshot::{default_templates, load_templates, template_by_id, PromptBank, PromptTemplate};

pub const ENV_PREFIX: &str = "CTCLIP_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotSection {
    /// Template used for inference; VocabFine uses `vocabfine.template_id`.
    pub template_id: u8,
    /// Fixed inference temperature; `null` uses the model's learned one.
    pub temperature: Option<f64>,
    /// Template file replacing the bundled seven.
    pub templates: Option<PathBuf>,
}

impl Default for ZeroShotSection {
    fn default() -> Self {
        Self {
            template_id: 7,
            temperature: None,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub bootstrap_iterations: usize,
    pub permutations: usize,
    pub threshold_rule: ThresholdRule,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bootstrap_iterations: 500,
            permutations: 1000,
            threshold_rule: ThresholdRule::TopLeft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSection {
    pub k: usize,
    pub map_ks: Vec<usize>,
    pub recall_ks: Vec<usize>,
    pub hit_threshold: f64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: 10,
            map_ks: vec![1, 5, 10, 50],
            recall_ks: vec![5, 10, 50],
            hit_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub fractions: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            fractions: vec![0.098, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSection {
    pub addr: String,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

/// Everything a run can be configured with. `seed` drives every random stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Vocabulary file (one name per line); `null` uses the bundled 18 labels.
    pub vocab: Option<PathBuf>,
    pub text_mode: TextMode,
    pub model: ClipConfig,
    pub train: TrainConfig,
    pub zeroshot: ZeroShotSection,
    pub vocabfine: VocabFineConfig,
    pub lipro: LiProConfig,
    pub eval: EvalSection,
    pub retrieval: RetrievalSection,
    pub ablation: AblationSection,
    pub serve: ServeSection,
    pub synth: SynthConfig,
    /// Rule file for `extract-labels`; `null` uses the bundled rules.
    pub label_rules: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e2e = crate::pipeline::E2eConfig::default();
        Self {
            seed: 0,
            vocab: None,
            text_mode: TextMode::Both,
            model: ClipConfig::desk(),
            train: e2e.train,
            zeroshot: ZeroShotSection::default(),
            vocabfine: VocabFineConfig::default(),
            lipro: LiProConfig::default(),
            eval: EvalSection::default(),
            retrieval: RetrievalSection::default(),
            ablation: AblationSection::default(),
            serve: ServeSection::default(),
            synth: e2e.synth,
            label_rules: None,
        }
    }
}

impl RunConfig {
    /// Push the single seed into every stage.
    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.vocabfine.seed = self.seed;
        self.lipro.seed = self.seed;
        self.synth.seed = self.seed;
    }

    pub fn vocab(&self) -> Result<AbnormalityVocab> {
        match &self.vocab {
            Some(p) => AbnormalityVocab::from_file(p),
            None => Ok(AbnormalityVocab::default_ct()),
        }
    }

    pub fn templates(&self) -> Result<Vec<PromptTemplate>> {
        match &self.zeroshot.templates {
            Some(p) => load_templates(p),
            None => Ok(default_templates()),
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Set a dotted key. The key must already exist in the tree, so typos fail loudly.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{}` is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Merge configuration sources in precedence order: defaults < file < env < flags.
pub fn resolve_config(
    file: Option<&Path>,
    env: &[(String, String)],
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        check_known(&tree, &v, "")?;
        merge(&mut tree, v);
    }
    let mut env: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (k, v) in env {
        let key = k[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
        set_path(&mut tree, &key, parse_scalar(v))?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        set_path(&mut tree, k.trim(), parse_scalar(v.trim()))?;
    }
    if let Some(s) = seed {
        set_path(&mut tree, "seed", json!(s))?;
    }
    let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    cfg.propagate_seed();
    Ok(cfg)
}

fn check_known(defaults: &Value, given: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(d), Value::Object(g)) = (defaults, given) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match d.get(k) {
                None => return Err(Error::Config(format!("unknown config key `{path}`"))),
                Some(dv) => check_known(dv, v, &path)?,
            }
        }
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "ctclip", version, about = "Chest CT volume-report contrastive toolkit")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: runs/<subcommand>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dotted config override, e.g. `train.steps=200` (repeatable).
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    /// JSON-lines study manifest.
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    All,
}

impl SplitArg {
    fn select(self, data: &[StudyData]) -> Vec<StudyData> {
        match self {
            SplitArg::Train => split_of(data, Split::Train),
            SplitArg::Valid => split_of(data, Split::Valid),
            SplitArg::All => data.to_vec(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic paired corpus.
    Synth,
    /// Resample, crop/pad and normalize a volume, slice directory or whole manifest.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Contrastive pre-training on the train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score every prompt template and flag the most accurate.
    SweepPrompts {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, value_enum, default_value = "valid")]
        split: SplitArg,
    },
    /// Open-vocabulary fine-tuning on prompt logits.
    FinetuneVocab {
        #[command(flatten)]
        m: ModelArgs,
    },
    /// Linear probe on volume embeddings.
    FinetuneLipro {
        #[command(flatten)]
        m: ModelArgs,
    },
    /// Per-abnormality probabilities for every study (probe head used when present).
    InferZeroshot {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, value_enum, default_value = "valid")]
        split: SplitArg,
    },
    /// Rule-based report labeling, optionally scored against a gold file.
    ExtractLabels {
        #[command(flatten)]
        m: ManifestArg,
        /// JSON-lines gold annotations.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Embed volumes into a retrieval index.
    BuildIndex {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Query an index by text or by an indexed study.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        /// Needed for text queries.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "study")]
        text: Option<String>,
        #[arg(long)]
        study: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Metrics for saved predictions and/or retrieval quality of an index.
    Eval {
        /// Predictions JSON written by `infer-zeroshot`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Second predictions file for paired permutation tests.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// With --index and --checkpoint: report-to-volume Recall@K.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on nested patient fractions and tabulate held-out AUROC.
    AblateFraction {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated fractions in (0, 1].
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Volume and report embeddings with labels as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        m: ModelArgs,
    },
    /// Retrieval HTTP service.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose volumes back the slice endpoints.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::SweepPrompts { .. } => "sweep-prompts",
            Command::FinetuneVocab { .. } => "finetune-vocab",
            Command::FinetuneLipro { .. } => "finetune-lipro",
            Command::InferZeroshot { .. } => "infer-zeroshot",
            Command::ExtractLabels { .. } => "extract-labels",
            Command::BuildIndex { .. } => "build-index",
            Command::Retrieve { .. } => "retrieve",
            Command::Eval { .. } => "eval",
            Command::AblateFraction { .. } => "ablate-fraction",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::Serve { .. } => "serve",
        }
    }
}

/// What a subcommand produced, recorded in `run.json`.
#[derive(Debug, Default)]
struct Outcome {
    outputs: Vec<PathBuf>,
    summary: Value,
}

/// Parse `argv` (program name first) and run. Exit codes: 0 success, 1 failure, 2 usage.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env: Vec<(String, String)> = std::env::vars().collect();
    let (code, summary) = execute(argv, &env);
    if let Some(s) = summary {
        use std::io::Write as _;
        // a closed pipe is not worth a panic
        let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&s).unwrap_or_default());
    }
    code
}

/// `dispatch` with an explicit environment and without the stdout summary (it is
/// still in `run.json`), for hermetic callers.
pub fn dispatch_with_env<I, T>(argv: I, env: &[(String, String)]) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(argv, env).0
}

fn execute<I, T>(argv: I, env: &[(String, String)]) -> (i32, Option<Value>)
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            // the macros (unlike `Error::print`) respect test output capture
            if e.use_stderr() {
                eprint!("{}", e.render());
            } else {
                print!("{}", e.render());
            }
            return (code, None);
        }
    };
    let name = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let started = Instant::now();
    let result = std::fs::create_dir_all(&out)
        .map_err(|e| Error::io(&out, e))
        .and_then(|_| resolve_config(cli.config.as_deref(), env, &cli.overrides, cli.seed))
        .and_then(|cfg| {
            std::fs::write(out.join("config.resolved.json"), serde_json::to_string_pretty(&cfg)?)
                .map_err(|e| Error::io(&out, e))?;
            run(&cli.command, &cfg, &out).map(|o| (cfg.seed, o))
        });
    let elapsed = started.elapsed().as_secs_f64();
    let (code, record) = match &result {
        Ok((seed, o)) => (
            0,
            json!({
                "subcommand": name,
                "status": "ok",
                "seed": seed,
                "elapsed_seconds": elapsed,
                "outputs": o.outputs,
                "summary": o.summary,
            }),
        ),
        Err(e) => {
            eprintln!("error: {e}");
            (
                if matches!(e, Error::Config(_)) { 2 } else { 1 },
                json!({
                    "subcommand": name,
                    "status": "error",
                    "elapsed_seconds": elapsed,
                    "error": e.to_string(),
                }),
            )
        }
    };
    if out.is_dir() {
        if let Ok(text) = serde_json::to_string_pretty(&record) {
            let _ = std::fs::write(out.join("run.json"), text);
        }
    }
    (code, result.ok().map(|(_, o)| o.summary))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn load_data(manifest: &Path, cfg: &RunConfig) -> Result<(crate::corpus::Corpus, Vec<StudyData>)> {
    let vocab = cfg.vocab()?;
    let corpus = load_corpus(manifest, &vocab)?;
    let data = prepare_corpus(&corpus, &cfg.model.geometry, &cfg.model.vision, cfg.text_mode)?;
    Ok((corpus, data))
}

fn load_model(path: &Path) -> Result<(CtClip, Checkpoint)> {
    CtClip::load(path, DType::F32)
}

fn inference_template(cfg: &RunConfig) -> Result<PromptTemplate> {
    Ok(template_by_id(&cfg.templates()?, cfg.zeroshot.template_id)?.clone())
}

fn run(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    match cmd {
        Command::Synth => {
            let s = write_synth(out.join("data"), &cfg.synth)?;
            Ok(Outcome {
                outputs: vec![s.manifest.clone(), s.vocab.clone()],
                summary: serde_json::to_value(&s)?,
            })
        }
        Command::Preprocess { input } => preprocess(input, cfg, out),
        Command::Train { manifest, resume } => train(manifest, resume.as_deref(), cfg, out),
        Command::SweepPrompts { m, split } => {
            let (corpus, data) = load_data(&m.manifest, cfg)?;
            let (model, _) = load_model(&m.checkpoint)?;
            let report = sweep_templates(&model, &corpus.vocab, &cfg.templates()?, &split.select(&data))?;
            let p = out.join("prompt_sweep.json");
            report.write(&p)?;
            Ok(Outcome {
                outputs: vec![p.clone(), p.with_extension("csv")],
                summary: json!({ "best_template": report.best_template, "rows": report.rows }),
            })
        }
        Command::FinetuneVocab { m } => {
            let (corpus, data) = load_data(&m.manifest, cfg)?;
            let (model, _) = load_model(&m.checkpoint)?;
            let templates = cfg.templates()?;
            let template = template_by_id(&templates, cfg.vocabfine.template_id)?;
            let mut t = VocabFineTrainer::new(model, &corpus.vocab, template, cfg.vocabfine.clone())?;
            let losses = t.fit(&split_of(&data, Split::Train))?;
            let p = out.join("vocabfine.ckpt");
            t.checkpoint()?.save(&p)?;
            Ok(Outcome {
                outputs: vec![p],
                summary: json!({ "steps": losses.len(), "final_loss": losses.last() }),
            })
        }
        Command::FinetuneLipro { m } => {
            let (corpus, data) = load_data(&m.manifest, cfg)?;
            let (model, _) = load_model(&m.checkpoint)?;
            let head = LiProHead::new(
                corpus.vocab.size(),
                model.config().proj_dim,
                cfg.lipro.freeze_backbone,
                cfg.lipro.seed,
                DType::F32,
            )?;
            let losses = lipro_train(&model, &head, &split_of(&data, Split::Train), &cfg.lipro)?;
            let p = out.join("lipro.ckpt");
            lipro_checkpoint(&model, &head, &corpus.vocab)?.save(&p)?;
            Ok(Outcome {
                outputs: vec![p],
                summary: json!({ "steps": losses.len(), "final_loss": losses.last() }),
            })
        }
        Command::InferZeroshot { m, split } => infer(&m.manifest, &m.checkpoint, *split, cfg, out),
        Command::ExtractLabels { m, gold } => extract(&m.manifest, gold.as_deref(), cfg, out),
        Command::BuildIndex { m, split } => {
            let (corpus, data) = load_data(&m.manifest, cfg)?;
            let (model, _) = load_model(&m.checkpoint)?;
            let tag = m.checkpoint.display().to_string();
            let index = EmbeddingIndex::build(&model, &split.select(&data), &tag, Some(corpus.vocab.names().to_vec()))?;
            let p = out.join("index.ctidx");
            index.save(&p)?;
            Ok(Outcome {
                outputs: vec![p],
                summary: serde_json::to_value(index.info())?,
            })
        }
        Command::Retrieve {
            index,
            checkpoint,
            text,
            study,
            k,
        } => retrieve(index, checkpoint.as_deref(), text.as_deref(), study.as_deref(), k.unwrap_or(cfg.retrieval.k), out),
        Command::Eval {
            predictions,
            compare,
            index,
            manifest,
            checkpoint,
        } => evaluate(
            predictions.as_deref(),
            compare.as_deref(),
            index.as_deref(),
            manifest.as_deref(),
            checkpoint.as_deref(),
            cfg,
            out,
        ),
        Command::AblateFraction { manifest, fractions } => {
            let (corpus, data) = load_data(manifest, cfg)?;
            let fr = fractions.clone().unwrap_or_else(|| cfg.ablation.fractions.clone());
            let template = inference_template(cfg)?;
            let rows = run_ablation(
                &corpus,
                &data,
                &fr,
                &cfg.model,
                &cfg.train,
                cfg.seed,
                &template,
                cfg.eval.bootstrap_iterations,
                out,
            )?;
            let mut outputs: Vec<PathBuf> = rows.iter().map(|r| r.checkpoint.clone()).collect();
            outputs.extend([out.join("curve.csv"), out.join("curve.json")]);
            Ok(Outcome {
                outputs,
                summary: serde_json::to_value(&rows)?,
            })
        }
        Command::ExportEmbeddings { m } => {
            let (corpus, data) = load_data(&m.manifest, cfg)?;
            let (model, _) = load_model(&m.checkpoint)?;
            let rows = embedding_rows(&model, &data)?;
            let p = out.join("embeddings.csv");
            export_embeddings(&rows, &corpus.vocab, &p)?;
            Ok(Outcome {
                outputs: vec![p.clone(), p.with_extension("json")],
                summary: json!({ "rows": rows.len() }),
            })
        }
        Command::Serve {
            index,
            checkpoint,
            manifest,
            addr,
        } => serve(index, checkpoint, manifest.as_deref(), addr.as_deref().unwrap_or(&cfg.serve.addr), cfg, out),
    }
}

fn preprocess(input: &Path, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let geometry = &cfg.model.geometry;
    let is_manifest = input.extension().is_some_and(|e| e == "jsonl");
    if !is_manifest {
        let vol = if input.is_dir() { read_slice_dir(input)? } else { read_volume(input)? };
        let prepared = prepare_any(&vol, geometry)?;
        let stem = input.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned());
        let p = out.join(format!("{stem}.ctv"));
        write_volume(&p, &prepared, VolDType::F32)?;
        return Ok(Outcome {
            outputs: vec![p],
            summary: json!({ "volumes": 1, "shape": prepared.shape() }),
        });
    }
    let mut corpus = load_corpus(input, &cfg.vocab()?)?;
    if let Some(id) = corpus.missing_volumes.first() {
        return Err(Error::Volume(format!("missing volume for `{id}`")));
    }
    let vdir = out.join("volumes");
    std::fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
    for r in &mut corpus.records {
        let prepared = prepare_any(&read_volume(&r.volume_path)?, geometry)?;
        let rel = PathBuf::from("volumes").join(format!("{}.ctv", r.study_id));
        write_volume(out.join(&rel), &prepared, VolDType::F32)?;
        r.volume_path = rel;
    }
    let m = out.join("manifest.jsonl");
    corpus.write_manifest(&m)?;
    Ok(Outcome {
        outputs: vec![m],
        summary: json!({ "volumes": corpus.len(), "shape": geometry.shape }),
    })
}

fn train(manifest: &Path, resume: Option<&Path>, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let (corpus, data) = load_data(manifest, cfg)?;
    let train_corpus = sample_fraction(&corpus.filter_split(Split::Train), cfg.train.fraction, cfg.seed)?;
    let keep: std::collections::BTreeSet<&str> = train_corpus.records.iter().map(|r| r.study_id.as_str()).collect();
    let train: Vec<StudyData> = data.into_iter().filter(|d| keep.contains(d.study_id.as_str())).collect();
    let (model, start) = match resume {
        Some(p) => {
            let (m, ck) = load_model(p)?;
            (m, checkpoint_step(&ck.meta))
        }
        None => {
            let templates = cfg.templates()?;
            let tok = build_tokenizer(train.iter().filter_map(|d| d.text.as_deref()), &templates);
            (CtClip::new(cfg.model.clone(), tok, cfg.seed, DType::F32)?, 0)
        }
    };
    let pairs = train_pairs(&model, &train)?;
    let mut trainer = if start > 0 {
        Trainer::resume(model, cfg.train.clone(), start, pairs.len())?
    } else {
        Trainer::new(model, cfg.train.clone())?
    };
    let log_path = out.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(start > 0)
        .write(true)
        .truncate(start == 0)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let ck_dir = out.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        std::fs::create_dir_all(&ck_dir).map_err(io_err(&ck_dir))?;
    }
    let report = trainer.fit(&pairs, Some(&mut log), Some(&ck_dir))?;
    let p = out.join("model.ckpt");
    trainer.save(&p)?;
    let recall = report_recall(trainer.model(), &train, 1)?;
    let mut outputs = vec![p, log_path];
    outputs.extend(report.checkpoints.iter().cloned());
    Ok(Outcome {
        outputs,
        summary: json!({
            "pairs": pairs.len(),
            "steps": trainer.current_step(),
            "final_loss": report.losses().last(),
            "temperature": trainer.model().temperature(),
            "train_recall_at_1": recall.recall,
        }),
    })
}

fn infer(manifest: &Path, checkpoint: &Path, split: SplitArg, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let (corpus, data) = load_data(manifest, cfg)?;
    let (model, ck) = load_model(checkpoint)?;
    let data = split.select(&data);
    if data.is_empty() {
        return Err(Error::InvalidArgument("selected split is empty".into()));
    }
    let vocab = &corpus.vocab;
    let regime = ck.meta["regime"].as_str().unwrap_or("contrastive").to_string();
    let emb = crate::dataset::encode_volumes(&model, &data, 8)?;
    let preds: Vec<crate::corpus::LabelVector> = if regime == "lipro" {
        let head = LiProHead::from_checkpoint(&ck, DType::F32)?;
        emb.iter().map(|e| head.predict(e)).collect::<Result<_>>()?
    } else {
        let template = match ck.meta["extra"]["template_id"].as_u64() {
            Some(id) if regime == "vocabfine" => template_by_id(&cfg.templates()?, id as u8)?.clone(),
            _ => inference_template(cfg)?,
        };
        let bank = PromptBank::new(vocab, &template, &model)?;
        let t = match cfg.zeroshot.temperature {
            Some(t) => t,
            None => model.temperature(),
        };
        emb.iter().map(|e| bank.detect_all(e, t)).collect::<Result<_>>()?
    };
    let mut csv = format!("study_id,{}\n", vocab.names().iter().map(|n| crate::evalstats::csv_escape(n)).collect::<Vec<_>>().join(","));
    for (d, p) in data.iter().zip(&preds) {
        csv.push_str(&d.study_id);
        for v in p.values() {
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
    }
    let csv_path = out.join("probabilities.csv");
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    let mut outputs = vec![csv_path];
    let mut summary = json!({ "regime": regime, "studies": data.len() });
    if data.iter().all(|d| d.labels.is_some()) {
        let items: Vec<_> = preds.into_iter().zip(data.iter().map(|d| d.labels.clone().unwrap())).collect();
        let scored = ScoredPredictions::from_items(regime.clone(), vocab.names(), &items)?;
        let p = out.join("predictions.json");
        std::fs::write(&p, serde_json::to_string(&scored)?).map_err(io_err(&p))?;
        outputs.push(p);
        if let Ok(m) = MetricsReport::compute(&scored, cfg.eval.threshold_rule) {
            summary["mean"] = serde_json::to_value(m.mean)?;
        }
    }
    Ok(Outcome { outputs, summary })
}

fn extract(manifest: &Path, gold: Option<&Path>, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let vocab = cfg.vocab()?;
    let rules = match &cfg.label_rules {
        Some(p) => RuleSet::load(p)?,
        None => RuleSet::default_rules(),
    };
    let mut corpus = load_corpus(manifest, &vocab)?;
    let mut labeled = 0;
    for r in &mut corpus.records {
        if let Ok(l) = extract_labels(&r.report, &rules, &vocab) {
            r.labels = Some(l);
            labeled += 1;
        }
    }
    let p = out.join("manifest.labeled.jsonl");
    corpus.write_manifest(&p)?;
    let mut outputs = vec![p];
    let mut summary = json!({ "reports": corpus.len(), "labeled": labeled });
    if let Some(g) = gold {
        let gold = load_gold(g, &vocab)?;
        let report = eval_extractor(&gold, &RuleExtractor { rules }, &vocab)?;
        let ep = out.join("extractor_eval.json");
        std::fs::write(&ep, serde_json::to_string_pretty(&report)?).map_err(io_err(&ep))?;
        outputs.push(ep);
        summary["macro_f1"] = json!(report.macro_f1);
    }
    Ok(Outcome { outputs, summary })
}

fn retrieve(index: &Path, checkpoint: Option<&Path>, text: Option<&str>, study: Option<&str>, k: usize, out: &Path) -> Result<Outcome> {
    let index = EmbeddingIndex::load(index)?;
    let result: RetrievalResult = match (text, study) {
        (Some(t), _) => {
            let ck = checkpoint.ok_or_else(|| Error::InvalidArgument("text queries need --checkpoint".into()))?;
            let (model, _) = load_model(ck)?;
            query_by_text(&index, t, k, &model)?
        }
        (None, Some(id)) => query_by_volume(&index, VolumeQuery::StudyId(id), k)?,
        (None, None) => return Err(Error::InvalidArgument("give --text or --study".into())),
    };
    let results: Vec<Value> = result
        .ranked
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let labels = index.get(&r.study_id).map(|e| index.label_names(e)).unwrap_or_default();
            json!({ "rank": i + 1, "study_id": r.study_id, "score": r.score, "labels": labels })
        })
        .collect();
    let body = json!({ "query_kind": result.query_kind, "k": k, "results": results });
    let p = out.join("results.json");
    std::fs::write(&p, serde_json::to_string_pretty(&body)?).map_err(io_err(&p))?;
    Ok(Outcome {
        outputs: vec![p],
        summary: body,
    })
}

fn read_predictions(p: &Path) -> Result<ScoredPredictions> {
    let text = std::fs::read_to_string(p).map_err(io_err(p))?;
    Ok(serde_json::from_str(&text)?)
}

fn evaluate(
    predictions: Option<&Path>,
    compare: Option<&Path>,
    index: Option<&Path>,
    manifest: Option<&Path>,
    checkpoint: Option<&Path>,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Outcome> {
    if predictions.is_none() && index.is_none() {
        return Err(Error::InvalidArgument("give --predictions and/or --index".into()));
    }
    let mut outcome = Outcome {
        summary: json!({}),
        ..Default::default()
    };
    if let Some(p) = predictions {
        let preds = read_predictions(p)?;
        let mut report = MetricsReport::compute(&preds, cfg.eval.threshold_rule)?;
        if cfg.eval.bootstrap_iterations > 0 {
            report = report.with_bootstrap(&preds, cfg.eval.bootstrap_iterations, cfg.seed)?;
        }
        if let Some(c) = compare {
            report = report.with_comparison(&preds, &read_predictions(c)?, cfg.eval.permutations, cfg.seed)?;
        }
        let mp = out.join("metrics.json");
        report.write(&mp)?;
        outcome.outputs.extend([mp.clone(), mp.with_extension("csv")]);
        outcome.summary["mean"] = serde_json::to_value(report.mean)?;
        outcome.summary["bootstrap"] = serde_json::to_value(&report.bootstrap)?;
        outcome.summary["p_values"] = serde_json::to_value(&report.p_values)?;
    }
    if let Some(ip) = index {
        let idx = EmbeddingIndex::load(ip)?;
        let map_cfg = MapConfig {
            hit_threshold: cfg.retrieval.hit_threshold,
            baseline_seed: cfg.seed,
            ..Default::default()
        };
        let maps = cfg
            .retrieval
            .map_ks
            .iter()
            .map(|&k| map_at_k(&idx, k, &map_cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut body = json!({ "map": maps });
        if let (Some(m), Some(c)) = (manifest, checkpoint) {
            let (_, data) = load_data(m, cfg)?;
            let (model, _) = load_model(c)?;
            let in_index: Vec<StudyData> = data.into_iter().filter(|d| idx.get(&d.study_id).is_some()).collect();
            let reports: Vec<(String, String)> = in_index
                .iter()
                .filter_map(|d| d.text.clone().map(|t| (d.study_id.clone(), t)))
                .collect();
            let recalls = cfg
                .retrieval
                .recall_ks
                .iter()
                .map(|&k| crate::retrieval::recall_for_reports(&reports, &idx, k, &model))
                .collect::<Result<Vec<_>>>()?;
            body["recall"] = serde_json::to_value(recalls)?;
        }
        let rp = out.join("retrieval_metrics.json");
        std::fs::write(&rp, serde_json::to_string_pretty(&body)?).map_err(io_err(&rp))?;
        outcome.outputs.push(rp);
        outcome.summary["retrieval"] = body;
    }
    Ok(outcome)
}

fn serve(index: &Path, checkpoint: &Path, manifest: Option<&Path>, addr: &str, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let index = EmbeddingIndex::load(index)?;
    let (model, _) = load_model(checkpoint)?;
    let mut volumes = VolumeStore::new();
    if let Some(m) = manifest {
        // an unconfigured vocabulary defers to the one the index was built with
        let vocab = match (&cfg.vocab, index.vocab()) {
            (None, Some(names)) => AbnormalityVocab::new(names.iter().cloned())?,
            _ => cfg.vocab()?,
        };
        for r in load_corpus(m, &vocab)?.records {
            volumes.add_path(r.study_id, r.volume_path);
        }
    }
    let addr: SocketAddr = addr
        .parse()
        .map_err(|e| Error::Config(format!("bad address `{addr}`: {e}")))?;
    let state = ServiceState::new(index, Arc::new(fork(&model)?), volumes);
    let ready = out.join("serve.json");
    serve_blocking(state, addr, |bound| {
        eprintln!("listening on http://{bound}");
        let _ = std::fs::write(&ready, json!({ "addr": bound.to_string() }).to_string());
    })?;
    Ok(Outcome {
        outputs: vec![ready],
        summary: json!({ "stopped": true }),
    })
}
