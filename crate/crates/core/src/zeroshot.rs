//! Zero-shot detection with paired positive/negative prompts, and the template sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::{CtClip, TextEmbedder};
use crate::corpus::{AbnormalityVocab, LabelVector};
use crate::encoders::{cosine_similarity, Embedding};
use crate::error::{Error, Result};
use crate::evalstats::{MeanMetrics, MetricsReport, ScoredPredictions, ThresholdRule};

pub const SLOT: &str = "{abnormality}";

const DEFAULT_TEMPLATES: &str = include_str!("../data/prompt_templates.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: u8,
    pub positive_form: String,
    pub negative_form: String,
}

impl PromptTemplate {
    pub fn new(id: u8, positive_form: &str, negative_form: &str) -> Result<Self> {
        for f in [positive_form, negative_form] {
            if f.matches(SLOT).count() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "template {id}: `{f}` must contain exactly one {SLOT} slot"
                )));
            }
        }
        if positive_form == negative_form {
            return Err(Error::InvalidArgument(format!("template {id}: forms are identical")));
        }
        Ok(Self {
            id,
            positive_form: positive_form.into(),
            negative_form: negative_form.into(),
        })
    }
}

/// The seven shipped templates.
pub fn default_templates() -> Vec<PromptTemplate> {
    parse_templates(DEFAULT_TEMPLATES).expect("bundled templates are valid")
}

fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>> {
    let raw: Vec<PromptTemplate> = serde_json::from_str(text)?;
    let mut out: Vec<PromptTemplate> = Vec::with_capacity(raw.len());
    for t in raw {
        if out.iter().any(|o| o.id == t.id) {
            return Err(Error::InvalidArgument(format!("duplicate template id {}", t.id)));
        }
        out.push(PromptTemplate::new(t.id, &t.positive_form, &t.negative_form)?);
    }
    Ok(out)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<PromptTemplate>> {
    let path = path.as_ref();
    parse_templates(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn template_by_id(templates: &[PromptTemplate], id: u8) -> Result<&PromptTemplate> {
    templates
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt template id {id}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub abnormality: String,
    pub positive: String,
    pub negative: String,
    pub template_id: u8,
}

impl PromptPair {
    pub fn swapped(&self) -> Self {
        Self {
            positive: self.negative.clone(),
            negative: self.positive.clone(),
            ..self.clone()
        }
    }
}

fn fill(form: &str, abnormality: &str) -> String {
    let at = form.find(SLOT).expect("validated slot");
    let before = &form[..at];
    let sentence_start = before.trim_end().is_empty() || before.trim_end().ends_with(['.', '!', '?']);
    let lower = abnormality.to_lowercase();
    let word = if sentence_start {
        let mut c = lower.chars();
        match c.next() {
            Some(f) => f.to_uppercase().chain(c).collect(),
            None => String::new(),
        }
    } else {
        lower
    };
    format!("{before}{word}{}", &form[at + SLOT.len()..])
}

pub fn build_prompts(abnormality: &str, template: &PromptTemplate) -> Result<PromptPair> {
    let name = abnormality.trim();
    if name.is_empty() {
        return Err(Error::InvalidArgument("empty abnormality name".into()));
    }
    Ok(PromptPair {
        abnormality: name.to_string(),
        positive: fill(&template.positive_form, name),
        negative: fill(&template.negative_form, name),
        template_id: template.id,
    })
}

/// Like [`build_prompts`] but requires the name to be in the vocabulary.
pub fn build_vocab_prompts(vocab: &AbnormalityVocab, template: &PromptTemplate) -> Result<Vec<PromptPair>> {
    vocab.names().iter().map(|n| build_prompts(n, template)).collect()
}

/// Positive entry of a two-way softmax. Evaluated so that `p(a, b) + p(b, a) == 1`
/// exactly in floating point.
pub fn positive_probability(logit_pos: f64, logit_neg: f64) -> f64 {
    let d = logit_pos - logit_neg;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        1.0 - 1.0 / (1.0 + d.exp())
    }
}

/// Which temperature zero-shot inference divides similarities by.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum InferenceTemperature {
    /// The model's learned temperature.
    Learned,
    Fixed(f64),
}

impl Default for InferenceTemperature {
    fn default() -> Self {
        InferenceTemperature::Learned
    }
}

impl InferenceTemperature {
    pub fn resolve(self, model: &CtClip) -> f64 {
        match self {
            InferenceTemperature::Learned => model.temperature(),
            InferenceTemperature::Fixed(t) => t,
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

pub fn detect_one(
    volume: &Embedding,
    pair: &PromptPair,
    encoder: &dyn TextEmbedder,
    temperature: f64,
) -> Result<f64> {
    check_temperature(temperature)?;
    let pos = encoder.embed_text(&pair.positive)?;
    let neg = encoder.embed_text(&pair.negative)?;
    pair_probability(volume, &pos, &neg, temperature)
}

fn pair_probability(v: &Embedding, pos: &Embedding, neg: &Embedding, temperature: f64) -> Result<f64> {
    let lp = cosine_similarity(v, pos)? / temperature;
    let ln = cosine_similarity(v, neg)? / temperature;
    Ok(positive_probability(lp, ln))
}

/// Prompt embeddings for a whole vocabulary under one template, computed once.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub pairs: Vec<PromptPair>,
    pub positive: Vec<Embedding>,
    pub negative: Vec<Embedding>,
}

impl PromptBank {
    pub fn new(vocab: &AbnormalityVocab, template: &PromptTemplate, encoder: &dyn TextEmbedder) -> Result<Self> {
        let pairs = build_vocab_prompts(vocab, template)?;
        Self::from_pairs(pairs, encoder)
    }

    pub fn from_pairs(pairs: Vec<PromptPair>, encoder: &dyn TextEmbedder) -> Result<Self> {
        let positive = pairs.iter().map(|p| encoder.embed_text(&p.positive)).collect::<Result<_>>()?;
        let negative = pairs.iter().map(|p| encoder.embed_text(&p.negative)).collect::<Result<_>>()?;
        Ok(Self {
            pairs,
            positive,
            negative,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Independent per-abnormality probabilities, in vocabulary order.
    pub fn detect_all(&self, volume: &Embedding, temperature: f64) -> Result<LabelVector> {
        check_temperature(temperature)?;
        let p = self
            .positive
            .iter()
            .zip(&self.negative)
            .map(|(pos, neg)| pair_probability(volume, pos, neg, temperature))
            .collect::<Result<Vec<_>>>()?;
        LabelVector::new(p)
    }
}

pub fn detect_all(
    volume: &Embedding,
    vocab: &AbnormalityVocab,
    template: &PromptTemplate,
    encoder: &dyn TextEmbedder,
    temperature: f64,
) -> Result<LabelVector> {
    PromptBank::new(vocab, template, encoder)?.detect_all(volume, temperature)
}

/// Zero-shot scores for a labeled set, ready for the metrics stack.
pub fn score_set(
    bank: &PromptBank,
    vocab: &AbnormalityVocab,
    volumes: &[Embedding],
    truths: &[LabelVector],
    temperature: f64,
    model_tag: &str,
) -> Result<ScoredPredictions> {
    if volumes.len() != truths.len() {
        return Err(Error::InvalidArgument("volumes and labels differ in length".into()));
    }
    let items = volumes
        .iter()
        .zip(truths)
        .map(|(v, t)| Ok((bank.detect_all(v, temperature)?, t.clone())))
        .collect::<Result<Vec<_>>>()?;
    ScoredPredictions::from_items(model_tag, vocab.names(), &items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub template_id: u8,
    pub positive_form: String,
    pub negative_form: String,
    pub mean: MeanMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Highest mean accuracy; ties go to the lower id.
    pub best_template: u8,
    pub temperature: f64,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("template_id,positive_form,negative_form,auroc,f1,accuracy,precision,best\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},\"{}\",\"{}\",{:.6},{:.6},{:.6},{:.6},{}",
                r.template_id,
                r.positive_form,
                r.negative_form,
                r.mean.auroc,
                r.mean.f1,
                r.mean.accuracy,
                r.mean.precision,
                r.template_id == self.best_template
            );
        }
        s
    }

    /// Write `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv = path.with_extension("csv");
        let json = path.with_extension("json");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Evaluate every template on a labeled validation set.
pub fn prompt_sweep(
    encoder: &dyn TextEmbedder,
    vocab: &AbnormalityVocab,
    templates: &[PromptTemplate],
    volumes: &[Embedding],
    truths: &[LabelVector],
    temperature: f64,
) -> Result<SweepReport> {
    if templates.is_empty() {
        return Err(Error::InvalidArgument("no templates".into()));
    }
    let mut rows = Vec::with_capacity(templates.len());
    for t in templates {
        let bank = PromptBank::new(vocab, t, encoder)?;
        let preds = score_set(&bank, vocab, volumes, truths, temperature, &format!("template_{}", t.id))?;
        let report = MetricsReport::compute(&preds, ThresholdRule::TopLeft)?;
        rows.push(SweepRow {
            template_id: t.id,
            positive_form: t.positive_form.clone(),
            negative_form: t.negative_form.clone(),
            mean: report.mean,
        });
    }
    let best = rows
        .iter()
        .max_by(|a, b| {
            a.mean
                .accuracy
                .total_cmp(&b.mean.accuracy)
                .then(b.template_id.cmp(&a.template_id))
        })
        .map(|r| r.template_id)
        .unwrap();
    Ok(SweepReport {
        rows,
        best_template: best,
        temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Deterministic fake text tower keyed by exact string.
    struct Table(HashMap<String, Embedding>);

    impl TextEmbedder for Table {
        fn embed_text(&self, text: &str) -> Result<Embedding> {
            self.0
                .get(text)
                .cloned()
                .ok_or_else(|| Error::Text(format!("no embedding for `{text}`")))
        }
    }

    #[test]
    fn seven_templates_ship() {
        let t = default_templates();
        assert_eq!(t.len(), 7);
        assert_eq!(t.iter().map(|t| t.id).collect::<Vec<_>>(), (1..=7).collect::<Vec<u8>>());
    }

    #[test]
    fn slot_filling_examples() {
        let t = default_templates();
        let p = build_prompts("consolidation", template_by_id(&t, 7).unwrap()).unwrap();
        assert_eq!((p.positive.as_str(), p.negative.as_str()), ("Consolidation.", "Not consolidation."));
        let p = build_prompts("consolidation", template_by_id(&t, 3).unwrap()).unwrap();
        assert_eq!(
            (p.positive.as_str(), p.negative.as_str()),
            ("There is consolidation.", "There is no consolidation.")
        );
        let p = build_prompts("lung nodule", template_by_id(&t, 1).unwrap()).unwrap();
        assert_eq!(
            (p.positive.as_str(), p.negative.as_str()),
            ("Lung nodule is seen.", "Lung nodule is not seen.")
        );
        let p = build_prompts("Lung Opacity", template_by_id(&t, 4).unwrap()).unwrap();
        assert_eq!(p.negative, "Findings are not compatible with lung opacity.");
        assert!(template_by_id(&t, 9).is_err());
    }

    #[test]
    fn bad_template_rejected() {
        assert!(PromptTemplate::new(1, "no slot", "{abnormality}").is_err());
        assert!(PromptTemplate::new(1, "{abnormality}.", "{abnormality}.").is_err());
    }

    #[test]
    fn probability_values() {
        assert_eq!(positive_probability(0.3, 0.3), 0.5);
        assert!((positive_probability(2.0, -2.0) - 1.0 / (1.0 + (-4f64).exp())).abs() < 1e-15);
        assert!((positive_probability(2.0, -2.0) - 0.9820).abs() < 1e-4);
    }

    #[test]
    fn swapped_pair_complements() {
        let t = default_templates();
        let pair = build_prompts("emphysema", &t[6]).unwrap();
        let table = Table(HashMap::from([
            (pair.positive.clone(), Embedding::new(vec![1.0, 0.2, 0.0])),
            (pair.negative.clone(), Embedding::new(vec![0.1, 1.0, 0.3])),
        ]));
        let v = Embedding::new(vec![0.4, 0.5, -0.2]);
        let a = detect_one(&v, &pair, &table, 0.07).unwrap();
        let b = detect_one(&v, &pair.swapped(), &table, 0.07).unwrap();
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn identical_prompts_give_half() {
        let vocab = AbnormalityVocab::new(["A", "B", "C"]).unwrap();
        let t = &default_templates()[0];
        let mut map = HashMap::new();
        for p in build_vocab_prompts(&vocab, t).unwrap() {
            map.insert(p.positive, Embedding::new(vec![1.0, 1.0]));
            map.insert(p.negative, Embedding::new(vec![1.0, 1.0]));
        }
        let out = detect_all(&Embedding::new(vec![0.3, -1.0]), &vocab, t, &Table(map), 0.5).unwrap();
        assert_eq!(out.values(), &[0.5, 0.5, 0.5]);
    }
}
