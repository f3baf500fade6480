//! Report → label vector extraction.
//!
//! The default extractor is a rule engine: each label owns trigger terms and grouping
//! terms (source phrasings folded into the label). A hit is negated when a negator
//! appears within `negation_window` tokens before it, or a post-negator within the same
//! window after it, without crossing a sentence or clause terminator. A label is 1 iff
//! at least one of its hits is not negated.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AbnormalityVocab, LabelVector, ReportDoc};
use crate::encoders::tokenizer::split_words;
use crate::error::{Error, Result};
use crate::evalstats::Confusion;

const DEFAULT_RULES: &str = include_str!("../data/label_rules.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub abnormality: String,
    pub triggers: Vec<String>,
    /// Source phrasings reported under this label.
    #[serde(default)]
    pub grouping: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub negation_window: usize,
    pub negators: Vec<String>,
    pub post_negators: Vec<String>,
    pub terminators: Vec<String>,
    pub rules: Vec<LabelRule>,
}

/// Light plural folding applied to text and terms alike.
fn fold(token: &str) -> String {
    if let Some(stem) = token.strip_suffix("ies") {
        if stem.len() >= 2 {
            return format!("{stem}y");
        }
    }
    if token.len() > 3 && token.ends_with('s') && !token.ends_with("ss") {
        return token[..token.len() - 1].to_string();
    }
    token.to_string()
}

fn tokens(text: &str) -> Vec<String> {
    split_words(text).iter().map(|t| fold(t)).collect()
}

impl RuleSet {
    pub fn default_rules() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rules are valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let r: RuleSet = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Triggers non-empty; every term (trigger or grouping) belongs to one label only.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<Vec<String>, &str> = BTreeMap::new();
        for r in &self.rules {
            if r.triggers.is_empty() {
                return Err(Error::Config(format!("rule `{}` has no triggers", r.abnormality)));
            }
            let mut own = BTreeSet::new();
            for t in r.triggers.iter().chain(&r.grouping) {
                let key = tokens(t);
                if key.is_empty() {
                    return Err(Error::Config(format!("empty term in rule `{}`", r.abnormality)));
                }
                if !own.insert(key.clone()) {
                    continue;
                }
                if let Some(prev) = owner.insert(key, &r.abnormality) {
                    return Err(Error::Config(format!(
                        "term `{t}` belongs to both `{prev}` and `{}`",
                        r.abnormality
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical label for a source term, if any rule owns it.
    pub fn canonical(&self, term: &str) -> Option<&str> {
        let key = tokens(term);
        self.rules
            .iter()
            .find(|r| r.triggers.iter().chain(&r.grouping).any(|t| tokens(t) == key))
            .map(|r| r.abnormality.as_str())
    }
}

/// Map raw term hits to canonical labels. Terms without a rule pass through unchanged.
pub fn apply_grouping<'a>(hits: impl IntoIterator<Item = &'a str>, rules: &RuleSet) -> BTreeSet<String> {
    hits.into_iter()
        .map(|h| rules.canonical(h).map_or_else(|| h.to_string(), str::to_string))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermHit {
    pub term: String,
    pub label: String,
    /// Token offset of the first matched token.
    pub position: usize,
    pub negated: bool,
}

/// Every occurrence of every rule term, with its negation status.
pub fn find_hits(text: &str, rules: &RuleSet) -> Vec<TermHit> {
    let toks = tokens(text);
    let terms: BTreeSet<String> = rules.terminators.iter().map(|t| fold(&t.to_lowercase())).collect();
    let negs: BTreeSet<String> = rules.negators.iter().map(|t| fold(&t.to_lowercase())).collect();
    let post: BTreeSet<String> = rules.post_negators.iter().map(|t| fold(&t.to_lowercase())).collect();
    let w = rules.negation_window;
    let mut hits = Vec::new();
    for r in &rules.rules {
        for term in r.triggers.iter().chain(&r.grouping) {
            let pat = tokens(term);
            if pat.is_empty() || pat.len() > toks.len() {
                continue;
            }
            for start in 0..=toks.len() - pat.len() {
                if toks[start..start + pat.len()] != pat[..] {
                    continue;
                }
                let end = start + pat.len();
                let mut negated = false;
                for i in (start.saturating_sub(w)..start).rev() {
                    if terms.contains(&toks[i]) {
                        break;
                    }
                    if negs.contains(&toks[i]) {
                        negated = true;
                        break;
                    }
                }
                if !negated {
                    for t in toks.iter().skip(end).take(w) {
                        if terms.contains(t) {
                            break;
                        }
                        if post.contains(t) {
                            negated = true;
                            break;
                        }
                    }
                }
                hits.push(TermHit {
                    term: term.clone(),
                    label: r.abnormality.clone(),
                    position: start,
                    negated,
                });
            }
        }
    }
    hits.sort_by(|a, b| a.position.cmp(&b.position).then(a.term.cmp(&b.term)));
    hits
}

/// Findings and impression joined, the text labels are read from.
pub fn merged_text(report: &ReportDoc) -> Result<String> {
    let parts: Vec<&str> = [report.findings(), report.impression()].into_iter().flatten().collect();
    if parts.is_empty() {
        return Err(Error::Text("report has neither findings nor impression".into()));
    }
    Ok(parts.join(" "))
}

pub fn extract_from_text(text: &str, rules: &RuleSet, vocab: &AbnormalityVocab) -> Result<LabelVector> {
    if text.trim().is_empty() {
        return Err(Error::Text("empty report text".into()));
    }
    let affirmed = find_hits(text, rules).into_iter().filter(|h| !h.negated);
    let labels = apply_grouping(affirmed.map(|h| h.term).collect::<Vec<_>>().iter().map(String::as_str), rules);
    let mut v = vec![0u8; vocab.size()];
    for l in labels {
        if let Some(i) = vocab.index_of(&l) {
            v[i] = 1;
        }
    }
    LabelVector::from_binary(&v)
}

pub fn extract_labels(report: &ReportDoc, rules: &RuleSet, vocab: &AbnormalityVocab) -> Result<LabelVector> {
    extract_from_text(&merged_text(report)?, rules, vocab)
}

/// Anything that labels a report against a vocabulary.
pub trait ReportClassifier: Send + Sync {
    fn classify(&self, report: &ReportDoc, vocab: &AbnormalityVocab) -> Result<LabelVector>;
}

#[derive(Debug, Clone)]
pub struct RuleExtractor {
    pub rules: RuleSet,
}

impl Default for RuleExtractor {
    fn default() -> Self {
        Self {
            rules: RuleSet::default_rules(),
        }
    }
}

impl ReportClassifier for RuleExtractor {
    fn classify(&self, report: &ReportDoc, vocab: &AbnormalityVocab) -> Result<LabelVector> {
        extract_labels(report, &self.rules, vocab)
    }
}

/// Wrap any per-label scorer (e.g. an external text model) and binarize at a threshold.
pub struct ScoreAdapter<F> {
    pub scorer: F,
    pub threshold: f64,
}

impl<F> ReportClassifier for ScoreAdapter<F>
where
    F: Fn(&str) -> Result<Vec<f64>> + Send + Sync,
{
    fn classify(&self, report: &ReportDoc, vocab: &AbnormalityVocab) -> Result<LabelVector> {
        let s = (self.scorer)(&merged_text(report)?)?;
        if s.len() != vocab.size() {
            return Err(Error::LabelLength {
                expected: vocab.size(),
                got: s.len(),
            });
        }
        LabelVector::from_binary(&s.iter().map(|&x| (x >= self.threshold) as u8).collect::<Vec<_>>())
    }
}

/// One annotated report: text plus binary labels in vocabulary order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldReport {
    pub report_id: String,
    #[serde(default)]
    pub findings: Option<String>,
    #[serde(default)]
    pub impression: Option<String>,
    pub labels: Vec<u8>,
}

impl GoldReport {
    pub fn report(&self) -> ReportDoc {
        ReportDoc {
            findings: self.findings.clone(),
            impression: self.impression.clone(),
            ..Default::default()
        }
    }
}

/// JSON-lines gold file; every row must have one label per vocabulary entry.
pub fn load_gold(path: impl AsRef<Path>, vocab: &AbnormalityVocab) -> Result<Vec<GoldReport>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let g: GoldReport = serde_json::from_str(l).map_err(|e| Error::ManifestRow {
                row: i + 1,
                message: e.to_string(),
            })?;
            if g.labels.len() != vocab.size() {
                return Err(Error::LabelLength {
                    expected: vocab.size(),
                    got: g.labels.len(),
                });
            }
            Ok(g)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorReport {
    pub per_label: Vec<LabelScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub reports: usize,
}

/// Per-label precision/recall/F1 against gold. A label that neither gold nor the
/// extractor ever marks scores 1 on all three (nothing to get wrong).
pub fn eval_extractor(
    gold: &[GoldReport],
    classifier: &dyn ReportClassifier,
    vocab: &AbnormalityVocab,
) -> Result<ExtractorReport> {
    let v = vocab.size();
    let mut pred = vec![Vec::with_capacity(gold.len()); v];
    let mut truth = vec![Vec::with_capacity(gold.len()); v];
    for g in gold {
        if g.labels.len() != v {
            return Err(Error::LabelLength {
                expected: v,
                got: g.labels.len(),
            });
        }
        let p = classifier.classify(&g.report(), vocab)?;
        for a in 0..v {
            pred[a].push(p.values()[a] >= 0.5);
            truth[a].push(g.labels[a]);
        }
    }
    let per_label: Vec<LabelScore> = (0..v)
        .map(|a| {
            let c = Confusion::tally(pred[a].iter().copied(), &truth[a]);
            let m = c.metrics();
            let empty = c.tp + c.fp + c.fn_ == 0;
            LabelScore {
                name: vocab.names()[a].clone(),
                precision: if empty { 1.0 } else { m.precision },
                recall: if empty { 1.0 } else { m.recall },
                f1: if empty { 1.0 } else { m.f1 },
                support: c.tp + c.fn_,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
            }
        })
        .collect();
    let mean = |f: fn(&LabelScore) -> f64| per_label.iter().map(f).sum::<f64>() / v.max(1) as f64;
    Ok(ExtractorReport {
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        per_label,
        reports: gold.len(),
    })
}
