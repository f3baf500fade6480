//! Classification metrics, ROC thresholds, bootstrap dispersion and paired
//! permutation tests.
//!
//! Conventions: predictions are positive when `score >= threshold`; precision and F1
//! are 0 when their denominator is 0 (0/0).

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabelVector;
use crate::error::{Error, Result};

pub mod export;

pub use export::{export_embeddings, read_embedding_table, EmbeddingKind, EmbeddingRow};

pub const CONVENTIONS: &str =
    "positive iff score >= threshold; precision and F1 are 0 when undefined (0/0)";

/// Scores and binary truths per abnormality over one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPredictions {
    pub model_tag: String,
    pub names: Vec<String>,
    /// `scores[a][i]`: score of item `i` for abnormality `a`.
    pub scores: Vec<Vec<f64>>,
    pub truths: Vec<Vec<u8>>,
}

impl ScoredPredictions {
    pub fn new(
        model_tag: impl Into<String>,
        names: Vec<String>,
        scores: Vec<Vec<f64>>,
        truths: Vec<Vec<u8>>,
    ) -> Result<Self> {
        if names.len() != scores.len() || names.len() != truths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} names, {} score arrays, {} truth arrays",
                names.len(),
                scores.len(),
                truths.len()
            )));
        }
        let n = scores.first().map_or(0, Vec::len);
        for (a, (s, t)) in scores.iter().zip(&truths).enumerate() {
            if s.len() != n || t.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "abnormality {a} has {} scores and {} truths, expected {n}",
                    s.len(),
                    t.len()
                )));
            }
            if t.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument("truths must be 0/1".into()));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("scores must be finite".into()));
            }
        }
        Ok(Self {
            model_tag: model_tag.into(),
            names,
            scores,
            truths,
        })
    }

    /// Build from per-item predicted and true label vectors.
    pub fn from_items(
        model_tag: impl Into<String>,
        names: &[String],
        items: &[(LabelVector, LabelVector)],
    ) -> Result<Self> {
        let v = names.len();
        let mut scores = vec![Vec::with_capacity(items.len()); v];
        let mut truths = vec![Vec::with_capacity(items.len()); v];
        for (pred, truth) in items {
            pred.check_len(v)?;
            truth.check_len(v)?;
            if !truth.is_binary() {
                return Err(Error::InvalidArgument("truth labels must be binary".into()));
            }
            for a in 0..v {
                scores[a].push(pred.values()[a]);
                truths[a].push(truth.values()[a] as u8);
            }
        }
        Self::new(model_tag, names.to_vec(), scores, truths)
    }

    pub fn n_items(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn n_labels(&self) -> usize {
        self.names.len()
    }

    fn resample(&self, idx: &[usize]) -> Self {
        Self {
            model_tag: self.model_tag.clone(),
            names: self.names.clone(),
            scores: self.scores.iter().map(|s| idx.iter().map(|&i| s[i]).collect()).collect(),
            truths: self.truths.iter().map(|t| idx.iter().map(|&i| t[i]).collect()).collect(),
        }
    }

    fn is_defined(&self) -> bool {
        self.truths
            .iter()
            .all(|t| t.contains(&0) && t.contains(&1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC over every distinct score, from `(0, 0)` at threshold +∞ to `(1, 1)`.
pub fn roc_curve(scores: &[f64], truths: &[u8]) -> Result<Vec<RocPoint>> {
    if scores.len() != truths.len() {
        return Err(Error::InvalidArgument("scores and truths differ in length".into()));
    }
    let pos = truths.iter().filter(|&&t| t == 1).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truths[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve.
pub fn auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn auroc(scores: &[f64], truths: &[u8]) -> Result<f64> {
    Ok(auc(&roc_curve(scores, truths)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Point closest to the ideal corner `(fpr 0, tpr 1)`.
    #[default]
    TopLeft,
    /// Maximum of `tpr − fpr`.
    Youden,
}

/// Operating threshold on a ROC curve. Ties go to the higher tpr, then the lower threshold.
pub fn optimal_threshold(roc: &[RocPoint], rule: ThresholdRule) -> f64 {
    let cost = |p: &RocPoint| match rule {
        ThresholdRule::TopLeft => (p.fpr * p.fpr + (1.0 - p.tpr) * (1.0 - p.tpr)).sqrt(),
        ThresholdRule::Youden => p.fpr - p.tpr,
    };
    roc.iter()
        .min_by(|a, b| {
            cost(a)
                .total_cmp(&cost(b))
                .then(b.tpr.total_cmp(&a.tpr))
                .then(a.threshold.total_cmp(&b.threshold))
        })
        .map(|p| p.threshold)
        .unwrap_or(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn tally(predicted: impl IntoIterator<Item = bool>, truths: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (p, &t) in predicted.into_iter().zip(truths) {
            match (p, t == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn metrics(&self) -> BinaryMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BinaryMetrics {
            f1,
            accuracy: ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_),
            precision,
            recall,
        }
    }
}

pub fn classification_metrics(scores: &[f64], truths: &[u8], threshold: f64) -> BinaryMetrics {
    Confusion::tally(scores.iter().map(|&s| s >= threshold), truths).metrics()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    F1,
    Accuracy,
    Precision,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Auroc, Metric::F1, Metric::Accuracy, Metric::Precision];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::F1 => "f1",
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbnormalityMetrics {
    pub name: String,
    pub auroc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub positives: usize,
    pub n: usize,
}

impl AbnormalityMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Auroc => self.auroc,
            Metric::F1 => self.f1,
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
        }
    }
}

pub fn abnormality_metrics(
    name: &str,
    scores: &[f64],
    truths: &[u8],
    rule: ThresholdRule,
) -> Result<AbnormalityMetrics> {
    let roc = roc_curve(scores, truths).map_err(|e| Error::Metric(format!("{name}: {e}")))?;
    let threshold = optimal_threshold(&roc, rule);
    let m = classification_metrics(scores, truths, threshold);
    Ok(AbnormalityMetrics {
        name: name.to_string(),
        auroc: auc(&roc),
        f1: m.f1,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        threshold,
        positives: truths.iter().filter(|&&t| t == 1).count(),
        n: truths.len(),
    })
}

fn per_abnormality(preds: &ScoredPredictions, rule: ThresholdRule) -> Result<Vec<AbnormalityMetrics>> {
    preds
        .names
        .iter()
        .zip(preds.scores.iter().zip(&preds.truths))
        .map(|(name, (s, t))| abnormality_metrics(name, s, t, rule))
        .collect()
}

/// Mean of one metric across abnormalities, thresholds chosen per abnormality.
pub fn mean_metric(preds: &ScoredPredictions, metric: Metric, rule: ThresholdRule) -> Result<f64> {
    let per = per_abnormality(preds, rule)?;
    Ok(mean(per.iter().map(|a| a.get(metric))))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub auroc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
}

impl MeanMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Auroc => self.auroc,
            Metric::F1 => self.f1,
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
        }
    }

    fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::Auroc => self.auroc = v,
            Metric::F1 => self.f1 = v,
            Metric::Accuracy => self.accuracy = v,
            Metric::Precision => self.precision = v,
        }
    }
}

/// Deterministic per-iteration stream: one ChaCha stream id per iteration.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

pub const MAX_RESAMPLE_RETRIES: usize = 100;

/// Mean and standard deviation of a metric over bootstrap resamples of size n.
/// Resamples with a single-class abnormality are redrawn (up to 100 times).
pub fn bootstrap_std(
    preds: &ScoredPredictions,
    metric: Metric,
    iterations: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let dist = bootstrap_distribution(preds, &[metric], iterations, seed, ThresholdRule::TopLeft)?;
    let vals: Vec<f64> = dist.iter().map(|m| m.get(metric)).collect();
    Ok((mean(vals.iter().copied()), std_dev(&vals)))
}

fn bootstrap_distribution(
    preds: &ScoredPredictions,
    metrics: &[Metric],
    iterations: usize,
    seed: u64,
    rule: ThresholdRule,
) -> Result<Vec<MeanMetrics>> {
    let n = preds.n_items();
    if n < 2 {
        return Err(Error::Metric("bootstrap needs at least two items".into()));
    }
    let mut out = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut rng = iteration_rng(seed, it);
        let mut sample = None;
        for _ in 0..=MAX_RESAMPLE_RETRIES {
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let r = preds.resample(&idx);
            if r.is_defined() {
                sample = Some(r);
                break;
            }
        }
        let sample = sample.ok_or_else(|| {
            Error::Metric(format!(
                "bootstrap iteration {it}: no two-class resample after {MAX_RESAMPLE_RETRIES} retries"
            ))
        })?;
        let per = per_abnormality(&sample, rule)?;
        let mut m = MeanMetrics::default();
        for &metric in metrics {
            m.set(metric, mean(per.iter().map(|a| a.get(metric))));
        }
        out.push(m);
    }
    Ok(out)
}

/// Two-sided paired permutation test on the difference of a mean metric.
/// Each permutation swaps every item's pair of model outputs with probability ½.
pub fn paired_permutation_test(
    a: &ScoredPredictions,
    b: &ScoredPredictions,
    metric: Metric,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    let n = a.n_items();
    if n != b.n_items() || a.n_labels() != b.n_labels() {
        return Err(Error::InvalidArgument(format!(
            "paired test needs identical items: {}×{} vs {}×{}",
            a.n_labels(),
            n,
            b.n_labels(),
            b.n_items()
        )));
    }
    if a.truths != b.truths {
        return Err(Error::InvalidArgument(
            "paired test needs identical ground truth".into(),
        ));
    }
    let rule = ThresholdRule::TopLeft;
    let observed = mean_metric(a, metric, rule)? - mean_metric(b, metric, rule)?;
    let mut extreme = 0usize;
    for p in 0..permutations {
        let mut rng = iteration_rng(seed, p);
        let swap: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let (mut pa, mut pb) = (a.clone(), b.clone());
        for l in 0..a.n_labels() {
            for (i, &s) in swap.iter().enumerate() {
                if s {
                    pa.scores[l][i] = b.scores[l][i];
                    pb.scores[l][i] = a.scores[l][i];
                }
            }
        }
        let delta = mean_metric(&pa, metric, rule)? - mean_metric(&pb, metric, rule)?;
        if delta.abs() >= observed.abs() {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (permutations + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub iterations: usize,
    pub seed: u64,
    pub mean: MeanMetrics,
    pub std: MeanMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseP {
    pub against: String,
    pub permutations: usize,
    pub auroc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_tag: String,
    pub threshold_rule: ThresholdRule,
    pub per_abnormality: Vec<AbnormalityMetrics>,
    pub mean: MeanMetrics,
    pub bootstrap: Option<BootstrapSummary>,
    pub p_values: Vec<PairwiseP>,
    pub conventions: String,
}

impl MetricsReport {
    pub fn compute(preds: &ScoredPredictions, rule: ThresholdRule) -> Result<Self> {
        let per = per_abnormality(preds, rule)?;
        let mut m = MeanMetrics::default();
        for metric in Metric::ALL {
            m.set(metric, mean(per.iter().map(|a| a.get(metric))));
        }
        Ok(Self {
            model_tag: preds.model_tag.clone(),
            threshold_rule: rule,
            per_abnormality: per,
            mean: m,
            bootstrap: None,
            p_values: Vec::new(),
            conventions: CONVENTIONS.to_string(),
        })
    }

    pub fn with_bootstrap(mut self, preds: &ScoredPredictions, iterations: usize, seed: u64) -> Result<Self> {
        let dist = bootstrap_distribution(preds, &Metric::ALL, iterations, seed, self.threshold_rule)?;
        let mut mean_m = MeanMetrics::default();
        let mut std_m = MeanMetrics::default();
        for metric in Metric::ALL {
            let vals: Vec<f64> = dist.iter().map(|d| d.get(metric)).collect();
            mean_m.set(metric, mean(vals.iter().copied()));
            std_m.set(metric, std_dev(&vals));
        }
        self.bootstrap = Some(BootstrapSummary {
            iterations,
            seed,
            mean: mean_m,
            std: std_m,
        });
        Ok(self)
    }

    /// Attach p-values of this model against `other` for all four metrics.
    pub fn with_comparison(
        mut self,
        ours: &ScoredPredictions,
        other: &ScoredPredictions,
        permutations: usize,
        seed: u64,
    ) -> Result<Self> {
        let p = |m| paired_permutation_test(ours, other, m, permutations, seed);
        self.p_values.push(PairwiseP {
            against: other.model_tag.clone(),
            permutations,
            auroc: p(Metric::Auroc)?,
            f1: p(Metric::F1)?,
            accuracy: p(Metric::Accuracy)?,
            precision: p(Metric::Precision)?,
        });
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {}\nabnormality,auroc,f1,accuracy,precision,recall,threshold,positives,n\n", self.conventions);
        for a in &self.per_abnormality {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                csv_escape(&a.name),
                a.auroc,
                a.f1,
                a.accuracy,
                a.precision,
                a.recall,
                a.threshold,
                a.positives,
                a.n
            );
        }
        let _ = writeln!(
            s,
            "mean,{:.6},{:.6},{:.6},{:.6},,,,",
            self.mean.auroc, self.mean.f1, self.mean.accuracy, self.mean.precision
        );
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(
                s,
                "bootstrap_std,{:.6},{:.6},{:.6},{:.6},,,,",
                b.std.auroc, b.std.f1, b.std.accuracy, b.std.precision
            );
        }
        s
    }

    pub fn write(&self, json_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))
    }
}

pub(crate) fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Replace several score columns by their element-wise maximum under a new name, e.g.
/// two calcification labels mapped onto a single external label.
pub fn merge_max(
    preds: &ScoredPredictions,
    sources: &[&str],
    target: &str,
    target_truths: Option<Vec<u8>>,
) -> Result<ScoredPredictions> {
    let idx: Vec<usize> = sources
        .iter()
        .map(|s| {
            preds
                .names
                .iter()
                .position(|n| n.eq_ignore_ascii_case(s))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown label `{s}`")))
        })
        .collect::<Result<_>>()?;
    let first = *idx.first().ok_or_else(|| Error::InvalidArgument("no sources".into()))?;
    let merged: Vec<f64> = (0..preds.n_items())
        .map(|i| {
            idx.iter()
                .map(|&a| preds.scores[a][i])
                .max_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal))
                .unwrap()
        })
        .collect();
    let truths = match target_truths {
        Some(t) => t,
        None => (0..preds.n_items())
            .map(|i| idx.iter().map(|&a| preds.truths[a][i]).max().unwrap())
            .collect(),
    };
    let mut names = Vec::new();
    let mut scores = Vec::new();
    let mut out_truths = Vec::new();
    for a in 0..preds.n_labels() {
        if a == first {
            names.push(target.to_string());
            scores.push(merged.clone());
            out_truths.push(truths.clone());
        } else if !idx.contains(&a) {
            names.push(preds.names[a].clone());
            scores.push(preds.scores[a].clone());
            out_truths.push(preds.truths[a].clone());
        }
    }
    ScoredPredictions::new(preds.model_tag.clone(), names, scores, out_truths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn pairwise_auroc(scores: &[f64], truths: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if truths[i] == 1 && truths[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_separation_hits_corner() {
        let roc = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!(roc.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&roc), 1.0);
        let t = optimal_threshold(&roc, ThresholdRule::TopLeft);
        let m = classification_metrics(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], t);
        assert_eq!((m.f1, m.accuracy, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_scores_give_half() {
        let roc = roc_curve(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(roc.len(), 2);
        assert_eq!(auc(&roc), 0.5);
    }

    #[test]
    fn single_class_is_error() {
        assert!(roc_curve(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn diagonal_threshold_distance() {
        let roc = vec![
            RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY },
            RocPoint { fpr: 0.5, tpr: 0.5, threshold: 0.7 },
            RocPoint { fpr: 1.0, tpr: 1.0, threshold: 0.2 },
        ];
        assert_eq!(optimal_threshold(&roc, ThresholdRule::TopLeft), 0.7);
        // equal distance: higher tpr wins
        let tie = vec![
            RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY },
            RocPoint { fpr: 1.0, tpr: 1.0, threshold: 0.2 },
        ];
        assert_eq!(optimal_threshold(&tie, ThresholdRule::TopLeft), 0.2);
    }

    #[test]
    fn threshold_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let roc: Vec<RocPoint> = (0..10)
            .map(|i| RocPoint {
                fpr: rng.gen_range(0.0..1.0),
                tpr: rng.gen_range(0.0..1.0),
                threshold: i as f64 / 10.0,
            })
            .collect();
        let mut best = (f64::INFINITY, 0.0);
        for p in &roc {
            let d = (p.fpr.powi(2) + (1.0 - p.tpr).powi(2)).sqrt();
            if d < best.0 {
                best = (d, p.threshold);
            }
        }
        assert_eq!(optimal_threshold(&roc, ThresholdRule::TopLeft), best.1);
    }

    #[test]
    fn no_positive_predictions_convention() {
        let m = classification_metrics(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.9);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f1, 0.0);
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let truths: Vec<u8> = (0..30).map(|_| rng.gen_range(0..2)).collect();
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..30 {
            match (scores[i] >= 0.4, truths[i]) {
                (true, 1) => tp += 1.0,
                (true, _) => fp += 1.0,
                (false, 0) => tn += 1.0,
                (false, _) => fn_ += 1.0,
            }
        }
        let m = classification_metrics(&scores, &truths, 0.4);
        let p = tp / (tp + fp);
        let r = tp / (tp + fn_);
        assert!((m.precision - p).abs() < 1e-12);
        assert!((m.recall - r).abs() < 1e-12);
        assert!((m.accuracy - (tp + tn) / 30.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    fn random_preds(seed: u64, n: usize, labels: usize, tag: &str) -> ScoredPredictions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truths: Vec<Vec<u8>> = (0..labels).map(|_| (0..n).map(|_| rng.gen_range(0..2)).collect()).collect();
        for t in &mut truths {
            t[0] = 0;
            t[1] = 1;
        }
        let scores = (0..labels).map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        ScoredPredictions::new(tag, (0..labels).map(|i| format!("l{i}")).collect(), scores, truths).unwrap()
    }

    #[test]
    fn report_mean_is_mean_of_rows() {
        let p = random_preds(3, 40, 5, "m");
        let r = MetricsReport::compute(&p, ThresholdRule::TopLeft).unwrap();
        let manual: f64 = r.per_abnormality.iter().map(|a| a.f1).sum::<f64>() / 5.0;
        assert!((r.mean.f1 - manual).abs() < 1e-12);
        assert!(r.to_csv().contains("mean,"));
    }

    #[test]
    fn identical_models_have_p_one() {
        let p = random_preds(4, 30, 2, "a");
        assert_eq!(paired_permutation_test(&p, &p, Metric::Auroc, 200, 1).unwrap(), 1.0);
    }

    #[test]
    fn permutation_rejects_mismatch() {
        let a = random_preds(4, 30, 2, "a");
        let b = random_preds(4, 31, 2, "b");
        assert!(paired_permutation_test(&a, &b, Metric::Auroc, 10, 1).is_err());
    }

    #[test]
    fn bootstrap_constant_metric_has_zero_std() {
        // all-positive truths make AUROC undefined, so use accuracy on a two-class set
        // where every prediction is right
        let p = ScoredPredictions::new(
            "c",
            vec!["x".into()],
            vec![vec![1.0, 1.0, 0.0, 0.0, 1.0]],
            vec![vec![1, 1, 0, 0, 1]],
        )
        .unwrap();
        let (m, s) = bootstrap_std(&p, Metric::Accuracy, 100, 2).unwrap();
        assert_eq!((m, s), (1.0, 0.0));
        assert_eq!(bootstrap_std(&p, Metric::Accuracy, 100, 2).unwrap(), (m, s));
    }

    #[test]
    fn calcification_merge_takes_max() {
        let p = ScoredPredictions::new(
            "m",
            vec!["Arterial wall calcification".into(), "Emphysema".into(), "Coronary artery wall calcification".into()],
            vec![vec![0.2, 0.9], vec![0.5, 0.5], vec![0.7, 0.1]],
            vec![vec![0, 1], vec![1, 0], vec![1, 0]],
        )
        .unwrap();
        let m = merge_max(
            &p,
            &["Arterial wall calcification", "Coronary artery wall calcification"],
            "Calcification",
            None,
        )
        .unwrap();
        assert_eq!(m.names, vec!["Calcification", "Emphysema"]);
        assert_eq!(m.scores[0], vec![0.7, 0.9]);
        assert_eq!(m.truths[0], vec![1, 1]);
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pairwise(seed in 0u64..10_000, n in 2usize..200, levels in 2u32..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
            let mut truths: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            truths[0] = 0;
            truths[1] = 1;
            let a = auroc(&scores, &truths).unwrap();
            prop_assert!((a - pairwise_auroc(&scores, &truths)).abs() < 1e-9);
        }

        #[test]
        fn auroc_invariant_under_monotone_map(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut truths: Vec<u8> = (0..50).map(|_| rng.gen_range(0..2)).collect();
            truths[0] = 0;
            truths[1] = 1;
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
            prop_assert!((auroc(&scores, &truths).unwrap() - auroc(&mapped, &truths).unwrap()).abs() < 1e-12);
        }
    }
}
