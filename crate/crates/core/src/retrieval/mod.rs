//! Exact cosine retrieval over an embedding index, plus MAP@K / Recall@K evaluation.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::TextEmbedder;
use crate::corpus::LabelVector;
use crate::encoders::{cosine, Embedding};
use crate::error::{Error, Result};

mod index;
pub mod service;

pub use index::{EmbeddingIndex, IndexEntry, IndexInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Volume,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub study_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_kind: QueryKind,
    pub ranked: Vec<Ranked>,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::Retrieval("k must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Descending score, ascending study id on ties.
fn order(a: &Ranked, b: &Ranked) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.study_id.cmp(&b.study_id))
}

/// Score every entry (optionally skipping one id) and keep the top `k`.
pub fn rank(index: &EmbeddingIndex, query: &Embedding, exclude: Option<&str>, k: usize) -> Result<Vec<Ranked>> {
    check_k(k)?;
    if query.dim() != index.dim() {
        return Err(Error::Retrieval(format!(
            "query has dimension {}, index has {}",
            query.dim(),
            index.dim()
        )));
    }
    let mut out = index
        .entries()
        .iter()
        .filter(|e| Some(e.study_id.as_str()) != exclude)
        .map(|e| {
            Ok(Ranked {
                study_id: e.study_id.clone(),
                score: cosine(&query.values, &e.embedding.values)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(order);
    out.truncate(k);
    Ok(out)
}

/// A volume query: an indexed study (excluded from its own results) or a raw embedding.
#[derive(Debug, Clone, Copy)]
pub enum VolumeQuery<'a> {
    StudyId(&'a str),
    Embedding(&'a Embedding),
}

pub fn query_by_volume(index: &EmbeddingIndex, query: VolumeQuery<'_>, k: usize) -> Result<RetrievalResult> {
    if index.is_empty() {
        return Err(Error::Retrieval("index is empty".into()));
    }
    let ranked = match query {
        VolumeQuery::StudyId(id) => {
            let e = index
                .get(id)
                .ok_or_else(|| Error::Retrieval(format!("unknown study_id `{id}`")))?;
            rank(index, &e.embedding, Some(id), k)?
        }
        VolumeQuery::Embedding(e) => rank(index, e, None, k)?,
    };
    Ok(RetrievalResult {
        query_kind: QueryKind::Volume,
        ranked,
    })
}

pub fn query_by_text(
    index: &EmbeddingIndex,
    text: &str,
    k: usize,
    encoder: &dyn TextEmbedder,
) -> Result<RetrievalResult> {
    check_k(k)?;
    if text.trim().is_empty() {
        return Err(Error::Retrieval("empty query text".into()));
    }
    let q = encoder.embed_text(text)?;
    Ok(RetrievalResult {
        query_kind: QueryKind::Text,
        ranked: rank(index, &q, None, k)?,
    })
}

/// Intersection over union of the positive label sets; two empty sets give 0.
pub fn relevance(a: &LabelVector, b: &LabelVector) -> Result<f64> {
    b.check_len(a.len())?;
    let (pa, pb) = (a.positives(), b.positives());
    let union = pa.union(&pb).count();
    if union == 0 {
        return Ok(0.0);
    }
    Ok(pa.intersection(&pb).count() as f64 / union as f64)
}

/// `(1/K) Σ_{i≤K} P_i·R_i` over relevances in rank order. `P_i` counts ranks whose
/// relevance exceeds `hit_threshold`. Ranks beyond the list contribute nothing.
pub fn ap_at_k(relevances: &[f64], k: usize, hit_threshold: f64) -> Result<f64> {
    check_k(k)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevances.iter().take(k).enumerate() {
        if r > hit_threshold {
            hits += 1;
        }
        sum += hits as f64 / (i + 1) as f64 * r;
    }
    Ok(sum / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub hit_threshold: f64,
    pub baseline_seed: u64,
    /// Shuffled rankings per query for the random baseline.
    pub baseline_repeats: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            hit_threshold: 0.0,
            baseline_seed: 0,
            baseline_repeats: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub k: usize,
    pub map: f64,
    pub random_map: f64,
    /// `map / random_map` (∞ when the baseline is 0).
    pub fold_change: f64,
    pub queries: usize,
}

/// MAP@K over every abnormal entry, ranking the other abnormal entries.
pub fn map_at_k(index: &EmbeddingIndex, k: usize, cfg: &MapConfig) -> Result<MapReport> {
    check_k(k)?;
    let abnormal: Vec<&IndexEntry> = index
        .entries()
        .iter()
        .filter(|e| e.labels.as_ref().is_some_and(|l| l.count_positive() > 0))
        .collect();
    if abnormal.is_empty() {
        return Err(Error::Retrieval("no abnormal entries to query".into()));
    }
    let mut total = 0.0;
    let mut random = 0.0;
    for (qi, q) in abnormal.iter().enumerate() {
        let ql = q.labels.as_ref().unwrap();
        let mut cands = abnormal
            .iter()
            .filter(|c| c.study_id != q.study_id)
            .map(|c| {
                Ok((
                    Ranked {
                        study_id: c.study_id.clone(),
                        score: cosine(&q.embedding.values, &c.embedding.values)?,
                    },
                    relevance(ql, c.labels.as_ref().unwrap())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        cands.sort_by(|a, b| order(&a.0, &b.0));
        let rels: Vec<f64> = cands.iter().map(|c| c.1).collect();
        total += ap_at_k(&rels, k, cfg.hit_threshold)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.baseline_seed);
        rng.set_stream(qi as u64);
        let mut shuffled = rels.clone();
        let mut acc = 0.0;
        for _ in 0..cfg.baseline_repeats.max(1) {
            shuffled.shuffle(&mut rng);
            acc += ap_at_k(&shuffled, k, cfg.hit_threshold)?;
        }
        random += acc / cfg.baseline_repeats.max(1) as f64;
    }
    let n = abnormal.len() as f64;
    let (map, random_map) = (total / n, random / n);
    Ok(MapReport {
        k,
        map,
        random_map,
        fold_change: if random_map > 0.0 { map / random_map } else { f64::INFINITY },
        queries: abnormal.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub recall: f64,
    /// Expected recall of a random ranking, `k / N`.
    pub random_baseline: f64,
    pub queries: usize,
}

/// Fraction of report queries whose paired volume (same study id) is in the top `k`.
pub fn recall_at_k(queries: &[(String, Embedding)], index: &EmbeddingIndex, k: usize) -> Result<RecallReport> {
    check_k(k)?;
    if queries.is_empty() {
        return Err(Error::Retrieval("no queries".into()));
    }
    let mut hits = 0;
    for (id, q) in queries {
        if index.get(id).is_none() {
            return Err(Error::Retrieval(format!("query `{id}` has no paired volume in the index")));
        }
        if rank(index, q, None, k)?.iter().any(|r| &r.study_id == id) {
            hits += 1;
        }
    }
    Ok(RecallReport {
        k,
        recall: hits as f64 / queries.len() as f64,
        random_baseline: (k as f64 / index.len() as f64).min(1.0),
        queries: queries.len(),
    })
}

/// Embed each `(study_id, report)` and evaluate Recall@K.
pub fn recall_for_reports(
    reports: &[(String, String)],
    index: &EmbeddingIndex,
    k: usize,
    encoder: &dyn TextEmbedder,
) -> Result<RecallReport> {
    let q = reports
        .iter()
        .map(|(id, t)| Ok((id.clone(), encoder.embed_text(t)?)))
        .collect::<Result<Vec<_>>>()?;
    recall_at_k(&q, index, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::Rng;

    fn entry(id: &str, v: Vec<f32>, labels: Option<&[u8]>) -> IndexEntry {
        IndexEntry {
            study_id: id.into(),
            embedding: Embedding::new(v),
            labels: labels.map(|l| LabelVector::from_binary(l).unwrap()),
        }
    }

    fn random_index(seed: u64, n: usize, dim: usize, labels: usize) -> EmbeddingIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut l: Vec<u8> = (0..labels).map(|_| rng.gen_range(0..2)).collect();
                l[i % labels] = 1;
                entry(&format!("s{i:02}"), v, Some(&l))
            })
            .collect();
        EmbeddingIndex::new(entries, "test", None).unwrap()
    }

    fn oracle_ap(rel: &[f64], k: usize) -> f64 {
        let mut s = 0.0;
        for i in 1..=k.min(rel.len()) {
            let mut hits = 0.0;
            for j in 1..=i {
                if rel[j - 1] > 0.0 {
                    hits += 1.0;
                }
            }
            s += hits / i as f64 * rel[i - 1];
        }
        s / k as f64
    }

    #[test]
    fn self_excluded() {
        let idx = EmbeddingIndex::new(vec![entry("a", vec![1.0, 0.0], None)], "t", None).unwrap();
        let r = query_by_volume(&idx, VolumeQuery::StudyId("a"), 3).unwrap();
        assert!(r.ranked.is_empty());
        assert!(query_by_volume(&idx, VolumeQuery::StudyId("zz"), 3).is_err());
        assert!(query_by_volume(&idx, VolumeQuery::StudyId("a"), 0).is_err());
    }

    #[test]
    fn identical_entry_first() {
        let idx = EmbeddingIndex::new(
            vec![
                entry("q", vec![1.0, 2.0, 0.0], None),
                entry("twin", vec![2.0, 4.0, 0.0], None),
                entry("o1", vec![0.0, 0.0, 1.0], None),
                entry("o2", vec![0.0, 0.0, -3.0], None),
            ],
            "t",
            None,
        )
        .unwrap();
        let r = query_by_volume(&idx, VolumeQuery::StudyId("q"), 10).unwrap();
        assert_eq!(r.ranked[0].study_id, "twin");
        assert!((r.ranked[0].score - 1.0).abs() < 1e-6);
        assert_eq!(r.ranked.len(), 3);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = EmbeddingIndex::new(
            vec![entry("b", vec![1.0, 0.0], None), entry("a", vec![1.0, 0.0], None)],
            "t",
            None,
        )
        .unwrap();
        let r = rank(&idx, &Embedding::new(vec![1.0, 0.0]), None, 2).unwrap();
        assert_eq!(r.iter().map(|x| x.study_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        for seed in 0..10 {
            let idx = random_index(seed, 20, 8, 3);
            let q = idx.entries()[0].embedding.clone();
            let mut oracle: Vec<(String, f64)> = idx
                .entries()
                .iter()
                .map(|e| (e.study_id.clone(), cosine(&q.values, &e.embedding.values).unwrap()))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let got = rank(&idx, &q, None, 20).unwrap();
            let got: Vec<(String, f64)> = got.into_iter().map(|r| (r.study_id, r.score)).collect();
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn relevance_examples() {
        let l = |b: &[u8]| LabelVector::from_binary(b).unwrap();
        assert_eq!(relevance(&l(&[1, 1, 0]), &l(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(relevance(&l(&[1, 0, 0]), &l(&[0, 1, 0])).unwrap(), 0.0);
        assert!((relevance(&l(&[1, 1, 0]), &l(&[0, 1, 1])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(relevance(&l(&[0, 0]), &l(&[0, 0])).unwrap(), 0.0);
        assert!(relevance(&l(&[0, 0]), &l(&[0, 0, 1])).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(ap_at_k(&[1.0; 5], 5, 0.0).unwrap(), 1.0);
        assert_eq!(ap_at_k(&[0.0; 5], 5, 0.0).unwrap(), 0.0);
        let rel = [0.5, 0.0, 1.0, 1.0 / 3.0, 0.0];
        for k in 1..=7 {
            assert!((ap_at_k(&rel, k, 0.0).unwrap() - oracle_ap(&rel, k)).abs() < 1e-12);
        }
    }

    /// AP@K is not monotone for arbitrary rankings: a miss at rank 1 followed by a hit.
    #[test]
    fn ap_can_increase_with_k() {
        let rel = [0.0, 1.0];
        assert_eq!(ap_at_k(&rel, 1, 0.0).unwrap(), 0.0);
        assert_eq!(ap_at_k(&rel, 2, 0.0).unwrap(), 0.25);
    }

    #[test]
    fn shared_labels_give_map_one() {
        let entries = (0..5)
            .map(|i| entry(&format!("s{i}"), vec![i as f32 + 1.0, 1.0], Some(&[1, 0, 1])))
            .collect();
        let idx = EmbeddingIndex::new(entries, "t", None).unwrap();
        for k in 1..=4 {
            assert_eq!(map_at_k(&idx, k, &MapConfig::default()).unwrap().map, 1.0);
        }
    }

    #[test]
    fn map_matches_oracle() {
        let idx = random_index(33, 15, 6, 4);
        for k in [1, 3, 5, 10] {
            let mut total = 0.0;
            let mut n = 0.0;
            for q in idx.entries() {
                let ql = q.labels.as_ref().unwrap();
                let mut c: Vec<(f64, &str, f64)> = idx
                    .entries()
                    .iter()
                    .filter(|c| c.study_id != q.study_id)
                    .map(|c| {
                        (
                            cosine(&q.embedding.values, &c.embedding.values).unwrap(),
                            c.study_id.as_str(),
                            relevance(ql, c.labels.as_ref().unwrap()).unwrap(),
                        )
                    })
                    .collect();
                c.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
                total += oracle_ap(&c.iter().map(|x| x.2).collect::<Vec<_>>(), k);
                n += 1.0;
            }
            let got = map_at_k(&idx, k, &MapConfig::default()).unwrap();
            assert!((got.map - total / n).abs() < 1e-9);
            assert!(got.random_map > 0.0);
        }
    }

    #[test]
    fn no_abnormal_queries_is_error() {
        let idx = EmbeddingIndex::new(vec![entry("a", vec![1.0], Some(&[0, 0]))], "t", None).unwrap();
        assert!(map_at_k(&idx, 1, &MapConfig::default()).is_err());
    }

    #[test]
    fn recall_full_k_is_one() {
        let idx = random_index(1, 12, 4, 2);
        let q: Vec<(String, Embedding)> = idx
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.study_id.clone(), Embedding::new(vec![i as f32, 1.0, -1.0, 0.5])))
            .collect();
        let r = recall_at_k(&q, &idx, 12).unwrap();
        assert_eq!((r.recall, r.random_baseline), (1.0, 1.0));
        let bad = vec![("nope".to_string(), Embedding::new(vec![1.0; 4]))];
        assert!(recall_at_k(&bad, &idx, 1).is_err());
    }

    proptest! {
        #[test]
        fn recall_non_decreasing(seed in 0u64..500) {
            let idx = random_index(seed, 15, 5, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let q: Vec<(String, Embedding)> = idx.entries().iter().map(|e| {
                (e.study_id.clone(), Embedding::new((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            }).collect();
            let mut prev = 0.0;
            for k in 1..=15 {
                let r = recall_at_k(&q, &idx, k).unwrap().recall;
                prop_assert!(r >= prev);
                prev = r;
            }
        }

        #[test]
        fn relevance_symmetric(a in proptest::collection::vec(0u8..2, 6), b in proptest::collection::vec(0u8..2, 6)) {
            let (la, lb) = (LabelVector::from_binary(&a).unwrap(), LabelVector::from_binary(&b).unwrap());
            let r = relevance(&la, &lb).unwrap();
            prop_assert!(r == relevance(&lb, &la).unwrap());
            prop_assert!((r == 1.0) == (a == b && a.contains(&1)));
        }
    }
}
