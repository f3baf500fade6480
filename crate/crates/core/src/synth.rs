//! Synthetic paired corpus: phantom chest volumes whose geometry is keyed to four
//! abnormalities and a body-habitus level, each with a templated report.
//!
//! Every study is a distinct (label combination, habitus) pair, so report text
//! identifies its volume uniquely. The held-out split takes, for combination `c`,
//! the study with habitus `c mod habitus_levels` (a Latin square), so each label
//! combination and each habitus appear in training.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{AbnormalityVocab, Corpus, LabelVector, ReportDoc, Split, StudyRecord};
use crate::error::{Error, Result};
use crate::volpre::io::{write_volume, DType};
use crate::volpre::VolumeGrid;

pub const SYNTH_LABELS: [&str; 4] = ["Lung nodule", "Pleural effusion", "Emphysema", "Cardiomegaly"];
const HABITUS_WORDS: [&str; 6] = ["slender", "average", "stocky", "broad", "petite", "large"];
const HALF_FOV_MM: f64 = 24.0;
const RAW_INTERCEPT: f64 = -1024.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub habitus_levels: usize,
    pub seed: u64,
    pub noise_hu: f64,
    /// In-plane raw spacing is drawn uniformly from this range.
    pub spacing_xy_mm: [f64; 2],
    pub spacing_z_mm: [f64; 2],
    /// Chance that an absent finding is stated (negated) rather than left unmentioned.
    pub negative_mention: f64,
    /// Shuffle finding sentences per report.
    pub shuffle_sentences: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            habitus_levels: 4,
            seed: 0,
            noise_hu: 15.0,
            spacing_xy_mm: [1.0, 2.2],
            spacing_z_mm: [2.0, 4.5],
            negative_mention: 1.0,
            shuffle_sentences: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCase {
    /// Bit `i` set means `SYNTH_LABELS[i]` is present.
    pub combination: usize,
    pub habitus: usize,
}

impl SynthCase {
    pub fn has(&self, label: usize) -> bool {
        self.combination >> label & 1 == 1
    }

    pub fn labels(&self) -> LabelVector {
        LabelVector::from_binary(&(0..SYNTH_LABELS.len()).map(|i| self.has(i) as u8).collect::<Vec<_>>())
            .expect("binary labels")
    }

    pub fn study_id(&self) -> String {
        format!("syn_c{:02}_h{}", self.combination, self.habitus)
    }

    pub fn split(&self, habitus_levels: usize) -> Split {
        if self.habitus == self.combination % habitus_levels {
            Split::Valid
        } else {
            Split::Train
        }
    }
}

pub fn synth_vocab() -> AbnormalityVocab {
    AbnormalityVocab::new(SYNTH_LABELS).expect("static vocabulary")
}

pub fn all_cases(habitus_levels: usize) -> Vec<SynthCase> {
    (0..1 << SYNTH_LABELS.len())
        .flat_map(|combination| (0..habitus_levels).map(move |habitus| SynthCase { combination, habitus }))
        .collect()
}

fn in_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Phantom value in HU at normalized coordinates `p` (each axis in [-1, 1]).
fn phantom_hu(p: [f64; 3], case: &SynthCase, levels: usize, jitter: [f64; 3]) -> f64 {
    let s = 0.62 + 0.30 * case.habitus as f64 / (levels.max(2) - 1) as f64;
    if !in_ellipsoid(p, [0.0, 0.0, 0.0], [s, 0.85 * s, 10.0]) {
        return -1000.0;
    }
    let heart_r = if case.has(3) { 0.36 * s } else { 0.22 * s };
    let heart_c = [0.05 * s + jitter[0], -0.28 * s, 0.0];
    if in_ellipsoid(p, heart_c, [heart_r, heart_r * 0.85, 0.5]) {
        return 60.0;
    }
    for side in [-1.0, 1.0] {
        let c = [side * 0.45 * s, 0.05 * s, 0.0];
        let r = [0.30 * s, 0.55 * s, 0.85];
        if !in_ellipsoid(p, c, r) {
            continue;
        }
        if case.has(0) && side > 0.0 {
            let nc = [c[0] + jitter[0], c[1] - 0.1 * s + jitter[1], 0.1 + jitter[2]];
            if in_ellipsoid(p, nc, [0.13, 0.13, 0.22]) {
                return 80.0;
            }
        }
        if case.has(1) && p[1] > c[1] + 0.28 * s {
            return 15.0;
        }
        return if case.has(2) { -960.0 } else { -800.0 };
    }
    -80.0
}

/// Raw-unit volume (slope 1, intercept -1024) sampled at a random spacing.
pub fn synth_volume(case: &SynthCase, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<VolumeGrid> {
    let sxy = rng.gen_range(cfg.spacing_xy_mm[0]..=cfg.spacing_xy_mm[1]);
    let sz = rng.gen_range(cfg.spacing_z_mm[0]..=cfg.spacing_z_mm[1]);
    let spacing = [sxy, sxy, sz];
    let shape = spacing.map(|s| (2.0 * HALF_FOV_MM / s).ceil() as usize);
    let jitter = [0, 1, 2].map(|_| rng.gen_range(-0.03..=0.03));
    let noise = Normal::new(0.0, cfg.noise_hu.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = Array3::from_shape_fn(shape, |(x, y, z)| {
        let idx = [x, y, z];
        let p = [0, 1, 2].map(|a| ((idx[a] as f64 + 0.5) * spacing[a] - shape[a] as f64 * spacing[a] / 2.0) / HALF_FOV_MM);
        let hu = phantom_hu(p, case, cfg.habitus_levels, jitter) + noise.sample(rng);
        (hu - RAW_INTERCEPT).round().clamp(0.0, 4095.0) as f32
    });
    VolumeGrid::raw(data, spacing, 1.0, RAW_INTERCEPT)
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or_else(String::new, |f| f.to_lowercase().chain(c).collect())
}

/// Findings state every label, positive or negated, in one of three phrasings; the
/// impression lists the positives.
pub fn synth_report(case: &SynthCase, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> ReportDoc {
    let mut findings = vec![format!("Body habitus is {}.", HABITUS_WORDS[case.habitus % HABITUS_WORDS.len()])];
    for (i, name) in SYNTH_LABELS.iter().enumerate() {
        let low = lower_first(name);
        if !case.has(i) && !rng.gen_bool(cfg.negative_mention.clamp(0.0, 1.0)) {
            continue;
        }
        let s = match (rng.gen_range(0..3), case.has(i)) {
            (0, true) => format!("{name} is present."),
            (0, false) => format!("{name} is not present."),
            (1, true) => format!("There is {low}."),
            (1, false) => format!("There is no {low}."),
            (_, true) => format!("{name} is seen."),
            (_, false) => format!("{name} is not seen."),
        };
        findings.push(s);
    }
    if cfg.shuffle_sentences {
        findings.shuffle(rng);
    }
    let positives: Vec<&str> = (0..SYNTH_LABELS.len()).filter(|&i| case.has(i)).map(|i| SYNTH_LABELS[i]).collect();
    let impression = if positives.is_empty() {
        "No significant abnormality.".to_string()
    } else {
        format!("{}.", positives.join(", "))
    };
    ReportDoc {
        findings: Some(findings.join(" ")),
        impression: Some(impression),
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub vocab: PathBuf,
    pub studies: usize,
    pub train: usize,
    pub valid: usize,
}

/// In-memory corpus plus the volumes it refers to, without touching disk.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Corpus, Vec<VolumeGrid>)> {
    if cfg.habitus_levels == 0 || cfg.habitus_levels > HABITUS_WORDS.len() {
        return Err(Error::InvalidArgument(format!(
            "habitus_levels must be in 1..={}",
            HABITUS_WORDS.len()
        )));
    }
    let mut records = Vec::new();
    let mut volumes = Vec::new();
    for case in all_cases(cfg.habitus_levels) {
        // one stream per study keeps studies independent of generation order
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((case.combination * 64 + case.habitus) as u64);
        volumes.push(synth_volume(&case, cfg, &mut rng)?);
        let id = case.study_id();
        records.push(StudyRecord {
            volume_path: PathBuf::from(format!("volumes/{id}.ctv")),
            patient_id: format!("pt_{id}"),
            study_id: id,
            report: synth_report(&case, cfg, &mut rng),
            labels: Some(case.labels()),
            split: case.split(cfg.habitus_levels),
        });
    }
    Ok((Corpus::new(synth_vocab(), records)?, volumes))
}

/// Write `manifest.jsonl`, `vocab.txt` and `volumes/*.ctv` under `dir`.
pub fn write_synth(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<SynthSummary> {
    let dir = dir.as_ref();
    let vdir = dir.join("volumes");
    std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
    let (corpus, volumes) = synth_corpus(cfg)?;
    for (r, v) in corpus.records.iter().zip(&volumes) {
        write_volume(dir.join(&r.volume_path), v, DType::I16)?;
    }
    let manifest = dir.join("manifest.jsonl");
    corpus.write_manifest(&manifest)?;
    let vocab = dir.join("vocab.txt");
    corpus.vocab.write(&vocab)?;
    let counts = corpus.split_counts();
    Ok(SynthSummary {
        manifest,
        vocab,
        studies: corpus.len(),
        train: counts.get(&Split::Train).copied().unwrap_or(0),
        valid: counts.get(&Split::Valid).copied().unwrap_or(0),
    })
}
