//! Study manifests: records, report sections, label vectors and patient-level splits.
//!
//! A manifest is JSON-lines, one [`StudyRecord`] per row. Labels are a comma separated
//! list of 0/1 values in vocabulary order. The vocabulary is a plain text file with one
//! abnormality name per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Valid => f.write_str("valid"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub clinical_information: Option<String>,
    pub technique: Option<String>,
    pub findings: Option<String>,
    pub impression: Option<String>,
}

fn non_empty(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

impl ReportDoc {
    pub fn findings(&self) -> Option<&str> {
        non_empty(&self.findings)
    }

    pub fn impression(&self) -> Option<&str> {
        non_empty(&self.impression)
    }

    /// A record can be used for contrastive training only if it has findings or impression.
    pub fn is_trainable(&self) -> bool {
        self.findings().is_some() || self.impression().is_some()
    }
}

/// Which report sections feed the text tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    Findings,
    Impression,
    #[default]
    Both,
}

impl std::str::FromStr for TextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "findings" => Ok(TextMode::Findings),
            "impression" => Ok(TextMode::Impression),
            "both" => Ok(TextMode::Both),
            other => Err(Error::InvalidArgument(format!("unknown text mode `{other}`"))),
        }
    }
}

/// Ordered abnormality names. The order fixes the logit and label layout for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbnormalityVocab {
    names: Vec<String>,
}

impl AbnormalityVocab {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Vocab("vocabulary is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::Vocab("empty abnormality name".into()));
            }
            if !seen.insert(n.to_lowercase()) {
                return Err(Error::Vocab(format!("duplicate abnormality `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// The bundled 18-label chest CT vocabulary.
    pub fn default_ct() -> Self {
        let names: Vec<String> =
            serde_json::from_str(include_str!("../data/abnormalities.json")).expect("bundled vocabulary parses");
        Self::new(names).expect("bundled vocabulary is valid")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.names.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }
}

/// One value per vocabulary entry: either 0/1 ground truth or a probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    values: Vec<f64>,
}

impl LabelVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "label value {v} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_binary(values: &[u8]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("non-binary label {v}")));
        }
        Ok(Self {
            values: values.iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    /// Parse `"1,0,0,1"` and check the length against the vocabulary.
    pub fn parse(text: &str, vocab: &AbnormalityVocab) -> Result<Self> {
        let values = text
            .split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad label value `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let lv = Self::new(values)?;
        lv.check_len(vocab.size())?;
        Ok(lv)
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.values.len() != expected {
            return Err(Error::LabelLength {
                expected,
                got: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Indices whose value is 1 (binary vectors) or ≥ 0.5 (probabilities).
    pub fn positives(&self) -> BTreeSet<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_positive(&self) -> usize {
        self.positives().len()
    }

    pub fn to_csv_field(&self) -> String {
        self.values
            .iter()
            .map(|v| {
                if *v == 0.0 || *v == 1.0 {
                    format!("{}", *v as u8)
                } else {
                    format!("{v}")
                }
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub volume_path: PathBuf,
    pub report: ReportDoc,
    pub labels: Option<LabelVector>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    study_id: String,
    patient_id: String,
    volume_path: String,
    #[serde(default)]
    findings: Option<String>,
    #[serde(default)]
    impression: Option<String>,
    #[serde(default)]
    clinical_information: Option<String>,
    #[serde(default)]
    technique: Option<String>,
    #[serde(default)]
    labels: Option<String>,
    split: Split,
}

/// An immutable, loaded set of studies sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: AbnormalityVocab,
    pub records: Vec<StudyRecord>,
    /// Study ids whose volume file did not exist at load time.
    pub missing_volumes: Vec<String>,
}

impl Corpus {
    pub fn new(vocab: AbnormalityVocab, records: Vec<StudyRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.study_id.as_str()) {
                return Err(Error::DuplicateStudy(r.study_id.clone()));
            }
            if let Some(l) = &r.labels {
                l.check_len(vocab.size())?;
            }
        }
        Ok(Self {
            vocab,
            records,
            missing_volumes: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, study_id: &str) -> Option<&StudyRecord> {
        self.records.iter().find(|r| r.study_id == study_id)
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.split).or_insert(0) += 1;
        }
        counts
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    pub fn filter_split(&self, split: Split) -> Corpus {
        self.filtered(|r| r.split == split)
    }

    pub fn filtered(&self, keep: impl Fn(&StudyRecord) -> bool) -> Corpus {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let ids: BTreeSet<_> = records.iter().map(|r| r.study_id.as_str()).collect();
        Corpus {
            vocab: self.vocab.clone(),
            missing_volumes: self
                .missing_volumes
                .iter()
                .filter(|s| ids.contains(s.as_str()))
                .cloned()
                .collect(),
            records,
        }
    }

    /// Write the corpus back as a JSON-lines manifest. Volume paths are written as given.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let row = ManifestRow {
                study_id: r.study_id.clone(),
                patient_id: r.patient_id.clone(),
                volume_path: r.volume_path.to_string_lossy().into_owned(),
                findings: r.report.findings.clone(),
                impression: r.report.impression.clone(),
                clinical_information: r.report.clinical_information.clone(),
                technique: r.report.technique.clone(),
                labels: r.labels.as_ref().map(LabelVector::to_csv_field),
                split: r.split,
            };
            let line = serde_json::to_string(&row)?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Load a JSON-lines manifest. Relative volume paths resolve against the manifest's directory.
pub fn load_corpus(manifest_path: impl AsRef<Path>, vocab: &AbnormalityVocab) -> Result<Corpus> {
    let manifest_path = manifest_path.as_ref();
    let file = std::fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    let mut missing = Vec::new();
    for (row, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::ManifestRow {
            row,
            message: e.to_string(),
        })?;
        if seen.insert(parsed.study_id.clone(), row).is_some() {
            return Err(Error::DuplicateStudy(parsed.study_id));
        }
        let labels = parsed
            .labels
            .as_deref()
            .filter(|s| !s.trim().is_empty())
            .map(|s| LabelVector::parse(s, vocab))
            .transpose()
            .map_err(|e| Error::ManifestRow {
                row,
                message: e.to_string(),
            })?;
        let mut volume_path = PathBuf::from(&parsed.volume_path);
        if volume_path.is_relative() {
            volume_path = base.join(volume_path);
        }
        if !volume_path.exists() {
            missing.push(parsed.study_id.clone());
        }
        records.push(StudyRecord {
            study_id: parsed.study_id,
            patient_id: parsed.patient_id,
            volume_path,
            report: ReportDoc {
                clinical_information: parsed.clinical_information,
                technique: parsed.technique,
                findings: parsed.findings,
                impression: parsed.impression,
            },
            labels,
            split: parsed.split,
        });
    }
    let mut corpus = Corpus::new(vocab.clone(), records)?;
    corpus.missing_volumes = missing;
    Ok(corpus)
}

/// Patient ids that appear in more than one split. Empty means the split is clean.
pub fn check_split_hygiene(corpus: &Corpus) -> BTreeSet<String> {
    let mut splits: HashMap<&str, BTreeSet<Split>> = HashMap::new();
    for r in &corpus.records {
        splits.entry(&r.patient_id).or_default().insert(r.split);
    }
    splits
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(p, _)| p.to_string())
        .collect()
}

/// Report text fed to the text tower. `Both` joins findings then impression with one space.
pub fn training_text(record: &StudyRecord, mode: TextMode) -> Result<String> {
    let r = &record.report;
    let text = match mode {
        TextMode::Findings => r.findings().map(str::to_string),
        TextMode::Impression => r.impression().map(str::to_string),
        TextMode::Both => match (r.findings(), r.impression()) {
            (Some(f), Some(i)) => Some(format!("{f} {i}")),
            (Some(f), None) => Some(f.to_string()),
            (None, Some(i)) => Some(i.to_string()),
            (None, None) => None,
        },
    };
    text.ok_or_else(|| {
        Error::Text(format!(
            "study {} has no text for mode {mode:?}",
            record.study_id
        ))
    })
}

/// Patient-level subsample. Patients are shuffled once per seed and a prefix is kept, so
/// smaller fractions are always subsets of larger ones.
pub fn sample_fraction(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let mut patients: Vec<&str> = corpus.patients().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let keep = ((fraction * patients.len() as f64).round() as usize)
        .max(1)
        .min(patients.len());
    let kept: BTreeSet<&str> = patients[..keep].iter().copied().collect();
    Ok(corpus.filtered(|r| kept.contains(r.patient_id.as_str())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab2() -> AbnormalityVocab {
        AbnormalityVocab::new(["Consolidation", "Emphysema"]).unwrap()
    }

    fn record(id: &str, patient: &str, split: Split) -> StudyRecord {
        StudyRecord {
            study_id: id.into(),
            patient_id: patient.into(),
            volume_path: PathBuf::from(format!("{id}.ctv")),
            report: ReportDoc {
                findings: Some("A.".into()),
                impression: Some("B.".into()),
                ..Default::default()
            },
            labels: None,
            split,
        }
    }

    fn write_manifest(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_rows() {
        let f = write_manifest(&[
            r#"{"study_id":"a","patient_id":"p1","volume_path":"a.ctv","findings":"x","labels":"1,0","split":"train"}"#,
            r#"{"study_id":"b","patient_id":"p2","volume_path":"b.ctv","impression":"y","split":"valid"}"#,
            r#"{"study_id":"c","patient_id":"p2","volume_path":"c.ctv","findings":"z","labels":"0,1","split":"valid"}"#,
        ]);
        let c = load_corpus(f.path(), &vocab2()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.split_counts()[&Split::Valid], 2);
        assert_eq!(c.missing_volumes.len(), 3);
        assert_eq!(c.records[0].labels.as_ref().unwrap().values(), &[1.0, 0.0]);
    }

    #[test]
    fn duplicate_study_is_rejected() {
        let f = write_manifest(&[
            r#"{"study_id":"dup","patient_id":"p1","volume_path":"a","split":"train"}"#,
            r#"{"study_id":"dup","patient_id":"p2","volume_path":"b","split":"train"}"#,
        ]);
        let err = load_corpus(f.path(), &vocab2()).unwrap_err();
        assert!(err.to_string().contains("dup"), "{err}");
    }

    #[test]
    fn malformed_row_reports_index() {
        let f = write_manifest(&[
            r#"{"study_id":"a","patient_id":"p1","volume_path":"a","split":"train"}"#,
            r#"{"study_id":"b","patient_id":"p1","split":"train"}"#,
        ]);
        match load_corpus(f.path(), &vocab2()) {
            Err(Error::ManifestRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eighteen_label_row() {
        let names: Vec<String> = (0..18).map(|i| format!("abn{i}")).collect();
        let vocab = AbnormalityVocab::new(names).unwrap();
        let mut labels = vec!["0"; 18];
        labels[0] = "1";
        let row = format!(
            r#"{{"study_id":"a","patient_id":"p","volume_path":"a","findings":"x","labels":"{}","split":"train"}}"#,
            labels.join(",")
        );
        let f = write_manifest(&[&row]);
        let c = load_corpus(f.path(), &vocab).unwrap();
        let lv = c.records[0].labels.as_ref().unwrap();
        assert_eq!(lv.len(), 18);
        assert!(lv.is_binary());
        assert_eq!(lv.count_positive(), 1);
    }

    #[test]
    fn wrong_label_length_is_row_error() {
        let f = write_manifest(&[
            r#"{"study_id":"a","patient_id":"p","volume_path":"a","labels":"1,0,1","split":"train"}"#,
        ]);
        assert!(matches!(
            load_corpus(f.path(), &vocab2()),
            Err(Error::ManifestRow { row: 0, .. })
        ));
    }

    #[test]
    fn hygiene() {
        let clean = Corpus::new(vocab2(), vec![record("s1", "P1", Split::Train)]).unwrap();
        assert!(check_split_hygiene(&clean).is_empty());
        let leaky = Corpus::new(
            vocab2(),
            vec![record("s1", "P1", Split::Train), record("s2", "P1", Split::Valid)],
        )
        .unwrap();
        assert_eq!(
            check_split_hygiene(&leaky),
            BTreeSet::from(["P1".to_string()])
        );
    }

    #[test]
    fn text_modes() {
        let r = record("s", "p", Split::Train);
        assert_eq!(training_text(&r, TextMode::Both).unwrap(), "A. B.");
        assert_eq!(training_text(&r, TextMode::Impression).unwrap(), "B.");
        let mut empty = r.clone();
        empty.report.findings = Some("  ".into());
        assert!(training_text(&empty, TextMode::Findings).is_err());
        empty.report.impression = None;
        assert!(training_text(&empty, TextMode::Both).is_err());
    }

    fn many_patients(n: usize) -> Corpus {
        let records = (0..n)
            .flat_map(|p| {
                (0..2).map(move |k| record(&format!("s{p}_{k}"), &format!("P{p}"), Split::Train))
            })
            .collect();
        Corpus::new(vocab2(), records).unwrap()
    }

    #[test]
    fn fraction_sampling() {
        let c = many_patients(1000);
        let full = sample_fraction(&c, 1.0, 3).unwrap();
        assert_eq!(full.records, c.records);
        let small = sample_fraction(&c, 0.098, 3).unwrap();
        assert_eq!(small.patients().len(), 98);
        assert_eq!(small.len(), 196);
        let again = sample_fraction(&c, 0.098, 3).unwrap();
        assert_eq!(small.records, again.records);
        assert!(sample_fraction(&c, 0.0, 3).is_err());
        assert!(sample_fraction(&c, 1.5, 3).is_err());
        assert_eq!(sample_fraction(&c, 1e-9, 3).unwrap().patients().len(), 1);
    }

    #[test]
    fn vocab_rejects_duplicates() {
        assert!(AbnormalityVocab::new(["a", "A"]).is_err());
        assert!(AbnormalityVocab::new(Vec::<String>::new()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fractions_are_nested(seed in 0u64..1000, f1 in 0.01f64..1.0, f2 in 0.01f64..1.0) {
                let c = many_patients(40);
                let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
                let a = sample_fraction(&c, lo, seed).unwrap();
                let b = sample_fraction(&c, hi, seed).unwrap();
                prop_assert!(a.patients().is_subset(&b.patients()));
            }

            #[test]
            fn hygiene_matches_pairwise_scan(splits in proptest::collection::vec((0usize..10, any::<bool>()), 1..40)) {
                let records: Vec<_> = splits
                    .iter()
                    .enumerate()
                    .map(|(i, (p, train))| {
                        record(&format!("s{i}"), &format!("P{p}"), if *train { Split::Train } else { Split::Valid })
                    })
                    .collect();
                let c = Corpus::new(vocab2(), records.clone()).unwrap();
                let mut expected = BTreeSet::new();
                for a in &records {
                    for b in &records {
                        if a.patient_id == b.patient_id && a.split != b.split {
                            expected.insert(a.patient_id.clone());
                        }
                    }
                }
                prop_assert_eq!(check_split_hygiene(&c), expected);
            }
        }
    }
}
