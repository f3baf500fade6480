use ctclip::corpus::AbnormalityVocab;
use ctclip::labelx::{eval_extractor, load_gold, ReportClassifier, RuleExtractor};

fn fixture() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/labelx_gold.jsonl")
}

#[test]
fn rule_extractor_matches_hand_labelled_reports() {
    let vocab = AbnormalityVocab::default_ct();
    let gold = load_gold(fixture(), &vocab).unwrap();
    assert_eq!(gold.len(), 20);
    let ex = RuleExtractor::default();
    for g in &gold {
        let got = ex.classify(&g.report(), &vocab).unwrap();
        let want: Vec<f64> = g.labels.iter().map(|&b| b as f64).collect();
        assert_eq!(got.values(), &want[..], "{}", g.report_id);
    }
    let rep = eval_extractor(&gold, &ex, &vocab).unwrap();
    assert_eq!(rep.macro_f1, 1.0);
    assert!(rep.per_label.iter().all(|s| s.support > 0));
}

#[test]
fn gold_with_wrong_width_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.jsonl");
    std::fs::write(&p, "{\"report_id\":\"x\",\"findings\":\"a\",\"labels\":[1,0]}\n").unwrap();
    assert!(load_gold(&p, &AbnormalityVocab::default_ct()).is_err());
}
