//! Rule-based report labeling: term hits with negation scope, grouping of variant
//! phrasings, and scoring against hand-labelled reports.
//!
//! cargo run --release --example label_extraction

use ctclip::corpus::AbnormalityVocab;
use ctclip::labelx::{eval_extractor, extract_from_text, find_hits, load_gold, RuleExtractor, RuleSet};

fn main() -> ctclip::Result<()> {
    let rules = RuleSet::default_rules();
    let vocab = AbnormalityVocab::default_ct();
    let text = "Ground-glass opacities in both lungs. No pleural effusion. \
                Left and right mucoid impactions. Heart size is increased, pericardial effusion not seen.";
    println!("{text}\n");
    for h in find_hits(text, &rules) {
        println!("  token {:>2}  {:<28} -> {:<22} {}", h.position, h.term, h.label, if h.negated { "negated" } else { "affirmed" });
    }
    let labels = extract_from_text(text, &rules, &vocab)?;
    let positives: Vec<&str> = labels.positives().into_iter().map(|i| vocab.names()[i].as_str()).collect();
    println!("\npositive labels: {positives:?}");

    let gold = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/labelx_gold.jsonl");
    let report = eval_extractor(&load_gold(gold, &vocab)?, &RuleExtractor::default(), &vocab)?;
    println!(
        "\n{} gold reports: macro precision {:.3}, recall {:.3}, F1 {:.3}",
        report.reports, report.macro_precision, report.macro_recall, report.macro_f1
    );
    Ok(())
}
