//! Zero-shot detection: score every held-out synthetic study against positive and
//! negative prompts, then summarize with AUROC, F1 and friends.
//!
//! cargo run --release --example zeroshot -- [model.ckpt]
//!
//! Without a checkpoint a short training run produces one first (about half a minute).

use ctclip::evalstats::{MetricsReport, ThresholdRule};
use ctclip::pipeline::{split_of, synthetic_model, zeroshot_scores, E2eConfig};
use ctclip::corpus::Split;
use ctclip::dataset::encode_volumes;
use ctclip::zeroshot::{build_prompts, default_templates, template_by_id, PromptBank};

fn main() -> ctclip::Result<()> {
    let ckpt = std::env::args().nth(1);
    let dir = tempfile::tempdir().map_err(|e| ctclip::Error::InvalidArgument(e.to_string()))?;
    let (corpus, data, model) = synthetic_model(dir.path(), &E2eConfig::quick(), ckpt.as_deref().map(std::path::Path::new))?;
    let vocab = &corpus.vocab;
    let valid = split_of(&data, Split::Valid);

    let templates = default_templates();
    let template = template_by_id(&templates, 3)?;
    let pair = build_prompts(&vocab.names()[0], template)?;
    println!("template {}: \"{}\" vs \"{}\"", template.id, pair.positive, pair.negative);
    println!("learned temperature {:.4}", model.temperature());

    let bank = PromptBank::new(vocab, template, &model)?;
    let emb = encode_volumes(&model, &valid[..4], 4)?;
    for (d, e) in valid.iter().zip(&emb) {
        let p = bank.detect_all(e, model.temperature())?;
        let truth = d.labels.as_ref().map(|l| l.values().to_vec()).unwrap_or_default();
        println!("{:<14} p = {:.3?}  truth = {:?}", d.study_id, p.values(), truth);
    }

    let preds = zeroshot_scores(&model, vocab, template, &valid, "zeroshot")?;
    let report = MetricsReport::compute(&preds, ThresholdRule::TopLeft)?;
    for a in &report.per_abnormality {
        println!("{:<18} auroc {:.3}  f1 {:.3}  threshold {:.3}", a.name, a.auroc, a.f1, a.threshold);
    }
    println!("mean AUROC {:.3}", report.mean.auroc);
    Ok(())
}
