//! Compare the seven prompt templates on the training split, where choosing one
//! does not peek at held-out labels, then check the pick on the held-out split.
//!
//! cargo run --release --example prompt_sweep -- [model.ckpt]

use ctclip::corpus::Split;
use ctclip::pipeline::{split_of, sweep_templates, synthetic_model, E2eConfig};
use ctclip::zeroshot::default_templates;

fn main() -> ctclip::Result<()> {
    let ckpt = std::env::args().nth(1);
    let dir = tempfile::tempdir().map_err(|e| ctclip::Error::InvalidArgument(e.to_string()))?;
    let (corpus, data, model) = synthetic_model(dir.path(), &E2eConfig::quick(), ckpt.as_deref().map(std::path::Path::new))?;
    let templates = default_templates();

    let train = sweep_templates(&model, &corpus.vocab, &templates, &split_of(&data, Split::Train))?;
    let valid = sweep_templates(&model, &corpus.vocab, &templates, &split_of(&data, Split::Valid))?;
    println!("{:>3}  {:<96} {:>9} {:>9}", "id", "positive / negative form", "train acc", "valid acc");
    for (t, v) in train.rows.iter().zip(&valid.rows) {
        let mark = if t.template_id == train.best_template { "*" } else { " " };
        println!(
            "{:>3}{mark} {:<96} {:>9.3} {:>9.3}",
            t.template_id,
            format!("{} / {}", t.positive_form, t.negative_form),
            t.mean.accuracy,
            v.mean.accuracy
        );
    }
    println!("picked template {} on train; the held-out best would be {}", train.best_template, valid.best_template);
    let out = dir.path().join("prompt_sweep.json");
    train.write(&out)?;
    println!("sweep table written as JSON and CSV next to {}", out.display());
    Ok(())
}
