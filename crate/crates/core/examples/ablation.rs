//! Dataset-fraction ablation: train on nested patient subsets of the training split
//! and evaluate each model zero-shot on the same held-out split.
//!
//! cargo run --release --example ablation -- [out_dir]

use ctclip::ablation::{curve_csv, run_ablation};
use ctclip::corpus::AbnormalityVocab;
use ctclip::pipeline::{load_studies, E2eConfig};
use ctclip::synth::write_synth;
use ctclip::zeroshot::{default_templates, template_by_id};

fn main() -> ctclip::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/ablation".into());
    let cfg = E2eConfig::quick();
    let synth = write_synth(std::path::Path::new(&out).join("data"), &cfg.synth)?;
    let vocab = AbnormalityVocab::from_file(&synth.vocab)?;
    let (corpus, data) = load_studies(&synth.manifest, &vocab, &cfg.clip, cfg.train.text_mode)?;
    let templates = default_templates();
    let template = template_by_id(&templates, 3)?;
    let rows = run_ablation(&corpus, &data, &[0.25, 0.5, 1.0], &cfg.clip, &cfg.train, cfg.model_seed, template, 200, out.as_ref())?;
    print!("{}", curve_csv(&rows));
    println!("per-fraction checkpoints and logs under {out}");
    Ok(())
}
