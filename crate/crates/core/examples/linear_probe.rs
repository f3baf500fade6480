//! Linear probing: a per-abnormality logistic layer on frozen volume embeddings,
//! saved together with the backbone and reloaded for inference.
//!
//! cargo run --release --example linear_probe -- [model.ckpt]

use candle_core::DType;
use ctclip::clip::CtClip;
use ctclip::corpus::Split;
use ctclip::evalstats::{MetricsReport, ThresholdRule};
use ctclip::finetune::{lipro_checkpoint, lipro_train, LiProConfig, LiProHead};
use ctclip::pipeline::{lipro_scores, split_of, synthetic_model, E2eConfig};

fn main() -> ctclip::Result<()> {
    let ckpt = std::env::args().nth(1);
    let dir = tempfile::tempdir().map_err(|e| ctclip::Error::InvalidArgument(e.to_string()))?;
    let (corpus, data, model) = synthetic_model(dir.path(), &E2eConfig::quick(), ckpt.as_deref().map(std::path::Path::new))?;
    let vocab = &corpus.vocab;
    let (train, valid) = (split_of(&data, Split::Train), split_of(&data, Split::Valid));

    let cfg = LiProConfig {
        steps: 300,
        ..Default::default()
    };
    let head = LiProHead::new(vocab.size(), model.config().proj_dim, cfg.freeze_backbone, cfg.seed, DType::F32)?;
    let losses = lipro_train(&model, &head, &train, &cfg)?;
    println!("probe: {} steps, loss {:.4} -> {:.4}", losses.len(), losses[0], losses[losses.len() - 1]);

    let preds = lipro_scores(&model, &head, vocab, &valid, "lipro")?;
    let report = MetricsReport::compute(&preds, ThresholdRule::TopLeft)?;
    for a in &report.per_abnormality {
        println!("{:<18} auroc {:.3}", a.name, a.auroc);
    }

    // one file holds backbone, head and vocabulary
    let path = dir.path().join("lipro.ckpt");
    lipro_checkpoint(&model, &head, vocab)?.save(&path)?;
    let (reloaded, ck) = CtClip::load(&path, DType::F32)?;
    let head2 = LiProHead::from_checkpoint(&ck, DType::F32)?;
    let again = lipro_scores(&reloaded, &head2, vocab, &valid, "lipro")?;
    println!("reloaded probe reproduces scores: {}", again.scores == preds.scores);
    Ok(())
}
