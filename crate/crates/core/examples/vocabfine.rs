//! Open-vocabulary fine-tuning: train on the logits of every positive and negative
//! prompt at once, accumulating gradients over fixed-size chunks of the logit array.
//!
//! cargo run --release --example vocabfine -- [model.ckpt]

use ctclip::corpus::Split;
use ctclip::evalstats::{MetricsReport, ThresholdRule};
use ctclip::finetune::{vocabfine_targets, VocabFineConfig, VocabFineTrainer};
use ctclip::pipeline::{fork, split_of, synthetic_model, zeroshot_scores, E2eConfig};
use ctclip::zeroshot::{default_templates, template_by_id};

fn main() -> ctclip::Result<()> {
    let ckpt = std::env::args().nth(1);
    let dir = tempfile::tempdir().map_err(|e| ctclip::Error::InvalidArgument(e.to_string()))?;
    let cfg = E2eConfig::quick();
    let (corpus, data, model) = synthetic_model(dir.path(), &cfg, ckpt.as_deref().map(std::path::Path::new))?;
    let vocab = &corpus.vocab;
    let (train, valid) = (split_of(&data, Split::Train), split_of(&data, Split::Valid));
    let templates = default_templates();
    let template = template_by_id(&templates, 3)?;

    // four labels give eight logits: [pos_0, neg_0, pos_1, neg_1, ...]
    let example = train[0].labels.as_ref().unwrap();
    println!("labels {:?} -> targets {:?}", example.values(), vocabfine_targets(example)?);

    let before = zeroshot_scores(&model, vocab, template, &valid, "before")?;
    let vf_cfg = VocabFineConfig {
        template_id: template.id,
        ..cfg.vocabfine.clone()
    };
    let mut trainer = VocabFineTrainer::new(fork(&model)?, vocab, template, vf_cfg)?;
    let logits = trainer.logits(&[&train[0].patches])?;
    let chunks: Vec<usize> = logits[0].chunks().map(<[f64]>::len).collect();
    println!("logit array of {} split into chunks {chunks:?}", 2 * logits[0].vocab_size());

    let losses = trainer.fit(&train)?;
    println!("{} steps, loss {:.4} -> {:.4}", losses.len(), losses[0], losses[losses.len() - 1]);
    let after = zeroshot_scores(trainer.model(), vocab, template, &valid, "vocabfine")?;
    let rule = ThresholdRule::TopLeft;
    println!(
        "held-out mean AUROC: zero-shot {:.3}, fine-tuned {:.3}",
        MetricsReport::compute(&before, rule)?.mean.auroc,
        MetricsReport::compute(&after, rule)?.mean.auroc
    );
    let path = dir.path().join("vocabfine.ckpt");
    trainer.checkpoint()?.save(&path)?;
    println!("checkpoint regime: {}", ctclip::nn::Checkpoint::load(&path)?.meta["regime"]);
    Ok(())
}
