//! Retrieval: embed every study into an index, query it with text and with a volume,
//! and measure MAP@K (volume to volume) and Recall@K (report to volume).
//!
//! cargo run --release --example retrieval -- [model.ckpt]

use ctclip::pipeline::{synthetic_model, E2eConfig};
use ctclip::retrieval::{map_at_k, query_by_text, query_by_volume, recall_for_reports, EmbeddingIndex, MapConfig, VolumeQuery};

fn main() -> ctclip::Result<()> {
    let ckpt = std::env::args().nth(1);
    let dir = tempfile::tempdir().map_err(|e| ctclip::Error::InvalidArgument(e.to_string()))?;
    let (corpus, data, model) = synthetic_model(dir.path(), &E2eConfig::quick(), ckpt.as_deref().map(std::path::Path::new))?;

    let index = EmbeddingIndex::build(&model, &data, "example", Some(corpus.vocab.names().to_vec()))?;
    let path = dir.path().join("index.ctidx");
    index.save(&path)?;
    let index = EmbeddingIndex::load(&path)?;
    println!("index: {} entries of dimension {}", index.len(), index.dim());

    let text = "Emphysema is present. The heart is enlarged.";
    println!("\ntext query: {text}");
    for r in query_by_text(&index, text, 5, &model)?.ranked {
        let labels = index.label_names(index.get(&r.study_id).unwrap());
        println!("  {:<14} {:.3}  {labels:?}", r.study_id, r.score);
    }

    let probe = &data[9].study_id;
    println!("\nvolume query: {probe} {:?}", index.label_names(index.get(probe).unwrap()));
    for r in query_by_volume(&index, VolumeQuery::StudyId(probe), 5)?.ranked {
        println!("  {:<14} {:.3}  {:?}", r.study_id, r.score, index.label_names(index.get(&r.study_id).unwrap()));
    }

    println!();
    for k in [1, 5, 10, 50] {
        let m = map_at_k(&index, k, &MapConfig::default())?;
        println!("MAP@{k:<2} {:.3}  random {:.3}  fold {:.2}", m.map, m.random_map, m.fold_change);
    }
    let reports: Vec<(String, String)> = data.iter().filter_map(|d| d.text.clone().map(|t| (d.study_id.clone(), t))).collect();
    for k in [5, 10, 50] {
        let r = recall_for_reports(&reports, &index, k, &model)?;
        println!("Recall@{k:<2} {:.3}  random {:.3}", r.recall, r.random_baseline);
    }
    Ok(())
}
