//! Evaluation statistics: per-abnormality metrics at the top-left ROC threshold,
//! bootstrap standard deviations and a paired permutation test between two models.
//!
//! cargo run --release --example stats

use ctclip::evalstats::{optimal_threshold, roc_curve, MetricsReport, ScoredPredictions, ThresholdRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores for three findings; `signal` sets how far positives sit above negatives.
fn model(tag: &str, truths: &[Vec<u8>], signal: f64, rng: &mut ChaCha8Rng) -> ScoredPredictions {
    let scores = truths
        .iter()
        .map(|t| t.iter().map(|&y| y as f64 * signal + rng.gen_range(0.0..1.0)).collect())
        .collect();
    let names = ["Emphysema", "Atelectasis", "Lung nodule"].map(String::from).to_vec();
    ScoredPredictions::new(tag, names, scores, truths.to_vec()).unwrap()
}

fn main() -> ctclip::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let truths: Vec<Vec<u8>> = (0..3).map(|_| (0..150).map(|_| rng.gen_bool(0.3) as u8).collect()).collect();
    let strong = model("strong", &truths, 0.8, &mut rng);
    let weak = model("weak", &truths, 0.3, &mut rng);

    let roc = roc_curve(&strong.scores[0], &strong.truths[0])?;
    println!("{} ROC points; top-left threshold {:.3}", roc.len(), optimal_threshold(&roc, ThresholdRule::TopLeft));

    let report = MetricsReport::compute(&strong, ThresholdRule::TopLeft)?
        .with_bootstrap(&strong, 500, 0)?
        .with_comparison(&strong, &weak, 1000, 0)?;
    print!("{}", report.to_csv());
    let b = report.bootstrap.as_ref().unwrap();
    println!("bootstrap AUROC {:.3} ± {:.3} over {} resamples", b.mean.auroc, b.std.auroc, b.iterations);
    let p = &report.p_values[0];
    println!("strong vs {}: p(AUROC) = {:.4}, p(F1) = {:.4}", p.against, p.auroc, p.f1);

    let dir = tempfile::tempdir().map_err(|e| ctclip::Error::InvalidArgument(e.to_string()))?;
    report.write(dir.path().join("metrics.json"))?;
    println!("wrote metrics.json and metrics.csv");
    Ok(())
}
