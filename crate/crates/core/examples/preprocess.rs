//! Take one raw synthetic scan through every preprocessing stage and print what each
//! stage changes. Also round-trips the volume container format.
//!
//! cargo run --release --example preprocess

use ctclip::synth::{all_cases, synth_volume, SynthConfig};
use ctclip::volpre::io::{read_volume, write_volume, DType};
use ctclip::volpre::{crop_or_pad, normalize, resample, to_hounsfield, TargetGeometry, VolumeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn describe(stage: &str, v: &VolumeGrid) {
    let (lo, hi) = v.data.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    println!(
        "{stage:<12} {:?} voxels at {:.2?} mm, unit {:?}, values [{lo:.1}, {hi:.1}]",
        v.shape(),
        v.spacing_mm,
        v.unit
    );
}

fn main() -> ctclip::Result<()> {
    let cfg = SynthConfig::default();
    let case = all_cases(cfg.habitus_levels)[13];
    let raw = synth_volume(&case, &cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("case {} with labels {:?}", case.study_id(), case.labels().values());

    let dir = tempfile::tempdir().map_err(|e| ctclip::Error::InvalidArgument(e.to_string()))?;
    let path = dir.path().join("raw.ctv");
    write_volume(&path, &raw, DType::I16)?;
    let raw = read_volume(&path)?;
    describe("raw", &raw);

    let target = TargetGeometry::desk();
    let hu = to_hounsfield(&raw)?;
    describe("hounsfield", &hu);
    let resampled = resample(&hu, &target)?;
    describe("resampled", &resampled);
    let fitted = crop_or_pad(&resampled, &target);
    describe("crop/pad", &fitted);
    let norm = normalize(&fitted)?;
    describe("normalized", &norm);

    // the full-resolution geometry the production model expects
    let full = TargetGeometry::default();
    println!("full geometry would be {:?} at {:?} mm", full.shape, full.spacing_mm);
    Ok(())
}
