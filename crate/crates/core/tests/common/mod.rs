#![allow(dead_code)]

use candle_core::DType;
use ctclip::clip::{ClipConfig, CtClip};
use ctclip::corpus::{AbnormalityVocab, LabelVector};
use ctclip::encoders::{Embedding, PatchConfig, Patches, TextConfig, WordTokenizer};
use ctclip::retrieval::service::{ServiceState, VolumeStore};
use ctclip::retrieval::{EmbeddingIndex, IndexEntry};
use ctclip::train::TrainPair;
use ctclip::volpre::{TargetGeometry, Unit, VolumeGrid};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"];

pub fn tiny_config() -> ClipConfig {
    ClipConfig {
        geometry: TargetGeometry {
            spacing_mm: [1.0; 3],
            shape: [8, 8, 4],
        },
        vision: PatchConfig {
            patch_xyz: [4, 4, 2],
            embed_dim: 8,
            depth_spatial: 1,
            depth_temporal: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        text: TextConfig {
            width: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            max_len: 16,
        },
        proj_dim: 6,
        init_temperature: 0.07,
        max_logit_scale: 100.0,
    }
}

/// A model small enough for finite differences and quick service fixtures.
pub fn tiny_model(dtype: DType) -> CtClip {
    let tok = WordTokenizer::build([WORDS.join(" ").as_str()], 1);
    CtClip::new(tiny_config(), tok, 5, dtype).unwrap()
}

pub fn random_volume(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> VolumeGrid {
    let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| rng.gen_range(-1.0f32..1.0));
    VolumeGrid::new(data, [1.0; 3], Unit::Normalized).unwrap()
}

pub fn tiny_pairs(model: &CtClip, n: usize, seed: u64) -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let vol = random_volume(&mut rng, model.config().geometry.shape);
            let text = format!("{} {}", WORDS[i % 8], WORDS[(i * 3 + 1) % 8]);
            TrainPair {
                study_id: format!("s{i}"),
                patches: model.patches(&vol).unwrap(),
                tokens: model.tokenize(&text).unwrap(),
                text,
            }
        })
        .collect()
}

pub fn patch_refs(pairs: &[TrainPair]) -> Vec<&Patches> {
    pairs.iter().map(|p| &p.patches).collect()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<LabelVector> {
    (0..n)
        .map(|_| LabelVector::from_binary(&(0..v).map(|_| rng.gen_range(0..2)).collect::<Vec<u8>>()).unwrap())
        .collect()
}

/// Random unit-free embeddings; every entry gets at least one positive label.
pub fn random_index(seed: u64, n: usize, dim: usize, labels: usize, vocab: Option<Vec<String>>) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut l: Vec<u8> = (0..labels).map(|_| rng.gen_range(0..2)).collect();
            l[i % labels] = 1;
            IndexEntry {
                study_id: format!("s{i:02}"),
                embedding: Embedding::new(v),
                labels: Some(LabelVector::from_binary(&l).unwrap()),
            }
        })
        .collect();
    EmbeddingIndex::new(entries, "fixture", vocab).unwrap()
}

pub fn fixture_vocab() -> AbnormalityVocab {
    AbnormalityVocab::new(["alpha", "beta", "gamma"]).unwrap()
}

/// Service state over a 12-entry index in the tiny model's embedding space, with a
/// volume behind every indexed study.
pub fn service_fixture() -> (ServiceState, CtClip) {
    let model = tiny_model(DType::F32);
    let names = fixture_vocab().names().to_vec();
    let index = random_index(7, 12, model.config().proj_dim, names.len(), Some(names));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut volumes = VolumeStore::new();
    for e in index.entries() {
        volumes.add_volume(e.study_id.clone(), random_volume(&mut rng, model.config().geometry.shape));
    }
    let encoder = std::sync::Arc::new(tiny_model(DType::F32));
    (ServiceState::new(index, encoder, volumes), model)
}
