//! The two towers and their shared latent currency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod patch;
pub mod text;
pub mod tokenizer;
pub mod vision;

pub use patch::{patchify, unpatchify, PatchConfig, Patches};
pub use text::{TextConfig, TextEncoder};
pub use tokenizer::{TokenizedText, Tokenizer, WordTokenizer};
pub use vision::VisionEncoder;

/// A vector in the shared volume/report space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Unit-length copy. Fails on a zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cannot normalize a vector with norm {n}"
            )));
        }
        Ok(Self {
            values: self.values.iter().map(|&v| (v as f64 / n) as f32).collect(),
            normalized: true,
        })
    }
}

/// `dot(a/|a|, b/|b|)` in f64.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine(&a.values, &b.values)
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero-norm vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn cosine_examples() {
        let a = Embedding::new(vec![0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let x = Embedding::new(vec![1.0, 0.0]);
        let y = Embedding::new(vec![0.0, 2.0]);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        assert!(cosine_similarity(&x, &Embedding::new(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn cosine_matches_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut dot = 0.0;
            for i in 0..64 {
                dot += (a[i] / norm(&a)) as f64 * (b[i] / norm(&b)) as f64;
            }
            let got = cosine(&a, &b).unwrap();
            assert!((got - dot).abs() < 1e-6);
            assert_eq!(got, cosine(&b, &a).unwrap());
        }
    }

    fn norm(v: &[f32]) -> f32 {
        v.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    #[test]
    fn normalized_has_unit_norm() {
        let e = Embedding::new(vec![3.0, 4.0]).normalized().unwrap();
        assert!(e.normalized);
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }
}
