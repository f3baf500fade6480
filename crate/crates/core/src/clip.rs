//! The paired model: volume tower, report tower and a learnable log-parameterized
//! logit scale (inverse temperature).

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    patchify, Embedding, PatchConfig, Patches, TextConfig, TextEncoder, TokenizedText, Tokenizer,
    VisionEncoder, WordTokenizer,
};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Init, ParamStore};
use crate::volpre::{TargetGeometry, Unit, VolumeGrid};

pub const LOGIT_SCALE: &str = "logit_scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub geometry: TargetGeometry,
    pub vision: PatchConfig,
    pub text: TextConfig,
    pub proj_dim: usize,
    pub init_temperature: f64,
    /// Upper bound on the logit scale after each optimizer step.
    pub max_logit_scale: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            geometry: TargetGeometry::default(),
            vision: PatchConfig::default(),
            text: TextConfig::default(),
            proj_dim: 512,
            init_temperature: 0.07,
            max_logit_scale: 100.0,
        }
    }
}

impl ClipConfig {
    /// CPU-sized configuration on the desk geometry.
    pub fn desk() -> Self {
        Self {
            geometry: TargetGeometry::desk(),
            vision: PatchConfig::desk(),
            text: TextConfig::desk(),
            proj_dim: 128,
            init_temperature: 0.07,
            max_logit_scale: 100.0,
        }
    }

    pub fn grid(&self) -> Result<[usize; 3]> {
        self.vision.grid(self.geometry.shape)
    }
}

/// Anything that can place report text in the shared space.
pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Embedding>;
}

#[derive(Debug, Clone)]
pub struct CtClip {
    config: ClipConfig,
    store: ParamStore,
    vision: VisionEncoder,
    text: TextEncoder,
    logit_scale: Tensor,
    tokenizer: WordTokenizer,
}

impl CtClip {
    pub fn new(config: ClipConfig, tokenizer: WordTokenizer, seed: u64, dtype: DType) -> Result<Self> {
        let grid = config.grid()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let vision = VisionEncoder::new(&mut init.pp("vision"), &config.vision, grid, config.proj_dim)?;
        let text = TextEncoder::new(
            &mut init.pp("text"),
            &config.text,
            tokenizer.vocab_size(),
            config.proj_dim,
        )?;
        let log_scale = (1.0 / config.init_temperature).ln() as f32;
        let logit_scale = init.constant(LOGIT_SCALE, &[], log_scale)?;
        Ok(Self {
            config,
            store,
            vision,
            text,
            logit_scale,
            tokenizer,
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    pub fn vision(&self) -> &VisionEncoder {
        &self.vision
    }

    pub fn text(&self) -> &TextEncoder {
        &self.text
    }

    /// Patches of a preprocessed volume. The volume must be normalized and match the
    /// configured geometry.
    pub fn patches(&self, volume: &VolumeGrid) -> Result<Patches> {
        if volume.unit != Unit::Normalized {
            return Err(Error::Volume(format!(
                "encoder expects a normalized volume, got {:?}",
                volume.unit
            )));
        }
        if volume.shape() != self.config.geometry.shape {
            return Err(Error::Volume(format!(
                "volume shape {:?} differs from configured {:?}",
                volume.shape(),
                self.config.geometry.shape
            )));
        }
        patchify(volume, &self.config.vision)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenizedText> {
        self.tokenizer.tokenize(text, self.config.text.max_len)
    }

    /// Differentiable `(batch, proj_dim)` volume features.
    pub fn volume_features(&self, patches: &[&Patches]) -> Result<Tensor> {
        let x = self.vision.batch_tensor(patches, self.dtype())?;
        self.vision.forward(&x)
    }

    /// Differentiable `(batch, proj_dim)` report features.
    pub fn text_features(&self, tokens: &[&TokenizedText]) -> Result<Tensor> {
        let (ids, mask) = self.text.batch_tensors(tokens, self.dtype())?;
        self.text.forward(&ids, &mask)
    }

    /// `exp(log_scale)` as a differentiable scalar.
    pub fn logit_scale_tensor(&self) -> Result<Tensor> {
        Ok(self.logit_scale.exp()?)
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
            .to_dtype(DType::F64)
            .and_then(|t| t.to_scalar::<f64>())
            .map(f64::exp)
            .unwrap_or(f64::NAN)
    }

    pub fn temperature(&self) -> f64 {
        1.0 / self.logit_scale()
    }

    /// Keep the logit scale at or below the configured ceiling.
    pub fn clamp_logit_scale(&self) -> Result<()> {
        let cap = self.config.max_logit_scale.ln();
        let var = self.store.get(LOGIT_SCALE).expect("logit scale registered");
        let cur = var.as_tensor().to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if cur > cap {
            var.set(&Tensor::new(cap, var.device())?.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn encode_patches(&self, patches: &Patches) -> Result<Embedding> {
        let f = self.volume_features(&[patches])?;
        Ok(rows(&f)?.remove(0))
    }

    pub fn encode_volume(&self, volume: &VolumeGrid) -> Result<Embedding> {
        self.encode_patches(&self.patches(volume)?)
    }

    pub fn encode_tokens(&self, tokens: &TokenizedText) -> Result<Embedding> {
        let f = self.text_features(&[tokens])?;
        Ok(rows(&f)?.remove(0))
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        self.encode_tokens(&self.tokenize(text)?)
    }

    /// Batched volume embeddings, `chunk` volumes per forward pass.
    pub fn encode_patch_batch(&self, patches: &[&Patches], chunk: usize) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(patches.len());
        for c in patches.chunks(chunk.max(1)) {
            out.extend(rows(&self.volume_features(c)?)?);
        }
        Ok(out)
    }

    pub fn checkpoint(&self, regime: &str, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "format": "ctclip",
            "version": 1,
            "regime": regime,
            "config": self.config,
            "tokenizer": self.tokenizer.tokens(),
            "extra": extra,
        });
        Checkpoint::from_store(meta, &self.store)
    }

    pub fn save(&self, path: impl AsRef<Path>, regime: &str, extra: serde_json::Value) -> Result<()> {
        self.checkpoint(regime, extra)?.save(path)
    }

    /// Rebuild a model from a checkpoint's embedded config and vocabulary.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        if ck.meta.get("format").and_then(|v| v.as_str()) != Some("ctclip") {
            return Err(Error::Checkpoint("not a ctclip checkpoint".into()));
        }
        let config: ClipConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let tokens: Vec<String> = serde_json::from_value(ck.meta["tokenizer"].clone())?;
        let tokenizer = WordTokenizer::from_tokens(tokens);
        let model = Self::new(config, tokenizer, 0, dtype)?;
        // Heads stored alongside (e.g. a linear probe) are loaded by their owners.
        let own: Checkpoint = Checkpoint {
            meta: ck.meta.clone(),
            tensors: ck
                .tensors
                .iter()
                .filter(|(n, _)| model.store.get(n).is_some())
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect(),
        };
        own.load_into(&model.store)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<(Self, Checkpoint)> {
        let ck = Checkpoint::load(path)?;
        let model = Self::from_checkpoint(&ck, dtype)?;
        Ok((model, ck))
    }
}

impl TextEmbedder for CtClip {
    fn embed_text(&self, text: &str) -> Result<Embedding> {
        self.encode_text(text)
    }
}

/// Split a `(batch, dim)` tensor into per-row embeddings.
pub fn rows(t: &Tensor) -> Result<Vec<Embedding>> {
    let t = t.to_dtype(DType::F32)?;
    Ok(t.to_vec2::<f32>()?.into_iter().map(Embedding::new).collect())
}

/// L2-normalize each row of a `(batch, dim)` tensor.
pub fn l2_normalize_rows(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(t.broadcast_div(&norm)?)
}

/// Scaled cosine similarity matrix `scale · v̂ t̂ᵀ`, rows are volumes.
pub fn similarity_logits(volumes: &Tensor, texts: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let v = l2_normalize_rows(volumes)?;
    let t = l2_normalize_rows(texts)?;
    Ok(v.matmul(&t.t()?)?.broadcast_mul(scale)?)
}
