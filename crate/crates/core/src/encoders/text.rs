//! Report tower: token + position embeddings, masked self-attention blocks, a masked
//! sum over the token span and a linear projection into the shared space.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::tokenizer::TokenizedText;
use crate::error::{Error, Result};
use crate::nn::{Block, Init, LayerNorm, Linear, MASK_NEG};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            width: 768,
            depth: 2,
            heads: 12,
            mlp_ratio: 4,
            max_len: 512,
        }
    }
}

impl TextConfig {
    pub fn desk() -> Self {
        Self {
            width: 48,
            depth: 1,
            heads: 4,
            mlp_ratio: 2,
            max_len: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    cfg: TextConfig,
    token_embed: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(init: &mut Init, cfg: &TextConfig, vocab_size: usize, proj_dim: usize) -> Result<Self> {
        let w = cfg.width;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut init.pp(&format!("blocks.{i}")), w, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            token_embed: init.normal("token_embed", &[vocab_size, w], 0.1)?,
            pos_embed: init.normal("pos_embed", &[cfg.max_len, w], 0.02)?,
            blocks,
            norm: LayerNorm::new(&mut init.pp("norm"), w)?,
            proj: Linear::new(&mut init.pp("proj"), w, proj_dim)?,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }

    /// Build `(ids, mask)` tensors for a batch, trimmed to the longest real span in the
    /// batch. Trailing padding is masked, so trimming does not change the result.
    pub fn batch_tensors(&self, texts: &[&TokenizedText], dtype: DType) -> Result<(Tensor, Tensor)> {
        if texts.is_empty() {
            return Err(Error::Text("empty batch".into()));
        }
        let mut len = 0;
        for t in texts {
            if t.token_ids.len() != t.attention_mask.len() {
                return Err(Error::Text("ids and mask differ in length".into()));
            }
            let real = t.real_len();
            if real == 0 {
                return Err(Error::Text("input is all padding".into()));
            }
            // real tokens must be a prefix
            let last_real = t.attention_mask.iter().rposition(|&m| m == 1).unwrap();
            len = len.max(last_real + 1);
        }
        if len > self.cfg.max_len {
            return Err(Error::Text(format!(
                "sequence of {len} tokens exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let vocab = self.token_embed.dim(0)?;
        let mut ids = Vec::with_capacity(texts.len() * len);
        let mut mask = Vec::with_capacity(texts.len() * len);
        for t in texts {
            for i in 0..len {
                let (id, m) = match (t.token_ids.get(i), t.attention_mask.get(i)) {
                    (Some(&id), Some(&m)) => (id, m),
                    _ => (t.pad_id, 0),
                };
                if id as usize >= vocab {
                    return Err(Error::Text(format!("token id {id} outside vocabulary of {vocab}")));
                }
                ids.push(id);
                mask.push(m as f32);
            }
        }
        let b = texts.len();
        let ids = Tensor::from_vec(ids, (b, len), &Device::Cpu)?;
        let mask = Tensor::from_vec(mask, (b, len), &Device::Cpu)?.to_dtype(dtype)?;
        Ok((ids, mask))
    }

    /// Contextual token vectors `(batch, len, width)`, unmasked.
    pub fn token_states(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let x = self
            .token_embed
            .embedding(&ids.flatten_all()?)?
            .reshape((b, l, self.cfg.width))?;
        let mut x = x.broadcast_add(&self.pos_embed.narrow(0, 0, l)?)?;
        let key_bias = ((mask - 1.0)? * (-MASK_NEG))?;
        for blk in &self.blocks {
            x = blk.forward(&x, Some(&key_bias))?;
        }
        self.norm.forward(&x)
    }

    /// Masked sum over tokens followed by the projection: `(batch, proj_dim)`.
    pub fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let states = self.token_states(ids, mask)?;
        let pooled = states.broadcast_mul(&mask.unsqueeze(2)?)?.sum(1)?;
        self.proj.forward(&pooled)
    }
}
