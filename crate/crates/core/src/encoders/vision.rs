//! Factorized 3D patch transformer: spatial attention inside each axial slab of
//! patches, then temporal attention along the slab (z) axis, then a flatten and a
//! linear projection into the shared space.

use candle_core::{DType, Device, Tensor};

use super::patch::{PatchConfig, Patches};
use crate::error::{Error, Result};
use crate::nn::{Block, Init, LayerNorm, Linear};

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    cfg: PatchConfig,
    grid: [usize; 3],
    patch_embed: Linear,
    patch_norm: LayerNorm,
    spatial_pos: Tensor,
    temporal_pos: Tensor,
    spatial: Vec<Block>,
    temporal: Vec<Block>,
    norm: LayerNorm,
    proj: Linear,
}

impl VisionEncoder {
    pub fn new(init: &mut Init, cfg: &PatchConfig, grid: [usize; 3], proj_dim: usize) -> Result<Self> {
        let d = cfg.embed_dim;
        let [nx, ny, nz] = grid;
        let n_tokens = nx * ny * nz;
        let spatial = (0..cfg.depth_spatial)
            .map(|i| Block::new(&mut init.pp(&format!("spatial.{i}")), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let temporal = (0..cfg.depth_temporal)
            .map(|i| Block::new(&mut init.pp(&format!("temporal.{i}")), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            patch_embed: Linear::new(&mut init.pp("patch_embed"), cfg.patch_dim(), d)?,
            patch_norm: LayerNorm::new(&mut init.pp("patch_norm"), d)?,
            spatial_pos: init.normal("spatial_pos", &[nx * ny, 1, d], 0.02)?,
            temporal_pos: init.normal("temporal_pos", &[1, nz, d], 0.02)?,
            spatial,
            temporal,
            norm: LayerNorm::new(&mut init.pp("norm"), d)?,
            proj: Linear::new(&mut init.pp("proj"), n_tokens * d, proj_dim)?,
        })
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn config(&self) -> &PatchConfig {
        &self.cfg
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }

    /// Stack patch sets into a `(batch, tokens, patch_dim)` tensor.
    pub fn batch_tensor(&self, patches: &[&Patches], dtype: DType) -> Result<Tensor> {
        let pd = self.cfg.patch_dim();
        let n = self.grid.iter().product::<usize>();
        let mut flat = Vec::with_capacity(patches.len() * n * pd);
        for p in patches {
            if p.grid != self.grid || p.patch_xyz != self.cfg.patch_xyz {
                return Err(Error::InvalidArgument(format!(
                    "patch grid {:?} does not match encoder grid {:?}",
                    p.grid, self.grid
                )));
            }
            flat.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_vec(flat, (patches.len(), n, pd), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Token features before the projection: `(batch, tokens, embed_dim)`.
    pub fn tokens(&self, patches: &Tensor) -> Result<Tensor> {
        let (b, n, _) = patches.dims3()?;
        let [nx, ny, nz] = self.grid;
        let nxy = nx * ny;
        if n != nxy * nz {
            return Err(Error::InvalidArgument(format!(
                "expected {} patches, got {n}",
                nxy * nz
            )));
        }
        let d = self.cfg.embed_dim;
        let x = self.patch_norm.forward(&self.patch_embed.forward(patches)?)?;
        // (b, nxy, nz, d) with learned spatial and temporal positions
        let x = x
            .reshape((b, nxy, nz, d))?
            .broadcast_add(&self.spatial_pos)?
            .broadcast_add(&self.temporal_pos)?;
        // spatial attention among the nxy patches of each axial slab
        let mut x = x.transpose(1, 2)?.contiguous()?.reshape((b * nz, nxy, d))?;
        for blk in &self.spatial {
            x = blk.forward(&x, None)?;
        }
        // temporal attention along z for each spatial position
        let mut x = x
            .reshape((b, nz, nxy, d))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * nxy, nz, d))?;
        for blk in &self.temporal {
            x = blk.forward(&x, None)?;
        }
        let x = self.norm.forward(&x)?;
        Ok(x.reshape((b, nxy * nz, d))?)
    }

    /// `(batch, tokens, patch_dim)` → `(batch, proj_dim)`.
    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let tokens = self.tokens(patches)?;
        let b = tokens.dim(0)?;
        self.proj.forward(&tokens.reshape((b, ()))?)
    }
}
