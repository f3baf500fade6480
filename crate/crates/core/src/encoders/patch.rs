use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volpre::VolumeGrid;

/// Geometry and width of the volume tower.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_xyz: [usize; 3],
    pub embed_dim: usize,
    pub depth_spatial: usize,
    pub depth_temporal: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_xyz: [30, 30, 15],
            embed_dim: 512,
            depth_spatial: 4,
            depth_temporal: 4,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

impl PatchConfig {
    /// Small tower for CPU runs on the desk geometry.
    pub fn desk() -> Self {
        Self {
            patch_xyz: [8, 8, 4],
            embed_dim: 32,
            depth_spatial: 1,
            depth_temporal: 1,
            heads: 4,
            mlp_ratio: 2,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_xyz.iter().product()
    }

    /// Patch grid `(nx, ny, nz)` for a volume shape.
    pub fn grid(&self, shape: [usize; 3]) -> Result<[usize; 3]> {
        let axes = ['x', 'y', 'z'];
        let mut g = [0; 3];
        for a in 0..3 {
            let p = self.patch_xyz[a];
            if p == 0 || shape[a] == 0 || shape[a] % p != 0 {
                return Err(Error::PatchShape {
                    axis: axes[a],
                    dim: shape[a],
                    patch: p,
                });
            }
            g[a] = shape[a] / p;
        }
        Ok(g)
    }
}

/// Flattened patches in `(ix, iy, iz)` row-major order; each patch is flattened
/// `(dx, dy, dz)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub grid: [usize; 3],
    pub patch_xyz: [usize; 3],
    pub data: Vec<f32>,
}

impl Patches {
    pub fn count(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_xyz.iter().product()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.data[i * d..(i + 1) * d]
    }
}

pub fn patchify(volume: &VolumeGrid, cfg: &PatchConfig) -> Result<Patches> {
    let grid = cfg.grid(volume.shape())?;
    let [px, py, pz] = cfg.patch_xyz;
    let mut data = Vec::with_capacity(volume.data.len());
    for ix in 0..grid[0] {
        for iy in 0..grid[1] {
            for iz in 0..grid[2] {
                for dx in 0..px {
                    for dy in 0..py {
                        for dz in 0..pz {
                            data.push(volume.data[[ix * px + dx, iy * py + dy, iz * pz + dz]]);
                        }
                    }
                }
            }
        }
    }
    Ok(Patches {
        grid,
        patch_xyz: cfg.patch_xyz,
        data,
    })
}

pub fn unpatchify(patches: &Patches) -> Array3<f32> {
    let [px, py, pz] = patches.patch_xyz;
    let [gx, gy, gz] = patches.grid;
    let mut out = Array3::zeros((gx * px, gy * py, gz * pz));
    let mut it = patches.data.iter();
    for ix in 0..gx {
        for iy in 0..gy {
            for iz in 0..gz {
                for dx in 0..px {
                    for dy in 0..py {
                        for dz in 0..pz {
                            out[[ix * px + dx, iy * py + dy, iz * pz + dz]] = *it.next().unwrap();
                        }
                    }
                }
            }
        }
    }
    out
}
