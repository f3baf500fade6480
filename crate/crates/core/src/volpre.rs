//! CT volume preprocessing: Hounsfield conversion, trilinear resampling, center
//! crop/pad and normalization to `[-1, 1]`.
//!
//! Grids are stored as `Array3<f32>` indexed `[x, y, z]`.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod io;

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 200.0;
/// Fill value for padded voxels (air).
pub const PAD_HU: f32 = -1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Raw,
    Hounsfield,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub data: Array3<f32>,
    pub spacing_mm: [f64; 3],
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub unit: Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetGeometry {
    pub spacing_mm: [f64; 3],
    pub shape: [usize; 3],
}

impl Default for TargetGeometry {
    fn default() -> Self {
        Self {
            spacing_mm: [0.75, 0.75, 1.5],
            shape: [480, 480, 240],
        }
    }
}

impl TargetGeometry {
    /// Small geometry for CPU experiments: 32×32×16 voxels at 1.5×1.5×3 mm.
    pub fn desk() -> Self {
        Self {
            spacing_mm: [1.5, 1.5, 3.0],
            shape: [32, 32, 16],
        }
    }
}

impl VolumeGrid {
    pub fn new(data: Array3<f32>, spacing_mm: [f64; 3], unit: Unit) -> Result<Self> {
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Volume(format!("non-positive spacing {spacing_mm:?}")));
        }
        Ok(Self {
            data,
            spacing_mm,
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            unit,
        })
    }

    pub fn raw(data: Array3<f32>, spacing_mm: [f64; 3], slope: f64, intercept: f64) -> Result<Self> {
        let mut v = Self::new(data, spacing_mm, Unit::Raw)?;
        v.rescale_slope = slope;
        v.rescale_intercept = intercept;
        Ok(v)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn extent_mm(&self) -> [f64; 3] {
        let s = self.shape();
        [0, 1, 2].map(|a| s[a] as f64 * self.spacing_mm[a])
    }

    fn expect_unit(&self, unit: Unit, op: &str) -> Result<()> {
        if self.unit != unit {
            return Err(Error::Volume(format!(
                "{op} expects {unit:?} input, got {:?}",
                self.unit
            )));
        }
        Ok(())
    }
}

pub fn to_hounsfield(volume: &VolumeGrid) -> Result<VolumeGrid> {
    volume.expect_unit(Unit::Raw, "to_hounsfield")?;
    if volume.rescale_slope == 0.0 {
        return Err(Error::Volume("rescale slope is zero".into()));
    }
    let (m, b) = (volume.rescale_slope, volume.rescale_intercept);
    let data = volume
        .data
        .mapv(|v| ((m * v as f64 + b) as f32).clamp(HU_MIN, HU_MAX));
    Ok(VolumeGrid {
        data,
        unit: Unit::Hounsfield,
        ..volume.clone()
    })
}

/// Per-axis sampling plan: for each output index, the lower source index and the
/// fractional weight of the upper neighbour.
fn axis_plan(n_src: usize, src_spacing: f64, dst_spacing: f64) -> Vec<(usize, usize, f32)> {
    let n_dst = ((n_src as f64 * src_spacing / dst_spacing).round() as usize).max(1);
    let ratio = dst_spacing / src_spacing;
    (0..n_dst)
        .map(|j| {
            let pos = j as f64 * ratio;
            let last = n_src - 1;
            if pos >= last as f64 {
                (last, last, 0.0)
            } else {
                let lo = pos.floor() as usize;
                let frac = (pos - lo as f64) as f32;
                (lo, (lo + 1).min(last), frac)
            }
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Trilinear resampling onto the target spacing. Voxel 0 stays anchored at the origin
/// and samples past the last source voxel clamp to the edge.
pub fn resample(volume: &VolumeGrid, target: &TargetGeometry) -> Result<VolumeGrid> {
    volume.expect_unit(Unit::Hounsfield, "resample")?;
    if volume.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Volume(format!(
            "non-positive spacing {:?}",
            volume.spacing_mm
        )));
    }
    let [nx, ny, nz] = volume.shape();
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::Volume("empty volume".into()));
    }
    let px = axis_plan(nx, volume.spacing_mm[0], target.spacing_mm[0]);
    let py = axis_plan(ny, volume.spacing_mm[1], target.spacing_mm[1]);
    let pz = axis_plan(nz, volume.spacing_mm[2], target.spacing_mm[2]);
    let src = &volume.data;
    let data = Array3::from_shape_fn((px.len(), py.len(), pz.len()), |(i, j, k)| {
        let (x0, x1, tx) = px[i];
        let (y0, y1, ty) = py[j];
        let (z0, z1, tz) = pz[k];
        let along_z = |x: usize, y: usize| lerp(src[[x, y, z0]], src[[x, y, z1]], tz);
        let along_y = |x: usize| lerp(along_z(x, y0), along_z(x, y1), ty);
        lerp(along_y(x0), along_y(x1), tx)
    });
    Ok(VolumeGrid {
        data,
        spacing_mm: target.spacing_mm,
        ..volume.clone()
    })
}

/// Center crop or pad each axis to the target shape. Odd excess (or deficit) puts the extra
/// voxel on the high-index side; padding uses air (−1000 HU).
pub fn crop_or_pad(volume: &VolumeGrid, target: &TargetGeometry) -> VolumeGrid {
    let shape = volume.shape();
    // Signed offset of the target window inside the source along each axis.
    let offsets: [isize; 3] = [0, 1, 2].map(|a| {
        let (n, t) = (shape[a] as isize, target.shape[a] as isize);
        if n >= t {
            (n - t) / 2
        } else {
            -((t - n) / 2)
        }
    });
    let src = &volume.data;
    let data = Array3::from_shape_fn(
        (target.shape[0], target.shape[1], target.shape[2]),
        |(i, j, k)| {
            let idx = [i, j, k];
            let mut s = [0usize; 3];
            for a in 0..3 {
                let p = idx[a] as isize + offsets[a];
                if p < 0 || p >= shape[a] as isize {
                    return PAD_HU;
                }
                s[a] = p as usize;
            }
            src[s]
        },
    );
    VolumeGrid {
        data,
        ..volume.clone()
    }
}

/// Affine map `[-1000, 200] HU → [-1, 1]`.
pub fn normalize(volume: &VolumeGrid) -> Result<VolumeGrid> {
    volume.expect_unit(Unit::Hounsfield, "normalize")?;
    if let Some(v) = volume.data.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
        return Err(Error::Volume(format!(
            "value {v} outside [{HU_MIN}, {HU_MAX}] HU; clip before normalizing"
        )));
    }
    Ok(VolumeGrid {
        data: volume.data.mapv(normalize_value),
        unit: Unit::Normalized,
        ..volume.clone()
    })
}

pub fn normalize_value(hu: f32) -> f32 {
    (hu + 400.0) / 600.0
}

pub fn denormalize_value(v: f32) -> f32 {
    v * 600.0 - 400.0
}

pub fn denormalize(volume: &VolumeGrid) -> Result<VolumeGrid> {
    volume.expect_unit(Unit::Normalized, "denormalize")?;
    Ok(VolumeGrid {
        data: volume.data.mapv(denormalize_value),
        unit: Unit::Hounsfield,
        ..volume.clone()
    })
}

/// The full chain: HU conversion, resampling, crop/pad, normalization.
pub fn preprocess(raw: &VolumeGrid, target: &TargetGeometry) -> Result<VolumeGrid> {
    let hu = to_hounsfield(raw)?;
    let resampled = resample(&hu, target)?;
    let fitted = crop_or_pad(&resampled, target);
    normalize(&fitted)
}

/// Bring a volume in any unit to the normalized target geometry. Normalized inputs are
/// accepted as-is when they already have the target shape.
pub fn prepare_any(volume: &VolumeGrid, target: &TargetGeometry) -> Result<VolumeGrid> {
    match volume.unit {
        Unit::Raw => preprocess(volume, target),
        Unit::Hounsfield => {
            let clamped = VolumeGrid {
                data: volume.data.mapv(|v| v.clamp(HU_MIN, HU_MAX)),
                ..volume.clone()
            };
            normalize(&crop_or_pad(&resample(&clamped, target)?, target))
        }
        Unit::Normalized if volume.shape() == target.shape => Ok(volume.clone()),
        Unit::Normalized => Err(Error::Volume(format!(
            "normalized volume has shape {:?}, expected {:?}",
            volume.shape(),
            target.shape
        ))),
    }
}

/// Element-wise maximum absolute difference; handy for tests and diagnostics.
pub fn max_abs_diff(a: &Array3<f32>, b: &Array3<f32>) -> f32 {
    let mut m = 0f32;
    Zip::from(a).and(b).for_each(|x, y| m = m.max((x - y).abs()));
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hu(data: Array3<f32>, spacing: [f64; 3]) -> VolumeGrid {
        VolumeGrid::new(data, spacing, Unit::Hounsfield).unwrap()
    }

    #[test]
    fn hounsfield_examples() {
        let raw = |v: f32| {
            VolumeGrid::raw(Array3::from_elem((1, 1, 1), v), [1.0; 3], 1.0, -1024.0).unwrap()
        };
        assert_eq!(to_hounsfield(&raw(1024.0)).unwrap().data[[0, 0, 0]], 0.0);
        assert_eq!(to_hounsfield(&raw(1400.0)).unwrap().data[[0, 0, 0]], 200.0);
        assert_eq!(to_hounsfield(&raw(0.0)).unwrap().data[[0, 0, 0]], -1000.0);
        let mut degenerate = raw(5.0);
        degenerate.rescale_slope = 0.0;
        assert!(to_hounsfield(&degenerate).is_err());
        assert!(to_hounsfield(&hu(Array3::zeros((1, 1, 1)), [1.0; 3])).is_err());
    }

    #[test]
    fn hounsfield_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array3::from_shape_fn((5, 4, 3), |_| rng.gen_range(-3000.0f32..3000.0));
        let v = VolumeGrid::raw(data.clone(), [1.0; 3], 0.5, -500.0).unwrap();
        let out = to_hounsfield(&v).unwrap();
        for (x, y) in data.iter().zip(out.data.iter()) {
            let mut expect = 0.5 * *x as f64 - 500.0;
            if expect < -1000.0 {
                expect = -1000.0;
            }
            if expect > 200.0 {
                expect = 200.0;
            }
            assert_eq!(*y, expect as f32);
        }
    }

    #[test]
    fn resample_identity_when_spacing_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Array3::from_shape_fn((6, 5, 4), |_| rng.gen_range(-1000.0f32..200.0));
        let v = hu(data.clone(), [0.75, 0.75, 1.5]);
        let out = resample(
            &v,
            &TargetGeometry {
                spacing_mm: [0.75, 0.75, 1.5],
                shape: [6, 5, 4],
            },
        )
        .unwrap();
        assert_eq!(out.data, data);
    }

    #[test]
    fn resample_ramp_midpoints() {
        let data = Array3::from_shape_fn((2, 2, 6), |(_, _, z)| 10.0 * z as f32 - 30.0);
        let v = hu(data.clone(), [1.0, 1.0, 3.0]);
        let out = resample(
            &v,
            &TargetGeometry {
                spacing_mm: [1.0, 1.0, 1.5],
                shape: [2, 2, 12],
            },
        )
        .unwrap();
        assert_eq!(out.shape(), [2, 2, 12]);
        for k in 0..11 {
            let got = out.data[[1, 0, k]];
            let expect = if k % 2 == 0 {
                data[[1, 0, k / 2]]
            } else {
                0.5 * (data[[1, 0, k / 2]] + data[[1, 0, k / 2 + 1]])
            };
            assert!((got - expect).abs() < 1e-5, "k={k}: {got} vs {expect}");
        }
        // past the last source voxel the edge value is held
        assert_eq!(out.data[[0, 0, 11]], data[[0, 0, 5]]);
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let mut v = hu(Array3::zeros((2, 2, 2)), [1.0; 3]);
        v.spacing_mm[2] = 0.0;
        assert!(resample(&v, &TargetGeometry::desk()).is_err());
    }

    #[test]
    fn crop_one_voxel_each_side() {
        let data = Array3::from_shape_fn((482, 4, 2), |(x, _, _)| x as f32 - 900.0);
        let v = hu(data, [0.75, 0.75, 1.5]);
        let t = TargetGeometry {
            spacing_mm: [0.75, 0.75, 1.5],
            shape: [480, 4, 2],
        };
        let out = crop_or_pad(&v, &t);
        assert_eq!(out.shape(), [480, 4, 2]);
        assert_eq!(out.data[[0, 0, 0]], 1.0 - 900.0);
        assert_eq!(out.data[[479, 0, 0]], 480.0 - 900.0);
    }

    #[test]
    fn odd_excess_goes_to_high_side() {
        let data = Array3::from_shape_fn((5, 1, 1), |(x, _, _)| x as f32);
        let out = crop_or_pad(
            &hu(data, [1.0; 3]),
            &TargetGeometry {
                spacing_mm: [1.0; 3],
                shape: [2, 1, 1],
            },
        );
        // excess 3: one voxel off the low side, two off the high side
        assert_eq!(out.data.iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);
    }

    #[test]
    fn pad_uses_air() {
        let v = hu(Array3::from_elem((100, 100, 50), 40.0), [1.0; 3]);
        let t = TargetGeometry {
            spacing_mm: [1.0; 3],
            shape: [120, 110, 64],
        };
        let out = crop_or_pad(&v, &t);
        assert_eq!(out.shape(), [120, 110, 64]);
        let padded = out.data.iter().filter(|&&x| x == PAD_HU).count();
        assert_eq!(padded, 120 * 110 * 64 - 100 * 100 * 50);
        // low side gets floor(deficit / 2)
        assert_eq!(out.data[[9, 4, 6]], PAD_HU);
        assert_eq!(out.data[[10, 5, 7]], 40.0);
    }

    #[test]
    fn normalize_examples() {
        let v = hu(Array3::from_shape_vec((3, 1, 1), vec![-1000.0, 200.0, -400.0]).unwrap(), [1.0; 3]);
        let n = normalize(&v).unwrap();
        assert_eq!(n.data.iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0, 0.0]);
        let back = denormalize(&n).unwrap();
        assert!(max_abs_diff(&back.data, &v.data) < 1e-4);
        let bad = hu(Array3::from_elem((1, 1, 1), 250.0), [1.0; 3]);
        assert!(normalize(&bad).is_err());
    }

    proptest! {
        #[test]
        fn resample_preserves_constants(c in -1000.0f32..200.0, sx in 0.4f64..3.0, sz in 0.5f64..4.0) {
            let v = hu(Array3::from_elem((7, 6, 5), c), [sx, sx, sz]);
            let out = resample(&v, &TargetGeometry::desk()).unwrap();
            prop_assert!(out.data.iter().all(|&x| x == c));
        }

        #[test]
        fn crop_or_pad_idempotent(nx in 1usize..40, ny in 1usize..40, nz in 1usize..20) {
            let v = hu(Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| (x + 2 * y + 3 * z) as f32 - 500.0), [1.5, 1.5, 3.0]);
            let t = TargetGeometry::desk();
            let once = crop_or_pad(&v, &t);
            let twice = crop_or_pad(&once, &t);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn normalize_strictly_monotone(a in -1000.0f32..200.0, b in -1000.0f32..200.0) {
            prop_assume!(a < b);
            prop_assert!(normalize_value(a) < normalize_value(b));
        }
    }
}
