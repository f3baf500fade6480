//! Volume container and slice-directory readers.
//!
//! Container layout (all little-endian), 64-byte header followed by the payload:
//!
//! ```text
//! 0   magic  "CTVOL\0"
//! 6   u16    version (1)
//! 8   u8     dtype   (1 = i16, 2 = u16, 3 = f32)
//! 9   u8     unit    (0 = raw, 1 = hounsfield, 2 = normalized)
//! 10  u16    reserved
//! 12  u32×3  dims x, y, z
//! 24  f64×3  spacing mm x, y, z
//! 48  f64    rescale slope
//! 56  f64    rescale intercept
//! 64  payload, x fastest, then y, then z
//! ```
//!
//! A slice directory holds one grayscale PNG per axial slice (sorted by file name,
//! width = x, height = y) plus a `meta.json` with `spacing_mm`, `rescale_slope` and
//! `rescale_intercept`.

use std::path::Path;

use ndarray::Array3;
use serde::Deserialize;

use super::{Unit, VolumeGrid};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"CTVOL\0";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    I16,
    U16,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::I16 => 1,
            DType::U16 => 2,
            DType::F32 => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(DType::I16),
            2 => Ok(DType::U16),
            3 => Ok(DType::F32),
            _ => Err(Error::Container(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::I16 | DType::U16 => 2,
            DType::F32 => 4,
        }
    }
}

fn unit_code(u: Unit) -> u8 {
    match u {
        Unit::Raw => 0,
        Unit::Hounsfield => 1,
        Unit::Normalized => 2,
    }
}

fn unit_from_code(c: u8) -> Result<Unit> {
    match c {
        0 => Ok(Unit::Raw),
        1 => Ok(Unit::Hounsfield),
        2 => Ok(Unit::Normalized),
        _ => Err(Error::Container(format!("unknown unit code {c}"))),
    }
}

pub fn encode_volume(volume: &VolumeGrid, dtype: DType) -> Result<Vec<u8>> {
    let [nx, ny, nz] = volume.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + nx * ny * nz * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(unit_code(volume.unit));
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in [nx, ny, nz] {
        let d = u32::try_from(d).map_err(|_| Error::Container("dimension overflows u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in volume.spacing_mm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&volume.rescale_slope.to_le_bytes());
    out.extend_from_slice(&volume.rescale_intercept.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = volume.data[[x, y, z]];
                match dtype {
                    DType::I16 => {
                        if v.fract() != 0.0 || v < i16::MIN as f32 || v > i16::MAX as f32 {
                            return Err(Error::Container(format!("value {v} not representable as i16")));
                        }
                        out.extend_from_slice(&(v as i16).to_le_bytes());
                    }
                    DType::U16 => {
                        if v.fract() != 0.0 || v < 0.0 || v > u16::MAX as f32 {
                            return Err(Error::Container(format!("value {v} not representable as u16")));
                        }
                        out.extend_from_slice(&(v as u16).to_le_bytes());
                    }
                    DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeGrid> {
    if bytes.len() < HEADER_LEN || &bytes[..6] != MAGIC {
        return Err(Error::Container("missing CTVOL header".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u16_at(6);
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[8])?;
    let unit = unit_from_code(bytes[9])?;
    let (nx, ny, nz) = (u32_at(12), u32_at(16), u32_at(20));
    let spacing = [f64_at(24), f64_at(32), f64_at(40)];
    let (slope, intercept) = (f64_at(48), f64_at(56));
    let n = nx * ny * nz;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * dtype.width() {
        return Err(Error::Container(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * dtype.width()
        )));
    }
    let values: Vec<f32> = match dtype {
        DType::I16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DType::U16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    let data = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| values[x + nx * (y + ny * z)]);
    let mut v = VolumeGrid::new(data, spacing, unit)?;
    v.rescale_slope = slope;
    v.rescale_intercept = intercept;
    Ok(v)
}

pub fn write_volume(path: impl AsRef<Path>, volume: &VolumeGrid, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(volume, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a container file, or a slice directory when `path` is a directory.
pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    let path = path.as_ref();
    if path.is_dir() {
        return read_slice_dir(path);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

#[derive(Debug, Deserialize)]
struct SliceMeta {
    spacing_mm: [f64; 3],
    #[serde(default = "one")]
    rescale_slope: f64,
    #[serde(default)]
    rescale_intercept: f64,
}

fn one() -> f64 {
    1.0
}

pub fn read_slice_dir(dir: &Path) -> Result<VolumeGrid> {
    let meta_path = dir.join("meta.json");
    let meta: SliceMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Container(format!("no PNG slices in {}", dir.display())));
    }
    let mut slices = Vec::with_capacity(files.len());
    for f in &files {
        let img = image::open(f)?.into_luma16();
        slices.push(img);
    }
    let (w, h) = slices[0].dimensions();
    if slices.iter().any(|s| s.dimensions() != (w, h)) {
        return Err(Error::Container("slices differ in size".into()));
    }
    let data = Array3::from_shape_fn((w as usize, h as usize, slices.len()), |(x, y, z)| {
        slices[z].get_pixel(x as u32, y as u32)[0] as f32
    });
    VolumeGrid::raw(data, meta.spacing_mm, meta.rescale_slope, meta.rescale_intercept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VolumeGrid {
        let data = Array3::from_shape_fn((4, 3, 2), |(x, y, z)| (x * 100 + y * 10 + z) as f32 - 50.0);
        VolumeGrid::raw(data, [0.7, 0.8, 2.5], 1.0, -1024.0).unwrap()
    }

    #[test]
    fn container_round_trip() {
        let v = sample();
        for dt in [DType::I16, DType::F32] {
            let back = decode_volume(&encode_volume(&v, dt).unwrap()).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn payload_is_x_fastest() {
        let v = sample();
        let bytes = encode_volume(&v, DType::I16).unwrap();
        let second = i16::from_le_bytes([bytes[66], bytes[67]]);
        assert_eq!(second as f32, v.data[[1, 0, 0]]);
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = encode_volume(&sample(), DType::F32).unwrap();
        assert!(decode_volume(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_volume(b"nope").is_err());
    }

    #[test]
    fn i16_rejects_fractional() {
        let mut v = sample();
        v.data[[0, 0, 0]] = 0.5;
        assert!(encode_volume(&v, DType::I16).is_err());
    }

    #[test]
    fn slice_directory() {
        let dir = tempfile::tempdir().unwrap();
        for z in 0..3u16 {
            let img = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(4, 2, |x, y| {
                image::Luma([1000 + z * 100 + (y * 10 + x) as u16])
            });
            img.save(dir.path().join(format!("slice_{z:03}.png"))).unwrap();
        }
        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"spacing_mm":[0.7,0.7,1.25],"rescale_slope":1.0,"rescale_intercept":-1024.0}"#,
        )
        .unwrap();
        let v = read_volume(dir.path()).unwrap();
        assert_eq!(v.shape(), [4, 2, 3]);
        assert_eq!(v.data[[3, 1, 2]], 1000.0 + 200.0 + 13.0);
        assert_eq!(v.unit, Unit::Raw);
        assert_eq!(v.rescale_intercept, -1024.0);
    }
}
