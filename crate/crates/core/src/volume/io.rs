//! Native `JSMV` volume files and read-only NIfTI-1.
//!
//! Native layout: a 64-byte header followed by little-endian voxels, x-fastest.
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `JSMV`                   |
//! | 4      | 4    | version (u32, currently 1)     |
//! | 8      | 12   | W, H, D (u32)                  |
//! | 20     | 12   | sx, sy, sz (f32)               |
//! | 32     | 1    | dtype code                     |
//! | 33     | 31   | zero padding                   |
//!
//! dtype codes: 0 = f32, 1 = f32×3 interleaved, 2 = f64, 3 = f64×3 interleaved.

use std::fs;
use std::path::Path;

use super::Volume3D;
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"JSMV";
pub(crate) const VERSION: u32 = 1;
pub(crate) const HEADER_LEN: usize = 64;

/// Element encoding of a native file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    F32,
    F32x3,
    F64,
    F64x3,
}

impl VoxelType {
    pub fn code(self) -> u8 {
        match self {
            VoxelType::F32 => 0,
            VoxelType::F32x3 => 1,
            VoxelType::F64 => 2,
            VoxelType::F64x3 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => VoxelType::F32,
            1 => VoxelType::F32x3,
            2 => VoxelType::F64,
            3 => VoxelType::F64x3,
            _ => return None,
        })
    }

    pub fn components(self) -> usize {
        match self {
            VoxelType::F32 | VoxelType::F64 => 1,
            VoxelType::F32x3 | VoxelType::F64x3 => 3,
        }
    }

    fn scalar_bytes(self) -> usize {
        match self {
            VoxelType::F32 | VoxelType::F32x3 => 4,
            VoxelType::F64 | VoxelType::F64x3 => 8,
        }
    }
}

pub(crate) struct NativeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: VoxelType,
}

pub(crate) fn encode_native(header: &NativeHeader, values: &[f64]) -> Vec<u8> {
    let n = header.dims.iter().product::<usize>() * header.dtype.components();
    debug_assert_eq!(values.len(), n);
    let mut buf = Vec::with_capacity(HEADER_LEN + n * header.dtype.scalar_bytes());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in header.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in header.spacing {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    buf.push(header.dtype.code());
    buf.resize(HEADER_LEN, 0);
    match header.dtype.scalar_bytes() {
        4 => values.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        _ => values.iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    buf
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

fn f32_at(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

pub(crate) fn decode_native(bytes: &[u8]) -> Result<(NativeHeader, Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"JSMV\"", &bytes[0..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        *d = u32_at(bytes, 8 + 4 * a) as usize;
        if *d == 0 {
            return Err(Error::format(8 + 4 * a as u64, "zero dimension"));
        }
    }
    let mut spacing = [0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        *s = f32_at(bytes, 20 + 4 * a) as f64;
        if !(*s > 0.0 && s.is_finite()) {
            return Err(Error::format(20 + 4 * a as u64, format!("invalid spacing {s}")));
        }
    }
    let dtype = VoxelType::from_code(bytes[32])
        .ok_or_else(|| Error::format(32, format!("unsupported dtype code {}", bytes[32])))?;
    let count = dims
        .iter()
        .try_fold(dtype.components(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(8, "dimension product overflows"))?;
    let expected = HEADER_LEN as u64 + (count * dtype.scalar_bytes()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::format(
            bytes.len().min(expected as usize) as u64,
            format!("size mismatch: header implies {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let values: Vec<f64> = match dtype.scalar_bytes() {
        4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            (HEADER_LEN + i * dtype.scalar_bytes()) as u64,
            "non-finite voxel value",
        ));
    }
    Ok((NativeHeader { dims, spacing, dtype }, values))
}

/// Write a scalar volume as f64 (dtype 2); the round trip is bit-exact.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_volume_as(vol, path, VoxelType::F64)
}

/// Write a scalar volume with an explicit scalar dtype (`F32` or `F64`).
pub fn write_volume_as(vol: &Volume3D, path: impl AsRef<Path>, dtype: VoxelType) -> Result<()> {
    if dtype.components() != 1 {
        return Err(Error::input("scalar volumes need a single-component dtype"));
    }
    let header = NativeHeader {
        dims: vol.dims(),
        spacing: vol.spacing(),
        dtype,
    };
    fs::write(path, encode_native(&header, vol.data()))?;
    Ok(())
}

/// Read a native scalar volume. Files starting with a NIfTI-1 header are
/// delegated to [`read_nifti1`].
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 348 && &bytes[344..347] == b"n+1" {
        return parse_nifti1(&bytes);
    }
    let (header, values) = decode_native(&bytes)?;
    if header.dtype.components() != 1 {
        return Err(Error::format(32, "expected a scalar volume, found a vector field"));
    }
    Volume3D::new(header.dims, header.spacing, values)
}

/// Read an uncompressed single-file NIfTI-1 volume (float32 or int16).
pub fn read_nifti1(path: impl AsRef<Path>) -> Result<Volume3D> {
    parse_nifti1(&fs::read(path)?)
}

fn parse_nifti1(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < 348 {
        return Err(Error::format(bytes.len() as u64, "truncated NIfTI-1 header"));
    }
    let le = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => true,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => false,
        other => return Err(Error::format(0, format!("sizeof_hdr is {other}, expected 348"))),
    };
    let i16_at = |o: usize| {
        let b: [u8; 2] = bytes[o..o + 2].try_into().unwrap();
        if le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(344, "only single-file NIfTI-1 (magic \"n+1\") is supported"));
    }
    let ndim = i16_at(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format(40, format!("dim[0] = {ndim}, expected 3..=7")));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = i16_at(42 + 2 * a);
        if v <= 0 {
            return Err(Error::format(42 + 2 * a as u64, format!("non-positive dim {v}")));
        }
        *d = v as usize;
    }
    for k in 4..=ndim as usize {
        if i16_at(40 + 2 * k) > 1 {
            return Err(Error::format(40 + 2 * k as u64, "volumes with more than 3 dimensions are not supported"));
        }
    }
    let datatype = i16_at(70);
    let width = match datatype {
        16 => 4,
        4 => 2,
        other => {
            return Err(Error::format(70, format!("unsupported NIfTI datatype {other} (float32/int16 only)")))
        }
    };
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = f32_at(80 + 4 * a).abs() as f64;
        if v > 0.0 && v.is_finite() {
            *s = v;
        }
    }
    let vox_offset = f32_at(108);
    if !(vox_offset >= 348.0) {
        return Err(Error::format(108, format!("vox_offset {vox_offset} is before the end of the header")));
    }
    let start = vox_offset as usize;
    let n: usize = dims.iter().product();
    let end = start + n * width;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("size mismatch: data needs bytes {start}..{end}, file has {}", bytes.len()),
        ));
    }
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let (slope, inter) = if slope != 0.0 && slope.is_finite() { (slope, inter) } else { (1.0, 0.0) };
    let raw = &bytes[start..end];
    let data: Vec<f64> = if width == 4 {
        raw.chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().unwrap();
                (if le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
            })
            .map(|v| v * slope + inter)
            .collect()
    } else {
        raw.chunks_exact(2)
            .map(|c| {
                let b: [u8; 2] = c.try_into().unwrap();
                (if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f64
            })
            .map(|v| v * slope + inter)
            .collect()
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format((start + i * width) as u64, "non-finite voxel value"));
    }
    Volume3D::new(dims, spacing, data)
}
