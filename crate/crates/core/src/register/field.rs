use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::io::{decode_native, encode_native, NativeHeader};
use crate::volume::{sample_with_gradient, BoundaryPolicy, Volume3D, VoxelType};

/// Per-voxel displacement `v = φ(x) − x`, in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: [usize; 3],
    data: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "field dims must be positive");
        Self {
            dims,
            data: vec![[0.0; 3]; dims.iter().product()],
        }
    }

    pub fn new(dims: [usize; 3], data: Vec<[f64; 3]>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::input(format!("field dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::input(format!(
                "field has {} vectors, dims {dims:?} need {}",
                data.len(),
                dims.iter().product::<usize>()
            )));
        }
        if data.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::input("field contains non-finite components"));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(f64, f64, f64) -> [f64; 3]) -> Self {
        let mut field = Self::zeros(dims);
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    field.data[i] = f(x as f64, y as f64, z as f64);
                    i += 1;
                }
            }
        }
        field
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: [f64; 3]) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// One displacement component as a scalar volume.
    pub fn component(&self, c: usize) -> Volume3D {
        let mut vol = Volume3D::zeros(self.dims);
        for (i, v) in self.data.iter().enumerate() {
            let [x, y, z] = vol.coords(i);
            vol.set(x, y, z, v[c]);
        }
        vol
    }

    /// Largest Euclidean displacement magnitude.
    pub fn max_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|c| c.is_finite())
    }

    /// `self + s * other`, componentwise.
    pub fn axpy(&self, s: f64, other: &DisplacementField) -> DisplacementField {
        debug_assert_eq!(self.dims, other.dims);
        DisplacementField {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]])
                .collect(),
        }
    }

    /// Resample onto a grid twice as fine (`dims` is the fine grid) and
    /// double the displacements. Coarse voxel `i` covers fine voxels `2i`
    /// and `2i + 1`, so fine voxel `x` sits at coarse coordinate `(x − 0.5) / 2`.
    pub fn upsample_to(&self, dims: [usize; 3]) -> DisplacementField {
        let comps: Vec<Volume3D> = (0..3).map(|c| self.component(c)).collect();
        DisplacementField::from_fn(dims, |x, y, z| {
            let p = [(x - 0.5) / 2.0, (y - 0.5) / 2.0, (z - 0.5) / 2.0];
            let mut out = [0.0; 3];
            for c in 0..3 {
                out[c] = 2.0 * sample_with_gradient(&comps[c], p, BoundaryPolicy::Clamp).0;
            }
            out
        })
    }

    /// Separable Gaussian smoothing of each component; the kernel is
    /// renormalized where it is cut off by the boundary.
    pub fn gaussian_smooth(&self, sigma: f64) -> DisplacementField {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let mut cur = self.data.clone();
        let mut next = vec![[0.0; 3]; cur.len()];
        let [w, h, d] = self.dims;
        let strides = [1usize, w, w * h];
        for axis in 0..3 {
            let n = self.dims[axis] as isize;
            let stride = strides[axis];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let pos = [x, y, z][axis] as isize;
                        let base = (z * h + y) * w + x;
                        let mut acc = [0.0; 3];
                        let mut norm = 0.0;
                        for (ki, k) in (-radius..=radius).enumerate() {
                            let q = pos + k;
                            if q < 0 || q >= n {
                                continue;
                            }
                            let j = (base as isize + k * stride as isize) as usize;
                            let wk = kernel[ki];
                            norm += wk;
                            for c in 0..3 {
                                acc[c] += wk * cur[j][c];
                            }
                        }
                        next[base] = [acc[0] / norm, acc[1] / norm, acc[2] / norm];
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        DisplacementField {
            dims: self.dims,
            data: cur,
        }
    }
}

/// Write a field with the default f32×3 encoding (dtype 1).
pub fn write_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    write_field_as(field, path, VoxelType::F32x3)
}

pub fn write_field_as(field: &DisplacementField, path: impl AsRef<Path>, dtype: VoxelType) -> Result<()> {
    if dtype.components() != 3 {
        return Err(Error::input("displacement fields need a three-component dtype"));
    }
    let header = NativeHeader {
        dims: field.dims,
        spacing: [1.0; 3],
        dtype,
    };
    let flat: Vec<f64> = field.data.iter().flatten().copied().collect();
    fs::write(path, encode_native(&header, &flat))?;
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let bytes = fs::read(path)?;
    let (header, values) = decode_native(&bytes)?;
    if header.dtype.components() != 3 {
        return Err(Error::format(32, "expected a three-component displacement field"));
    }
    let data = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    DisplacementField::new(header.dims, data)
}
