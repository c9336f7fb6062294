//! Jacobian saliency maps: per-voxel determinant of the transform Jacobian
//! `I + ∂v/∂x`, a volume ratio that is 1 where the deformation preserves
//! volume, above 1 for expansion and below 1 for compression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::DisplacementField;
use crate::volume::Volume3D;

/// Per-voxel Jacobian determinant of a deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianSaliencyMap(Volume3D);

impl JacobianSaliencyMap {
    pub fn new(values: Volume3D) -> Self {
        Self(values)
    }

    pub fn volume(&self) -> &Volume3D {
        &self.0
    }

    pub fn into_volume(self) -> Volume3D {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.0.get(x, y, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VolumeChange {
    Expansion,
    None,
    Compression,
}

/// Voxel counts per volume-change class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub expansion: usize,
    pub none: usize,
    pub compression: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.expansion + self.none + self.compression
    }
}

/// Parameters that turn a saliency map into penalty weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    /// Weight for voxels that change volume.
    pub feature_weight: f64,
    /// Weight for voxels whose determinant stays within `flat_tol` of 1.
    pub debug_weight: f64,
    /// Half-width of the "no change" band around 1.
    pub flat_tol: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            feature_weight: 0.8,
            debug_weight: 0.2,
            flat_tol: 0.02,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.feature_weight > self.debug_weight && self.debug_weight > 0.0) || !self.feature_weight.is_finite() {
            return Err(Error::config(format!(
                "need feature_weight > debug_weight > 0, got {} and {}",
                self.feature_weight, self.debug_weight
            )));
        }
        if !(self.flat_tol >= 0.0) {
            return Err(Error::config(format!("flat tolerance must be >= 0, got {}", self.flat_tol)));
        }
        Ok(())
    }
}

/// Per-voxel penalty weights: `feature_weight` where volume changes,
/// `debug_weight` elsewhere. Never zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    weights: Volume3D,
    params: MaskParams,
}

impl WeightMask {
    pub fn weights(&self) -> &Volume3D {
        &self.weights
    }

    pub fn params(&self) -> MaskParams {
        self.params
    }

    pub fn is_debug(&self, i: usize) -> bool {
        self.weights.data()[i] == self.params.debug_weight
    }
}

/// `∂v_i/∂x_j` at one voxel: central differences inside, one-sided first
/// order differences on faces.
pub fn jacobian_at_voxel(field: &DisplacementField, voxel: [usize; 3]) -> Result<[[f64; 3]; 3]> {
    let dims = field.dims();
    if (0..3).any(|a| voxel[a] >= dims[a]) {
        return Err(Error::input(format!("voxel {voxel:?} outside field dims {dims:?}")));
    }
    Ok(jacobian_unchecked(field, voxel))
}

#[inline]
fn jacobian_unchecked(field: &DisplacementField, voxel: [usize; 3]) -> [[f64; 3]; 3] {
    let dims = field.dims();
    let mut jac = [[0.0; 3]; 3];
    for axis in 0..3 {
        let n = dims[axis];
        if n < 2 {
            continue;
        }
        let p = voxel[axis];
        let (lo, hi, span) = if p == 0 {
            (0, 1, 1.0)
        } else if p == n - 1 {
            (n - 2, n - 1, 1.0)
        } else {
            (p - 1, p + 1, 2.0)
        };
        let mut a = voxel;
        let mut b = voxel;
        a[axis] = lo;
        b[axis] = hi;
        let va = field.get(a[0], a[1], a[2]);
        let vb = field.get(b[0], b[1], b[2]);
        for comp in 0..3 {
            jac[comp][axis] = (vb[comp] - va[comp]) / span;
        }
    }
    jac
}

/// 3×3 determinant by cofactor expansion along the first row.
#[inline]
pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Determinant of `I + ∂v/∂x` at every voxel.
pub fn compute_jsm(field: &DisplacementField) -> Result<JacobianSaliencyMap> {
    let dims = field.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::input(format!("saliency map needs dims >= 3 on every axis, got {dims:?}")));
    }
    let mut out = Volume3D::zeros(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut j = jacobian_unchecked(field, [x, y, z]);
                for (d, row) in j.iter_mut().enumerate() {
                    row[d] += 1.0;
                }
                out.set(x, y, z, det3(&j));
            }
        }
    }
    Ok(JacobianSaliencyMap(out))
}

#[inline]
pub fn classify(det: f64, flat_tol: f64) -> VolumeChange {
    if det > 1.0 + flat_tol {
        VolumeChange::Expansion
    } else if det < 1.0 - flat_tol {
        VolumeChange::Compression
    } else {
        VolumeChange::None
    }
}

/// Classify every voxel; the band `[1 − flat_tol, 1 + flat_tol]` is "no change".
pub fn classify_voxels(jsm: &JacobianSaliencyMap, flat_tol: f64) -> Result<Vec<VolumeChange>> {
    if !(flat_tol >= 0.0) {
        return Err(Error::input(format!("flat tolerance must be >= 0, got {flat_tol}")));
    }
    Ok(jsm.values().iter().map(|&d| classify(d, flat_tol)).collect())
}

pub fn class_counts(classes: &[VolumeChange]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for v in classes {
        match v {
            VolumeChange::Expansion => c.expansion += 1,
            VolumeChange::None => c.none += 1,
            VolumeChange::Compression => c.compression += 1,
        }
    }
    c
}

pub fn weight_mask(jsm: &JacobianSaliencyMap, params: MaskParams) -> Result<WeightMask> {
    params.validate()?;
    let weights = jsm.volume().map(|d| match classify(d, params.flat_tol) {
        VolumeChange::None => params.debug_weight,
        _ => params.feature_weight,
    });
    Ok(WeightMask { weights, params })
}
