//! Scalar 3D volumes, trilinear sampling, and intensity preprocessing.
//!
//! All geometry is expressed in voxel coordinates. Voxel spacing is carried
//! along for file I/O only.

pub(crate) mod io;

pub use io::{read_nifti1, read_volume, write_volume, write_volume_as, VoxelType};

use crate::error::{Error, Result};

/// A 3D scalar field stored x-fastest: `index = (z * H + y) * W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

/// How samples outside the voxel grid are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryPolicy {
    /// Coordinates are clamped onto the grid before interpolation.
    #[default]
    Clamp,
    /// Voxels outside the grid read as zero.
    Zero,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::input(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::input(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::input(format!(
                "volume data length {} does not match dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite voxel value at index {i}")));
        }
        Ok(Self { dims, spacing, data })
    }

    /// Unit-spacing volume filled with zeros.
    pub fn zeros(dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "volume dims must be positive");
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Unit-spacing volume with `f(x, y, z)` at each voxel.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut vol = Self::zeros(dims);
        let [w, h, d] = dims;
        let mut i = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    vol.data[i] = f(x, y, z);
                    i += 1;
                }
            }
        }
        debug_assert!(vol.data.iter().all(|v| v.is_finite()));
        vol
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        assert!(spacing.iter().all(|&s| s > 0.0 && s.is_finite()));
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        debug_assert!(v.is_finite());
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Elementwise map producing a new volume with the same geometry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Voxel coordinates of flat index `i`.
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let w = self.dims[0];
        let h = self.dims[1];
        [i % w, (i / w) % h, i / (w * h)]
    }
}

/// Trilinear interpolation at a continuous voxel-space point.
///
/// Exact at voxel centers. Under [`BoundaryPolicy::Clamp`] the point is
/// clamped onto the grid first; under [`BoundaryPolicy::Zero`] missing
/// neighbours contribute zero.
pub fn trilinear_sample(vol: &Volume3D, point: [f64; 3], policy: BoundaryPolicy) -> Result<f64> {
    if point.iter().any(|c| !c.is_finite()) {
        return Err(Error::input(format!("non-finite sample point {point:?}")));
    }
    Ok(sample_with_gradient(vol, point, policy).0)
}

/// Per-axis lower corner index, fractional offset, and whether the sample
/// moves with the coordinate (false when clamped flat).
#[inline]
fn axis_clamp(c: f64, n: usize) -> (usize, f64, bool) {
    let top = (n - 1) as f64;
    if n == 1 {
        return (0, 0.0, false);
    }
    if c <= 0.0 {
        return (0, 0.0, c == 0.0);
    }
    if c >= top {
        return (n - 2, 1.0, c == top);
    }
    let i0 = c.floor() as usize;
    (i0, c - i0 as f64, true)
}

/// Sample value and its spatial gradient (derivative with respect to the
/// query point) in one pass. The gradient is the one-sided derivative of the
/// trilinear interpolant from the cell containing the point; it is zero along
/// axes where a clamp is active.
pub(crate) fn sample_with_gradient(
    vol: &Volume3D,
    p: [f64; 3],
    policy: BoundaryPolicy,
) -> (f64, [f64; 3]) {
    let [w, h, d] = vol.dims;
    match policy {
        BoundaryPolicy::Clamp => {
            let (x0, fx, mx) = axis_clamp(p[0], w);
            let (y0, fy, my) = axis_clamp(p[1], h);
            let (z0, fz, mz) = axis_clamp(p[2], d);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let z1 = (z0 + 1).min(d - 1);
            let c = |x: usize, y: usize, z: usize| vol.data[(z * h + y) * w + x];
            corner_blend(
                [
                    c(x0, y0, z0),
                    c(x1, y0, z0),
                    c(x0, y1, z0),
                    c(x1, y1, z0),
                    c(x0, y0, z1),
                    c(x1, y0, z1),
                    c(x0, y1, z1),
                    c(x1, y1, z1),
                ],
                [fx, fy, fz],
                [mx, my, mz],
            )
        }
        BoundaryPolicy::Zero => {
            let xf = p[0].floor();
            let yf = p[1].floor();
            let zf = p[2].floor();
            let (fx, fy, fz) = (p[0] - xf, p[1] - yf, p[2] - zf);
            let (xi, yi, zi) = (xf as i64, yf as i64, zf as i64);
            let c = |x: i64, y: i64, z: i64| {
                if x < 0 || y < 0 || z < 0 || x >= w as i64 || y >= h as i64 || z >= d as i64 {
                    0.0
                } else {
                    vol.data[((z as usize) * h + y as usize) * w + x as usize]
                }
            };
            corner_blend(
                [
                    c(xi, yi, zi),
                    c(xi + 1, yi, zi),
                    c(xi, yi + 1, zi),
                    c(xi + 1, yi + 1, zi),
                    c(xi, yi, zi + 1),
                    c(xi + 1, yi, zi + 1),
                    c(xi, yi + 1, zi + 1),
                    c(xi + 1, yi + 1, zi + 1),
                ],
                [fx, fy, fz],
                [true; 3],
            )
        }
    }
}

#[inline]
fn corner_blend(c: [f64; 8], f: [f64; 3], moving: [bool; 3]) -> (f64, [f64; 3]) {
    let [fx, fy, fz] = f;
    // along x
    let c00 = c[0] + (c[1] - c[0]) * fx;
    let c10 = c[2] + (c[3] - c[2]) * fx;
    let c01 = c[4] + (c[5] - c[4]) * fx;
    let c11 = c[6] + (c[7] - c[6]) * fx;
    // along y
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    let value = c0 + (c1 - c0) * fz;

    let mut grad = [0.0; 3];
    if moving[0] {
        let d00 = c[1] - c[0];
        let d10 = c[3] - c[2];
        let d01 = c[5] - c[4];
        let d11 = c[7] - c[6];
        let d0 = d00 + (d10 - d00) * fy;
        let d1 = d01 + (d11 - d01) * fy;
        grad[0] = d0 + (d1 - d0) * fz;
    }
    if moving[1] {
        grad[1] = (c10 - c00) + ((c11 - c01) - (c10 - c00)) * fz;
    }
    if moving[2] {
        grad[2] = c1 - c0;
    }
    (value, grad)
}

/// Nearest-rank percentile of already sorted values.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Linear intensity stretch mapping the `p_lo`/`p_hi` percentiles to 0/1,
/// clipped to [0, 1]. A constant volume maps to all zeros.
pub fn contrast_stretch(vol: &Volume3D, p_lo: f64, p_hi: f64) -> Result<Volume3D> {
    if !(0.0..=100.0).contains(&p_lo) || !(0.0..=100.0).contains(&p_hi) || p_lo >= p_hi {
        return Err(Error::input(format!(
            "percentiles must satisfy 0 <= p_lo < p_hi <= 100, got {p_lo}, {p_hi}"
        )));
    }
    let mut sorted = vol.data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = nearest_rank(&sorted, p_lo);
    let hi = nearest_rank(&sorted, p_hi);
    let span = hi - lo;
    Ok(vol.map(|v| {
        if span > 0.0 {
            ((v - lo) / span).clamp(0.0, 1.0)
        } else if v > lo {
            1.0
        } else {
            0.0
        }
    }))
}

/// Halve resolution by averaging 2×2×2 blocks. Odd trailing planes are
/// averaged over the partial block. Spacing doubles.
pub fn downsample2x(vol: &Volume3D) -> Result<Volume3D> {
    let [w, h, d] = vol.dims;
    if w < 2 || h < 2 || d < 2 {
        return Err(Error::input(format!("downsample2x needs all dims >= 2, got {:?}", vol.dims)));
    }
    let out_dims = [w.div_ceil(2), h.div_ceil(2), d.div_ceil(2)];
    let mut out = Volume3D::zeros(out_dims);
    for oz in 0..out_dims[2] {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[0] {
                let mut sum = 0.0;
                let mut count = 0usize;
                for z in 2 * oz..(2 * oz + 2).min(d) {
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for x in 2 * ox..(2 * ox + 2).min(w) {
                            sum += vol.get(x, y, z);
                            count += 1;
                        }
                    }
                }
                out.set(ox, oy, oz, sum / count as f64);
            }
        }
    }
    let s = vol.spacing;
    Ok(out.with_spacing([2.0 * s[0], 2.0 * s[1], 2.0 * s[2]]))
}
