//! Discrete bending energy of a displacement field.
//!
//! Over interior voxels and all three components:
//! `Σ (∂xx² + ∂yy² + ∂zz² + 2∂xy² + 2∂xz² + 2∂yz²)` with second-order central
//! differences and unit voxel volume.

use super::DisplacementField;
use crate::error::{Error, Result};

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

fn check(field: &DisplacementField) -> Result<()> {
    if field.dims().iter().any(|&d| d < 3) {
        return Err(Error::input(format!(
            "bending energy needs dims >= 3 on every axis, got {:?}",
            field.dims()
        )));
    }
    Ok(())
}

/// Visit each interior voxel with its flat index and the per-axis strides.
fn for_interior(dims: [usize; 3], mut f: impl FnMut(usize)) {
    let [w, h, d] = dims;
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                f((z * h + y) * w + x);
            }
        }
    }
}

pub fn bending_energy(field: &DisplacementField) -> Result<f64> {
    check(field)?;
    let [w, h, _] = field.dims();
    let s = [1isize, w as isize, (w * h) as isize];
    let v = field.as_slice();
    let at = |i: usize, off: isize, c: usize| v[(i as isize + off) as usize][c];
    let mut energy = 0.0;
    for_interior(field.dims(), |i| {
        for c in 0..3 {
            for a in 0..3 {
                let dd = at(i, s[a], c) - 2.0 * v[i][c] + at(i, -s[a], c);
                energy += dd * dd;
            }
            for (a, b) in PAIRS {
                let m = (at(i, s[a] + s[b], c) - at(i, s[a] - s[b], c) - at(i, -s[a] + s[b], c)
                    + at(i, -s[a] - s[b], c))
                    / 4.0;
                energy += 2.0 * m * m;
            }
        }
    });
    Ok(energy)
}

/// Bending energy and its gradient with respect to every field component.
pub(crate) fn bending_energy_and_gradient(field: &DisplacementField) -> Result<(f64, Vec<[f64; 3]>)> {
    check(field)?;
    let [w, h, _] = field.dims();
    let s = [1isize, w as isize, (w * h) as isize];
    let v = field.as_slice();
    let mut grad = vec![[0.0; 3]; v.len()];
    let mut energy = 0.0;
    for_interior(field.dims(), |i| {
        let ii = i as isize;
        for c in 0..3 {
            for a in 0..3 {
                let dd = v[(ii + s[a]) as usize][c] - 2.0 * v[i][c] + v[(ii - s[a]) as usize][c];
                energy += dd * dd;
                grad[(ii + s[a]) as usize][c] += 2.0 * dd;
                grad[i][c] -= 4.0 * dd;
                grad[(ii - s[a]) as usize][c] += 2.0 * dd;
            }
            for (a, b) in PAIRS {
                let taps = [
                    (s[a] + s[b], 1.0),
                    (s[a] - s[b], -1.0),
                    (-s[a] + s[b], -1.0),
                    (-s[a] - s[b], 1.0),
                ];
                let m: f64 = taps.iter().map(|&(o, k)| k * v[(ii + o) as usize][c]).sum::<f64>() / 4.0;
                energy += 2.0 * m * m;
                // d(2 m²) = 4 m dm, dm/dv_tap = k / 4
                for (o, k) in taps {
                    grad[(ii + o) as usize][c] += m * k;
                }
            }
        }
    });
    Ok((energy, grad))
}
