//! Mattes-style mutual information with linear (tent) Parzen spreading.
//!
//! Each image is min-max mapped onto bin coordinates `[0, bins − 1]`; a sample
//! at bin coordinate `a` spreads weight `1 − frac(a)` and `frac(a)` onto the two
//! nearest bins. The joint histogram is the outer product of the per-sample
//! weights, accumulated over voxels and normalized to unit mass.

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Normalized joint intensity histogram. Rows index the warped (moving)
/// image, columns the fixed image.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    bins: usize,
    joint: Vec<f64>,
    moving_marginal: Vec<f64>,
    fixed_marginal: Vec<f64>,
}

/// Bin placement of one image: lower bin, upper weight, and the range used.
pub(crate) struct Binning {
    pub lower: Vec<usize>,
    pub frac: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    pub scale: f64,
}

impl Binning {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = hi - lo;
        let scale = if span > 0.0 { (bins - 1) as f64 / span } else { 0.0 };
        let mut lower = Vec::with_capacity(values.len());
        let mut frac = Vec::with_capacity(values.len());
        for &v in values {
            let a = ((v - lo) * scale).clamp(0.0, (bins - 1) as f64);
            let i0 = (a.floor() as usize).min(bins - 2);
            lower.push(i0);
            frac.push(a - i0 as f64);
        }
        Self { lower, frac, lo, hi, scale }
    }

    /// Bin coordinate in [0, 1] along the range (`t = (v − lo) / (hi − lo)`).
    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        let bins_m1 = self.scale * (self.hi - self.lo);
        if bins_m1 > 0.0 {
            (self.lower[k] as f64 + self.frac[k]) / bins_m1
        } else {
            0.0
        }
    }
}

impl JointHistogram {
    /// Build the normalized joint histogram of two equally sized images.
    pub fn new(warped: &Volume3D, fixed: &Volume3D, bins: usize) -> Result<Self> {
        check_args(warped, fixed, bins)?;
        let bw = Binning::new(warped.data(), bins);
        let bf = Binning::new(fixed.data(), bins);
        Ok(Self::from_binnings(&bw, &bf, bins))
    }

    pub(crate) fn from_binnings(bw: &Binning, bf: &Binning, bins: usize) -> Self {
        let n = bw.lower.len();
        let mut joint = vec![0.0; bins * bins];
        for k in 0..n {
            let (i, fi) = (bw.lower[k], bw.frac[k]);
            let (j, fj) = (bf.lower[k], bf.frac[k]);
            let wi = [1.0 - fi, fi];
            let wj = [1.0 - fj, fj];
            for (di, &a) in wi.iter().enumerate() {
                let row = (i + di) * bins;
                for (dj, &b) in wj.iter().enumerate() {
                    joint[row + j + dj] += a * b;
                }
            }
        }
        let inv = 1.0 / n as f64;
        joint.iter_mut().for_each(|p| *p *= inv);
        let mut moving_marginal = vec![0.0; bins];
        let mut fixed_marginal = vec![0.0; bins];
        for i in 0..bins {
            for j in 0..bins {
                let p = joint[i * bins + j];
                moving_marginal[i] += p;
                fixed_marginal[j] += p;
            }
        }
        Self {
            bins,
            joint,
            moving_marginal,
            fixed_marginal,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn joint(&self, i: usize, j: usize) -> f64 {
        self.joint[i * self.bins + j]
    }

    pub fn moving_marginal(&self) -> &[f64] {
        &self.moving_marginal
    }

    pub fn fixed_marginal(&self) -> &[f64] {
        &self.fixed_marginal
    }

    /// `Σ P log(P / (Q1 Q2))` over nonzero joint entries.
    pub fn mutual_information(&self) -> f64 {
        let mut mi = 0.0;
        for i in 0..self.bins {
            let q1 = self.moving_marginal[i];
            if q1 <= 0.0 {
                continue;
            }
            for j in 0..self.bins {
                let p = self.joint[i * self.bins + j];
                if p > 0.0 {
                    mi += p * (p / (q1 * self.fixed_marginal[j])).ln();
                }
            }
        }
        mi
    }

    /// Shannon entropy of the moving marginal.
    pub fn moving_entropy(&self) -> f64 {
        entropy(&self.moving_marginal)
    }

    /// Shannon entropy of the fixed marginal.
    pub fn fixed_entropy(&self) -> f64 {
        entropy(&self.fixed_marginal)
    }

    /// `log(P / (Q1 Q2))` per joint cell, zero on empty cells.
    pub(crate) fn log_ratio(&self) -> Vec<f64> {
        let b = self.bins;
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let p = self.joint[i * b + j];
                if p > 0.0 {
                    out[i * b + j] = (p / (self.moving_marginal[i] * self.fixed_marginal[j])).ln();
                }
            }
        }
        out
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn check_args(a: &Volume3D, b: &Volume3D, bins: usize) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::input(format!(
            "mutual information needs equal dims, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if bins < 4 {
        return Err(Error::input(format!("bins must be >= 4, got {bins}")));
    }
    Ok(())
}

/// Mattes mutual information between a warped image and the fixed image.
/// Returns 0 when either image is constant.
pub fn mattes_mi(warped: &Volume3D, fixed: &Volume3D, bins: usize) -> Result<f64> {
    Ok(JointHistogram::new(warped, fixed, bins)?.mutual_information())
}

/// Mutual information of raw warped intensities against a precomputed fixed binning.
pub(crate) fn mi_value(warped: &[f64], fixed: &Binning, bins: usize) -> f64 {
    let bw = Binning::new(warped, bins);
    JointHistogram::from_binnings(&bw, fixed, bins).mutual_information()
}

/// Mutual information and its derivative with respect to each warped
/// intensity, including the dependence of the min-max range on the extreme
/// voxels.
pub(crate) fn mi_and_gradient(warped: &[f64], fixed: &Binning, bins: usize) -> (f64, Vec<f64>) {
    let bw = Binning::new(warped, bins);
    let hist = JointHistogram::from_binnings(&bw, fixed, bins);
    let mi = hist.mutual_information();
    let n = warped.len();
    if bw.scale == 0.0 {
        return (mi, vec![0.0; n]);
    }
    let lr = hist.log_ratio();
    let inv_n = 1.0 / n as f64;
    // dMI/da_k: moving the sample from bin i toward bin i + 1
    let mut d_a = vec![0.0; n];
    for k in 0..n {
        let i = bw.lower[k];
        let (j, fj) = (fixed.lower[k], fixed.frac[k]);
        let wj = [1.0 - fj, fj];
        let mut acc = 0.0;
        for (dj, &b) in wj.iter().enumerate() {
            if b != 0.0 {
                acc += b * (lr[(i + 1) * bins + j + dj] - lr[i * bins + j + dj]);
            }
        }
        d_a[k] = acc * inv_n;
    }
    let mut grad: Vec<f64> = d_a.iter().map(|g| g * bw.scale).collect();
    // range terms: a_k = (w_k − lo) · s, s = (B − 1) / (hi − lo)
    let (mut s_lo, mut s_hi) = (0.0, 0.0);
    for k in 0..n {
        let t = bw.t(k);
        s_lo += d_a[k] * bw.scale * (t - 1.0);
        s_hi -= d_a[k] * bw.scale * t;
    }
    let (mut kmin, mut kmax) = (0, 0);
    for k in 1..n {
        if warped[k] < warped[kmin] {
            kmin = k;
        }
        if warped[k] > warped[kmax] {
            kmax = k;
        }
    }
    grad[kmin] += s_lo;
    grad[kmax] += s_hi;
    (mi, grad)
}
