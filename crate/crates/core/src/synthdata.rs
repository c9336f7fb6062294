//! Synthetic two-modality phantom subjects with known deformations, a
//! spurious corner marker, ADASYN oversampling and subject-level splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffnet::Tensor;
use crate::error::{Error, Result};
use crate::jal::FusionSample;
use crate::jsm::{det3, JacobianSaliencyMap};
use crate::register::DisplacementField;
use crate::volume::{contrast_stretch, trilinear_sample, BoundaryPolicy, Volume3D};

pub const CLASS_NAMES: [&str; 4] = ["CN", "MCI", "MLD", "SEV"];
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfounderSpec {
    /// Edge length of the cubic marker at the origin corner.
    pub size: usize,
    /// Marker intensity for class 3; class `c` gets `c / 3` of it.
    pub intensity: f64,
}

impl Default for ConfounderSpec {
    fn default() -> Self {
        Self { size: 3, intensity: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Random template blobs besides the central structure.
    pub blob_count: usize,
    pub blob_radius: f64,
    pub noise_sigma: f64,
    /// Atrophy amplitude per class; 0 for CN, non-decreasing.
    pub amplitudes: [f64; 4],
    /// Atrophy centre in voxel coordinates; `None` means the volume centre.
    pub atrophy_center: Option<[f64; 3]>,
    /// Gaussian width of the atrophy, in voxels. The region mask is `r <= 2 * atrophy_radius`.
    pub atrophy_radius: f64,
    /// Per-component bound on subject-specific bump displacements, in voxels.
    pub individual_amplitude: f64,
    pub individual_bumps: usize,
    pub individual_width: f64,
    pub confounder: ConfounderSpec,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            blob_count: 5,
            blob_radius: 1.6,
            noise_sigma: 0.03,
            amplitudes: [0.0, 0.1, 0.2, 0.3],
            atrophy_center: None,
            atrophy_radius: 2.0,
            individual_amplitude: 0.3,
            individual_bumps: 3,
            individual_width: 1.5,
            confounder: ConfounderSpec::default(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn center(&self) -> [f64; 3] {
        self.atrophy_center
            .unwrap_or_else(|| [0, 1, 2].map(|a| (self.dims[a] as f64 - 1.0) / 2.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::config(format!("phantom dims must be >= 4, got {:?}", self.dims)));
        }
        let a = self.amplitudes;
        if a[0] != 0.0 || a.windows(2).any(|w| w[1] < w[0]) || a[3] >= 1.0 {
            return Err(Error::config(format!(
                "atrophy amplitudes must start at 0, be non-decreasing and below 1, got {a:?}"
            )));
        }
        if !(self.atrophy_radius > 0.0) || !(self.individual_width > 0.0) || !(self.blob_radius > 0.0) {
            return Err(Error::config("radii and widths must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.individual_amplitude >= 0.0) {
            return Err(Error::config("noise and deformation amplitudes must be >= 0"));
        }
        let c = self.center();
        let reach = 2.0 * self.atrophy_radius;
        for ax in 0..3 {
            if c[ax] - reach < 0.0 || c[ax] + reach > self.dims[ax] as f64 - 1.0 {
                return Err(Error::config(format!(
                    "atrophy region (centre {c:?}, radius {reach}) leaves the volume"
                )));
            }
        }
        if self.confounder.size == 0 || self.dims.iter().any(|&d| self.confounder.size > d) {
            return Err(Error::config(format!("marker size {} does not fit", self.confounder.size)));
        }
        Ok(())
    }

    /// Whether voxel `p` lies in the atrophy region.
    pub fn in_atrophy_region(&self, p: [usize; 3]) -> bool {
        let c = self.center();
        let r2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
        r2 <= (2.0 * self.atrophy_radius).powi(2)
    }

    pub fn in_marker(&self, p: [usize; 3]) -> bool {
        p.iter().all(|&v| v < self.confounder.size)
    }

    /// Marker intensity stamped for class `c`.
    pub fn marker_value(&self, class: usize) -> f64 {
        self.confounder.intensity * class as f64 / 3.0
    }
}

/// Smooth multi-blob template in [0, 1]: a bright structure at the atrophy
/// centre plus `blob_count` random blobs.
pub fn make_template(spec: &PhantomSpec) -> Result<Volume3D> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.center();
    let d = spec.dims.map(|v| v as f64);
    let mut blobs = vec![(c, spec.atrophy_radius * 1.2, 0.9)];
    for _ in 0..spec.blob_count {
        let p = [0, 1, 2].map(|a| rng.gen_range(0.3 * d[a]..0.7 * d[a]));
        let r = spec.blob_radius * rng.gen_range(0.7..1.3);
        blobs.push((p, r, rng.gen_range(0.3..0.7)));
    }
    Ok(Volume3D::from_fn(spec.dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let v: f64 = blobs
            .iter()
            .map(|(b, r, h)| {
                let d2: f64 = (0..3).map(|a| (p[a] - b[a]).powi(2)).sum();
                h * (-d2 / (2.0 * r * r)).exp()
            })
            .sum();
        let v = v.clamp(0.0, 1.0);
        if v < 0.01 {
            0.0
        } else {
            v
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bump {
    center: [f64; 3],
    amp: [f64; 3],
}

/// Analytic displacement from template to subject space: atrophy
/// `-a (x - c) exp(-r^2 / 2 s^2)` plus Gaussian bumps.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDeformation {
    center: [f64; 3],
    amplitude: f64,
    radius: f64,
    bumps: Vec<Bump>,
    width: f64,
}

impl SubjectDeformation {
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let s2 = self.radius * self.radius;
        let dv = [0, 1, 2].map(|a| p[a] - self.center[a]);
        let r2: f64 = dv.iter().map(|v| v * v).sum();
        let g = (-r2 / (2.0 * s2)).exp();
        let mut v = dv.map(|d| -self.amplitude * d * g);
        let w2 = self.width * self.width;
        for b in &self.bumps {
            let r2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
            let e = (-r2 / (2.0 * w2)).exp();
            for a in 0..3 {
                v[a] += b.amp[a] * e;
            }
        }
        v
    }

    /// `d v_i / d x_j`.
    pub fn jacobian(&self, p: [f64; 3]) -> [[f64; 3]; 3] {
        let s2 = self.radius * self.radius;
        let dv = [0, 1, 2].map(|a| p[a] - self.center[a]);
        let r2: f64 = dv.iter().map(|v| v * v).sum();
        let g = (-r2 / (2.0 * s2)).exp();
        let mut j = [[0.0; 3]; 3];
        for (i, row) in j.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                let delta = if i == k { 1.0 } else { 0.0 };
                *v = -self.amplitude * g * (delta - dv[i] * dv[k] / s2);
            }
        }
        let w2 = self.width * self.width;
        for b in &self.bumps {
            let d = [0, 1, 2].map(|a| p[a] - b.center[a]);
            let r2: f64 = d.iter().map(|v| v * v).sum();
            let e = (-r2 / (2.0 * w2)).exp();
            for (i, row) in j.iter_mut().enumerate() {
                for (k, v) in row.iter_mut().enumerate() {
                    *v -= b.amp[i] * e * d[k] / w2;
                }
            }
        }
        j
    }

    /// `det(I + J)` at `p`.
    pub fn det(&self, p: [f64; 3]) -> f64 {
        let mut m = self.jacobian(p);
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        det3(&m)
    }

    /// Solves `x + v(x) = y` by fixed-point iteration.
    pub fn inverse(&self, y: [f64; 3]) -> [f64; 3] {
        let mut x = y;
        for _ in 0..40 {
            let v = self.displacement(x);
            x = [y[0] - v[0], y[1] - v[1], y[2] - v[2]];
        }
        x
    }
}

/// Closed form determinant of the pure atrophy field at distance `r` from the centre.
pub fn atrophy_det(amplitude: f64, radius: f64, r: f64) -> f64 {
    let ag = amplitude * (-r * r / (2.0 * radius * radius)).exp();
    (1.0 - ag).powi(2) * (1.0 - ag + ag * r * r / (radius * radius))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub label: usize,
    pub seed: u64,
    /// "MRI-like" and "CT-like" renditions.
    pub modalities: [Volume3D; 2],
    pub fields: [DisplacementField; 2],
    pub jsms: [JacobianSaliencyMap; 2],
    /// Voxels inside the atrophy region.
    pub truth_mask: Vec<bool>,
    /// Class whose marker is stamped, if any.
    pub marker_class: Option<usize>,
}

impl Subject {
    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims()
    }

    /// Model inputs as `[1, D, H, W]` tensors per modality.
    pub fn to_sample(&self) -> FusionSample {
        let t = |v: &Volume3D| {
            let [w, h, d] = v.dims();
            Tensor::new(vec![1, d, h, w], v.data().to_vec()).expect("shape")
        };
        FusionSample {
            x: [t(&self.modalities[0]), t(&self.modalities[1])],
            jsm: [t(self.jsms[0].volume()), t(self.jsms[1].volume())],
            label: self.label,
        }
    }
}

/// Subject-specific deformation for `class`, seeded by `subject_seed`.
pub fn make_deformation(class: usize, spec: &PhantomSpec, subject_seed: u64) -> SubjectDeformation {
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let d = spec.dims.map(|v| v as f64);
    let bumps = (0..spec.individual_bumps)
        .map(|_| Bump {
            center: [0, 1, 2].map(|a| rng.gen_range(0.35 * d[a]..0.65 * d[a])),
            amp: [0, 1, 2].map(|_| rng.gen_range(-1.0..=1.0) * spec.individual_amplitude),
        })
        .collect();
    SubjectDeformation {
        center: spec.center(),
        amplitude: spec.amplitudes[class],
        radius: spec.atrophy_radius,
        bumps,
        width: spec.individual_width,
    }
}

fn ct_remap(t: f64) -> f64 {
    (1.0 - (-4.0 * t).exp()) / (1.0 - (-4.0f64).exp())
}

pub fn make_subject(template: &Volume3D, class: usize, spec: &PhantomSpec, subject_seed: u64) -> Result<Subject> {
    if class >= NUM_CLASSES {
        return Err(Error::input(format!("class {class} outside 0..{NUM_CLASSES}")));
    }
    if template.dims() != spec.dims {
        return Err(Error::input("template dims differ from the phantom spec"));
    }
    let def = make_deformation(class, spec, subject_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed ^ 0x5EED_0F_A015E);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300)).expect("sigma");
    let mut mri = Volume3D::from_fn(spec.dims, |x, y, z| {
        let p = def.inverse([x as f64, y as f64, z as f64]);
        trilinear_sample(template, p, BoundaryPolicy::Clamp).expect("finite point")
    });
    let ct_raw = mri.map(ct_remap);
    let add_noise = |v: &Volume3D, rng: &mut ChaCha8Rng| {
        let data: Vec<f64> = v
            .data()
            .iter()
            .map(|&t| if spec.noise_sigma > 0.0 { (t + noise.sample(rng)).clamp(0.0, 1.0) } else { t })
            .collect();
        Volume3D::new(v.dims(), v.spacing(), data).expect("dims")
    };
    mri = add_noise(&mri, &mut rng);
    let ct = contrast_stretch(&add_noise(&ct_raw, &mut rng), 1.0, 99.0)?;
    let field = DisplacementField::from_fn(spec.dims, |x, y, z| def.displacement([x, y, z]));
    let jsm = JacobianSaliencyMap::new(Volume3D::from_fn(spec.dims, |x, y, z| {
        def.det([x as f64, y as f64, z as f64])
    }));
    let truth_mask = (0..mri.len()).map(|i| spec.in_atrophy_region(mri.coords(i))).collect();
    Ok(Subject {
        id: format!("sub-{subject_seed:016x}"),
        label: class,
        seed: subject_seed,
        modalities: [mri, ct],
        fields: [field.clone(), field],
        jsms: [jsm.clone(), jsm],
        truth_mask,
        marker_class: None,
    })
}

/// Stamps the corner marker into both modalities. A correlated marker encodes
/// the subject's class; otherwise a uniformly random class.
pub fn inject_confounder(subject: &Subject, correlated: bool, spec: &PhantomSpec) -> Result<Subject> {
    let dims = subject.dims();
    for i in 0..subject.truth_mask.len() {
        let p = subject.modalities[0].coords(i);
        if spec.in_marker(p) && (subject.truth_mask[i] || spec.in_atrophy_region(p)) {
            return Err(Error::config(format!("marker voxel {p:?} overlaps the atrophy region")));
        }
    }
    let class = if correlated {
        subject.label
    } else {
        ChaCha8Rng::seed_from_u64(subject.seed ^ 0xC0_FF_EE).gen_range(0..NUM_CLASSES)
    };
    let value = spec.marker_value(class);
    let mut out = subject.clone();
    let m = spec.confounder.size.min(dims[0]).min(dims[1]).min(dims[2]);
    for vol in out.modalities.iter_mut() {
        for z in 0..m {
            for y in 0..m {
                for x in 0..m {
                    vol.set(x, y, z, value);
                }
            }
        }
    }
    out.marker_class = Some(class);
    Ok(out)
}

/// Recipe for one ADASYN sample: `base + u * (neighbor - base)` over input indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticRecord {
    pub base: usize,
    pub neighbor: usize,
    pub u: f64,
}

#[derive(Debug, Clone)]
pub struct Oversampled {
    /// Originals first, in input order, followed by synthetics.
    pub subjects: Vec<Subject>,
    /// `None` for originals.
    pub provenance: Vec<Option<SyntheticRecord>>,
}

fn sq_dist(a: &Volume3D, b: &Volume3D) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn k_nearest(subjects: &[Subject], i: usize, pool: &[usize], k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = pool
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (sq_dist(&subjects[i].modalities[0], &subjects[j].modalities[0]), j))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.into_iter().take(k).map(|c| c.1).collect()
}

/// Integer allocation of `total` proportional to `weights` (largest remainder).
fn allocate(weights: &[f64], total: usize) -> Vec<usize> {
    let s: f64 = weights.iter().sum();
    let shares: Vec<f64> = if s > 0.0 {
        weights.iter().map(|w| w / s * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut g: Vec<usize> = shares.iter().map(|v| v.floor() as usize).collect();
    let mut rest: Vec<(f64, usize)> = shares.iter().enumerate().map(|(i, v)| (v - v.floor(), i)).collect();
    rest.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - g.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        g[i] += 1;
    }
    g
}

fn lerp_volume(a: &Volume3D, b: &Volume3D, u: f64) -> Volume3D {
    let data = a.data().iter().zip(b.data()).map(|(p, q)| p + u * (q - p)).collect();
    Volume3D::new(a.dims(), a.spacing(), data).expect("dims")
}

fn lerp_field(a: &DisplacementField, b: &DisplacementField, u: f64) -> DisplacementField {
    a.axpy(u, &b.axpy(-1.0, a))
}

fn synthesize(a: &Subject, b: &Subject, u: f64, id: String) -> Subject {
    Subject {
        id,
        label: a.label,
        seed: a.seed,
        modalities: [0, 1].map(|m| lerp_volume(&a.modalities[m], &b.modalities[m], u)),
        fields: [0, 1].map(|m| lerp_field(&a.fields[m], &b.fields[m], u)),
        jsms: [0, 1].map(|m| JacobianSaliencyMap::new(lerp_volume(a.jsms[m].volume(), b.jsms[m].volume(), u))),
        truth_mask: a.truth_mask.clone(),
        marker_class: a.marker_class,
    }
}

/// ADASYN over classes: each minority class receives `beta * (majority - count)`
/// synthetics, distributed by the fraction of other-class samples among each
/// base sample's `k` nearest neighbours (flattened modality-1 distance).
pub fn adasyn_oversample(train: &[Subject], k: usize, beta: f64, seed: u64) -> Result<Oversampled> {
    if k == 0 {
        return Err(Error::config("ADASYN needs k >= 1"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("ADASYN beta must be in [0, 1], got {beta}")));
    }
    let mut subjects = train.to_vec();
    let mut provenance = vec![None; train.len()];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in train.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let majority = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let everyone: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() || members.len() == majority {
            continue;
        }
        let g_total = (beta * (majority - members.len()) as f64).round() as usize;
        if g_total == 0 {
            continue;
        }
        if members.len() == 1 {
            log::warn!("class {} has a single sample; oversampling by noisy duplication", CLASS_NAMES[c]);
            let base = &train[members[0]];
            let noise = Normal::new(0.0, 0.01).expect("sigma");
            for n in 0..g_total {
                let mut s = base.clone();
                s.id = format!("{}+dup{n}", base.id);
                for v in s.modalities.iter_mut() {
                    let data = v.data().iter().map(|t| (t + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect();
                    *v = Volume3D::new(v.dims(), v.spacing(), data)?;
                }
                subjects.push(s);
                provenance.push(None);
            }
            continue;
        }
        let ratios: Vec<f64> = members
            .iter()
            .map(|&i| {
                let nn = k_nearest(train, i, &everyone, k);
                nn.iter().filter(|&&j| train[j].label != c).count() as f64 / k as f64
            })
            .collect();
        let g = allocate(&ratios, g_total);
        for (&i, &gi) in members.iter().zip(&g) {
            let same = k_nearest(train, i, members, k);
            for n in 0..gi {
                let z = same[rng.gen_range(0..same.len())];
                let u: f64 = rng.gen_range(0.0..=1.0);
                subjects.push(synthesize(&train[i], &train[z], u, format!("{}+syn{n}", train[i].id)));
                provenance.push(Some(SyntheticRecord { base: i, neighbor: z, u }));
            }
        }
    }
    Ok(Oversampled { subjects, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Stratified subject-level split; each class contributes
/// `round(count * test_fraction)` test subjects, at least one of each kind.
pub fn split_by_subject(subjects: &[Subject], test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in subjects.iter().enumerate() {
        if s.label >= NUM_CLASSES {
            return Err(Error::input(format!("label {} out of range", s.label)));
        }
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Train; subjects.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::config(format!("class {} has fewer than 2 subjects", CLASS_NAMES[c])));
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        for &i in &members[..n_test] {
            tags[i] = Split::Test;
        }
    }
    Ok(tags)
}

/// Per-subject seed from a dataset seed, stable under parallel generation.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn part(&self, split: Split) -> Vec<&Subject> {
        self.subjects.iter().zip(&self.splits).filter(|(_, &s)| s == split).map(|(s, _)| s).collect()
    }
}

/// Generates `per_class` subjects of every class, splits them, and stamps
/// the marker correlated in train and decorrelated in test. With `confounded`
/// false no marker is stamped.
pub fn generate_dataset(spec: &PhantomSpec, per_class: usize, test_fraction: f64, confounded: bool) -> Result<Dataset> {
    let template = make_template(spec)?;
    let subjects = (0..per_class * NUM_CLASSES)
        .into_par_iter()
        .map(|i| make_subject(&template, i % NUM_CLASSES, spec, subject_seed(spec.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let splits = split_by_subject(&subjects, test_fraction, spec.seed)?;
    let subjects = if confounded {
        subjects
            .iter()
            .zip(&splits)
            .map(|(s, &t)| inject_confounder(s, t == Split::Train, spec))
            .collect::<Result<Vec<_>>>()?
    } else {
        subjects
    };
    Ok(Dataset { subjects, splits })
}
