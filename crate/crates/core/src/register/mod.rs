//! Deformable registration: minimize `−MI(φ(M), F) + α · bending(φ)` over a
//! dense displacement field.
//!
//! The optimizer is coarse-to-fine gradient descent with a backtracking step:
//! the analytic cost gradient is Gaussian-smoothed, scaled so the largest
//! voxel update equals the current step, and accepted only if the cost
//! decreases. Between pyramid levels the field is upsampled and doubled.

mod bending;
mod field;
mod mi;

use std::fmt::Write as _;

pub use bending::bending_energy;
pub use field::{read_field, write_field, write_field_as, DisplacementField};
pub use mi::{mattes_mi, JointHistogram};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{downsample2x, sample_with_gradient, BoundaryPolicy, Volume3D};
use mi::Binning;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Weight of the bending-energy term.
    pub alpha: f64,
    /// Histogram bins for mutual information.
    pub bins: usize,
    /// Pyramid levels; level 1 is full resolution only.
    pub levels: usize,
    /// Initial (and maximum) per-iteration displacement, in voxels.
    pub step: f64,
    pub max_iters: usize,
    /// Gaussian width applied to each gradient update, in voxels.
    pub smooth_sigma: f64,
    /// Relative cost decrease below which a level is considered converged.
    pub tol: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            bins: 32,
            levels: 3,
            step: 0.5,
            max_iters: 200,
            smooth_sigma: 1.0,
            tol: 1e-5,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.bins < 4 {
            return Err(Error::config(format!("bins must be >= 4, got {}", self.bins)));
        }
        if self.levels < 1 {
            return Err(Error::config("levels must be >= 1"));
        }
        if !(self.step > 0.0) {
            return Err(Error::config(format!("step must be > 0, got {}", self.step)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config(format!("tol must be > 0, got {}", self.tol)));
        }
        if !(self.smooth_sigma >= 0.0) {
            return Err(Error::config("smooth_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// Resample `moving` through `x ↦ x + v(x)` onto the field's grid.
pub fn warp(moving: &Volume3D, field: &DisplacementField, policy: BoundaryPolicy) -> Result<Volume3D> {
    if moving.dims() != field.dims() {
        return Err(Error::input(format!(
            "field dims {:?} do not match volume dims {:?}",
            field.dims(),
            moving.dims()
        )));
    }
    let data: Vec<f64> = field
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let [x, y, z] = moving.coords(i);
            sample_with_gradient(moving, [x as f64 + v[0], y as f64 + v[1], z as f64 + v[2]], policy).0
        })
        .collect();
    Volume3D::new(moving.dims(), moving.spacing(), data)
}

fn check_pair(field: &DisplacementField, moving: &Volume3D, fixed: &Volume3D) -> Result<()> {
    if moving.dims() != fixed.dims() || field.dims() != fixed.dims() {
        return Err(Error::input(format!(
            "inconsistent dims: field {:?}, moving {:?}, fixed {:?}",
            field.dims(),
            moving.dims(),
            fixed.dims()
        )));
    }
    Ok(())
}

/// `−MI(warp(moving, field), fixed) + α · bending_energy(field)`.
pub fn registration_cost(
    field: &DisplacementField,
    moving: &Volume3D,
    fixed: &Volume3D,
    config: &RegistrationConfig,
) -> Result<f64> {
    check_pair(field, moving, fixed)?;
    let warped = warp(moving, field, BoundaryPolicy::Clamp)?;
    let mi = mattes_mi(&warped, fixed, config.bins)?;
    let reg = if config.alpha > 0.0 { bending_energy(field)? } else { 0.0 };
    Ok(-mi + config.alpha * reg)
}

/// Cost and its analytic gradient with respect to every field component.
pub fn registration_cost_gradient(
    field: &DisplacementField,
    moving: &Volume3D,
    fixed: &Volume3D,
    config: &RegistrationConfig,
) -> Result<(f64, DisplacementField)> {
    check_pair(field, moving, fixed)?;
    let fixed_bins = Binning::new(fixed.data(), config.bins);
    Ok(Objective::new(moving, &fixed_bins, config).cost_and_gradient(field))
}

/// Cost evaluator for one pyramid level; the fixed-image binning is reused.
struct Objective<'a> {
    moving: &'a Volume3D,
    fixed_bins: &'a Binning,
    bins: usize,
    alpha: f64,
}

impl<'a> Objective<'a> {
    fn new(moving: &'a Volume3D, fixed_bins: &'a Binning, config: &RegistrationConfig) -> Self {
        Self {
            moving,
            fixed_bins,
            bins: config.bins,
            alpha: config.alpha,
        }
    }

    fn sample_all(&self, field: &DisplacementField) -> (Vec<f64>, Vec<[f64; 3]>) {
        let n = field.len();
        let mut values = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        for (i, v) in field.as_slice().iter().enumerate() {
            let [x, y, z] = self.moving.coords(i);
            let (s, g) = sample_with_gradient(
                self.moving,
                [x as f64 + v[0], y as f64 + v[1], z as f64 + v[2]],
                BoundaryPolicy::Clamp,
            );
            values.push(s);
            grads.push(g);
        }
        (values, grads)
    }

    fn cost(&self, field: &DisplacementField) -> f64 {
        let (warped, _) = self.sample_all(field);
        let mi = mi::mi_value(&warped, self.fixed_bins, self.bins);
        let reg = if self.alpha > 0.0 {
            bending_energy(field).unwrap_or(0.0)
        } else {
            0.0
        };
        -mi + self.alpha * reg
    }

    fn cost_and_gradient(&self, field: &DisplacementField) -> (f64, DisplacementField) {
        let (warped, spatial) = self.sample_all(field);
        let (mi, d_mi) = mi::mi_and_gradient(&warped, self.fixed_bins, self.bins);
        let mut grad: Vec<[f64; 3]> = d_mi
            .iter()
            .zip(&spatial)
            .map(|(&g, s)| [-g * s[0], -g * s[1], -g * s[2]])
            .collect();
        let mut cost = -mi;
        if self.alpha > 0.0 && field.dims().iter().all(|&d| d >= 3) {
            let (e, ge) = bending::bending_energy_and_gradient(field).expect("dims checked");
            cost += self.alpha * e;
            for (g, b) in grad.iter_mut().zip(&ge) {
                for c in 0..3 {
                    g[c] += self.alpha * b[c];
                }
            }
        }
        (cost, DisplacementField::new(field.dims(), grad).unwrap_or_else(|_| DisplacementField::zeros(field.dims())))
    }
}

/// One accepted optimizer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRecord {
    pub level: usize,
    pub iter: usize,
    pub cost: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub field: DisplacementField,
    /// Accepted iterations in order, coarse level first. Level 0 is full resolution.
    pub history: Vec<CostRecord>,
    /// Cost of the zero/upsampled field at the start of each level, coarse first.
    pub initial_costs: Vec<(usize, f64)>,
    /// False when some level hit `max_iters` before its relative decrease fell below `tol`.
    pub converged: bool,
}

impl RegistrationResult {
    pub fn final_cost(&self) -> Option<f64> {
        self.history
            .iter()
            .rev()
            .find(|r| r.level == 0)
            .map(|r| r.cost)
            .or_else(|| self.initial_costs.iter().find(|(l, _)| *l == 0).map(|(_, c)| *c))
    }

    /// Plain-text cost log: one `level iter cost step` line per accepted iteration.
    pub fn cost_log(&self) -> String {
        let mut s = String::from("# level iter cost step\n");
        for r in &self.history {
            let _ = writeln!(s, "{} {} {:.12e} {:.6e}", r.level, r.iter, r.cost, r.step);
        }
        s
    }
}

const MIN_STEP_FRACTION: f64 = 1.0 / 1024.0;
const PATIENCE: usize = 5;

/// Register `moving` onto `fixed`. The returned field `v` satisfies
/// `warp(moving, v) ≈ fixed` on the fixed grid.
pub fn register(moving: &Volume3D, fixed: &Volume3D, config: &RegistrationConfig) -> Result<RegistrationResult> {
    config.validate()?;
    if moving.dims() != fixed.dims() {
        return Err(Error::input(format!(
            "moving {:?} and fixed {:?} dims differ; resample first",
            moving.dims(),
            fixed.dims()
        )));
    }
    let mut pyramid = vec![(moving.clone(), fixed.clone())];
    while pyramid.len() < config.levels {
        let (m, f) = pyramid.last().unwrap();
        if m.dims().iter().any(|&d| d < 16) {
            break;
        }
        let next = (downsample2x(m)?, downsample2x(f)?);
        pyramid.push(next);
    }

    let mut history = Vec::new();
    let mut initial_costs = Vec::new();
    let mut converged = true;
    let mut field: Option<DisplacementField> = None;
    for level in (0..pyramid.len()).rev() {
        let (m, f) = &pyramid[level];
        let mut current = match field.take() {
            None => DisplacementField::zeros(f.dims()),
            Some(coarse) => coarse.upsample_to(f.dims()),
        };
        let fixed_bins = Binning::new(f.data(), config.bins);
        let objective = Objective::new(m, &fixed_bins, config);
        let mut cost = objective.cost(&current);
        check_cost(cost, level, 0)?;
        initial_costs.push((level, cost));
        let mut step = config.step;
        let mut quiet = 0usize;
        let mut level_converged = false;
        for iter in 0..config.max_iters {
            let (c, grad) = objective.cost_and_gradient(&current);
            check_cost(c, level, iter)?;
            let dir = grad.gaussian_smooth(config.smooth_sigma);
            let norm = dir.max_norm();
            if !(norm > 0.0) {
                level_converged = true;
                break;
            }
            let mut accepted = None;
            while step >= config.step * MIN_STEP_FRACTION {
                let trial = current.axpy(-step / norm, &dir);
                let tc = objective.cost(&trial);
                check_cost(tc, level, iter)?;
                if tc < cost {
                    accepted = Some((trial, tc));
                    break;
                }
                step *= 0.5;
            }
            let Some((trial, tc)) = accepted else {
                level_converged = true;
                break;
            };
            let decrease = cost - tc;
            current = trial;
            cost = tc;
            history.push(CostRecord { level, iter, cost, step });
            step = (step * 1.5).min(config.step);
            if decrease < config.tol * cost.abs() {
                quiet += 1;
                if quiet >= PATIENCE {
                    level_converged = true;
                    break;
                }
            } else {
                quiet = 0;
            }
        }
        if !level_converged {
            converged = false;
        }
        field = Some(current);
    }
    let field = field.expect("at least one level");
    if !field.is_finite() {
        return Err(Error::numerical("registration produced a non-finite field"));
    }
    Ok(RegistrationResult {
        field,
        history,
        initial_costs,
        converged,
    })
}

fn check_cost(cost: f64, level: usize, iter: usize) -> Result<()> {
    if cost.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!("registration cost is {cost} at level {level}, iteration {iter}")))
    }
}
