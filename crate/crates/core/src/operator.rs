//! Collocation discretization of the correspondence transfer operator
//!
//! `(L g)(x) = sum_j sum_{x_1 in f_j^{-1}(x)} exp(phi(x_1, x)) g(x_1)`
//!
//! on a uniform grid, power iteration for its positive eigenfunction, and checks on the
//! resulting invariant measure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::Correspondence;
use crate::error::{Error, Result};
use crate::kernel::{pushforward, Kernel};
use crate::maps::{grid_center, Point};
use crate::orbits::{pairwise_sum, Potential};

pub const MIN_RESOLUTION: usize = 64;
/// Largest number of grid cells accepted for a density (2^9 per side on the 2-torus).
pub const MAX_CELLS: usize = 1 << 18;

/// How a grid density is evaluated between cell centers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    /// Periodic multilinear interpolation between cell centers.
    #[default]
    Linear,
    /// Constant on each cell.
    Step,
}

/// Density on a uniform grid over `[0,1)^m`, one value per cell, stored row-major with the
/// last coordinate fastest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridDensity {
    dim: usize,
    resolution: usize,
    values: Vec<f64>,
    reconstruction: Reconstruction,
}

impl GridDensity {
    pub fn uniform(dim: usize, resolution: usize) -> Self {
        GridDensity {
            dim,
            resolution,
            values: vec![1.0; resolution.pow(dim as u32)],
            reconstruction: Reconstruction::Linear,
        }
    }

    pub fn from_values(dim: usize, resolution: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || resolution == 0 || values.len() != resolution.pow(dim as u32) {
            return Err(Error::config(format!(
                "density of dimension {dim} and resolution {resolution} needs {} values, got {}",
                resolution.pow(dim as u32),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("density values must be finite and non-negative"));
        }
        Ok(GridDensity {
            dim,
            resolution,
            values,
            reconstruction: Reconstruction::Linear,
        })
    }

    pub fn with_reconstruction(mut self, reconstruction: Reconstruction) -> Self {
        self.reconstruction = reconstruction;
        self
    }

    /// Samples `f` at cell centers.
    pub fn from_fn(dim: usize, resolution: usize, f: impl Fn(&Point) -> f64) -> Result<Self> {
        let n = resolution.pow(dim as u32);
        let values = (0..n).map(|i| f(&grid_center(i, resolution, dim))).collect();
        Self::from_values(dim, resolution, values)
    }

    /// Strictly positive random density, normalized to mean 1.
    pub fn random_positive(dim: usize, resolution: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..resolution.pow(dim as u32))
            .map(|_| rng.random_range(0.1..2.0))
            .collect();
        GridDensity {
            dim,
            resolution,
            values,
            reconstruction: Reconstruction::Linear,
        }
        .normalized()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn reconstruction(&self) -> Reconstruction {
        self.reconstruction
    }

    pub fn evaluate(&self, x: &Point) -> f64 {
        match self.reconstruction {
            Reconstruction::Linear => self.interpolate(x),
            Reconstruction::Step => self.cell_value(x),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cell_center(&self, idx: usize) -> Point {
        grid_center(idx, self.resolution, self.dim)
    }

    /// Integral against Lebesgue measure.
    pub fn mean(&self) -> f64 {
        pairwise_sum(self.values.iter().copied()) / self.values.len() as f64
    }

    pub fn normalized(&self) -> Self {
        let m = self.mean();
        self.map_values(|v| v / m)
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        GridDensity {
            dim: self.dim,
            resolution: self.resolution,
            values: self.values.iter().map(|&v| f(v)).collect(),
            reconstruction: self.reconstruction,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }

    pub fn max_over_min(&self) -> f64 {
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn sup_distance(&self, other: &GridDensity) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `integral |self - other| dLeb`.
    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        pairwise_sum(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()))
            / self.values.len() as f64
    }

    /// Value of the cell containing `x`.
    pub fn cell_value(&self, x: &Point) -> f64 {
        let n = self.resolution;
        let idx = x
            .coords()
            .iter()
            .fold(0, |acc, &c| acc * n + ((c * n as f64) as usize).min(n - 1));
        self.values[idx]
    }

    /// Multilinear interpolation between cell centers, periodic in every coordinate.
    pub fn interpolate(&self, x: &Point) -> f64 {
        let n = self.resolution;
        if self.dim == 1 {
            let u = x.x() * n as f64 - 0.5;
            let base = u.floor();
            let t = u - base;
            let i0 = (base as isize).rem_euclid(n as isize) as usize;
            let i1 = if i0 + 1 == n { 0 } else { i0 + 1 };
            return (1.0 - t) * self.values[i0] + t * self.values[i1];
        }
        let mut lower = [0usize; 8];
        let mut frac = [0f64; 8];
        assert!(self.dim <= 8, "interpolation supports at most 8 dimensions");
        for (d, &c) in x.coords().iter().enumerate() {
            let u = c * n as f64 - 0.5;
            let base = u.floor();
            frac[d] = u - base;
            lower[d] = (base as isize).rem_euclid(n as isize) as usize;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut idx = 0;
            for d in 0..self.dim {
                let up = corner >> (self.dim - 1 - d) & 1 == 1;
                let i = if up { (lower[d] + 1) % n } else { lower[d] };
                w *= if up { frac[d] } else { 1.0 - frac[d] };
                idx = idx * n + i;
            }
            acc += w * self.values[idx];
        }
        acc
    }

    /// `integral_0^x density` on the circle.
    fn circle_cdf(&self, prefix: &[f64], x: f64) -> f64 {
        let n = self.resolution;
        let u = x.clamp(0.0, 1.0) * n as f64;
        let i = (u.floor() as usize).min(n);
        let partial = if i < n { (u - i as f64) * self.values[i] } else { 0.0 };
        (prefix[i] + partial) / n as f64
    }

    fn circle_prefix(&self) -> Vec<f64> {
        let mut prefix = Vec::with_capacity(self.values.len() + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for &v in &self.values {
            acc += v;
            prefix.push(acc);
        }
        prefix
    }

    /// Measure of a union of disjoint sub-intervals of `[0,1]` on the circle.
    pub fn measure_of_intervals(&self, intervals: &[(f64, f64)]) -> f64 {
        assert_eq!(self.dim, 1, "interval measure is defined on the circle");
        let prefix = self.circle_prefix();
        intervals
            .iter()
            .map(|&(a, b)| self.circle_cdf(&prefix, b) - self.circle_cdf(&prefix, a))
            .sum()
    }
}

/// `out(x) = sum_j sum_{x_1 in f_j^{-1}(x)} weight(j, x_1) g(x_1)` at every cell center.
pub(crate) fn transfer_with<W>(t: &Correspondence, g: &GridDensity, weight: W) -> Result<GridDensity>
where
    W: Fn(usize, &Point) -> f64 + Sync,
{
    if g.dim() != t.dim() {
        return Err(Error::config(format!(
            "density dimension {} does not match correspondence dimension {}",
            g.dim(),
            t.dim()
        )));
    }
    if g.resolution() < MIN_RESOLUTION {
        return Err(Error::config(format!(
            "grid resolution {} is below {MIN_RESOLUTION}",
            g.resolution()
        )));
    }
    let values = (0..g.len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(t.max_degree()),
            |buf, idx| {
                let x = g.cell_center(idx);
                let mut acc = 0.0;
                for (j, f) in t.generators().iter().enumerate() {
                    buf.clear();
                    f.inverse_branches_into(&x, buf)?;
                    for x1 in buf.iter() {
                        acc += weight(j, x1) * g.evaluate(x1);
                    }
                }
                Ok(acc)
            },
        )
        .collect::<Result<Vec<f64>>>()?;
    Ok(GridDensity {
        dim: g.dim(),
        resolution: g.resolution(),
        values,
        reconstruction: g.reconstruction(),
    })
}

/// One application of the transfer operator (unnormalized).
pub fn apply_transfer(t: &Correspondence, phi: &Potential, g: &GridDensity) -> Result<GridDensity> {
    phi.validate(t)?;
    transfer_with(t, g, |j, x1| phi.log_weight(t, j, x1).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerIterationOptions {
    pub resolution: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        PowerIterationOptions {
            resolution: 1 << 12,
            tol: 1e-10,
            max_iter: 1000,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantDensity {
    /// Eigenfunction normalized to mean 1.
    pub density: GridDensity,
    pub eigenvalue: f64,
    /// `sup |L Phi - lambda Phi| / sup Phi`.
    pub residual: f64,
    pub iterations: usize,
}

/// Power iteration `g <- L g / mean(L g)` until the sup-norm change drops below `tol`.
pub fn invariant_density(
    t: &Correspondence,
    phi: &Potential,
    opts: &PowerIterationOptions,
    init: Option<&GridDensity>,
) -> Result<InvariantDensity> {
    phi.validate(t)?;
    if opts.resolution < MIN_RESOLUTION {
        return Err(Error::config(format!(
            "grid resolution {} is below {MIN_RESOLUTION}",
            opts.resolution
        )));
    }
    let cells = opts.resolution.checked_pow(t.dim() as u32).unwrap_or(usize::MAX);
    if cells > MAX_CELLS {
        return Err(Error::config(format!(
            "resolution {} in dimension {} gives {cells} cells, above the cap {MAX_CELLS}",
            opts.resolution,
            t.dim()
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::config("power iteration needs tol > 0 and max_iter >= 1"));
    }
    let mut g = match init {
        Some(g0) => {
            if g0.dim() != t.dim() || g0.resolution() != opts.resolution {
                return Err(Error::config("initial density does not match the requested grid"));
            }
            if g0.values().iter().any(|&v| v <= 0.0) {
                return Err(Error::config("initial density must be strictly positive"));
            }
            g0.normalized()
        }
        None => GridDensity::uniform(t.dim(), opts.resolution),
    }
    .with_reconstruction(Reconstruction::Linear);
    let step = |g: &GridDensity| transfer_with(t, g, |j, x1| phi.log_weight(t, j, x1).exp());

    let mut iterations = 0;
    let mut change = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        let lg = step(&g)?;
        let mass = lg.mean();
        if !(mass > 0.0) || lg.values().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Internal(
                "transfer operator produced a non-positive density".into(),
            ));
        }
        let next = lg.map_values(|v| v / mass);
        change = next.sup_distance(&g);
        g = next;
        if change < opts.tol {
            break;
        }
    }
    if change >= opts.tol {
        return Err(Error::NonConvergence {
            iterations,
            last_change: change,
        });
    }
    let lg = step(&g)?;
    let eigenvalue = pairwise_sum(lg.values().iter().zip(g.values()).map(|(a, b)| a / b)) / g.len() as f64;
    let sup = g.values().iter().copied().fold(0.0, f64::max);
    let residual = lg
        .values()
        .iter()
        .zip(g.values())
        .map(|(a, b)| (a - eigenvalue * b).abs())
        .fold(0.0, f64::max)
        / sup;
    Ok(InvariantDensity {
        density: g,
        eigenvalue,
        residual,
        iterations,
    })
}

/// L1 distance between the density of `(Phi m) Q` and `Phi`.
pub fn check_kernel_invariance(t: &Correspondence, density: &GridDensity, kernel: &Kernel) -> Result<f64> {
    let pushed = pushforward(density, kernel, t)?;
    Ok(pushed.l1_distance(density))
}

/// Preimage of `[a, b)` under a circle generator, as sub-intervals of `[0, 1]`.
pub(crate) fn circle_preimage(g: &crate::maps::GeneratorMap, a: f64, b: f64) -> Result<Vec<(f64, f64)>> {
    let start = g.lift(0.0);
    let p = g.degree() as f64;
    let q_lo = (start - b).floor() as i64;
    let q_hi = (start + p - a).ceil() as i64;
    let mut out = vec![];
    for q in q_lo..=q_hi {
        let lo = g.lift_inverse(a + q as f64)?.max(0.0);
        let hi = g.lift_inverse(b + q as f64)?.min(1.0);
        if hi > lo {
            out.push((lo, hi));
        }
    }
    Ok(out)
}

fn merge_intervals(mut v: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Largest `mu(A) - mu(T^{-1} A)` over the dyadic cells `A` of size `1/intervals`.
/// Non-positive (up to quadrature error) for a `T`-invariant `mu`.
pub fn miller_akin_condition1(t: &Correspondence, mu: &GridDensity, intervals: usize) -> Result<f64> {
    if t.dim() != 1 || mu.dim() != 1 {
        return Err(Error::config("the interval check is implemented on the circle only"));
    }
    if intervals == 0 || !intervals.is_power_of_two() {
        return Err(Error::config(format!("{intervals} is not a dyadic cell count")));
    }
    let total = mu.measure_of_intervals(&[(0.0, 1.0)]);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..intervals {
        let a = i as f64 / intervals as f64;
        let b = (i + 1) as f64 / intervals as f64;
        let mut pre = vec![];
        for g in t.generators() {
            pre.extend(circle_preimage(g, a, b)?);
        }
        let union = merge_intervals(pre);
        let mu_a = mu.measure_of_intervals(&[(a, b)]) / total;
        let mu_pre = mu.measure_of_intervals(&union) / total;
        worst = worst.max(mu_a - mu_pre);
    }
    Ok(worst)
}
