//! Backward orbit trees, the weighted orbit sums `Phi_n(x)`, and the three pressure
//! estimators (growth of `Phi_n`, spanning sets over an epsilon-net, and single-root
//! separated sets).
//!
//! A backward n-orbit at `x` is a chain `(x_1, ..., x_n, x)` with `x_{i+1} = f_{j_i}(x_i)`.
//! Its weight is `exp(sum_i phi(x_i, x_{i+1}))`, accumulated in log space and
//! exponentiated once at the leaf. All sums use a fixed pairwise (tournament)
//! reduction over a fixed task partition, so results do not depend on the number of
//! worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::Correspondence;
use crate::error::{Error, Result};
use crate::maps::{grid_corner, per_dim_resolution, Point, TOL_ROOT_CIRCLE, TOL_ROOT_TORUS};

pub const DEFAULT_BRANCH_BUDGET: u64 = 100_000_000;
pub const DEFAULT_MATERIALIZE_CAP: usize = 1_000_000;
/// Environment variable overriding the branch budget.
pub const BUDGET_ENV: &str = "CORRTHERM_BUDGET";

/// Minimum number of independent subtrees handed to the thread pool.
const MIN_TASKS: usize = 64;

/// Potential `phi(x_1, x_2)` on two-step orbits, evaluated by generator index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    /// `-log Jac(f_j(x_1))` when `x_2 = f_j(x_1)`. Needs a coincidence-free correspondence.
    #[default]
    Jacobian,
    /// `-log Jac(f_j(x_1))` off the coincidence set `E` and `-c_e` on it. `c_e` defaults to
    /// the smallest log-Jacobian among the generators.
    TorusMeasurable {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c_e: Option<f64>,
    },
    Zero,
    /// Tabulated `phi` by generator (rows) and grid cell of `x_1` (columns, row-major over
    /// a grid with `resolution` cells per dimension).
    Custom {
        resolution: usize,
        table: Vec<Vec<f64>>,
    },
}


impl Potential {
    pub fn validate(&self, t: &Correspondence) -> Result<()> {
        match self {
            Potential::Jacobian => {
                if !t.is_coincidence_free()? {
                    return Err(Error::precondition(
                        "the Jacobian potential needs a coincidence-free correspondence; use torus_measurable",
                    ));
                }
            }
            Potential::TorusMeasurable { c_e } => {
                if c_e.is_some_and(|c| !c.is_finite()) {
                    return Err(Error::config("torus_measurable c_e must be finite"));
                }
            }
            Potential::Zero => {}
            Potential::Custom { resolution, table } => {
                let cells = resolution.checked_pow(t.dim() as u32).unwrap_or(0);
                if *resolution == 0 || table.len() != t.k() || table.iter().any(|r| r.len() != cells) {
                    return Err(Error::config(format!(
                        "custom potential needs {} rows of {} finite values",
                        t.k(),
                        cells
                    )));
                }
                if table.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::config("custom potential values must be finite"));
                }
            }
        }
        Ok(())
    }

    /// `phi(x_1, f_j(x_1))`.
    pub fn log_weight(&self, t: &Correspondence, j: usize, x1: &Point) -> f64 {
        match self {
            Potential::Jacobian => -t.generator(j).jacobian(x1).ln(),
            Potential::TorusMeasurable { c_e } => {
                if t.in_coincidence_set(x1) {
                    -c_e.unwrap_or_else(|| default_c_e(t, x1))
                } else {
                    -t.generator(j).jacobian(x1).ln()
                }
            }
            Potential::Zero => 0.0,
            Potential::Custom { resolution, table } => table[j][cell_index(x1, *resolution)],
        }
    }

    /// Per-generator log weights when they do not depend on the point.
    pub fn constant_log_weights(&self, t: &Correspondence) -> Option<Vec<f64>> {
        match self {
            Potential::Zero => Some(vec![0.0; t.k()]),
            Potential::Jacobian if t.generators().iter().all(|g| g.has_constant_jacobian()) => Some(
                t.generators()
                    .iter()
                    .map(|g| -g.max_jacobian().ln())
                    .collect(),
            ),
            _ => None,
        }
    }
}

fn default_c_e(t: &Correspondence, x1: &Point) -> f64 {
    t.generators()
        .iter()
        .map(|g| g.jacobian(x1).ln())
        .fold(f64::INFINITY, f64::min)
}

fn cell_index(x: &Point, resolution: usize) -> usize {
    x.coords().iter().fold(0, |acc, &c| {
        acc * resolution + ((c * resolution as f64) as usize).min(resolution - 1)
    })
}

/// Enumeration limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSettings {
    /// Maximum number of leaves visited by a streaming sum.
    pub branch_budget: u64,
    /// Maximum number of leaves a materialized tree may hold.
    pub materialize_cap: usize,
}

impl Default for TreeSettings {
    fn default() -> Self {
        TreeSettings {
            branch_budget: DEFAULT_BRANCH_BUDGET,
            materialize_cap: DEFAULT_MATERIALIZE_CAP,
        }
    }
}

impl TreeSettings {
    /// Defaults, with the budget taken from `CORRTHERM_BUDGET` when set.
    pub fn from_env() -> Result<Self> {
        let mut s = TreeSettings::default();
        if let Ok(v) = std::env::var(BUDGET_ENV) {
            s.branch_budget = v
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|b| b.is_finite() && *b >= 1.0)
                .map(|b| b as u64)
                .ok_or_else(|| Error::config(format!("{BUDGET_ENV}={v} is not a positive number")))?;
        }
        Ok(s)
    }
}

/// Deterministic cascade summation: equal-sized partial sums are merged as in a
/// balanced binary tree.
#[derive(Clone, Debug, Default)]
pub struct PairwiseSum {
    stack: Vec<(u32, f64)>,
}

impl PairwiseSum {
    pub fn add(&mut self, v: f64) {
        let mut level = 0;
        let mut v = v;
        while let Some(&(l, s)) = self.stack.last() {
            if l != level {
                break;
            }
            self.stack.pop();
            v += s;
            level += 1;
        }
        self.stack.push((level, v));
    }

    pub fn total(&self) -> f64 {
        self.stack.iter().rev().fold(0.0, |acc, &(_, s)| s + acc)
    }
}

pub fn pairwise_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = PairwiseSum::default();
    values.into_iter().for_each(|v| acc.add(v));
    acc.total()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + pairwise_sum(values.iter().map(|v| (v - max).exp())).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    /// `(j_1, ..., j_n)`, zero-based generator indices in forward order.
    pub symbols: Vec<usize>,
    /// The first point `x_1` of the backward orbit.
    pub start: Point,
    /// `S_n phi` along the branch.
    pub log_weight: f64,
}

impl Branch {
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

#[derive(Clone, Debug)]
pub struct BackwardOrbitTree {
    pub root: Point,
    pub depth: usize,
    pub branches: Vec<Branch>,
}

impl BackwardOrbitTree {
    /// `Phi_n(root)`.
    pub fn phi(&self) -> f64 {
        pairwise_sum(self.branches.iter().map(Branch::weight))
    }

    /// Largest distance between a replayed branch endpoint and the root.
    pub fn replay_error(&self, t: &Correspondence) -> f64 {
        self.branches
            .iter()
            .map(|b| {
                let end = b
                    .symbols
                    .iter()
                    .fold(b.start.clone(), |x, &j| t.generator(j).eval_unchecked(&x));
                end.distance(&self.root)
            })
            .fold(0.0, f64::max)
    }

    /// Replay tolerance `n * tol_root * L'`.
    pub fn replay_tolerance(&self, t: &Correspondence) -> f64 {
        let tol = if t.dim() == 1 { TOL_ROOT_CIRCLE } else { TOL_ROOT_TORUS };
        self.depth as f64 * tol * t.lipschitz().max(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthEstimate {
    /// Extrapolated limit `a` of the fit `a + b/n`.
    pub estimate: f64,
    pub slope: f64,
    /// `(n, (1/n) log Phi_n(x))`.
    pub sequence: Vec<(usize, f64)>,
}

/// A node of the partially expanded tree handed to worker threads.
struct Frontier {
    point: Point,
    log_weight: f64,
}

/// Backward orbit enumeration for one correspondence and potential.
pub struct BackwardOrbits<'a> {
    t: &'a Correspondence,
    phi: &'a Potential,
    settings: TreeSettings,
}

impl<'a> BackwardOrbits<'a> {
    pub fn new(t: &'a Correspondence, phi: &'a Potential, settings: TreeSettings) -> Result<Self> {
        phi.validate(t)?;
        Ok(BackwardOrbits { t, phi, settings })
    }

    pub fn correspondence(&self) -> &Correspondence {
        self.t
    }

    fn check_point(&self, x: &Point) -> Result<()> {
        if x.dim() != self.t.dim() {
            return Err(Error::config(format!(
                "root of dimension {} for a correspondence of dimension {}",
                x.dim(),
                self.t.dim()
            )));
        }
        Ok(())
    }

    /// Number of leaves at depth `n`, as a float to avoid overflow.
    fn leaf_count(&self, n: usize) -> f64 {
        (self.t.total_degree() as f64).powi(n as i32)
    }

    fn max_admissible_depth(&self, budget: f64) -> usize {
        let d = self.t.total_degree() as f64;
        if d <= 1.0 {
            return usize::MAX;
        }
        (budget.ln() / d.ln()).floor().max(0.0) as usize
    }

    fn budget_error(&self, n: usize, roots: usize) -> Error {
        let per_root = self.settings.branch_budget as f64 / roots.max(1) as f64;
        let max_depth = self.max_admissible_depth(per_root);
        Error::Resource {
            message: format!(
                "{} roots with depth {n} need {:.3e} leaves, budget is {}; admissible depth is at most {max_depth}",
                roots,
                roots as f64 * self.leaf_count(n),
                self.settings.branch_budget
            ),
            max_depth: Some(max_depth),
        }
    }

    /// Log of the uniform one-step sum `sum_j deg_j exp(w_j)` when weights are constant.
    fn uniform_step_log(&self) -> Option<f64> {
        let w = self.phi.constant_log_weights(self.t)?;
        let terms: Vec<f64> = self
            .t
            .generators()
            .iter()
            .zip(&w)
            .map(|(g, &wj)| (g.degree() as f64).ln() + wj)
            .collect();
        Some(log_sum_exp(&terms))
    }

    /// Materializes all branches of depth `n` at `x`.
    pub fn build_tree(&self, x: &Point, n: usize) -> Result<BackwardOrbitTree> {
        self.check_point(x)?;
        if n == 0 {
            return Err(Error::config("tree depth must be at least 1"));
        }
        let leaves = self.leaf_count(n);
        if leaves > self.settings.branch_budget as f64 || leaves > self.settings.materialize_cap as f64 {
            let cap = (self.settings.materialize_cap as u64).min(self.settings.branch_budget);
            return Err(Error::Resource {
                message: format!("materialized tree of depth {n} would hold {leaves:.3e} leaves (cap {cap})"),
                max_depth: Some(self.max_admissible_depth(cap as f64)),
            });
        }
        let mut branches = Vec::with_capacity(leaves as usize);
        let mut path = Vec::with_capacity(n);
        self.collect(x, n, 0.0, &mut path, &mut branches)?;
        Ok(BackwardOrbitTree {
            root: x.clone(),
            depth: n,
            branches,
        })
    }

    fn collect(
        &self,
        y: &Point,
        left: usize,
        log_weight: f64,
        path: &mut Vec<usize>,
        out: &mut Vec<Branch>,
    ) -> Result<()> {
        let mut pre = Vec::new();
        for (j, g) in self.t.generators().iter().enumerate() {
            pre.clear();
            g.inverse_branches_into(y, &mut pre)?;
            for x1 in &pre {
                let lw = log_weight + self.phi.log_weight(self.t, j, x1);
                path.push(j);
                if left == 1 {
                    out.push(Branch {
                        symbols: path.iter().rev().copied().collect(),
                        start: x1.clone(),
                        log_weight: lw,
                    });
                } else {
                    self.collect(x1, left - 1, lw, path, out)?;
                }
                path.pop();
            }
        }
        Ok(())
    }

    /// One-step children of `y`, in generator then branch order.
    fn children(&self, y: &Frontier) -> Result<Vec<Frontier>> {
        let mut pre = Vec::new();
        let mut out = Vec::with_capacity(self.t.total_degree());
        for (j, g) in self.t.generators().iter().enumerate() {
            pre.clear();
            g.inverse_branches_into(&y.point, &mut pre)?;
            for x1 in pre.drain(..) {
                let lw = y.log_weight + self.phi.log_weight(self.t, j, &x1);
                out.push(Frontier {
                    point: x1,
                    log_weight: lw,
                });
            }
        }
        Ok(out)
    }

    /// Depth-first accumulation of level sums below `y`. `acc[0]` receives the children of `y`.
    fn descend(&self, y: &Point, log_weight: f64, acc: &mut [PairwiseSum], bufs: &mut [Vec<Point>]) -> Result<()> {
        let Some((buf, rest_bufs)) = bufs.split_first_mut() else {
            return Ok(());
        };
        let (level, deeper) = acc.split_first_mut().expect("accumulator per level");
        for (j, g) in self.t.generators().iter().enumerate() {
            buf.clear();
            g.inverse_branches_into(y, buf)?;
            for x1 in buf.iter() {
                let lw = log_weight + self.phi.log_weight(self.t, j, x1);
                level.add(lw.exp());
                if !deeper.is_empty() {
                    self.descend(x1, lw, deeper, rest_bufs)?;
                }
            }
        }
        Ok(())
    }

    /// `[Phi_1(x), ..., Phi_n(x)]` by streaming enumeration.
    fn enumerate_levels(&self, x: &Point, n: usize) -> Result<Vec<f64>> {
        let mut sums = Vec::with_capacity(n);
        let mut frontier = vec![Frontier {
            point: x.clone(),
            log_weight: 0.0,
        }];
        while sums.len() < n && frontier.len() < MIN_TASKS {
            let mut next = Vec::with_capacity(frontier.len() * self.t.total_degree());
            for node in &frontier {
                next.extend(self.children(node)?);
            }
            sums.push(pairwise_sum(next.iter().map(|f| f.log_weight.exp())));
            frontier = next;
        }
        let remaining = n - sums.len();
        if remaining == 0 {
            return Ok(sums);
        }
        let partials: Vec<Vec<f64>> = frontier
            .par_iter()
            .map(|node| {
                let mut acc = vec![PairwiseSum::default(); remaining];
                let mut bufs = vec![Vec::with_capacity(self.t.max_degree()); remaining];
                self.descend(&node.point, node.log_weight, &mut acc, &mut bufs)?;
                Ok(acc.iter().map(PairwiseSum::total).collect())
            })
            .collect::<Result<_>>()?;
        for level in 0..remaining {
            sums.push(pairwise_sum(partials.iter().map(|p| p[level])));
        }
        Ok(sums)
    }

    /// `[log Phi_1(x), ..., log Phi_n(x)]`. Falls back to the closed form `n log s`
    /// for point-independent weights once the enumeration would exceed the budget.
    pub fn log_phi_levels(&self, x: &Point, n: usize) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if n == 0 {
            return Err(Error::config("tree depth must be at least 1"));
        }
        if self.leaf_count(n) <= self.settings.branch_budget as f64 {
            return Ok(self.enumerate_levels(x, n)?.into_iter().map(f64::ln).collect());
        }
        match self.uniform_step_log() {
            Some(s) => Ok((1..=n).map(|i| i as f64 * s).collect()),
            None => Err(self.budget_error(n, 1)),
        }
    }

    pub fn log_phi_n(&self, x: &Point, n: usize) -> Result<f64> {
        Ok(*self.log_phi_levels(x, n)?.last().expect("n >= 1"))
    }

    /// `Phi_n(x)`, the sum of all branch weights of depth `n` at `x`.
    pub fn phi_n(&self, x: &Point, n: usize) -> Result<f64> {
        Ok(self.log_phi_n(x, n)?.exp())
    }

    /// `(1/n) log Phi_n(x)` for `n_min..=n_max`, with the limit extrapolated by a
    /// least-squares fit of `a + b/n` over the upper half of the range.
    pub fn pressure_via_growth(&self, x: &Point, n_min: usize, n_max: usize) -> Result<GrowthEstimate> {
        if n_min == 0 || n_max < n_min {
            return Err(Error::config(format!("invalid depth range {n_min}..={n_max}")));
        }
        let logs = self.log_phi_levels(x, n_max)?;
        let sequence: Vec<(usize, f64)> = (n_min..=n_max).map(|n| (n, logs[n - 1] / n as f64)).collect();
        let top = &sequence[sequence.len() / 2..];
        let (estimate, slope) = fit_inverse_n(top);
        Ok(GrowthEstimate {
            estimate,
            slope,
            sequence,
        })
    }

    /// Net points of spacing at most `epsilon`.
    fn epsilon_net(&self, epsilon: f64) -> Result<Vec<Point>> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::config(format!("epsilon={epsilon} must lie in (0, 1]")));
        }
        let per_dim = (1.0 / epsilon - 1e-9).ceil().max(1.0) as usize;
        let dim = self.t.dim();
        Ok((0..per_dim.pow(dim as u32))
            .map(|i| grid_corner(i, per_dim, dim))
            .collect())
    }

    /// `(1/n) log sum_l Phi_n(x_l)` over an epsilon-net `{x_l}`: the spanning-set estimate,
    /// an upper bound on the pressure once `epsilon <= eta`.
    pub fn pressure_spanning_upper(&self, epsilon: f64, n: usize) -> Result<f64> {
        let net = self.epsilon_net(epsilon)?;
        if n == 0 {
            return Err(Error::config("tree depth must be at least 1"));
        }
        let needed = net.len() as f64 * self.leaf_count(n);
        let logs: Vec<f64> = if needed <= self.settings.branch_budget as f64 {
            net.iter()
                .map(|x| self.log_phi_n(x, n))
                .collect::<Result<_>>()?
        } else if let Some(s) = self.uniform_step_log() {
            vec![n as f64 * s; net.len()]
        } else {
            return Err(self.budget_error(n, net.len()));
        };
        Ok(log_sum_exp(&logs) / n as f64)
    }

    /// Size of the epsilon-net used by the spanning estimate.
    pub fn net_size(&self, epsilon: f64) -> Result<usize> {
        Ok(self.epsilon_net(epsilon)?.len())
    }

    /// `(1/n) log Phi_n(x)`: the single-root separated-set estimate (a lower bound).
    pub fn pressure_separated_lower(&self, x: &Point, n: usize) -> Result<f64> {
        Ok(self.log_phi_n(x, n)? / n as f64)
    }

    /// Equispaced probe roots used by the Gibbs ratio.
    pub fn probe_points(&self, probes: usize) -> Vec<Point> {
        let dim = self.t.dim();
        let per_dim = per_dim_resolution(probes.max(1), dim);
        (0..per_dim.pow(dim as u32))
            .map(|i| grid_corner(i, per_dim, dim))
            .collect()
    }

    /// `max Phi_n / min Phi_n` over equispaced probe roots.
    pub fn gibbs_ratio(&self, n: usize, probes: usize) -> Result<f64> {
        let pts = self.probe_points(probes);
        let needed = pts.len() as f64 * self.leaf_count(n);
        if needed > self.settings.branch_budget as f64 {
            if self.uniform_step_log().is_some() {
                return Ok(1.0);
            }
            return Err(self.budget_error(n, pts.len()));
        }
        let logs: Vec<f64> = pts
            .par_iter()
            .map(|x| self.log_phi_n(x, n))
            .collect::<Result<_>>()?;
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = logs.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((max - min).exp())
    }
}

/// Least-squares fit of `y = a + b/n`; returns `(a, b)`. A single point gives `(y, 0)`.
pub fn fit_inverse_n(points: &[(usize, f64)]) -> (f64, f64) {
    if points.len() < 2 {
        return (points.first().map_or(f64::NAN, |p| p.1), 0.0);
    }
    let m = points.len() as f64;
    let us: Vec<f64> = points.iter().map(|&(n, _)| 1.0 / n as f64).collect();
    let mean_u = us.iter().sum::<f64>() / m;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = us.iter().map(|u| (u - mean_u).powi(2)).sum();
    let sxy: f64 = us
        .iter()
        .zip(points)
        .map(|(u, p)| (u - mean_u) * (p.1 - mean_y))
        .sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (mean_y - b * mean_u, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::GeneratorMap;

    fn circle(maps: &[(u32, f64)]) -> Correspondence {
        Correspondence::new(
            maps.iter()
                .map(|&(p, c)| GeneratorMap::circle_linear(p, c).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn perturbed_pair() -> Correspondence {
        Correspondence::new(vec![
            GeneratorMap::circle_perturbed(2, 0.0, 0.3).unwrap(),
            GeneratorMap::circle_perturbed(2, 0.5, 0.3).unwrap(),
        ])
        .unwrap()
    }

    fn engine<'a>(t: &'a Correspondence, phi: &'a Potential) -> BackwardOrbits<'a> {
        BackwardOrbits::new(t, phi, TreeSettings::default()).unwrap()
    }

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn tree_constant_jacobian() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let tree = engine(&t, &Potential::Jacobian).build_tree(&Point::circle(0.0), 3).unwrap();
        assert_eq!(tree.branches.len(), 64);
        for b in &tree.branches {
            assert!((b.weight() - 0.125).abs() < 1e-15);
            assert_eq!(b.symbols.len(), 3);
        }
        assert!(tree.replay_error(&t) <= tree.replay_tolerance(&t));
    }

    #[test]
    fn tree_zero_potential() {
        let t = circle(&[(2, 0.0)]);
        let tree = engine(&t, &Potential::Zero).build_tree(&Point::circle(0.7), 5).unwrap();
        assert_eq!(tree.branches.len(), 32);
        assert!(tree.branches.iter().all(|b| b.weight() == 1.0));
        assert_eq!(tree.phi(), 32.0);
    }

    /// Hand enumeration over T^{-1}(T^{-1}(0)) for {2x, 3x}, with the coincidence set
    /// E = {0} receiving weight exp(-log 2).
    fn torus_measurable_oracle() -> f64 {
        let weight = |p: u32, x1: f64| if x1 == 0.0 { 0.5 } else { 1.0 / p as f64 };
        let preimages = |y: f64| -> Vec<(u32, f64)> {
            let mut v = vec![];
            for p in [2u32, 3] {
                for i in 0..p {
                    v.push((p, (y + i as f64) / p as f64));
                }
            }
            v
        };
        let mut total = 0.0;
        for (p2, x2) in preimages(0.0) {
            for (p1, x1) in preimages(x2) {
                total += weight(p2, x2) * weight(p1, x1);
            }
        }
        total
    }

    #[test]
    fn tree_torus_measurable_with_coincidence() {
        let t = circle(&[(2, 0.0), (3, 0.0)]);
        let phi = Potential::TorusMeasurable { c_e: None };
        let tree = engine(&t, &phi).build_tree(&Point::circle(0.0), 2).unwrap();
        assert_eq!(tree.branches.len(), 25);
        let want = torus_measurable_oracle();
        assert!((want - 4.5).abs() < 1e-14, "{want}");
        assert!((tree.phi() - want).abs() < 1e-14, "{}", tree.phi());
        let b = tree
            .branches
            .iter()
            .find(|b| b.symbols == vec![0, 0] && b.start.x() == 0.25)
            .unwrap();
        assert!((b.weight() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn jacobian_potential_rejects_coincidences() {
        let t = circle(&[(2, 0.0), (3, 0.0)]);
        assert!(matches!(
            BackwardOrbits::new(&t, &Potential::Jacobian, TreeSettings::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn phi_n_constant_cases() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let e = engine(&t, &Potential::Jacobian);
        for x in [0.0, 0.3, 0.77] {
            assert!((e.phi_n(&Point::circle(x), 5).unwrap() - 32.0).abs() < 1e-12);
        }
        let t = circle(&[(3, 0.0), (3, 1.0 / 3.0), (3, 2.0 / 3.0)]);
        let e = engine(&t, &Potential::Jacobian);
        assert!((e.phi_n(&Point::circle(0.41), 4).unwrap() - 81.0).abs() < 1e-11);
    }

    #[test]
    fn phi_n_perturbed_within_gibbs_band() {
        let t = perturbed_pair();
        let e = engine(&t, &Potential::Jacobian);
        let c = e.gibbs_ratio(8, 32).unwrap();
        let v = e.phi_n(&Point::circle(0.37), 8).unwrap();
        let k8 = 256.0;
        assert!(v >= k8 / c && v <= c * k8, "{v} vs band {c}");
    }

    #[test]
    fn tree_recursion_matches_transfer_action() {
        let t = perturbed_pair();
        let phi = Potential::Jacobian;
        let e = engine(&t, &phi);
        let x = Point::circle(0.61);
        let lhs = e.phi_n(&x, 6).unwrap();
        let mut rhs = 0.0;
        for (j, g) in t.generators().iter().enumerate() {
            for x1 in g.inverse_branches(&x).unwrap() {
                rhs += phi.log_weight(&t, j, &x1).exp() * e.phi_n(&x1, 5).unwrap();
            }
        }
        assert!((lhs - rhs).abs() <= 1e-12 * lhs, "{lhs} vs {rhs}");
    }

    #[test]
    fn perturbed_tree_replays() {
        let t = perturbed_pair();
        let tree = engine(&t, &Potential::Jacobian).build_tree(&Point::circle(0.2), 6).unwrap();
        assert_eq!(tree.branches.len(), 4096);
        assert!(tree.replay_error(&t) <= tree.replay_tolerance(&t));
        let e = engine(&t, &Potential::Jacobian);
        let streamed = e.phi_n(&Point::circle(0.2), 6).unwrap();
        assert!((tree.phi() - streamed).abs() <= 1e-12 * streamed);
    }

    #[test]
    fn growth_constant_cases_are_exact() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let g = engine(&t, &Potential::Jacobian)
            .pressure_via_growth(&Point::circle(0.1), 1, 10)
            .unwrap();
        assert!(g.sequence.iter().all(|&(_, v)| (v - LN2).abs() < 1e-12));
        assert!((g.estimate - LN2).abs() < 1e-12);

        let t = circle(&[(2, 0.0), (2, 0.25), (2, 0.5), (2, 0.75)]);
        let g = engine(&t, &Potential::Jacobian)
            .pressure_via_growth(&Point::circle(0.1), 1, 8)
            .unwrap();
        assert!((g.estimate - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn growth_perturbed_extrapolates_to_log_k() {
        let t = perturbed_pair();
        let g = engine(&t, &Potential::Jacobian)
            .pressure_via_growth(&Point::circle(0.1), 1, 10)
            .unwrap();
        assert!((g.estimate - LN2).abs() < 0.02, "{g:?}");
    }

    #[test]
    fn single_map_pressure_is_zero() {
        let t = circle(&[(2, 0.0)]);
        let g = engine(&t, &Potential::Jacobian)
            .pressure_via_growth(&Point::circle(0.3), 1, 12)
            .unwrap();
        assert!(g.estimate.abs() < 1e-12);
    }

    #[test]
    fn spanning_upper_closed_forms() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let e = engine(&t, &Potential::Jacobian);
        let v6 = e.pressure_spanning_upper(0.1, 6).unwrap();
        assert!((v6 - (640f64).ln() / 6.0).abs() < 1e-12);
        assert!((v6 - 1.077).abs() < 1e-3);
        let v30 = e.pressure_spanning_upper(0.1, 30).unwrap();
        assert!((v30 - (LN2 + 10f64.ln() / 30.0)).abs() < 1e-12);
        assert!((v30 - 0.770).abs() < 1e-3);
        assert!(v30 < v6);

        let t = circle(&[(2, 0.0)]);
        let v = engine(&t, &Potential::Zero).pressure_spanning_upper(0.1, 6).unwrap();
        assert!((v - (10.0 * 64.0f64).ln() / 6.0).abs() < 1e-12);
    }

    #[test]
    fn separated_lower_examples() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let v = engine(&t, &Potential::Jacobian)
            .pressure_separated_lower(&Point::circle(0.9), 8)
            .unwrap();
        assert!((v - LN2).abs() < 1e-12);
        let t = circle(&[(3, 0.0), (3, 1.0 / 3.0), (3, 2.0 / 3.0)]);
        let v = engine(&t, &Potential::Jacobian)
            .pressure_separated_lower(&Point::circle(0.2), 6)
            .unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);

        let t = perturbed_pair();
        let e = engine(&t, &Potential::Jacobian);
        let c = e.gibbs_ratio(8, 32).unwrap();
        let v = e.pressure_separated_lower(&Point::circle(0.5), 8).unwrap();
        assert!((v - LN2).abs() <= c.ln() / 8.0, "{v} {c}");
    }

    #[test]
    fn separated_below_spanning_plus_net_term() {
        let t = perturbed_pair();
        let e = engine(&t, &Potential::Jacobian);
        let eps = 0.05;
        let net = e.net_size(eps).unwrap() as f64;
        for n in 1..=6 {
            let lo = e.pressure_separated_lower(&Point::circle(0.3), n).unwrap();
            let hi = e.pressure_spanning_upper(eps, n).unwrap();
            assert!(lo <= hi + net.ln() / n as f64);
        }
    }

    #[test]
    fn gibbs_ratio_examples() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        assert!((engine(&t, &Potential::Jacobian).gibbs_ratio(6, 16).unwrap() - 1.0).abs() < 1e-12);
        let t = circle(&[(3, 0.0)]);
        assert!((engine(&t, &Potential::Jacobian).gibbs_ratio(7, 16).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn budget_error_names_admissible_depth() {
        let t = perturbed_pair();
        let phi = Potential::Jacobian;
        let e = BackwardOrbits::new(
            &t,
            &phi,
            TreeSettings {
                branch_budget: 5000,
                materialize_cap: 1000,
            },
        )
        .unwrap();
        match e.phi_n(&Point::circle(0.1), 7) {
            Err(Error::Resource { max_depth, .. }) => assert_eq!(max_depth, Some(6)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(e.build_tree(&Point::circle(0.1), 5), Err(Error::Resource { .. })));
    }

    #[test]
    fn sums_do_not_depend_on_thread_count() {
        let t = perturbed_pair();
        let e = engine(&t, &Potential::Jacobian);
        let x = Point::circle(0.123);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| e.log_phi_levels(&x, 8).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn pairwise_sum_is_exact_on_small_integers() {
        assert_eq!(pairwise_sum((1..=1000).map(|i| i as f64)), 500500.0);
        assert_eq!(pairwise_sum(std::iter::empty()), 0.0);
    }

    #[test]
    fn inverse_n_fit_recovers_model() {
        let pts: Vec<(usize, f64)> = (3..10).map(|n| (n, 0.7 + 0.4 / n as f64)).collect();
        let (a, b) = fit_inverse_n(&pts);
        assert!((a - 0.7).abs() < 1e-12 && (b - 0.4).abs() < 1e-12);
    }

    #[test]
    fn custom_potential_lookup() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let phi = Potential::Custom {
            resolution: 2,
            table: vec![vec![-1.0, -2.0], vec![-3.0, -4.0]],
        };
        phi.validate(&t).unwrap();
        assert_eq!(phi.log_weight(&t, 0, &Point::circle(0.7)), -2.0);
        assert_eq!(phi.log_weight(&t, 1, &Point::circle(0.2)), -3.0);
        let bad = Potential::Custom {
            resolution: 3,
            table: vec![vec![0.0; 2]; 2],
        };
        assert!(bad.validate(&t).is_err());
    }
}
