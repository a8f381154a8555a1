//! Transition kernels supported by a correspondence, `Q_x = sum_j P_j(x) delta_{f_j(x)}`.
//!
//! Besides the kernel type this module computes pushforwards `mu Q`, finite-horizon
//! cylinder measures of the path-space measure started from `mu`, and simulates the
//! Markov chain and the skew product over the symbol shift.
//!
//! Cylinder measures come in two modes. Exact mode applies to affine circle generators
//! with rational shifts and rational interval partitions: the set of starting points
//! realizing a (cell word, symbol word) pair is a finite union of intervals whose
//! endpoints are carried as `i128` rationals. Quadrature mode scores the centers of a
//! uniform grid and handles everything else, including non-uniform kernels.

use std::collections::BTreeMap;

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub, ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::Correspondence;
use crate::error::{Error, Result};
use crate::maps::{grid_center, wrap, GeneratorMap, MapKind, Point};
use crate::operator::{transfer_with, GridDensity};
use crate::orbits::pairwise_sum;

pub type Rational = Ratio<i128>;

/// Row sums must equal 1 within this tolerance.
pub const TOL_STOCHASTIC: f64 = 1e-12;
pub const DEFAULT_MAX_WORD: usize = 14;
pub const DEFAULT_QUADRATURE_RESOLUTION: usize = 1 << 12;
/// Largest number of (cell word, symbol word) nodes kept while enumerating cylinders.
pub const MAX_SURVIVING_WORDS: usize = 10_000_000;
/// Largest denominator accepted when reading a shift or start point as a rational.
const MAX_DENOMINATOR: i128 = 1_000_000;
/// Seed used by Monte-Carlo defaults and pinned regression values.
pub const DEFAULT_SEED: u64 = 0x5EED;

/// Kernel weights as they appear in configuration files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    #[default]
    Uniform,
    Constant { weights: Vec<f64> },
    /// `table[j][cell]` over a grid with `resolution` cells per dimension.
    Tabulated { resolution: usize, table: Vec<Vec<f64>> },
}


#[derive(Clone, Debug, PartialEq)]
enum Weights {
    Uniform(usize),
    Constant(Vec<f64>),
    Tabulated {
        dim: usize,
        resolution: usize,
        table: Vec<Vec<f64>>,
    },
}

/// Row-stochastic weights `P_j(x)` over the generators of a correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    weights: Weights,
}

fn check_row(row: impl Iterator<Item = f64>) -> Result<()> {
    let mut sum = 0.0;
    for w in row {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::config(format!("kernel weight {w} outside [0, 1]")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > TOL_STOCHASTIC {
        return Err(Error::config(format!("kernel weights sum to {sum}, not 1")));
    }
    Ok(())
}

impl Kernel {
    pub fn uniform(k: usize) -> Self {
        assert!(k > 0);
        Kernel {
            weights: Weights::Uniform(k),
        }
    }

    pub fn constant(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("a kernel needs at least one weight"));
        }
        check_row(weights.iter().copied())?;
        Ok(Kernel {
            weights: Weights::Constant(weights),
        })
    }

    pub fn tabulated(dim: usize, resolution: usize, table: Vec<Vec<f64>>) -> Result<Self> {
        let cells = resolution.checked_pow(dim as u32).unwrap_or(0);
        if table.is_empty() || cells == 0 || table.iter().any(|r| r.len() != cells) {
            return Err(Error::config(format!(
                "tabulated kernel needs one row of {cells} values per generator"
            )));
        }
        for cell in 0..cells {
            check_row(table.iter().map(|r| r[cell]))
                .map_err(|e| Error::config(format!("cell {cell}: {e}")))?;
        }
        Ok(Kernel {
            weights: Weights::Tabulated {
                dim,
                resolution,
                table,
            },
        })
    }

    pub fn from_spec(spec: &KernelSpec, t: &Correspondence) -> Result<Self> {
        let kernel = match spec {
            KernelSpec::Uniform => Kernel::uniform(t.k()),
            KernelSpec::Constant { weights } => Kernel::constant(weights.clone())?,
            KernelSpec::Tabulated { resolution, table } => {
                Kernel::tabulated(t.dim(), *resolution, table.clone())?
            }
        };
        kernel.check_supported(t)?;
        Ok(kernel)
    }

    pub fn spec(&self) -> KernelSpec {
        match &self.weights {
            Weights::Uniform(_) => KernelSpec::Uniform,
            Weights::Constant(w) => KernelSpec::Constant { weights: w.clone() },
            Weights::Tabulated {
                resolution, table, ..
            } => KernelSpec::Tabulated {
                resolution: *resolution,
                table: table.clone(),
            },
        }
    }

    pub fn k(&self) -> usize {
        match &self.weights {
            Weights::Uniform(k) => *k,
            Weights::Constant(w) => w.len(),
            Weights::Tabulated { table, .. } => table.len(),
        }
    }

    pub fn check_supported(&self, t: &Correspondence) -> Result<()> {
        if self.k() != t.k() {
            return Err(Error::config(format!(
                "kernel has {} weights but the correspondence has {} generators",
                self.k(),
                t.k()
            )));
        }
        if let Weights::Tabulated { dim, .. } = &self.weights {
            if *dim != t.dim() {
                return Err(Error::config("tabulated kernel dimension does not match"));
            }
        }
        Ok(())
    }

    /// Per-generator weights when they do not depend on the point.
    pub fn constant_weights(&self) -> Option<Vec<f64>> {
        match &self.weights {
            Weights::Uniform(k) => Some(vec![1.0 / *k as f64; *k]),
            Weights::Constant(w) => Some(w.clone()),
            Weights::Tabulated { .. } => None,
        }
    }

    pub fn is_uniform(&self) -> bool {
        match &self.weights {
            Weights::Uniform(_) => true,
            Weights::Constant(w) => w.iter().all(|&v| v == 1.0 / w.len() as f64),
            Weights::Tabulated { .. } => false,
        }
    }

    /// `P_j(x)`.
    pub fn weight(&self, j: usize, x: &Point) -> f64 {
        match &self.weights {
            Weights::Uniform(k) => 1.0 / *k as f64,
            Weights::Constant(w) => w[j],
            Weights::Tabulated {
                resolution, table, ..
            } => table[j][cell_index(x, *resolution)],
        }
    }

    /// Inverse-CDF draw of a generator index for a uniform variate `u` in `[0, 1)`.
    pub fn draw(&self, x: &Point, u: f64) -> usize {
        let k = self.k();
        if let Weights::Uniform(_) = self.weights {
            return ((u * k as f64) as usize).min(k - 1);
        }
        let mut acc = 0.0;
        let mut last = 0;
        for j in 0..k {
            let w = self.weight(j, x);
            if w > 0.0 {
                last = j;
                acc += w;
                if u < acc {
                    return j;
                }
            }
        }
        last
    }
}

fn cell_index(x: &Point, resolution: usize) -> usize {
    x.coords().iter().fold(0, |acc, &c| {
        acc * resolution + ((c * resolution as f64) as usize).min(resolution - 1)
    })
}

/// Density of `mu Q = sum_j (P_j mu) o f_j^{-1}`: every preimage branch contributes
/// `P_j / Jac_j` times the density.
pub fn pushforward(mu: &GridDensity, kernel: &Kernel, t: &Correspondence) -> Result<GridDensity> {
    kernel.check_supported(t)?;
    transfer_with(t, mu, |j, x1| {
        kernel.weight(j, x1) / t.generator(j).jacobian(x1)
    })
}

mod rational_strings {
    use num_rational::Ratio;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Ratio<i64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|r| r.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Ratio<i64>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.trim().parse().map_err(|_| D::Error::custom(format!("bad rational {s:?}"))))
            .collect()
    }
}

/// Finite partition of `[0,1)^m` into cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Partition {
    /// Circle intervals `[b_i, b_{i+1})` with rational breakpoints `0 = b_0 < ... < b_m = 1`,
    /// written as strings such as `"1/3"`.
    Intervals {
        #[serde(with = "rational_strings")]
        breakpoints: Vec<Ratio<i64>>,
    },
    /// `per_dim^dim` congruent boxes.
    Grid { dim: usize, per_dim: usize },
}

impl Partition {
    pub fn uniform(dim: usize, per_dim: usize) -> Self {
        Partition::Grid { dim, per_dim }
    }

    pub fn intervals(breakpoints: Vec<Ratio<i64>>) -> Result<Self> {
        let p = Partition::Intervals { breakpoints };
        p.validate(1)?;
        Ok(p)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Partition::Intervals { breakpoints } => {
                if dim != 1 {
                    return Err(Error::config("interval partitions live on the circle"));
                }
                let ok = breakpoints.len() >= 2
                    && breakpoints[0] == Ratio::zero()
                    && *breakpoints.last().unwrap() == Ratio::from_integer(1)
                    && breakpoints.windows(2).all(|w| w[0] < w[1]);
                if !ok {
                    return Err(Error::config(
                        "breakpoints must increase strictly from 0 to 1",
                    ));
                }
            }
            Partition::Grid { dim: d, per_dim } => {
                if *d != dim || *per_dim == 0 {
                    return Err(Error::config(format!(
                        "grid partition of dimension {d} with {per_dim} cells per side does not fit dimension {dim}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        match self {
            Partition::Intervals { breakpoints } => breakpoints.len() - 1,
            Partition::Grid { dim, per_dim } => per_dim.pow(*dim as u32),
        }
    }

    pub fn cell_of(&self, x: &Point) -> usize {
        match self {
            Partition::Intervals { breakpoints } => {
                let v = x.x();
                breakpoints[1..]
                    .partition_point(|b| b.to_f64().unwrap_or(f64::NAN) <= v)
                    .min(breakpoints.len() - 2)
            }
            Partition::Grid { per_dim, .. } => cell_index(x, *per_dim),
        }
    }

    /// Circle cells as exact rational intervals.
    pub fn rational_cells(&self) -> Option<Vec<(Rational, Rational)>> {
        let widen = |r: &Ratio<i64>| Rational::new(*r.numer() as i128, *r.denom() as i128);
        match self {
            Partition::Intervals { breakpoints } => Some(
                breakpoints
                    .windows(2)
                    .map(|w| (widen(&w[0]), widen(&w[1])))
                    .collect(),
            ),
            Partition::Grid { dim: 1, per_dim } => Some(
                (0..*per_dim as i128)
                    .map(|i| {
                        (
                            Rational::new(i, *per_dim as i128),
                            Rational::new(i + 1, *per_dim as i128),
                        )
                    })
                    .collect(),
            ),
            Partition::Grid { .. } => None,
        }
    }
}

/// A cylinder `A_{i_1} x ... x A_{i_n}` over a partition; cell indices are zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderSpec {
    pub partition: Partition,
    pub word: Vec<usize>,
}

impl CylinderSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.partition.validate(dim)?;
        if self.word.is_empty() {
            return Err(Error::config("cylinder word is empty"));
        }
        let m = self.partition.cell_count();
        if let Some(i) = self.word.iter().find(|&&i| i >= m) {
            return Err(Error::config(format!("cell index {i} out of range for {m} cells")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CylinderMode {
    /// Exact when available, quadrature otherwise.
    #[default]
    Auto,
    Exact,
    Quadrature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CylinderOptions {
    pub mode: CylinderMode,
    /// Quadrature grid cells per dimension.
    pub resolution: usize,
    pub max_word: usize,
}

impl Default for CylinderOptions {
    fn default() -> Self {
        CylinderOptions {
            mode: CylinderMode::Auto,
            resolution: DEFAULT_QUADRATURE_RESOLUTION,
            max_word: DEFAULT_MAX_WORD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CylinderMeasure {
    pub value: f64,
    /// Exact value, present in exact mode when `mu` is Lebesgue measure.
    #[serde(serialize_with = "serialize_opt_rational")]
    pub exact: Option<Rational>,
    pub mode: CylinderMode,
}

fn serialize_opt_rational<S: serde::Serializer>(v: &Option<Rational>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(r) => s.serialize_some(&r.to_string()),
        None => s.serialize_none(),
    }
}

fn overflow() -> Error {
    Error::Resource {
        message: "rational endpoint arithmetic overflowed i128".into(),
        max_depth: None,
    }
}

fn ck(v: Option<Rational>) -> Result<Rational> {
    v.ok_or_else(overflow)
}

/// Best rational approximation with denominator at most `MAX_DENOMINATOR`, accepted only
/// when it converts back to exactly `v`.
pub(crate) fn exact_rational(v: f64) -> Option<Rational> {
    if !v.is_finite() {
        return None;
    }
    let (mut h0, mut h1, mut k0, mut k1) = (0i128, 1i128, 1i128, 0i128);
    let mut x = v;
    for _ in 0..64 {
        let a = x.floor();
        if a.abs() > 1e15 {
            return None;
        }
        let a = a as i128;
        let (h2, k2) = (a * h1 + h0, a * k1 + k0);
        if k2 > MAX_DENOMINATOR {
            return None;
        }
        if h2 as f64 / k2 as f64 == v {
            return Some(Rational::new(h2, k2));
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = x - a as f64;
        if frac == 0.0 {
            return None;
        }
        x = 1.0 / frac;
    }
    None
}

/// `(degree, shift)` of every generator, when all are affine circle maps with rational
/// shifts.
fn rational_affine(t: &Correspondence) -> Option<Vec<(i128, Rational)>> {
    t.generators()
        .iter()
        .map(|g| {
            let (p, c) = g.affine_circle()?;
            Some((p as i128, exact_rational(c)?))
        })
        .collect()
}

/// Part of the starting set on which the current image `y = slope * x + offset` stays in
/// `[0, 1)` without wrapping.
#[derive(Clone, Debug, PartialEq)]
struct Piece {
    lo: Rational,
    hi: Rational,
    slope: i128,
    offset: Rational,
}

/// Pushes `pieces` through `x -> p x + c (mod 1)` and splits the result by target cell.
/// Returns `(cell, piece)` pairs in increasing piece order.
fn advance(
    pieces: &[Piece],
    p: i128,
    c: Rational,
    cells: &[(Rational, Rational)],
    only: Option<usize>,
) -> Result<Vec<(usize, Piece)>> {
    let mut out = Vec::new();
    for piece in pieces {
        let slope = piece.slope.checked_mul(p).ok_or_else(overflow)?;
        let rs = Rational::from_integer(slope);
        let shift = ck(Rational::from_integer(p).checked_mul(&piece.offset))?;
        let shift = ck(shift.checked_add(&c))?;
        let z_lo = ck(ck(rs.checked_mul(&piece.lo))?.checked_add(&shift))?;
        let z_hi = ck(ck(rs.checked_mul(&piece.hi))?.checked_add(&shift))?;
        let q_lo = z_lo.floor().to_integer();
        let q_hi = z_hi.ceil().to_integer();
        for q in q_lo..q_hi {
            let rq = Rational::from_integer(q);
            let y_lo = ck(z_lo.max(rq).checked_sub(&rq))?;
            let y_hi = ck(z_hi.min(rq + 1).checked_sub(&rq))?;
            if y_lo >= y_hi {
                continue;
            }
            let first = cells.partition_point(|cell| cell.1 <= y_lo);
            for (idx, cell) in cells.iter().enumerate().skip(first) {
                if cell.0 >= y_hi {
                    break;
                }
                if only.is_some_and(|o| o != idx) {
                    continue;
                }
                let a = y_lo.max(cell.0);
                let b = y_hi.min(cell.1);
                // x = (y + q - shift) / slope
                let back = |y: Rational| -> Result<Rational> {
                    ck(ck(ck(y.checked_add(&rq))?.checked_sub(&shift))?.checked_div(&rs))
                };
                let lo = back(a)?.max(piece.lo);
                let hi = back(b)?.min(piece.hi);
                if lo < hi {
                    out.push((
                        idx,
                        Piece {
                            lo,
                            hi,
                            slope,
                            offset: ck(shift.checked_sub(&rq))?,
                        },
                    ));
                }
            }
        }
    }
    Ok(out)
}

fn lebesgue_length(pieces: &[Piece]) -> Result<Rational> {
    pieces.iter().try_fold(Rational::zero(), |acc, p| {
        ck(acc.checked_add(&ck(p.hi.checked_sub(&p.lo))?))
    })
}

fn density_measure(mu: &GridDensity, pieces: &[Piece]) -> f64 {
    let intervals: Vec<(f64, f64)> = pieces
        .iter()
        .map(|p| (p.lo.to_f64().unwrap(), p.hi.to_f64().unwrap()))
        .collect();
    mu.measure_of_intervals(&intervals)
}

/// Accumulated measure of a set of pieces: exact for Lebesgue, floating otherwise.
#[derive(Clone, Debug)]
enum Mass {
    Exact(Rational),
    Float(f64),
}

impl Mass {
    fn of(mu: &GridDensity, pieces: &[Piece]) -> Result<Mass> {
        if mu.is_uniform() {
            Ok(Mass::Exact(lebesgue_length(pieces)?))
        } else {
            Ok(Mass::Float(density_measure(mu, pieces)))
        }
    }

    fn add(self, other: Mass) -> Result<Mass> {
        match (self, other) {
            (Mass::Exact(a), Mass::Exact(b)) => Ok(Mass::Exact(ck(a.checked_add(&b))?)),
            (Mass::Float(a), Mass::Float(b)) => Ok(Mass::Float(a + b)),
            _ => Err(Error::Internal("mixed exact and floating cylinder masses".into())),
        }
    }

    fn scaled(self, denom: i128) -> Result<(f64, Option<Rational>)> {
        match self {
            Mass::Exact(r) => {
                let r = ck(r.checked_div(&Rational::from_integer(denom)))?;
                Ok((rational_to_f64(&r), Some(r)))
            }
            Mass::Float(v) => Ok((v / denom as f64, None)),
        }
    }
}

fn rational_to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

fn check_exact_inputs(mu: &GridDensity, kernel: &Kernel) -> Result<()> {
    if !kernel.is_uniform() {
        return Err(Error::config("exact cylinder mode needs the uniform kernel"));
    }
    if mu.dim() != 1 {
        return Err(Error::config("exact cylinder mode works on the circle"));
    }
    Ok(())
}

fn resolve_mode(
    mode: CylinderMode,
    kernel: &Kernel,
    t: &Correspondence,
    partition: &Partition,
) -> Result<(CylinderMode, Option<Vec<(i128, Rational)>>, Option<Vec<(Rational, Rational)>>)> {
    let gens = rational_affine(t);
    let cells = partition.rational_cells();
    let available = kernel.is_uniform() && gens.is_some() && cells.is_some();
    match mode {
        CylinderMode::Quadrature => Ok((CylinderMode::Quadrature, None, None)),
        CylinderMode::Exact if !available => Err(Error::config(
            "exact cylinder mode needs the uniform kernel, affine circle generators with rational shifts, and an interval partition",
        )),
        CylinderMode::Auto if !available => Ok((CylinderMode::Quadrature, None, None)),
        _ => Ok((CylinderMode::Exact, gens, cells)),
    }
}

/// Symbol-word prefixes handed to the thread pool.
fn prefixes(k: usize, depth: usize) -> Vec<Vec<usize>> {
    let mut len = 0;
    let mut count = 1usize;
    while len < depth && count < 64 {
        len += 1;
        count *= k;
    }
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|w| (0..k).map(move |j| {
                let mut w = w.clone();
                w.push(j);
                w
            }))
            .collect();
    }
    out
}

/// `(mu Q^{[n-1]})(A_{i_1} x ... x A_{i_n})` for the cells named by `spec.word`.
pub fn cylinder_measure(
    mu: &GridDensity,
    kernel: &Kernel,
    t: &Correspondence,
    spec: &CylinderSpec,
    opts: &CylinderOptions,
) -> Result<CylinderMeasure> {
    kernel.check_supported(t)?;
    spec.validate(t.dim())?;
    if mu.dim() != t.dim() {
        return Err(Error::config("density dimension does not match the correspondence"));
    }
    if spec.word.len() > opts.max_word {
        return Err(Error::Resource {
            message: format!(
                "cylinder word of length {} exceeds the limit {}",
                spec.word.len(),
                opts.max_word
            ),
            max_depth: Some(opts.max_word),
        });
    }
    let (mode, gens, cells) = resolve_mode(opts.mode, kernel, t, &spec.partition)?;
    match (gens, cells) {
        (Some(gens), Some(cells)) => {
            check_exact_inputs(mu, kernel)?;
            exact_cylinder(mu, &gens, &cells, &spec.word)
        }
        _ => Ok(CylinderMeasure {
            value: quadrature_cylinder(mu, kernel, t, spec, opts.resolution)?,
            exact: None,
            mode,
        }),
    }
}

fn exact_cylinder(
    mu: &GridDensity,
    gens: &[(i128, Rational)],
    cells: &[(Rational, Rational)],
    word: &[usize],
) -> Result<CylinderMeasure> {
    let k = gens.len();
    let steps = word.len() - 1;
    let (a, b) = cells[word[0]];
    let start = vec![Piece {
        lo: a,
        hi: b,
        slope: 1,
        offset: Rational::zero(),
    }];

    fn descend(
        mu: &GridDensity,
        gens: &[(i128, Rational)],
        cells: &[(Rational, Rational)],
        word: &[usize],
        pieces: Vec<Piece>,
    ) -> Result<Option<Mass>> {
        let Some((&next, rest)) = word.split_first() else {
            return Mass::of(mu, &pieces).map(Some);
        };
        let mut total: Option<Mass> = None;
        for &(p, c) in gens {
            let child: Vec<Piece> = advance(&pieces, p, c, cells, Some(next))?
                .into_iter()
                .map(|(_, piece)| piece)
                .collect();
            if child.is_empty() {
                continue;
            }
            if let Some(m) = descend(mu, gens, cells, rest, child)? {
                total = Some(match total {
                    Some(acc) => acc.add(m)?,
                    None => m,
                });
            }
        }
        Ok(total)
    }

    let tasks = prefixes(k, steps);
    let parts = tasks
        .par_iter()
        .map(|prefix| {
            let mut pieces = start.clone();
            for (i, &j) in prefix.iter().enumerate() {
                let (p, c) = gens[j];
                pieces = advance(&pieces, p, c, cells, Some(word[i + 1]))?
                    .into_iter()
                    .map(|(_, piece)| piece)
                    .collect();
                if pieces.is_empty() {
                    return Ok(None);
                }
            }
            descend(mu, gens, cells, &word[prefix.len() + 1..], pieces)
        })
        .collect::<Result<Vec<Option<Mass>>>>()?;
    let zero = if mu.is_uniform() {
        Mass::Exact(Rational::zero())
    } else {
        Mass::Float(0.0)
    };
    let total = match zero {
        Mass::Float(_) => Mass::Float(pairwise_sum(parts.into_iter().map(|m| match m {
            Some(Mass::Float(v)) => v,
            _ => 0.0,
        }))),
        exact => parts
            .into_iter()
            .flatten()
            .try_fold(exact, |acc, m| acc.add(m))?,
    };
    let denom = (k as i128).checked_pow(steps as u32).ok_or_else(overflow)?;
    let (value, exact) = total.scaled(denom)?;
    Ok(CylinderMeasure {
        value,
        exact,
        mode: CylinderMode::Exact,
    })
}

/// Number of fixed work chunks for grid quadrature.
const QUADRATURE_CHUNKS: usize = 256;

fn quadrature_points(dim: usize, resolution: usize) -> Result<usize> {
    let cells = resolution
        .checked_pow(dim as u32)
        .filter(|&c| c > 0 && c <= 1 << 24)
        .ok_or_else(|| Error::config(format!("quadrature resolution {resolution} too large for dimension {dim}")))?;
    Ok(cells)
}

fn quadrature_cylinder(
    mu: &GridDensity,
    kernel: &Kernel,
    t: &Correspondence,
    spec: &CylinderSpec,
    resolution: usize,
) -> Result<f64> {
    let dim = t.dim();
    let n_points = quadrature_points(dim, resolution)?;
    let cell_volume = 1.0 / n_points as f64;
    let chunk = n_points.div_ceil(QUADRATURE_CHUNKS);

    fn walk(
        t: &Correspondence,
        kernel: &Kernel,
        partition: &Partition,
        word: &[usize],
        x: &Point,
        weight: f64,
    ) -> Result<f64> {
        let Some((&next, rest)) = word.split_first() else {
            return Ok(weight);
        };
        let mut acc = 0.0;
        for j in 0..t.k() {
            let w = kernel.weight(j, x);
            if w == 0.0 {
                continue;
            }
            let y = t.generator(j).eval(x)?;
            if partition.cell_of(&y) == next {
                acc += walk(t, kernel, partition, rest, &y, weight * w)?;
            }
        }
        Ok(acc)
    }

    let parts = (0..n_points.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut sum = crate::orbits::PairwiseSum::default();
            for idx in c * chunk..((c + 1) * chunk).min(n_points) {
                let x = grid_center(idx, resolution, dim);
                if spec.partition.cell_of(&x) != spec.word[0] {
                    continue;
                }
                let density = mu.evaluate(&x);
                if density == 0.0 {
                    continue;
                }
                sum.add(density * cell_volume * walk(t, kernel, &spec.partition, &spec.word[1..], &x, 1.0)?);
            }
            Ok(sum.total())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(parts))
}

/// Distribution of all positive-measure cell words of one length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WordTable {
    pub length: usize,
    pub mode: CylinderMode,
    /// `(cell word, measure)`, sorted lexicographically by word.
    pub words: Vec<(Vec<u32>, f64)>,
}

impl WordTable {
    pub fn total(&self) -> f64 {
        pairwise_sum(self.words.iter().map(|(_, p)| *p))
    }

    /// `-sum p log p` over the words.
    pub fn entropy(&self) -> f64 {
        pairwise_sum(
            self.words
                .iter()
                .filter(|(_, p)| *p > 0.0)
                .map(|(_, p)| -p * p.ln()),
        )
    }
}

fn too_many_words(count: usize) -> Error {
    Error::Resource {
        message: format!("{count} surviving cylinder words exceed the limit {MAX_SURVIVING_WORDS}"),
        max_depth: None,
    }
}

/// Measures of every cell word of length `1..=n_max` under `mu Q^{[n-1]}`.
pub fn word_distributions(
    mu: &GridDensity,
    kernel: &Kernel,
    t: &Correspondence,
    partition: &Partition,
    n_max: usize,
    opts: &CylinderOptions,
) -> Result<Vec<WordTable>> {
    kernel.check_supported(t)?;
    partition.validate(t.dim())?;
    if mu.dim() != t.dim() {
        return Err(Error::config("density dimension does not match the correspondence"));
    }
    if n_max == 0 {
        return Err(Error::config("word length must be at least 1"));
    }
    if n_max > opts.max_word {
        return Err(Error::Resource {
            message: format!("word length {n_max} exceeds the limit {}", opts.max_word),
            max_depth: Some(opts.max_word),
        });
    }
    let (mode, gens, cells) = resolve_mode(opts.mode, kernel, t, partition)?;
    match (gens, cells) {
        (Some(gens), Some(cells)) => {
            check_exact_inputs(mu, kernel)?;
            exact_distributions(mu, &gens, &cells, n_max)
        }
        _ => quadrature_distributions(mu, kernel, t, partition, n_max, opts.resolution, mode),
    }
}

fn exact_distributions(
    mu: &GridDensity,
    gens: &[(i128, Rational)],
    cells: &[(Rational, Rational)],
    n_max: usize,
) -> Result<Vec<WordTable>> {
    let k = gens.len() as i128;
    let mut nodes: Vec<(Vec<u32>, Vec<Piece>)> = cells
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            (
                vec![i as u32],
                vec![Piece {
                    lo: a,
                    hi: b,
                    slope: 1,
                    offset: Rational::zero(),
                }],
            )
        })
        .collect();
    let mut tables = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        if n > 1 {
            let children = nodes
                .par_iter()
                .map(|(word, pieces)| {
                    let mut out: Vec<(Vec<u32>, Vec<Piece>)> = Vec::new();
                    for &(p, c) in gens {
                        let mut by_cell: BTreeMap<usize, Vec<Piece>> = BTreeMap::new();
                        for (cell, piece) in advance(pieces, p, c, cells, None)? {
                            by_cell.entry(cell).or_default().push(piece);
                        }
                        for (cell, ps) in by_cell {
                            let mut w = word.clone();
                            w.push(cell as u32);
                            out.push((w, ps));
                        }
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?;
            let count: usize = children.iter().map(Vec::len).sum();
            if count > MAX_SURVIVING_WORDS {
                return Err(too_many_words(count));
            }
            nodes = children.into_iter().flatten().collect();
        }
        let masses = nodes
            .par_iter()
            .map(|(_, pieces)| Mass::of(mu, pieces))
            .collect::<Result<Vec<_>>>()?;
        let mut acc: BTreeMap<&[u32], Mass> = BTreeMap::new();
        for ((word, _), m) in nodes.iter().zip(masses) {
            let entry = acc.remove(word.as_slice());
            acc.insert(word, match entry {
                Some(prev) => prev.add(m)?,
                None => m,
            });
        }
        let denom = k.checked_pow(n as u32 - 1).ok_or_else(overflow)?;
        let words = acc
            .into_iter()
            .map(|(w, m)| Ok((w.to_vec(), m.scaled(denom)?.0)))
            .collect::<Result<Vec<_>>>()?;
        tables.push(WordTable {
            length: n,
            mode: CylinderMode::Exact,
            words,
        });
    }
    Ok(tables)
}

fn quadrature_distributions(
    mu: &GridDensity,
    kernel: &Kernel,
    t: &Correspondence,
    partition: &Partition,
    n_max: usize,
    resolution: usize,
    mode: CylinderMode,
) -> Result<Vec<WordTable>> {
    let dim = t.dim();
    let n_points = quadrature_points(dim, resolution)?;
    let cell_volume = 1.0 / n_points as f64;
    let chunk = n_points.div_ceil(QUADRATURE_CHUNKS);
    type Levels = Vec<BTreeMap<Vec<u32>, f64>>;

    #[allow(clippy::too_many_arguments)]
    fn walk(
        t: &Correspondence,
        kernel: &Kernel,
        partition: &Partition,
        x: &Point,
        word: &mut Vec<u32>,
        mass: f64,
        n_max: usize,
        levels: &mut Levels,
    ) -> Result<()> {
        *levels[word.len() - 1].entry(word.clone()).or_insert(0.0) += mass;
        if word.len() == n_max {
            return Ok(());
        }
        for j in 0..t.k() {
            let w = kernel.weight(j, x);
            if w == 0.0 {
                continue;
            }
            let y = t.generator(j).eval(x)?;
            word.push(partition.cell_of(&y) as u32);
            walk(t, kernel, partition, &y, word, mass * w, n_max, levels)?;
            word.pop();
        }
        Ok(())
    }

    let parts = (0..n_points.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut levels: Levels = vec![BTreeMap::new(); n_max];
            for idx in c * chunk..((c + 1) * chunk).min(n_points) {
                let x = grid_center(idx, resolution, dim);
                let mass = mu.evaluate(&x) * cell_volume;
                if mass == 0.0 {
                    continue;
                }
                let mut word = vec![partition.cell_of(&x) as u32];
                walk(t, kernel, partition, &x, &mut word, mass, n_max, &mut levels)?;
            }
            let count: usize = levels.iter().map(BTreeMap::len).sum();
            if count > MAX_SURVIVING_WORDS {
                return Err(too_many_words(count));
            }
            Ok(levels)
        })
        .collect::<Result<Vec<Levels>>>()?;
    let mut merged: Levels = vec![BTreeMap::new(); n_max];
    for levels in parts {
        for (dst, src) in merged.iter_mut().zip(levels) {
            for (w, m) in src {
                *dst.entry(w).or_insert(0.0) += m;
            }
        }
        let count: usize = merged.iter().map(BTreeMap::len).sum();
        if count > MAX_SURVIVING_WORDS {
            return Err(too_many_words(count));
        }
    }
    Ok(merged
        .into_iter()
        .enumerate()
        .map(|(i, level)| WordTable {
            length: i + 1,
            mode,
            words: level.into_iter().filter(|(_, p)| *p > 0.0).collect(),
        })
        .collect())
}

/// Where a simulated chain starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPoint {
    /// Drawn from Lebesgue measure.
    #[default]
    Lebesgue,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarkovSample {
    pub seed: u64,
    pub stream: u64,
    /// `(x_i, j_i)` with `x_{i+1} = f_{j_i}(x_i)`.
    pub trajectory: Vec<(Point, usize)>,
}

impl MarkovSample {
    /// First coordinates of the visited points.
    pub fn circle_points(&self) -> Vec<f64> {
        self.trajectory.iter().map(|(x, _)| x.coords()[0]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkovOptions {
    pub steps: usize,
    pub burnin: usize,
    pub seed: u64,
}

impl Default for MarkovOptions {
    fn default() -> Self {
        MarkovOptions {
            steps: 100_000,
            burnin: 0,
            seed: DEFAULT_SEED,
        }
    }
}

const TWO_64: f64 = 18_446_744_073_709_551_616.0;

/// Integer-linear generator in 64-bit fixed point: `K -> A K + C (mod 2^64)` per coordinate.
#[derive(Clone, Debug)]
struct FixedLinear {
    matrix: Vec<Vec<i64>>,
    shift: Vec<u64>,
}

fn to_fixed(v: f64) -> u64 {
    let scaled = (wrap(v) * TWO_64).round();
    if scaled >= TWO_64 {
        0
    } else {
        scaled as u64
    }
}

fn from_fixed(k: u64) -> f64 {
    wrap(k as f64 / TWO_64)
}

fn fixed_linear(g: &GeneratorMap) -> Option<FixedLinear> {
    match g.kind() {
        MapKind::CircleLinear { p, c } => Some(FixedLinear {
            matrix: vec![vec![*p as i64]],
            shift: vec![to_fixed(*c)],
        }),
        MapKind::TorusLinear { a, c } => Some(FixedLinear {
            matrix: a.clone(),
            shift: c.iter().map(|&v| to_fixed(v)).collect(),
        }),
        MapKind::CirclePerturbed { .. } => None,
    }
}

/// State of a simulated orbit.
///
/// `Fixed` holds `x = (K + r) / 2^64` where the tail `r` is either zero or an unobserved
/// uniform variable. With a random tail the carry `floor(A r)` is drawn afresh each step,
/// which reproduces the orbit of a Lebesgue-random point instead of collapsing to a
/// dyadic rational after 64 steps.
#[derive(Clone, Debug)]
enum ChainState {
    Rational(Rational),
    Fixed { words: Vec<u64>, random_tail: bool },
    Float(Point),
}

struct Chain<'a> {
    t: &'a Correspondence,
    linear: Option<Vec<FixedLinear>>,
    rational: Option<Vec<(i128, Rational)>>,
    state: ChainState,
}

impl<'a> Chain<'a> {
    fn new(t: &'a Correspondence, start: &StartPoint, rng: &mut ChaCha8Rng) -> Result<Self> {
        let linear: Option<Vec<FixedLinear>> = t.generators().iter().map(fixed_linear).collect();
        let rational = rational_affine(t);
        let state = match start {
            StartPoint::Lebesgue => match &linear {
                Some(_) => ChainState::Fixed {
                    words: (0..t.dim()).map(|_| rng.next_u64()).collect(),
                    random_tail: true,
                },
                None => ChainState::Float(Point::new(
                    &(0..t.dim()).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
                )),
            },
            StartPoint::Fixed(coords) => {
                if coords.len() != t.dim() || coords.iter().any(|c| !c.is_finite()) {
                    return Err(Error::config(format!(
                        "start point needs {} finite coordinates",
                        t.dim()
                    )));
                }
                let x0 = coords.iter().map(|&c| wrap(c)).collect::<Vec<_>>();
                match (&rational, &linear) {
                    (Some(_), _) if exact_rational(x0[0]).is_some() => {
                        ChainState::Rational(exact_rational(x0[0]).unwrap())
                    }
                    (_, Some(_)) => ChainState::Fixed {
                        words: x0.iter().map(|&c| to_fixed(c)).collect(),
                        random_tail: false,
                    },
                    _ => ChainState::Float(Point::new(&x0)),
                }
            }
        };
        Ok(Chain {
            t,
            linear,
            rational,
            state,
        })
    }

    fn point(&self) -> Point {
        match &self.state {
            ChainState::Rational(r) => Point::circle(rational_to_f64(r)),
            ChainState::Fixed { words, .. } => {
                Point::new(&words.iter().map(|&k| from_fixed(k)).collect::<Vec<_>>())
            }
            ChainState::Float(p) => p.clone(),
        }
    }

    fn step(&mut self, j: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        match &mut self.state {
            ChainState::Rational(r) => {
                let (p, c) = self.rational.as_ref().unwrap()[j];
                let y = ck(ck(Rational::from_integer(p).checked_mul(r))?.checked_add(&c))?;
                *r = y - y.floor();
            }
            ChainState::Fixed { words, random_tail } => {
                let map = &self.linear.as_ref().unwrap()[j];
                let tail: Vec<f64> = if *random_tail {
                    (0..words.len()).map(|_| rng.random::<f64>()).collect()
                } else {
                    vec![]
                };
                let next = map
                    .matrix
                    .iter()
                    .zip(&map.shift)
                    .map(|(row, &shift)| {
                        let mut acc = shift;
                        for (&a, &k) in row.iter().zip(words.iter()) {
                            acc = acc.wrapping_add((a as u64).wrapping_mul(k));
                        }
                        if *random_tail {
                            let carry: f64 = row.iter().zip(&tail).map(|(&a, &r)| a as f64 * r).sum();
                            acc = acc.wrapping_add(carry.floor() as i64 as u64);
                        }
                        acc
                    })
                    .collect();
                *words = next;
            }
            ChainState::Float(p) => {
                *p = self.t.generator(j).eval(p)?;
            }
        }
        Ok(())
    }
}

fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn run_chain(
    t: &Correspondence,
    start: &StartPoint,
    opts: &MarkovOptions,
    stream: u64,
    mut choose: impl FnMut(usize, &Point, &mut ChaCha8Rng) -> Result<usize>,
) -> Result<MarkovSample> {
    if opts.steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    let mut rng = chain_rng(opts.seed, stream);
    let mut chain = Chain::new(t, start, &mut rng)?;
    let mut trajectory = Vec::with_capacity(opts.steps);
    for i in 0..opts.burnin + opts.steps {
        let x = chain.point();
        let j = choose(i, &x, &mut rng)?;
        if j >= t.k() {
            return Err(Error::config(format!("symbol {j} out of range for {} generators", t.k())));
        }
        chain.step(j, &mut rng)?;
        if i >= opts.burnin {
            trajectory.push((x, j));
        }
    }
    Ok(MarkovSample {
        seed: opts.seed,
        stream,
        trajectory,
    })
}

/// Simulates the chain `x_{i+1} = f_{j_i}(x_i)` with `j_i` drawn from `P_j(x_i)`.
pub fn sample_markov(
    t: &Correspondence,
    kernel: &Kernel,
    x0: &StartPoint,
    steps: usize,
    seed: u64,
) -> Result<MarkovSample> {
    sample_markov_with(
        t,
        kernel,
        x0,
        &MarkovOptions {
            steps,
            burnin: 0,
            seed,
        },
        0,
    )
}

/// One trajectory on PRNG stream `stream` of `opts.seed`.
pub fn sample_markov_with(
    t: &Correspondence,
    kernel: &Kernel,
    x0: &StartPoint,
    opts: &MarkovOptions,
    stream: u64,
) -> Result<MarkovSample> {
    kernel.check_supported(t)?;
    run_chain(t, x0, opts, stream, |_, x, rng| {
        Ok(kernel.draw(x, rng.random::<f64>()))
    })
}

/// Independent trajectories on streams `0..count`.
pub fn sample_trajectories(
    t: &Correspondence,
    kernel: &Kernel,
    x0: &StartPoint,
    opts: &MarkovOptions,
    count: usize,
) -> Result<Vec<MarkovSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|s| sample_markov_with(t, kernel, x0, opts, s))
        .collect()
}

/// An infinite symbol sequence, read from position `offset` on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SymbolStream {
    /// `symbols` repeated forever.
    Periodic {
        symbols: Vec<usize>,
        #[serde(default)]
        offset: usize,
    },
    /// Independent uniform symbols over `0..k`; symbol `i` is a pure function of
    /// `(seed, i)`.
    Iid {
        k: usize,
        seed: u64,
        #[serde(default)]
        offset: u64,
    },
}

impl SymbolStream {
    pub fn periodic(symbols: Vec<usize>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::config("periodic symbol stream needs at least one symbol"));
        }
        Ok(SymbolStream::Periodic { symbols, offset: 0 })
    }

    pub fn iid(k: usize, seed: u64) -> Self {
        SymbolStream::Iid { k, seed, offset: 0 }
    }

    pub fn symbol(&self, i: usize) -> usize {
        match self {
            SymbolStream::Periodic { symbols, offset } => symbols[(offset + i) % symbols.len()],
            SymbolStream::Iid { k, seed, offset } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_word_pos(2 * (*offset as u128 + i as u128));
                ((rng.next_u64() as u128 * *k as u128) >> 64) as usize
            }
        }
    }

    pub fn head(&self) -> usize {
        self.symbol(0)
    }

    pub fn prefix(&self, n: usize) -> Vec<usize> {
        (0..n).map(|i| self.symbol(i)).collect()
    }

    /// Drops the first symbol.
    pub fn shifted(&self) -> Self {
        match self {
            SymbolStream::Periodic { symbols, offset } => SymbolStream::Periodic {
                symbols: symbols.clone(),
                offset: (offset + 1) % symbols.len(),
            },
            SymbolStream::Iid { k, seed, offset } => SymbolStream::Iid {
                k: *k,
                seed: *seed,
                offset: offset + 1,
            },
        }
    }
}

/// `(s, x) -> (shift(s), f_{s_0}(x))`.
pub fn skew_product_step(
    symbols: &SymbolStream,
    x: &Point,
    t: &Correspondence,
) -> Result<(SymbolStream, Point)> {
    let j = symbols.head();
    if j >= t.k() {
        return Err(Error::config(format!("symbol {j} out of range for {} generators", t.k())));
    }
    Ok((symbols.shifted(), t.generator(j).eval(x)?))
}

/// Forward orbit `(x, f_{s_0} x, f_{s_1} f_{s_0} x, ...)` of length `depth + 1` picked out by
/// the symbol stream.
pub fn orbit_projection(
    symbols: &SymbolStream,
    x: &Point,
    t: &Correspondence,
    depth: usize,
) -> Result<Vec<Point>> {
    let mut out = Vec::with_capacity(depth + 1);
    out.push(x.clone());
    let mut s = symbols.clone();
    for _ in 0..depth {
        let (next_s, next_x) = skew_product_step(&s, out.last().unwrap(), t)?;
        out.push(next_x);
        s = next_s;
    }
    Ok(out)
}

/// Skew-product orbit from `x0` driven by `symbols`, simulated with the same state
/// representation as the Markov chain.
pub fn sample_skew_product(
    t: &Correspondence,
    symbols: &SymbolStream,
    x0: &StartPoint,
    opts: &MarkovOptions,
) -> Result<MarkovSample> {
    run_chain(t, x0, opts, 0, |i, _, _| Ok(symbols.symbol(i)))
}

/// Two-sided Kolmogorov-Smirnov distance between the empirical distribution of `samples`
/// and a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

pub fn ks_uniform(samples: &[f64]) -> f64 {
    ks_statistic(samples, |x| x.clamp(0.0, 1.0))
}

/// `1.63 / sqrt(n)`, the asymptotic 1% critical value.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Least common multiple of the shift denominators, for diagnostics.
pub fn shift_denominator(t: &Correspondence) -> Option<i128> {
    rational_affine(t).map(|g| g.iter().fold(1i128, |acc, (_, c)| acc.lcm(c.denom())))
}
