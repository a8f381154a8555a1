//! Expanding generator maps on the circle and the flat torus.
//!
//! Points live in `[0,1)^m` with every coordinate reduced mod 1. The circle is
//! the case `m = 1`. Distances use the flat metric, taking the max over
//! coordinates of the wrapped coordinate distance.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Residual bound for circle preimages.
pub const TOL_ROOT_CIRCLE: f64 = 1e-12;
/// Residual bound for torus preimages.
pub const TOL_ROOT_TORUS: f64 = 1e-10;

const MAX_ROOT_ITER: usize = 200;

pub type Coords = SmallVec<[f64; 2]>;

/// Reduces `x` into `[0,1)`. Exact `1.0` (or anything rounding to it) maps to `0.0`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

#[inline]
pub fn circle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 1.0;
    d.min(1.0 - d)
}

/// Point of `[0,1)^m`, serialized as its coordinate list.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    coords: Coords,
}

impl Serialize for Point {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.coords.iter())
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Ok(Point::new(&v))
    }
}

impl Point {
    pub fn new(coords: &[f64]) -> Self {
        Point {
            coords: coords.iter().map(|&c| wrap(c)).collect(),
        }
    }

    pub fn circle(x: f64) -> Self {
        let mut coords = Coords::new();
        coords.push(wrap(x));
        Point { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// First coordinate; the whole point on the circle.
    pub fn x(&self) -> f64 {
        self.coords[0]
    }

    pub fn distance(&self, other: &Point) -> f64 {
        self.coords
            .iter()
            .zip(other.coords.iter())
            .map(|(&a, &b)| circle_distance(a, b))
            .fold(0.0, f64::max)
    }
}

/// Serialized form of a generator, as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapKind {
    /// `x -> p x + c (mod 1)`
    CircleLinear { p: u32, c: f64 },
    /// `x -> p x + c + (eps / 2pi) sin(2 pi x) (mod 1)`
    CirclePerturbed { p: u32, c: f64, eps: f64 },
    /// `x -> A x + c (mod 1)` coordinatewise.
    TorusLinear {
        #[serde(rename = "A")]
        a: Vec<Vec<i64>>,
        c: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct TorusData {
    dim: usize,
    matrix: Vec<i64>,
    inverse: Vec<f64>,
    /// Integer offset ranges `q_i` such that `A x - t = q` can have a solution in the unit cube.
    offset_ranges: Vec<(i64, i64)>,
}

/// One expanding generator `f_j`. Immutable once built.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MapKind", into = "MapKind")]
pub struct GeneratorMap {
    kind: MapKind,
    dim: usize,
    degree: usize,
    min_rate: f64,
    lipschitz: f64,
    max_jacobian: f64,
    torus: Option<TorusData>,
}

impl From<GeneratorMap> for MapKind {
    fn from(f: GeneratorMap) -> Self {
        f.kind
    }
}

impl TryFrom<MapKind> for GeneratorMap {
    type Error = Error;

    fn try_from(kind: MapKind) -> Result<Self> {
        GeneratorMap::new(kind)
    }
}

impl PartialEq for GeneratorMap {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl GeneratorMap {
    pub fn new(kind: MapKind) -> Result<Self> {
        match &kind {
            MapKind::CircleLinear { p, c } => {
                check_multiplier(*p)?;
                if !(c.is_finite() && (0.0..1.0).contains(c)) {
                    return Err(Error::config(format!("circle_linear shift c={c} must lie in [0,1)")));
                }
                let p = *p as f64;
                Ok(GeneratorMap {
                    dim: 1,
                    degree: p as usize,
                    min_rate: p,
                    lipschitz: p,
                    max_jacobian: p,
                    torus: None,
                    kind,
                })
            }
            MapKind::CirclePerturbed { p, c, eps } => {
                check_multiplier(*p)?;
                if !c.is_finite() || !eps.is_finite() {
                    return Err(Error::config("circle_perturbed parameters must be finite"));
                }
                let pf = *p as f64;
                if eps.abs() >= pf - 1.0 {
                    return Err(Error::config(format!(
                        "circle_perturbed with p={p} needs |eps| < {} to stay expanding, got {eps}",
                        pf - 1.0
                    )));
                }
                Ok(GeneratorMap {
                    dim: 1,
                    degree: *p as usize,
                    min_rate: pf - eps.abs(),
                    lipschitz: pf + eps.abs(),
                    max_jacobian: pf + eps.abs(),
                    torus: None,
                    kind,
                })
            }
            MapKind::TorusLinear { a, c } => {
                let torus = TorusData::new(a, c)?;
                let det = integer_det(&torus.matrix, torus.dim).unsigned_abs() as usize;
                let inv_norm = row_sum_norm(&torus.inverse, torus.dim);
                let fwd_norm = row_sum_norm(
                    &torus.matrix.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    torus.dim,
                );
                Ok(GeneratorMap {
                    dim: torus.dim,
                    degree: det,
                    min_rate: 1.0 / inv_norm,
                    lipschitz: fwd_norm,
                    max_jacobian: det as f64,
                    torus: Some(torus),
                    kind,
                })
            }
        }
    }

    pub fn circle_linear(p: u32, c: f64) -> Result<Self> {
        Self::new(MapKind::CircleLinear { p, c })
    }

    pub fn circle_perturbed(p: u32, c: f64, eps: f64) -> Result<Self> {
        Self::new(MapKind::CirclePerturbed { p, c, eps })
    }

    pub fn torus_linear(a: Vec<Vec<i64>>, c: Vec<f64>) -> Result<Self> {
        Self::new(MapKind::TorusLinear { a, c })
    }

    pub fn kind(&self) -> &MapKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of preimages of every point.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Infimum of the expansion rate `|f'|` in the flat metric.
    pub fn min_rate(&self) -> f64 {
        self.min_rate
    }

    /// Lipschitz constant of the lift in the flat metric.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Supremum of the Jacobian.
    pub fn max_jacobian(&self) -> f64 {
        self.max_jacobian
    }

    /// True when the Jacobian does not depend on the point.
    pub fn has_constant_jacobian(&self) -> bool {
        !matches!(self.kind, MapKind::CirclePerturbed { eps, .. } if eps != 0.0)
    }

    pub fn is_circle(&self) -> bool {
        self.dim == 1
    }

    /// Integer multiplier and shift for affine circle maps.
    pub fn affine_circle(&self) -> Option<(u32, f64)> {
        match self.kind {
            MapKind::CircleLinear { p, c } => Some((p, c)),
            MapKind::CirclePerturbed { p, c, eps: 0.0 } => Some((p, wrap(c))),
            MapKind::TorusLinear { ref a, ref c } if a.len() == 1 && a[0][0] > 0 => Some((a[0][0] as u32, c[0])),
            _ => None,
        }
    }

    fn check_dim(&self, x: &Point) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::config(format!(
                "point of dimension {} passed to a generator of dimension {}",
                x.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &Point) -> Result<Point> {
        self.check_dim(x)?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &Point) -> Point {
        match &self.kind {
            MapKind::CircleLinear { .. } | MapKind::CirclePerturbed { .. } => {
                Point::circle(self.lift(x.x()))
            }
            MapKind::TorusLinear { c, .. } => {
                let m = self.dim;
                let a = &self.torus.as_ref().expect("torus data").matrix;
                let mut out = Coords::with_capacity(m);
                for i in 0..m {
                    let mut s = c[i];
                    for j in 0..m {
                        s += a[i * m + j] as f64 * x.coords[j];
                    }
                    out.push(wrap(s));
                }
                Point { coords: out }
            }
        }
    }

    /// Lift `F: R -> R` of a circle generator; `F(x + 1) = F(x) + p`.
    pub fn lift(&self, x: f64) -> f64 {
        match self.kind {
            MapKind::CircleLinear { p, c } => p as f64 * x + c,
            MapKind::CirclePerturbed { p, c, eps } => p as f64 * x + c + eps / TAU * (TAU * x).sin(),
            MapKind::TorusLinear { .. } => panic!("lift is only defined for circle generators"),
        }
    }

    /// Jacobian `|det Df(x)|`; the derivative of the lift on the circle.
    pub fn jacobian(&self, x: &Point) -> f64 {
        match self.kind {
            MapKind::CircleLinear { p, .. } => p as f64,
            MapKind::CirclePerturbed { p, eps, .. } => p as f64 + eps * (TAU * x.x()).cos(),
            MapKind::TorusLinear { .. } => self.max_jacobian,
        }
    }

    /// Solves `F(x) = t` for the circle lift. Any real `t` is admissible.
    pub fn lift_inverse(&self, t: f64) -> Result<f64> {
        match self.kind {
            MapKind::CircleLinear { p, c } => Ok((t - c) / p as f64),
            MapKind::CirclePerturbed { p, c, eps } => {
                let pf = p as f64;
                let slack = eps.abs() / TAU;
                let lo = (t - c - slack) / pf;
                let hi = (t - c + slack) / pf;
                self.solve_monotone(t, lo, hi, 0)
            }
            MapKind::TorusLinear { .. } => {
                Err(Error::config("lift_inverse is only defined for circle generators"))
            }
        }
    }

    /// All `degree()` preimages of `y`.
    pub fn inverse_branches(&self, y: &Point) -> Result<Vec<Point>> {
        self.check_dim(y)?;
        let mut out = Vec::with_capacity(self.degree);
        self.inverse_branches_into(y, &mut out)?;
        Ok(out)
    }

    /// Appends the preimages of `y` to `out`, in branch order.
    pub fn inverse_branches_into(&self, y: &Point, out: &mut Vec<Point>) -> Result<()> {
        match self.kind {
            MapKind::CircleLinear { p, c } => {
                let t = wrap(y.x() - c);
                let pf = p as f64;
                for i in 0..p {
                    out.push(Point::circle((t + i as f64) / pf));
                }
                Ok(())
            }
            MapKind::CirclePerturbed { p, c, .. } => {
                // F(0) = c and F(1) = c + p, so each lift level in [c, c + p) has one root in [0,1).
                let yv = y.x();
                let base = yv + (c - yv).ceil();
                for i in 0..p as usize {
                    let target = base + i as f64;
                    let root = self.solve_monotone(target, 0.0, 1.0, i)?;
                    out.push(Point::circle(root));
                }
                Ok(())
            }
            MapKind::TorusLinear { .. } => self.torus_preimages(y, out),
        }
    }

    /// Safeguarded Newton on a bracket where the circle lift is increasing,
    /// followed by two Newton polish steps.
    fn solve_monotone(&self, target: f64, lo: f64, hi: f64, branch: usize) -> Result<f64> {
        let (p, eps) = match self.kind {
            MapKind::CirclePerturbed { p, eps, .. } => (p as f64, eps),
            _ => unreachable!("monotone solve only used for perturbed maps"),
        };
        let deriv = |x: f64| p + eps * (TAU * x).cos();
        let (mut lo, mut hi) = (lo, hi);
        if self.lift(lo) > target || self.lift(hi) < target {
            return Err(Error::Numeric {
                branch,
                message: format!("target {target} not bracketed by [{lo}, {hi}]"),
            });
        }
        let mut x = 0.5 * (lo + hi);
        let mut converged = false;
        for _ in 0..MAX_ROOT_ITER {
            let fx = self.lift(x) - target;
            if fx == 0.0 {
                converged = true;
                break;
            }
            if fx < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = x - fx / deriv(x);
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            let step = (next - x).abs();
            x = next;
            if hi - lo <= TOL_ROOT_CIRCLE || step <= 1e-16 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric {
                branch,
                message: format!("root finder did not converge for target {target}"),
            });
        }
        for _ in 0..2 {
            let fx = self.lift(x) - target;
            let polished = x - fx / deriv(x);
            if polished.is_finite() && polished >= lo && polished <= hi {
                x = polished;
            }
        }
        Ok(x)
    }

    fn torus_preimages(&self, y: &Point, out: &mut Vec<Point>) -> Result<()> {
        let data = self.torus.as_ref().expect("torus data");
        let MapKind::TorusLinear { c, .. } = &self.kind else {
            unreachable!()
        };
        let m = data.dim;
        let t: Vec<f64> = (0..m).map(|i| wrap(y.coords[i] - c[i])).collect();
        let start = out.len();
        let mut q: Vec<i64> = data.offset_ranges.iter().map(|r| r.0).collect();
        let mut rhs = vec![0.0; m];
        loop {
            for i in 0..m {
                rhs[i] = t[i] + q[i] as f64;
            }
            let mut inside = true;
            let mut coords = Coords::with_capacity(m);
            for i in 0..m {
                let v: f64 = (0..m).map(|j| data.inverse[i * m + j] * rhs[j]).sum();
                if !(-1e-9..1.0 + 1e-9).contains(&v) {
                    inside = false;
                    break;
                }
                coords.push(wrap(v.max(0.0)));
            }
            if inside {
                let cand = Point { coords };
                if !out[start..]
                    .iter()
                    .any(|p| p.distance(&cand) <= TOL_ROOT_TORUS)
                {
                    out.push(cand);
                }
            }
            // odometer over the offset box
            let mut i = 0;
            loop {
                if i == m {
                    let found = out.len() - start;
                    if found != self.degree {
                        return Err(Error::Numeric {
                            branch: found,
                            message: format!(
                                "torus preimage scan found {found} points, expected {}",
                                self.degree
                            ),
                        });
                    }
                    return Ok(());
                }
                if q[i] < data.offset_ranges[i].1 {
                    q[i] += 1;
                    break;
                }
                q[i] = data.offset_ranges[i].0;
                i += 1;
            }
        }
    }

    /// Midpoint quadrature of `y -> sum over f^{-1}(y) of 1/Jac`, which integrates to the
    /// total volume 1. `resolution` is the total number of sample points.
    pub fn degree_identity_quadrature(&self, resolution: usize) -> Result<f64> {
        let per_dim = per_dim_resolution(resolution, self.dim);
        let total = per_dim.pow(self.dim as u32);
        let mut buf = Vec::with_capacity(self.degree);
        let mut acc = 0.0;
        for idx in 0..total {
            let y = grid_center(idx, per_dim, self.dim);
            buf.clear();
            self.inverse_branches_into(&y, &mut buf)?;
            acc += buf.iter().map(|x| 1.0 / self.jacobian(x)).sum::<f64>();
        }
        Ok(acc / total as f64)
    }
}

fn check_multiplier(p: u32) -> Result<()> {
    if p < 2 {
        return Err(Error::config(format!("multiplier p={p} must be at least 2")));
    }
    Ok(())
}

impl TorusData {
    fn new(a: &[Vec<i64>], c: &[f64]) -> Result<Self> {
        let m = a.len();
        if m == 0 || a.iter().any(|row| row.len() != m) {
            return Err(Error::config("torus_linear matrix A must be square and non-empty"));
        }
        if c.len() != m || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("torus_linear shift c must have {m} finite entries")));
        }
        let matrix: Vec<i64> = a.iter().flatten().copied().collect();
        if integer_det(&matrix, m) == 0 {
            return Err(Error::config("torus_linear matrix A is singular"));
        }
        let fm = DMatrix::from_row_slice(m, m, &matrix.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let eig = fm.clone().complex_eigenvalues();
        if let Some(small) = eig.iter().find(|z| z.norm() <= 1.0 + 1e-12) {
            return Err(Error::config(format!(
                "torus_linear matrix has eigenvalue {small} of modulus <= 1; not expanding"
            )));
        }
        let inv = fm
            .try_inverse()
            .ok_or_else(|| Error::config("torus_linear matrix A is not invertible"))?;
        let mut inverse = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                inverse.push(inv[(i, j)]);
            }
        }
        let offset_ranges = (0..m)
            .map(|i| {
                let row = &matrix[i * m..(i + 1) * m];
                let lo: i64 = row.iter().filter(|&&v| v < 0).sum();
                let hi: i64 = row.iter().filter(|&&v| v > 0).sum();
                (lo - 1, hi)
            })
            .collect();
        Ok(TorusData {
            dim: m,
            matrix,
            inverse,
            offset_ranges,
        })
    }
}

/// Exact integer determinant by fraction-free (Bareiss) elimination.
fn integer_det(matrix: &[i64], m: usize) -> i64 {
    let mut a: Vec<i128> = matrix.iter().map(|&v| v as i128).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..m {
        if a[k * m + k] == 0 {
            match (k + 1..m).find(|&r| a[r * m + k] != 0) {
                Some(r) => {
                    for j in 0..m {
                        a.swap(k * m + j, r * m + j);
                    }
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..m {
            for j in k + 1..m {
                a[i * m + j] = (a[i * m + j] * a[k * m + k] - a[i * m + k] * a[k * m + j]) / prev;
            }
        }
        prev = a[k * m + k];
    }
    (sign * a[m * m - 1]) as i64
}

fn row_sum_norm(matrix: &[f64], m: usize) -> f64 {
    (0..m)
        .map(|i| matrix[i * m..(i + 1) * m].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Per-dimension count whose m-th power is closest to `total` (at least 1).
pub fn per_dim_resolution(total: usize, dim: usize) -> usize {
    if dim == 1 {
        return total.max(1);
    }
    ((total as f64).powf(1.0 / dim as f64).round() as usize).max(1)
}

/// Center of cell `idx` (row-major, last coordinate fastest) in a uniform grid.
pub fn grid_center(idx: usize, per_dim: usize, dim: usize) -> Point {
    let mut coords: Coords = SmallVec::from_elem(0.0, dim);
    let mut rest = idx;
    for d in (0..dim).rev() {
        coords[d] = ((rest % per_dim) as f64 + 0.5) / per_dim as f64;
        rest /= per_dim;
    }
    Point { coords }
}

/// Lower-left corner of cell `idx` in a uniform grid.
pub fn grid_corner(idx: usize, per_dim: usize, dim: usize) -> Point {
    let mut coords: Coords = SmallVec::from_elem(0.0, dim);
    let mut rest = idx;
    for d in (0..dim).rev() {
        coords[d] = (rest % per_dim) as f64 / per_dim as f64;
        rest /= per_dim;
    }
    Point { coords }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shipped() -> Vec<GeneratorMap> {
        vec![
            GeneratorMap::circle_linear(2, 0.0).unwrap(),
            GeneratorMap::circle_linear(2, 0.5).unwrap(),
            GeneratorMap::circle_linear(3, 0.1).unwrap(),
            GeneratorMap::circle_perturbed(2, 0.0, 0.3).unwrap(),
            GeneratorMap::circle_perturbed(2, 0.5, 0.3).unwrap(),
            GeneratorMap::circle_perturbed(3, 0.2, -1.5).unwrap(),
            GeneratorMap::torus_linear(vec![vec![2, 0], vec![0, 3]], vec![0.0, 0.0]).unwrap(),
            GeneratorMap::torus_linear(vec![vec![3, 1], vec![1, 2]], vec![0.25, 0.5]).unwrap(),
        ]
    }

    #[test]
    fn eval_examples() {
        let f = GeneratorMap::circle_linear(2, 0.0).unwrap();
        assert!((f.eval(&Point::circle(0.3)).unwrap().x() - 0.6).abs() < 1e-15);
        let f = GeneratorMap::circle_linear(2, 0.5).unwrap();
        assert!((f.eval(&Point::circle(0.8)).unwrap().x() - 0.1).abs() < 1e-15);
        let f = GeneratorMap::circle_perturbed(2, 0.0, 0.5).unwrap();
        let y = f.eval(&Point::circle(0.25)).unwrap().x();
        assert!((y - (0.5 + 0.5 / TAU)).abs() < 1e-15);
        assert!((y - 0.57958).abs() < 1e-5);
    }

    #[test]
    fn eval_rejects_dimension_mismatch() {
        let f = GeneratorMap::circle_linear(2, 0.0).unwrap();
        assert!(matches!(f.eval(&Point::new(&[0.1, 0.2])), Err(Error::Config(_))));
    }

    #[test]
    fn wrap_maps_one_to_zero() {
        assert_eq!(wrap(1.0), 0.0);
        assert_eq!(wrap(-1e-300), 0.0);
        assert_eq!(wrap(2.25), 0.25);
        assert_eq!(Point::circle(1.0).x(), 0.0);
    }

    #[test]
    fn jacobian_examples() {
        let f = GeneratorMap::circle_linear(3, 0.1).unwrap();
        for x in [0.0, 0.3, 0.99] {
            assert_eq!(f.jacobian(&Point::circle(x)), 3.0);
        }
        let f = GeneratorMap::circle_perturbed(2, 0.0, 0.5).unwrap();
        assert_eq!(f.jacobian(&Point::circle(0.0)), 2.5);
        let f = GeneratorMap::torus_linear(vec![vec![2, 0], vec![0, 3]], vec![0.0, 0.0]).unwrap();
        assert_eq!(f.jacobian(&Point::new(&[0.4, 0.7])), 6.0);
        assert_eq!(f.degree(), 6);
    }

    #[test]
    fn inverse_examples() {
        let f = GeneratorMap::circle_linear(2, 0.0).unwrap();
        let xs: Vec<f64> = f
            .inverse_branches(&Point::circle(0.5))
            .unwrap()
            .iter()
            .map(Point::x)
            .collect();
        assert_eq!(xs, vec![0.25, 0.75]);

        let f = GeneratorMap::torus_linear(vec![vec![2, 0], vec![0, 3]], vec![0.0, 0.0]).unwrap();
        let mut got: Vec<(f64, f64)> = f
            .inverse_branches(&Point::new(&[0.0, 0.0]))
            .unwrap()
            .iter()
            .map(|p| (p.coords()[0], p.coords()[1]))
            .collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = vec![];
        for a in [0.0, 0.5] {
            for b in [0.0, 1.0 / 3.0, 2.0 / 3.0] {
                want.push((a, b));
            }
        }
        assert_eq!(got.len(), 6);
        for (g, w) in got.iter().zip(&want) {
            assert!((g.0 - w.0).abs() < 1e-12 && (g.1 - w.1).abs() < 1e-12, "{g:?} vs {w:?}");
        }
    }

    /// Plain bisection on each monotone branch interval of the lift.
    fn bisection_oracle(p: u32, c: f64, eps: f64, y: f64) -> Vec<f64> {
        let lift = |x: f64| p as f64 * x + c + eps / TAU * (TAU * x).sin();
        let mut roots = vec![];
        for q in -2..(p as i64 + 2) {
            let target = y + q as f64;
            if target < lift(0.0) || target >= lift(1.0) {
                continue;
            }
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if lift(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        roots
    }

    #[test]
    fn perturbed_inverse_matches_bisection() {
        let f = GeneratorMap::circle_perturbed(2, 0.0, 0.5).unwrap();
        let got = f.inverse_branches(&Point::circle(0.5)).unwrap();
        let want = bisection_oracle(2, 0.0, 0.5, 0.5);
        assert_eq!(got.len(), 2);
        assert_eq!(want.len(), 2);
        for (g, w) in got.iter().zip(&want) {
            assert!((g.x() - w).abs() < 1e-12);
            assert!(circle_distance(f.eval(g).unwrap().x(), 0.5) < 1e-12);
        }
    }

    #[test]
    fn round_trip_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for f in shipped() {
            let tol = if f.is_circle() { TOL_ROOT_CIRCLE } else { TOL_ROOT_TORUS };
            for i in 0..1000 {
                let y = if f.is_circle() {
                    Point::circle(i as f64 / 1000.0)
                } else {
                    Point::new(&[i as f64 / 1000.0, rng.random::<f64>()])
                };
                let xs = f.inverse_branches(&y).unwrap();
                assert_eq!(xs.len(), f.degree());
                for (a, x) in xs.iter().enumerate() {
                    assert!(f.eval(x).unwrap().distance(&y) <= tol, "{:?} at {y:?}", f.kind());
                    for z in &xs[a + 1..] {
                        assert!(x.distance(z) > tol);
                    }
                }
            }
        }
    }

    #[test]
    fn expansion_on_local_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for f in shipped() {
            let eta = 0.1 / f.lipschitz();
            for _ in 0..2000 {
                let x: Vec<f64> = (0..f.dim()).map(|_| rng.random()).collect();
                let y: Vec<f64> = x.iter().map(|v| v + eta * (2.0 * rng.random::<f64>() - 1.0)).collect();
                let (x, y) = (Point::new(&x), Point::new(&y));
                let d = x.distance(&y);
                let d1 = f.eval(&x).unwrap().distance(&f.eval(&y).unwrap());
                assert!(d1 >= f.min_rate() * d * (1.0 - 1e-9) - 1e-15, "{:?}", f.kind());
            }
        }
    }

    #[test]
    fn degree_identity_for_shipped_generators() {
        for f in shipped() {
            let v = f.degree_identity_quadrature(1 << 14).unwrap();
            assert!((v - 1.0).abs() < 1e-6, "{:?}: {v}", f.kind());
        }
    }

    #[test]
    fn construction_rejects_non_expanding() {
        assert!(GeneratorMap::circle_linear(1, 0.0).is_err());
        assert!(GeneratorMap::circle_linear(2, 1.5).is_err());
        assert!(GeneratorMap::circle_perturbed(2, 0.0, 1.0).is_err());
        assert!(GeneratorMap::torus_linear(vec![vec![2, 1], vec![1, 1]], vec![0.0, 0.0]).is_err());
        assert!(GeneratorMap::torus_linear(vec![vec![2, 4], vec![1, 2]], vec![0.0, 0.0]).is_err());
        assert!(GeneratorMap::torus_linear(vec![vec![2, 0]], vec![0.0]).is_err());
    }

    #[test]
    fn integer_det_matches_cofactor() {
        assert_eq!(integer_det(&[2, 0, 0, 3], 2), 6);
        assert_eq!(integer_det(&[0, 1, 1, 0], 2), -1);
        assert_eq!(integer_det(&[2, 1, 0, 0, 3, 1, 1, 0, 2], 3), 13);
    }

    #[test]
    fn config_fragments_parse() {
        let f: GeneratorMap = serde_json::from_str(r#"{"kind": "circle_linear", "p": 2, "c": 0.5}"#).unwrap();
        assert_eq!(f.degree(), 2);
        let f: GeneratorMap =
            serde_json::from_str(r#"{"kind": "circle_perturbed", "p": 2, "c": 0.0, "eps": 0.3}"#).unwrap();
        assert!((f.min_rate() - 1.7).abs() < 1e-15);
        let f: GeneratorMap =
            serde_json::from_str(r#"{"kind": "torus_linear", "A": [[2,0],[0,3]], "c": [0,0]}"#).unwrap();
        assert_eq!(f.dim(), 2);
        assert!(serde_json::from_str::<GeneratorMap>(r#"{"kind": "circle_linear", "p": 2, "c": 0.5, "x": 1}"#).is_err());
        assert!(serde_json::from_str::<GeneratorMap>(r#"{"kind": "circle_linear", "p": 1, "c": 0.5}"#).is_err());
        let back = serde_json::to_string(&f).unwrap();
        assert!(back.contains("\"A\""));
    }

    proptest! {
        #[test]
        fn perturbed_preimages_replay(p in 2u32..5, c in 0.0f64..1.0, frac in -0.95f64..0.95, y in 0.0f64..1.0) {
            let eps = frac * (p as f64 - 1.0);
            let f = GeneratorMap::circle_perturbed(p, c, eps).unwrap();
            let xs = f.inverse_branches(&Point::circle(y)).unwrap();
            prop_assert_eq!(xs.len(), p as usize);
            for x in &xs {
                prop_assert!(circle_distance(f.eval(x).unwrap().x(), y) <= TOL_ROOT_CIRCLE);
            }
        }
    }
}
